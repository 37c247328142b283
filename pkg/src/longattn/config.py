"""JSON run configuration.

Keys are camelCase. Unknown keys are rejected and every validation error
names the offending field as a dotted path.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic.alias_generators import to_camel

from longattn.dca import ChunkConfig, YarnScale
from longattn.engine_sim import CostModel, EngineTiming
from longattn.errors import ConfigurationError, LongAttnError
from longattn.forge import KINDS
from longattn.refine import RefineConfig
from longattn.vertical_slash import DEFAULT_CHUNK_LEN, DEFAULT_LAST_Q, HeadBudget, PositionMode


class SchemaError(LongAttnError):
    kind = "schema"


class ParseError(LongAttnError):
    kind = "parse"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", alias_generator=to_camel, populate_by_name=True)


class BudgetSection(_Section):
    vertical: int = Field(4, ge=0)
    slash: int = Field(4, ge=0)

    def to_budget(self) -> HeadBudget:
        return HeadBudget(self.vertical, self.slash)


class AttentionSection(_Section):
    n: int = Field(64, ge=1)
    dim: int = Field(8, ge=2)
    heads: int = Field(1, ge=1)
    kv_heads: int = Field(1, ge=1)
    rope_base: float = Field(10000.0, gt=0)


class ChunkSection(_Section):
    chunk_size: int = 6
    train_len: int = 10
    local_window: Optional[int] = None

    def to_chunk(self) -> ChunkConfig:
        return ChunkConfig(self.chunk_size, self.train_len, self.local_window)


class YarnSection(_Section):
    scale_factor: float = Field(1.0, gt=0)

    def to_yarn(self) -> YarnScale:
        return YarnScale(self.scale_factor)


class SparsitySection(_Section):
    n: int = Field(2048, ge=1)
    dim: int = Field(256, ge=2)
    last_q: int = Field(DEFAULT_LAST_Q, ge=1)
    chunk_len: int = Field(DEFAULT_CHUNK_LEN, ge=1)
    budget: BudgetSection = BudgetSection()
    forced: bool = True
    position_mode: PositionMode = PositionMode.STANDARD
    slash_reduce: Literal["mean", "sum"] = "mean"
    planted_columns: list[int] = [100, 700, 1200, 1800]
    planted_slashes: list[int] = [90, 300, 555, 1000]
    signal: float = 12.0
    min_recall: float = Field(0.95, gt=0, le=1)


class CalibrationSection(_Section):
    layers: int = Field(1, ge=1)
    heads: int = Field(2, ge=1)
    samples: int = Field(1, ge=0)
    length: int = Field(256, ge=2)
    short_length: int = Field(128, ge=2)
    dim: int = Field(64, ge=2)
    columns: int = Field(2, ge=0)
    slashes: int = Field(2, ge=0)


class RefineSection(_Section):
    threshold: float = Field(0.9, gt=0, lt=1)
    vertical_increment: int = Field(4, ge=1)
    slash_increment: int = Field(4, ge=1)
    max_rounds: int = Field(8, ge=1)
    budget_cap: BudgetSection = BudgetSection(vertical=64, slash=64)
    initial_budget: BudgetSection = BudgetSection(vertical=0, slash=0)
    grid: list[BudgetSection] = []
    last_q: int = Field(16, ge=1)
    forced: bool = True
    reduction: Literal["mean", "fraction"] = "mean"
    calibration: CalibrationSection = CalibrationSection()

    def to_refine(self) -> RefineConfig:
        return RefineConfig(
            threshold=self.threshold,
            vertical_increment=self.vertical_increment,
            slash_increment=self.slash_increment,
            max_rounds=self.max_rounds,
            budget_cap=self.budget_cap.to_budget(),
            last_q=self.last_q,
            forced=self.forced,
            reduction=self.reduction,
        )


class CostModelSection(_Section):
    attn: float = Field(1.0, ge=0)
    self_attn: float = Field(1.0, ge=0)
    linear: float = Field(0.0, ge=0)
    fixed: float = Field(0.0, ge=0)

    def to_model(self) -> CostModel:
        return CostModel(self.attn, self.self_attn, self.linear, self.fixed)


class PipelineSection(_Section):
    length: int = Field(10000, ge=1)
    chunks: int = Field(8, ge=1)
    stages: int = Field(4, ge=1)


class EngineSection(_Section):
    scheduler: float = Field(2.0, gt=0)
    model_runner: float = Field(5.0, gt=0)
    decoder: float = Field(1.0, gt=0)
    steps: int = Field(1000, ge=1)
    hop_latency: float = Field(0.0, ge=0)

    def to_timing(self) -> EngineTiming:
        return EngineTiming(
            self.scheduler, self.model_runner, self.decoder, self.steps, self.hop_latency
        )


class ForgeSection(_Section):
    count: int = Field(100, ge=0)
    kinds: list[Literal[KINDS]] = list(KINDS)
    max_len: int = Field(1000, ge=16)
    long_fraction: float = Field(0.75, ge=0, le=1)


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: str = "reports"
    attention: AttentionSection = AttentionSection()
    chunk: ChunkSection = ChunkSection()
    yarn: YarnSection = YarnSection()
    sparsity: SparsitySection = SparsitySection()
    refine: RefineSection = RefineSection()
    cost_model: CostModelSection = CostModelSection()
    pipeline: PipelineSection = PipelineSection()
    engine: EngineSection = EngineSection()
    forge: ForgeSection = ForgeSection()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]


def _cross_checks(cfg: RunConfig):
    try:
        cfg.chunk.to_chunk()
    except ConfigurationError as e:
        raise SchemaError(str(e), field=f"chunk.{e.field}") from e
    if cfg.attention.heads % cfg.attention.kv_heads:
        raise SchemaError(
            "heads must be divisible by kvHeads for grouped-query attention",
            field="attention.kvHeads",
        )
    if cfg.attention.dim % 2 or cfg.sparsity.dim % 2 or cfg.refine.calibration.dim % 2:
        raise SchemaError("head dimensions must be even for RoPE", field="dim")


def parse_config(doc: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(x) for x in err["loc"])
        raise SchemaError(f"{loc}: {err['msg']}", field=loc) from None
    _cross_checks(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ParseError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object", field="")
    return parse_config(doc)
