"""Attention recall and budget refinement for vertical-slash sparsity plans."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from longattn.attention import AttentionInput, full_attention
from longattn.dca import ChunkConfig, dca_relative_grid
from longattn.errors import ConfigurationError, DimensionError, EmptyCalibrationError
from longattn.vertical_slash import (
    DEFAULT_LAST_Q,
    HeadBudget,
    PositionMode,
    SparsityPlan,
    select_for_input,
    sparse_attention,
)

HeadKey = tuple[int, int]
CalibrationSet = dict[HeadKey, list[AttentionInput]]


@dataclass
class RecallReport:
    per_query: np.ndarray
    aggregate: float
    layer: int = 0
    head: int = 0


def attention_recall(lse_sparse, lse_full, layer: int = 0, head: int = 0) -> RecallReport:
    """Per-query ``exp(lse_sparse - lse_full)``, clamped to 1, and its mean."""
    s = np.asarray(lse_sparse, dtype=np.float64)
    f = np.asarray(lse_full, dtype=np.float64)
    if s.shape != f.shape:
        raise DimensionError(f"lse lengths differ: {s.shape} vs {f.shape}")
    per_query = np.minimum(np.exp(s - f), 1.0)
    return RecallReport(per_query, float(per_query.mean()) if per_query.size else 1.0, layer, head)


@dataclass(frozen=True)
class RefineConfig:
    threshold: float = 0.95
    vertical_increment: int = 4
    slash_increment: int = 4
    max_rounds: int = 16
    budget_cap: HeadBudget = HeadBudget(1 << 30, 1 << 30)
    last_q: int = DEFAULT_LAST_Q
    forced: bool = True
    # "mean" averages per-query recall; "fraction" is the share of queries at or above threshold
    reduction: str = "mean"
    position_mode: PositionMode = PositionMode.STANDARD
    chunk: ChunkConfig | None = None

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigurationError("threshold must lie in (0, 1)", field="threshold")
        if self.vertical_increment < 1 or self.slash_increment < 1:
            raise ConfigurationError("increments must be at least 1", field="verticalIncrement")
        if self.max_rounds < 1:
            raise ConfigurationError("maxRounds must be at least 1", field="maxRounds")
        if self.reduction not in ("mean", "fraction"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}", field="reduction")


def head_recall(
    samples: list[AttentionInput],
    budget: HeadBudget,
    *,
    last_q: int = DEFAULT_LAST_Q,
    forced: bool = True,
    position_mode: PositionMode | str = PositionMode.STANDARD,
    chunk: ChunkConfig | None = None,
) -> np.ndarray:
    """Per-query recall of ``budget`` over every query of every sample, concatenated."""
    out = []
    for inp in samples:
        rel = None if chunk is None else dca_relative_grid(inp.positions_q, inp.positions_k, chunk)
        crit = select_for_input(inp, budget, last_q, position_mode, chunk, forced=forced)
        full = full_attention(inp, rel)
        sparse = sparse_attention(inp, crit, rel)
        out.append(attention_recall(sparse.lse, full.lse).per_query)
    return np.concatenate(out)


def _reduce(per_query: np.ndarray, cfg: RefineConfig) -> float:
    if cfg.reduction == "fraction":
        return float(np.mean(per_query >= cfg.threshold))
    return float(per_query.mean())


@dataclass
class HeadRefinement:
    layer: int
    head: int
    rounds: int
    initial_budget: HeadBudget
    final_budget: HeadBudget
    initial_recall: float
    final_recall: float
    history: list[tuple[HeadBudget, float]] = field(default_factory=list)
    hit_cap: bool = False


@dataclass
class RefineReport:
    heads: list[HeadRefinement]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            [
                "layer",
                "head",
                "rounds",
                "initial_vertical",
                "initial_slash",
                "final_vertical",
                "final_slash",
                "initial_recall",
                "final_recall",
            ]
        )
        for r in self.heads:
            w.writerow(
                [
                    r.layer,
                    r.head,
                    r.rounds,
                    r.initial_budget.vertical,
                    r.initial_budget.slash,
                    r.final_budget.vertical,
                    r.final_budget.slash,
                    f"{r.initial_recall:.12f}",
                    f"{r.final_recall:.12f}",
                ]
            )
        return buf.getvalue()


def _check_calibration(calib: CalibrationSet, plan: SparsityPlan):
    if not calib or not any(calib.values()):
        raise EmptyCalibrationError("calibration set is empty", field="calibration")
    missing = [key for key in plan if not calib.get(key)]
    if missing:
        raise EmptyCalibrationError(f"no calibration samples for heads {missing[:5]}")
    for key, samples in calib.items():
        if len({s.dim for s in samples}) > 1:
            raise DimensionError(f"inconsistent head dimension in calibration for {key}")


def refine_plan(
    calib: CalibrationSet, plan: SparsityPlan, cfg: RefineConfig
) -> tuple[SparsityPlan, RefineReport]:
    """Grow each head's budget until its calibration recall clears the threshold.

    A head stops when recall reaches ``cfg.threshold``, when ``max_rounds``
    increments have been applied, or when the budget cap is reached.
    Budgets only ever grow.
    """
    if not plan:
        raise ConfigurationError("sparsity plan is empty", field="plan")
    _check_calibration(calib, plan)
    measure = lambda samples, budget: _reduce(  # noqa: E731
        head_recall(
            samples,
            budget,
            last_q=cfg.last_q,
            forced=cfg.forced,
            position_mode=cfg.position_mode,
            chunk=cfg.chunk,
        ),
        cfg,
    )
    refined = SparsityPlan()
    rows = []
    for (layer, head), start in sorted(plan.items()):
        samples = calib[(layer, head)]
        budget = start
        recall = measure(samples, budget)
        history = [(budget, recall)]
        rounds = 0
        hit_cap = False
        while recall < cfg.threshold and rounds < cfg.max_rounds:
            grown = budget.grow(cfg.vertical_increment, cfg.slash_increment, cfg.budget_cap)
            if grown == budget:
                hit_cap = True
                break
            budget = grown
            rounds += 1
            recall = measure(samples, budget)
            history.append((budget, recall))
        refined[(layer, head)] = budget
        rows.append(
            HeadRefinement(
                layer, head, rounds, start, budget, history[0][1], recall, history, hit_cap
            )
        )
    return refined, RefineReport(rows)


def offline_search(
    calib: CalibrationSet,
    grid: list[HeadBudget],
    threshold: float,
    *,
    last_q: int = DEFAULT_LAST_Q,
    forced: bool = True,
    position_mode: PositionMode | str = PositionMode.STANDARD,
    chunk: ChunkConfig | None = None,
) -> SparsityPlan:
    """Smallest grid point per head whose mean recall meets ``threshold``.

    Falls back to the largest grid point when none qualifies.
    """
    if not grid:
        raise ConfigurationError("search grid is empty", field="grid")
    if not calib or not any(calib.values()):
        raise EmptyCalibrationError("calibration set is empty", field="calibration")
    grid = sorted(grid, key=lambda b: (b.total, b.vertical))
    plan = SparsityPlan()
    for key, samples in sorted(calib.items()):
        chosen = grid[-1]
        for budget in grid:
            per_query = head_recall(
                samples,
                budget,
                last_q=last_q,
                forced=forced,
                position_mode=position_mode,
                chunk=chunk,
            )
            if per_query.mean() >= threshold:
                chosen = budget
                break
        plan[key] = chosen
    return plan
