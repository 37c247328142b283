"""Vertical-slash sparse attention.

Scores of the trailing query block are used to pick dominant key columns
(verticals) and constant-offset diagonals (slashes); attention is then
evaluated only on the admitted entries. Chunked prefill repeats the
selection per chunk against the growing KV cache.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from longattn.attention import (
    AttentionInput,
    AttentionResult,
    attention_logits,
    causal_mask,
    dense_entries,
    full_attention,
    masked_attention,
)
from longattn.dca import ChunkConfig, dca_relative_grid
from longattn.errors import CausalityError, ConfigurationError, DimensionError

DEFAULT_LAST_Q = 64
DEFAULT_CHUNK_LEN = 256


class PositionMode(str, enum.Enum):
    STANDARD = "standard"
    # Remapped positions exactly as the dual-chunk attention uses them.
    DCA = "dca"
    DCA_CONTINUOUS = "dcaContinuous"


@dataclass(frozen=True, order=True)
class HeadBudget:
    vertical: int
    slash: int

    def __post_init__(self):
        if self.vertical < 0 or self.slash < 0:
            raise ConfigurationError(f"budgets must be non-negative, got {self}", field="budget")

    def grow(self, dv: int, ds: int, cap: "HeadBudget | None" = None) -> "HeadBudget":
        v, s = self.vertical + dv, self.slash + ds
        if cap is not None:
            v, s = min(v, max(cap.vertical, self.vertical)), min(s, max(cap.slash, self.slash))
        return HeadBudget(v, s)

    def dominates(self, other: "HeadBudget") -> bool:
        return self.vertical >= other.vertical and self.slash >= other.slash

    @property
    def total(self) -> int:
        return self.vertical + self.slash


class SparsityPlan(dict):
    """Mapping ``(layer, head) -> HeadBudget``.

    Serialised as ``{"layer.head": {"vertical": int, "slash": int}}``.
    """

    @classmethod
    def uniform(cls, layers: int, heads: int, budget: HeadBudget) -> "SparsityPlan":
        return cls({(l, h): budget for l in range(layers) for h in range(heads)})

    def to_json(self) -> str:
        doc = {
            f"{l}.{h}": {"vertical": b.vertical, "slash": b.slash}
            for (l, h), b in sorted(self.items())
        }
        return json.dumps(doc, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "SparsityPlan":
        plan = cls()
        for key, val in json.loads(text).items():
            layer, head = (int(x) for x in key.split("."))
            extra = set(val) - {"vertical", "slash"}
            if extra:
                raise ConfigurationError(f"unknown budget field(s) {sorted(extra)} for {key}")
            plan[(layer, head)] = HeadBudget(int(val["vertical"]), int(val["slash"]))
        return plan

    def check_complete(self, layers: int, heads: int):
        missing = [(l, h) for l in range(layers) for h in range(heads) if (l, h) not in self]
        if missing:
            raise ConfigurationError(f"sparsity plan missing heads {missing[:5]}")


@dataclass(frozen=True)
class CriticalSet:
    """Selected key columns and diagonal offsets over a context of ``context_length`` keys."""

    verticals: tuple[int, ...]
    slashes: tuple[int, ...]
    context_length: int

    def __post_init__(self):
        v = tuple(sorted(set(int(x) for x in self.verticals)))
        s = tuple(sorted(set(int(x) for x in self.slashes)))
        n = self.context_length
        if any(x < 0 or x >= n for x in v):
            raise DimensionError(f"vertical index outside [0, {n})")
        if any(x < 0 or x >= n for x in s):
            raise DimensionError(f"slash offset outside [0, {n})")
        object.__setattr__(self, "verticals", v)
        object.__setattr__(self, "slashes", s)

    @classmethod
    def full(cls, n: int) -> "CriticalSet":
        return cls(tuple(range(n)), tuple(range(n)), n)

    def admits(self, i: int, j: int) -> bool:
        if j > i:
            return False
        return j in self.verticals or (i - j) in self.slashes

    def mask(self, query_index, n_keys: int | None = None) -> np.ndarray:
        """Boolean admission matrix for the given query rows, causal mask applied."""
        n_keys = self.context_length if n_keys is None else n_keys
        qi = np.asarray(query_index, dtype=np.int64).reshape(-1, 1)
        cols = np.arange(n_keys)[None, :]
        vert = np.zeros(n_keys, dtype=bool)
        vert[list(self.verticals)] = True
        diag = np.zeros(self.context_length, dtype=bool)
        diag[list(self.slashes)] = True
        offset = qi - cols
        visible = offset >= 0
        on_slash = np.zeros(offset.shape, dtype=bool)
        on_slash[visible] = diag[np.minimum(offset[visible], self.context_length - 1)]
        on_slash &= offset < self.context_length
        return visible & (vert[None, :] | on_slash)

    def issubset(self, other: "CriticalSet") -> bool:
        return set(self.verticals) <= set(other.verticals) and set(self.slashes) <= set(
            other.slashes
        )

    def union(self, other: "CriticalSet") -> "CriticalSet":
        return CriticalSet(
            self.verticals + other.verticals,
            self.slashes + other.slashes,
            max(self.context_length, other.context_length),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "contextLength": self.context_length,
                "verticals": list(self.verticals),
                "slashes": list(self.slashes),
            }
        )


def selection_positions(i: int, j: int, cfg: ChunkConfig) -> int:
    """Continuous relative position used only while selecting critical tokens."""
    if j > i:
        raise CausalityError(f"key index {j} is after query index {i}")
    return min(i - j, cfg.train_len - 1)


def relative_positions(pos_q, pos_k, mode: PositionMode | str, cfg: ChunkConfig | None):
    """Relative position matrix for ``mode``; ``None`` means plain absolute RoPE."""
    mode = PositionMode(mode)
    if mode is PositionMode.STANDARD:
        return None
    if cfg is None:
        raise ConfigurationError(f"position mode {mode.value} needs a ChunkConfig", field="chunk")
    if mode is PositionMode.DCA:
        return dca_relative_grid(pos_q, pos_k, cfg)
    diff = np.asarray(pos_q)[:, None] - np.asarray(pos_k)[None, :]
    return np.where(diff >= 0, np.minimum(diff, cfg.train_len - 1), 0)


def _row_logits(inp: AttentionInput, start: int, stop: int, n_keys: int, mode, cfg):
    pq, pk = inp.positions_q[start:stop], inp.positions_k[:n_keys]
    return attention_logits(
        inp.q[start:stop],
        inp.k[:n_keys],
        positions_q=pq,
        positions_k=pk,
        rel=relative_positions(pq, pk, mode, cfg),
        base=inp.rope_base,
        temperature=inp.temperature,
    )


def _estimate_rows(inp: AttentionInput, stop: int, last_q: int, mode, cfg) -> np.ndarray:
    start = stop - last_q
    logits = _row_logits(inp, start, stop, stop, mode, cfg)
    mask = causal_mask(np.arange(start, stop), stop)
    e = np.where(mask, np.exp(logits - np.where(mask, logits, -np.inf).max(axis=1)[:, None]), 0.0)
    return e / e.sum(axis=1)[:, None]


def estimate_block(
    inp: AttentionInput,
    last_q: int = DEFAULT_LAST_Q,
    position_mode: PositionMode | str = PositionMode.STANDARD,
    cfg: ChunkConfig | None = None,
) -> np.ndarray:
    """Softmaxed causal attention of the final ``last_q`` queries over all keys."""
    if last_q < 1:
        raise ConfigurationError("lastQ must be at least 1", field="lastQ")
    if last_q > inp.n:
        raise ConfigurationError(f"lastQ ({last_q}) exceeds query count ({inp.n})", field="lastQ")
    return _estimate_rows(inp, inp.n, last_q, position_mode, cfg)


def top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties resolved toward the smaller index."""
    k = min(k, scores.shape[0])
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


def line_scores(
    est: np.ndarray, n: int, slash_reduce: str = "mean"
) -> tuple[np.ndarray, np.ndarray]:
    """Column sums and per-diagonal scores of an estimation block.

    Row ``r`` of ``est`` is the query at index ``n - last_q + r``.
    """
    last_q = est.shape[0]
    if est.shape[1] != n:
        raise DimensionError(f"estimate has {est.shape[1]} columns, context is {n}")
    vertical = est.sum(axis=0)
    qi = np.arange(n - last_q, n)[:, None]
    offset = qi - np.arange(n)[None, :]
    present = offset >= 0
    sums = np.bincount(offset[present], weights=est[present], minlength=n)
    if slash_reduce == "sum":
        return vertical, sums
    if slash_reduce != "mean":
        raise ConfigurationError(f"unknown slash reduction {slash_reduce!r}", field="slashReduce")
    counts = np.bincount(offset[present], minlength=n)
    return vertical, sums / np.maximum(counts, 1)


def select_critical(
    est: np.ndarray,
    budget: HeadBudget,
    n: int,
    *,
    forced: bool = True,
    slash_reduce: str = "mean",
) -> CriticalSet:
    """Pick the top columns and diagonals of ``est`` within ``budget``.

    With ``forced`` the sink column 0 and the local band of ``last_q``
    diagonals are always admitted.
    """
    vertical, slash = line_scores(est, n, slash_reduce)
    verts = set(top_indices(vertical, budget.vertical).tolist())
    slashes = set(top_indices(slash, budget.slash).tolist())
    if forced:
        verts.add(0)
        slashes.update(range(min(est.shape[0], n)))
    return CriticalSet(tuple(verts), tuple(slashes), n)


def _final_rel(inp: AttentionInput, start: int, stop: int, n_keys: int, cfg: ChunkConfig | None):
    if cfg is None:
        return None
    return dca_relative_grid(inp.positions_q[start:stop], inp.positions_k[:n_keys], cfg)


def _sparse_rows(logits: np.ndarray, admitted: np.ndarray, query_index, v: np.ndarray):
    empty = ~admitted.any(axis=1)
    if empty.any():
        rows = np.nonzero(empty)[0]
        admitted = admitted.copy()
        admitted[rows, np.asarray(query_index)[rows]] = True
    return masked_attention(logits, admitted, v), int(admitted.sum())


def sparse_attention(inp: AttentionInput, crit: CriticalSet, rel_override=None) -> AttentionResult:
    """Attention restricted to the entries admitted by ``crit``.

    Rows with nothing admitted fall back to attending to themselves.
    """
    n = inp.n
    if crit.context_length != n:
        raise DimensionError(f"critical set covers {crit.context_length} keys, input has {n}")
    rel = None
    if rel_override is not None:
        rel = np.asarray(rel_override)
        if rel.shape != (n, n):
            raise DimensionError(f"rel_override shape {rel.shape}, expected {(n, n)}")
        rel = np.where(np.tril(np.ones((n, n), dtype=bool)), rel, 0)
    logits = attention_logits(
        inp.q,
        inp.k,
        positions_q=inp.positions_q,
        positions_k=inp.positions_k,
        rel=rel,
        base=inp.rope_base,
        temperature=inp.temperature,
    )
    idx = np.arange(n)
    result, _ = _sparse_rows(logits, crit.mask(idx, n), idx, inp.v)
    return result


def density(crit: CriticalSet) -> float:
    """Admitted causal entries divided by the dense causal count."""
    return admitted_entries(crit) / dense_entries(crit.context_length)


def admitted_entries(crit: CriticalSet) -> int:
    n = crit.context_length
    v = np.asarray(crit.verticals, dtype=np.int64)
    s = np.asarray(crit.slashes, dtype=np.int64)
    on_columns = int(np.sum(n - v))
    on_diagonals = int(np.sum(n - s))
    # pairs (j, d) with j + d <= n - 1 are counted twice
    overlap = int(np.searchsorted(s, n - 1 - v, side="right").sum()) if len(s) else 0
    return on_columns + on_diagonals - overlap


@dataclass
class PrefillState:
    k_cache: np.ndarray
    v_cache: np.ndarray
    chunk_len: int
    last_q: int
    critical_sets: list[CriticalSet] = field(default_factory=list)
    computed_entries: int = 0

    @property
    def processed(self) -> int:
        return self.k_cache.shape[0]


class PrefillMode(str, enum.Enum):
    FULL = "full"
    SPARSE = "sparse"


def chunked_prefill(
    inp: AttentionInput,
    chunk_len: int = DEFAULT_CHUNK_LEN,
    last_q: int = DEFAULT_LAST_Q,
    budget: HeadBudget | None = None,
    mode: PrefillMode | str = PrefillMode.FULL,
    position_mode: PositionMode | str = PositionMode.STANDARD,
    cfg: ChunkConfig | None = None,
    *,
    forced: bool = True,
    slash_reduce: str = "mean",
) -> tuple[AttentionResult, PrefillState]:
    """Process ``inp`` chunk by chunk against a growing KV cache.

    When ``cfg`` is given the final attention uses remapped dual-chunk
    positions; ``position_mode`` only affects critical-token selection.
    Each chunk estimates on its own trailing ``min(last_q, chunk)`` queries.
    """
    mode = PrefillMode(mode)
    if chunk_len < 1:
        raise ConfigurationError("chunkLen must be at least 1", field="chunkLen")
    if last_q < 1:
        raise ConfigurationError("lastQ must be at least 1", field="lastQ")
    if mode is PrefillMode.SPARSE and budget is None:
        raise ConfigurationError("sparse prefill needs a head budget", field="budget")
    n = inp.n
    state = PrefillState(inp.k[:0], inp.v[:0], chunk_len, last_q)
    outputs, lses = [], []
    for start in range(0, n, chunk_len):
        stop = min(start + chunk_len, n)
        state.k_cache = np.concatenate([state.k_cache, inp.k[start:stop]])
        state.v_cache = np.concatenate([state.v_cache, inp.v[start:stop]])
        if mode is PrefillMode.FULL and start == 0 and stop == n:
            # single chunk: identical to the one-shot path
            res = full_attention(inp, _final_rel(inp, 0, n, n, cfg))
            state.computed_entries += dense_entries(n)
            outputs.append(res.output)
            lses.append(res.lse)
            continue
        query_index = np.arange(start, stop)
        logits = attention_logits(
            inp.q[start:stop],
            state.k_cache,
            positions_q=inp.positions_q[start:stop],
            positions_k=inp.positions_k[:stop],
            rel=_final_rel(inp, start, stop, stop, cfg),
            base=inp.rope_base,
            temperature=inp.temperature,
        )
        admitted = causal_mask(query_index, stop)
        if mode is PrefillMode.SPARSE:
            lq = min(last_q, stop - start)
            est = _estimate_rows(inp, stop, lq, position_mode, cfg)
            crit = select_critical(est, budget, stop, forced=forced, slash_reduce=slash_reduce)
            state.critical_sets.append(crit)
            admitted = crit.mask(query_index, stop)
        res, count = _sparse_rows(logits, admitted, query_index, state.v_cache)
        state.computed_entries += count
        outputs.append(res.output)
        lses.append(res.lse)
    return AttentionResult(np.concatenate(outputs), np.concatenate(lses)), state


def select_for_input(
    inp: AttentionInput,
    budget: HeadBudget,
    last_q: int = DEFAULT_LAST_Q,
    position_mode: PositionMode | str = PositionMode.STANDARD,
    cfg: ChunkConfig | None = None,
    *,
    forced: bool = True,
    slash_reduce: str = "mean",
) -> CriticalSet:
    """One-shot estimation plus selection over the whole input."""
    est = estimate_block(inp, min(last_q, inp.n), position_mode, cfg)
    return select_critical(est, budget, inp.n, forced=forced, slash_reduce=slash_reduce)
