"""Dense reference attention with RoPE, causal masking and log-sum-exp output.

This module is the oracle the sparse and extrapolation paths are checked
against, so it favours clarity and 64-bit arithmetic over speed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from longattn.errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    EmptyRowError,
    NonFiniteError,
)

DEFAULT_ROPE_BASE = 10000.0


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}", field=name)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values", field=name)
    return arr


def _as_positions(p, n: int, name: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.int64).reshape(-1)
    if arr.shape[0] != n:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {n}", field=name)
    if np.any(arr < 0):
        raise ConfigurationError(f"{name} must be non-negative", field=name)
    return arr


@dataclass
class AttentionInput:
    """One head's worth of attention inputs.

    ``q``, ``k`` and ``v`` are ``(n, D)`` arrays; the position arrays give the
    RoPE index of every query and key row.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    positions_q: np.ndarray
    positions_k: np.ndarray
    rope_base: float = DEFAULT_ROPE_BASE
    temperature: float = 1.0

    def __post_init__(self):
        self.q = _as_matrix(self.q, "q")
        self.k = _as_matrix(self.k, "k")
        self.v = _as_matrix(self.v, "v")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise DimensionError(
                f"q, k, v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        n, d = self.q.shape
        if n < 1:
            raise DimensionError("attention input needs at least one token")
        if d % 2:
            raise ConfigurationError(f"head dimension must be even for RoPE, got {d}", field="D")
        self.positions_q = _as_positions(self.positions_q, n, "positions_q")
        self.positions_k = _as_positions(self.positions_k, n, "positions_k")
        if not self.rope_base > 0:
            raise ConfigurationError("rope_base must be positive", field="rope_base")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive", field="temperature")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @classmethod
    def sequential(cls, q, k, v, **kwargs) -> "AttentionInput":
        """Build an input whose positions are simply ``0..n-1``."""
        n = np.asarray(q).shape[0]
        pos = np.arange(n)
        return cls(q, k, v, pos, pos.copy(), **kwargs)

    def with_temperature(self, t: float) -> "AttentionInput":
        return replace(self, temperature=t)


@dataclass
class AttentionResult:
    output: np.ndarray
    lse: np.ndarray


def random_input(
    n: int, dim: int, seed: int = 0, *, scale: float = 1.0, **kwargs
) -> AttentionInput:
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((n, dim)) * scale for _ in range(3))
    return AttentionInput.sequential(q, k, v, **kwargs)


def inverse_frequencies(dim: int, base: float) -> np.ndarray:
    if dim % 2:
        raise ConfigurationError(f"head dimension must be even for RoPE, got {dim}", field="D")
    return base ** (-2.0 * np.arange(dim // 2) / dim)


def rope_apply(vectors, positions, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotate each row by its position, pairing dimensions ``(2d, 2d+1)``."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {x.shape}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != x.shape[0]:
        raise DimensionError(f"{pos.shape[0]} positions for {x.shape[0]} rows", field="positions")
    inv = inverse_frequencies(x.shape[1], base)
    ang = pos[:, None] * inv[None, :]
    c, s = np.cos(ang), np.sin(ang)
    x0, x1 = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x0 * c - x1 * s
    out[:, 1::2] = x0 * s + x1 * c
    return out


def relative_rope_scores(q: np.ndarray, k: np.ndarray, rel: np.ndarray, base: float) -> np.ndarray:
    """Unscaled scores where entry (i, j) rotates ``q[i]`` by ``rel[i, j]``.

    Keys stay unrotated. Expands the rotation per dimension pair so no
    per-entry rotated copy of ``q`` is materialised.
    """
    rel = np.asarray(rel, dtype=np.float64)
    if rel.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(f"relative position matrix shape {rel.shape} does not match scores")
    inv = inverse_frequencies(q.shape[1], base)
    out = np.zeros(rel.shape)
    for d, w in enumerate(inv):
        q0, q1 = q[:, 2 * d], q[:, 2 * d + 1]
        k0, k1 = k[:, 2 * d], k[:, 2 * d + 1]
        ang = rel * w
        out += np.cos(ang) * (np.outer(q0, k0) + np.outer(q1, k1))
        out += np.sin(ang) * (np.outer(q0, k1) - np.outer(q1, k0))
    return out


def attention_logits(
    q: np.ndarray,
    k: np.ndarray,
    *,
    positions_q=None,
    positions_k=None,
    rel=None,
    base: float = DEFAULT_ROPE_BASE,
    temperature: float = 1.0,
) -> np.ndarray:
    """Scaled logits ``q.k / (t * sqrt(D))`` for every (query, key) pair.

    Uses absolute RoPE positions unless ``rel`` is given, in which case the
    entry-wise relative-position mode is used.
    """
    if rel is None:
        raw = rope_apply(q, positions_q, base) @ rope_apply(k, positions_k, base).T
    else:
        raw = relative_rope_scores(q, k, rel, base)
    return raw / (temperature * np.sqrt(q.shape[1]))


def causal_mask(query_index, n_keys: int) -> np.ndarray:
    """``mask[r, j]`` is True iff key ``j`` is visible to the query at ``query_index[r]``."""
    qi = np.asarray(query_index).reshape(-1)
    return np.arange(n_keys)[None, :] <= qi[:, None]


def stable_softmax_rows(scores, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax over unmasked entries, returning ``(probs, lse)``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got shape {s.shape}")
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise DimensionError(f"mask shape {mask.shape} != scores shape {s.shape}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise EmptyRowError(f"row {int(np.argmax(empty))} has no unmasked entry")
    m = np.where(mask, s, -np.inf).max(axis=1)
    e = np.where(mask, np.exp(np.where(mask, s, 0.0) - m[:, None]), 0.0)
    total = e.sum(axis=1)
    return e / total[:, None], m + np.log(total)


def masked_attention(logits: np.ndarray, mask: np.ndarray, v: np.ndarray) -> AttentionResult:
    probs, lse = stable_softmax_rows(logits, mask)
    return AttentionResult(probs @ v, lse)


def full_attention(inp: AttentionInput, rel_override=None, *, dtype=np.float64) -> AttentionResult:
    """Exact causal attention for one head.

    With ``rel_override`` the logit of (i, j) rotates ``q_i`` by
    ``rel_override[i, j]`` against the unrotated ``k_j``; entries above the
    diagonal are ignored.
    """
    n = inp.n
    rel = None
    if rel_override is not None:
        rel = np.asarray(rel_override)
        if rel.shape != (n, n):
            raise DimensionError(f"rel_override shape {rel.shape}, expected {(n, n)}")
        rel = np.where(np.tril(np.ones((n, n), dtype=bool)), rel, 0)
    q, k, v = (x.astype(dtype) for x in (inp.q, inp.k, inp.v))
    logits = attention_logits(
        q,
        k,
        positions_q=inp.positions_q,
        positions_k=inp.positions_k,
        rel=rel,
        base=inp.rope_base,
        temperature=inp.temperature,
    )
    return masked_attention(logits, causal_mask(np.arange(n), n), v)


def dense_entries(n: int) -> int:
    return n * (n + 1) // 2


def flop_estimate(n: int, dim: int, computed_entries: int) -> float:
    """Multiply-adds for scores plus value accumulation over the computed entries."""
    if computed_entries < 0 or computed_entries > dense_entries(n):
        raise DomainError(f"computed_entries={computed_entries} outside [0, {dense_entries(n)}]")
    return 2.0 * computed_entries * dim


def check_gqa(num_query_heads: int, num_kv_heads: int) -> int:
    """Return the group size, raising if query heads do not split evenly over KV heads."""
    if num_kv_heads < 1 or num_query_heads < 1 or num_query_heads % num_kv_heads:
        raise ConfigurationError(
            f"{num_query_heads} query heads cannot be grouped over {num_kv_heads} KV heads",
            field="heads",
        )
    return num_query_heads // num_kv_heads
