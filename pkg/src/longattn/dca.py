"""Dual chunk relative-position remapping and YaRN attention temperature."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from longattn.attention import AttentionInput, AttentionResult, full_attention
from longattn.errors import CausalityError, ConfigurationError, DomainError


class PatternKind(enum.Enum):
    INTRA = "intra"
    SUCCESSIVE = "successive"
    INTER = "inter"


@dataclass(frozen=True)
class ChunkConfig:
    """Chunking parameters.

    ``train_len`` is one past the largest relative position seen in
    training. ``local_window`` defaults to ``min(train_len - chunk_size,
    chunk_size)``.
    """

    chunk_size: int
    train_len: int
    local_window: int | None = None

    def __post_init__(self):
        s, c = self.chunk_size, self.train_len
        if s < 1:
            raise ConfigurationError("chunkSize must be positive", field="chunkSize")
        if c < 1:
            raise ConfigurationError("trainLen must be positive", field="trainLen")
        if s > c:
            raise ConfigurationError(
                f"chunkSize ({s}) must not exceed trainLen ({c})", field="chunkSize"
            )
        if self.local_window is None:
            object.__setattr__(self, "local_window", min(c - s, s))
        w = self.local_window
        if w < 0 or w > min(s, c - s):
            raise ConfigurationError(
                f"localWindow ({w}) must lie in [0, min(chunkSize, trainLen - chunkSize)]",
                field="localWindow",
            )


@dataclass(frozen=True)
class YarnScale:
    scale_factor: float
    temperature: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "temperature", yarn_temperature(self.scale_factor))

    @classmethod
    def for_lengths(cls, inference_len: int, train_len: int) -> "YarnScale":
        return cls(inference_len / train_len)


def yarn_temperature(scale_factor: float) -> float:
    """Temperature t with ``sqrt(1/t) = 0.1 ln(s) + 1``; 1 for ``s <= 1``."""
    if not scale_factor > 0:
        raise DomainError(f"scale factor must be positive, got {scale_factor}", field="scaleFactor")
    if scale_factor <= 1:
        return 1.0
    return 1.0 / (0.1 * math.log(scale_factor) + 1.0) ** 2


def _check_causal(i: int, j: int):
    if j > i:
        raise CausalityError(f"key index {j} is after query index {i}")
    if j < 0:
        raise CausalityError(f"negative key index {j}")


def classify_pair(i: int, j: int, cfg: ChunkConfig) -> PatternKind:
    _check_causal(i, j)
    ci, cj = i // cfg.chunk_size, j // cfg.chunk_size
    if ci == cj:
        return PatternKind.INTRA
    if ci == cj + 1:
        return PatternKind.SUCCESSIVE
    return PatternKind.INTER


def dca_relative(i: int, j: int, cfg: ChunkConfig) -> int:
    """Remapped relative position of query ``i`` and key ``j``."""
    kind = classify_pair(i, j, cfg)
    s, c = cfg.chunk_size, cfg.train_len
    key_pos = j % s
    if kind is PatternKind.INTRA:
        query_pos = i % s
    elif kind is PatternKind.SUCCESSIVE:
        query_pos = min(i % s + s, c - 1)
    else:
        query_pos = c - 1
    return query_pos - key_pos


def dca_relative_grid(pos_q, pos_k, cfg: ChunkConfig) -> np.ndarray:
    """Vectorised :func:`dca_relative` over every (query, key) pair.

    Pairs with key after query are filled with 0.
    """
    i = np.asarray(pos_q, dtype=np.int64).reshape(-1, 1)
    j = np.asarray(pos_k, dtype=np.int64).reshape(1, -1)
    s, c = cfg.chunk_size, cfg.train_len
    ci, cj = i // s, j // s
    query_pos = np.where(
        ci == cj, i % s, np.where(ci == cj + 1, np.minimum(i % s + s, c - 1), c - 1)
    )
    rel = query_pos - j % s
    return np.where(j <= i, rel, 0)


def dca_position_matrix(n: int, cfg: ChunkConfig) -> np.ndarray:
    """Lower-triangular ``n x n`` matrix of remapped relative positions."""
    idx = np.arange(n)
    return dca_relative_grid(idx, idx, cfg)


def dca_attention(inp: AttentionInput, cfg: ChunkConfig, yarn: YarnScale) -> AttentionResult:
    """Attention with remapped relative positions and YaRN temperature.

    The input positions are treated as absolute token indices. When the
    remap is the identity on every causal pair and no scaling applies, the
    call is exactly vanilla attention.
    """
    scaled = inp.with_temperature(yarn.temperature)
    rel = dca_relative_grid(inp.positions_q, inp.positions_k, cfg)
    true_rel = inp.positions_q[:, None] - inp.positions_k[None, :]
    causal = np.tril(np.ones((inp.n, inp.n), dtype=bool))
    if np.any(causal & (true_rel < 0)):
        raise CausalityError("key positions must not exceed query positions on causal pairs")
    if np.array_equal(rel[causal], true_rel[causal]):
        return full_attention(scaled)
    return full_attention(scaled, rel_override=rel)
