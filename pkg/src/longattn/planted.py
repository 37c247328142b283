"""Synthetic heads with known vertical/slash structure.

Two constructions:

* :func:`planted_input` designs the *post-rotation* query/key vectors and
  un-rotates them, so logits are position independent and lines sit exactly
  at the requested columns and diagonal offsets.
* :func:`rope_slash_input` uses constant pre-rotation vectors so the logit of
  (i, j) is a function of the relative position only, peaking at a chosen
  offset. Under position remapping the peak moves with the remap, which is
  what the remapping-aware selection tests exercise.
"""

from __future__ import annotations

import numpy as np

from longattn.attention import DEFAULT_ROPE_BASE, AttentionInput, rope_apply


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def planted_input(
    n: int,
    dim: int,
    *,
    columns=(),
    slashes=(),
    signal: float = 12.0,
    background: float = 1.0,
    seed: int = 0,
    rope_base: float = DEFAULT_ROPE_BASE,
) -> AttentionInput:
    """Head whose logit is about ``signal`` on planted columns/diagonals.

    Background logits are roughly ``N(0, background**2)`` plus the cross-talk
    of random unit codes, which shrinks as ``dim`` grows.
    """
    rng = np.random.default_rng(seed)
    columns = sorted(set(int(c) for c in columns))
    slashes = sorted(set(int(d) for d in slashes))
    parts = int(bool(columns)) + int(bool(slashes))
    # unit queries; keys carry signal * sqrt(parts) so a planted dot is ~signal
    gain = signal * np.sqrt(max(parts, 1))
    q_rot = np.zeros((n, dim))
    k_rot = rng.standard_normal((n, dim)) * background
    sink_dir = _unit_rows(rng, 1, dim)[0]
    if columns:
        q_rot += sink_dir
        k_rot[columns] += gain * sink_dir
    if slashes:
        codes = rng.standard_normal((n + max(slashes), dim))
        if columns:
            # keep slash codes orthogonal to the column direction so column
            # scores carry no per-key systematic offset
            codes -= np.outer(codes @ sink_dir, sink_dir)
        codes /= np.linalg.norm(codes, axis=1, keepdims=True)
        q_rot += codes[:n]
        for d in slashes:
            k_rot += gain * codes[d : d + n]
    if not parts:
        q_rot += _unit_rows(rng, n, dim)
    q_rot /= np.linalg.norm(q_rot, axis=1, keepdims=True)
    # logits divide by sqrt(dim); fold it back in so the design is in logit units
    q_rot *= np.sqrt(dim)
    pos = np.arange(n)
    q = rope_apply(q_rot, -pos, rope_base)
    k = rope_apply(k_rot, -pos, rope_base)
    v = rng.standard_normal((n, dim))
    return AttentionInput(q, k, v, pos, pos.copy(), rope_base=rope_base)


def rope_slash_input(
    n: int,
    dim: int,
    offset: int,
    *,
    signal: float = 40.0,
    noise: float = 0.0,
    seed: int = 0,
    rope_base: float = DEFAULT_ROPE_BASE,
) -> AttentionInput:
    """Head with logit ``signal * mean_p cos((offset - r) w_p)`` at relative position r.

    Queries are one constant vector ``a`` and keys are ``a`` rotated by
    ``offset``; optional Gaussian ``noise`` is added before rotation.
    """
    rng = np.random.default_rng(seed)
    pairs = dim // 2
    a = np.zeros(dim)
    phase = rng.uniform(0, 2 * np.pi, pairs)
    # equal energy per pair, |a|^2 = signal * sqrt(dim)
    amp = np.sqrt(signal * np.sqrt(dim) / pairs)
    a[0::2], a[1::2] = amp * np.cos(phase), amp * np.sin(phase)
    b = rope_apply(a[None, :], [offset], rope_base)[0]
    q = np.tile(a, (n, 1)) + noise * rng.standard_normal((n, dim))
    k = np.tile(b, (n, 1)) + noise * rng.standard_normal((n, dim))
    v = rng.standard_normal((n, dim))
    pos = np.arange(n)
    return AttentionInput(q, k, v, pos, pos.copy(), rope_base=rope_base)
