"""Rotary encoding, block masks and the two attention flavours used by the model.

Self-attention over latents is the only place tokens mix, so the block mask
built here is what makes a prefix of ``t`` latents compute exactly what a
length-``t`` run would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import EmptyGranularities, NonMonotoneGranularities, OddHeadDim, ShapeMismatch
from .tensor import Tensor, add, masked_softmax, matmul, mul, reshape, transpose


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise OddHeadDim(f"head_dim must be even and positive, got {self.head_dim}")
        if not self.theta > 1:
            raise ValueError(f"theta must exceed 1, got {self.theta}")


@lru_cache(maxsize=256)
def _rope_tables(positions: tuple, head_dim: int, theta: float, dtype_name: str):
    dtype = np.dtype(dtype_name)
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=1).astype(dtype)
    # x @ pair_rot == (-x1, x0, -x3, x2, ...)
    pair_rot = np.zeros((head_dim, head_dim), dtype=dtype)
    idx = np.arange(0, head_dim, 2)
    pair_rot[idx + 1, idx] = -1.0
    pair_rot[idx, idx + 1] = 1.0
    for arr in (cos, sin, pair_rot):
        arr.setflags(write=False)
    return cos, sin, pair_rot


def rope_rotate(x: Tensor, positions: Sequence[int], params: RopeParams) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., N, head_dim]`` by ``m * theta^(-2i/head_dim)``."""
    if x.shape[-1] != params.head_dim:
        if x.shape[-1] % 2:
            raise OddHeadDim(f"last axis {x.shape[-1]} is odd")
        raise ShapeMismatch(f"last axis {x.shape[-1]} != head_dim {params.head_dim}")
    positions = tuple(int(p) for p in positions)
    if len(positions) != x.shape[-2]:
        raise ShapeMismatch(f"{len(positions)} positions for {x.shape[-2]} tokens")
    if positions and min(positions) < 0:
        raise ValueError("positions must be nonnegative")
    cos, sin, pair_rot = _rope_tables(positions, params.head_dim, float(params.theta), x.dtype.name)
    swapped = matmul(x, Tensor(pair_rot))
    return add(mul(x, Tensor(cos)), mul(swapped, Tensor(sin)))


@dataclass(frozen=True)
class BlockMask:
    granularities: tuple
    allow: np.ndarray

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def restrict(self, t: int) -> "BlockMask":
        """Mask for running ``t`` latents: trained granularities below ``t`` plus ``t`` itself."""
        grans = [g for g in self.granularities if g < t] + [t]
        return create_block_mask(grans)


def _group_index(granularities: np.ndarray, n: int) -> np.ndarray:
    # group(k) = index of the smallest boundary >= k + 1
    return np.searchsorted(granularities, np.arange(1, n + 1), side="left")


@lru_cache(maxsize=128)
def _block_mask_cached(grans: tuple) -> BlockMask:
    g = np.asarray(grans)
    group = _group_index(g, int(g[-1]))
    allow = group[None, :] <= group[:, None]
    allow.setflags(write=False)
    return BlockMask(grans, allow)


def create_block_mask(granularities: Sequence[int]) -> BlockMask:
    grans = tuple(int(g) for g in granularities)
    if not grans:
        raise EmptyGranularities("need at least one token granularity")
    if grans[0] < 1 or any(b <= a for a, b in zip(grans, grans[1:])):
        raise NonMonotoneGranularities(f"granularities must be strictly increasing and >= 1: {grans}")
    return _block_mask_cached(grans)


@dataclass
class AttentionParams:
    """Projection weights in ``[out, in]`` layout with biases, split over ``heads``."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeMismatch(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def tensors(self) -> dict:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        def w():
            return Tensor(trunc_normal(rng, (dim, dim), std).astype(dtype))

        def b():
            return Tensor(np.zeros(dim, dtype=dtype))

        return cls(w(), b(), w(), b(), w(), b(), w(), b(), heads)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def _attend(q, k, v, mask, params: AttentionParams) -> Tensor:
    scale = 1.0 / math.sqrt(params.head_dim)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
    weights = masked_softmax(scores, mask)
    return linear(_merge_heads(matmul(weights, v)), params.wo, params.bo)


def block_masked_attention(
    x: Tensor,
    mask: BlockMask | np.ndarray | None,
    params: AttentionParams,
    rope: RopeParams,
    positions: Sequence[int] | None = None,
) -> Tensor:
    """Multi-head self-attention with RoPE on queries/keys and a block mask (``None`` = bidirectional)."""
    if x.ndim != 3 or x.shape[-1] != params.dim:
        raise ShapeMismatch(f"input {x.shape} vs attention dim {params.dim}")
    n = x.shape[1]
    allow = mask.allow if isinstance(mask, BlockMask) else mask
    if allow is not None and allow.shape != (n, n):
        raise ShapeMismatch(f"mask {allow.shape} vs {n} tokens")
    if positions is None:
        positions = range(n)
    q = rope_rotate(_split_heads(linear(x, params.wq, params.bq), params.heads), positions, rope)
    k = rope_rotate(_split_heads(linear(x, params.wk, params.bk), params.heads), positions, rope)
    v = _split_heads(linear(x, params.wv, params.bv), params.heads)
    return _attend(q, k, v, allow, params)


def attend(
    sink: Tensor,
    source: Tensor,
    params: AttentionParams,
    rope_sink: RopeParams | None = None,
    source_mask: np.ndarray | None = None,
) -> Tensor:
    """Cross-attention read of ``source`` into ``sink`` without the residual.

    ``source_mask`` (bool, length S) hides source columns; RoPE, when given,
    rotates the sink queries only.
    """
    if sink.ndim != 3 or source.ndim != 3 or sink.shape[0] != source.shape[0]:
        raise ShapeMismatch(f"sink {sink.shape} vs source {source.shape}")
    if sink.shape[-1] != params.dim or source.shape[-1] != params.dim:
        raise ShapeMismatch(f"feature dims {sink.shape[-1]}/{source.shape[-1]} vs {params.dim}")
    if source.shape[1] < 1:
        raise ShapeMismatch("source must hold at least one token")
    m, s = sink.shape[1], source.shape[1]
    q = _split_heads(linear(sink, params.wq, params.bq), params.heads)
    if rope_sink is not None:
        q = rope_rotate(q, range(m), rope_sink)
    k = _split_heads(linear(source, params.wk, params.bk), params.heads)
    v = _split_heads(linear(source, params.wv, params.bv), params.heads)
    mask = None
    if source_mask is not None:
        source_mask = np.asarray(source_mask, dtype=bool)
        if source_mask.shape != (s,):
            raise ShapeMismatch(f"source mask {source_mask.shape} vs {s} source tokens")
        mask = np.broadcast_to(source_mask, (m, s))
    return _attend(q, k, v, mask, params)


def cross_attention(
    sink: Tensor,
    source: Tensor,
    params: AttentionParams,
    rope_sink: RopeParams | None = None,
    source_mask: np.ndarray | None = None,
) -> Tensor:
    """``sink + attend(sink, source)``."""
    return add(sink, attend(sink, source, params, rope_sink, source_mask))
