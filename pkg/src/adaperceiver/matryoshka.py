"""Nested-width (Matryoshka) linear layers and feed-forward block.

Training masks a per-sample prefix of the FFN hidden units; inference slices
the same prefix out of the weight matrices. Both compute the same function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MatDimOutOfRange
from .tensor import Tensor, add, gelu, matmul, mul, transpose


def hidden_kept(width: int, ffn_ratio: float) -> int:
    """Hidden units retained at nominal width ``width`` (round half up)."""
    return int(math.floor(width * ffn_ratio + 0.5))


@dataclass(frozen=True)
class WidthSpec:
    nominal: int
    ffn_ratio: float

    @property
    def hidden(self) -> int:
        return hidden_kept(self.nominal, self.ffn_ratio)


@dataclass
class MatLinearParams:
    weight: Tensor  # [out_dim, in_dim]
    bias: Tensor | None = None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def _prefix_mask(mat_dim, batch: int, dim: int, dtype) -> np.ndarray:
    mat_dim = np.broadcast_to(np.asarray(mat_dim, dtype=np.int64), (batch,))
    if mat_dim.min() < 1 or mat_dim.max() > dim:
        raise MatDimOutOfRange(f"mat_dim must lie in [1, {dim}], got {mat_dim.min()}..{mat_dim.max()}")
    return (np.arange(dim)[None, :] < mat_dim[:, None]).astype(dtype)[:, None, :]


def mat_linear(x: Tensor, params: MatLinearParams, mat_dim, mat_input: bool = False) -> Tensor:
    """Linear layer whose input (``mat_input``) or output features past ``mat_dim[i]`` are zeroed per sample."""
    batch = x.shape[0]
    dim = params.in_dim if mat_input else params.out_dim
    mask = _prefix_mask(mat_dim, batch, dim, x.dtype)
    full = bool(mask.all())
    if mat_input and not full:
        x = mul(x, Tensor(mask))
    y = matmul(x, transpose(params.weight))
    if params.bias is not None:
        y = add(y, params.bias)
    if not mat_input and not full:
        y = mul(y, Tensor(mask))
    return y


def mat_ffn(x: Tensor, up: MatLinearParams, down: MatLinearParams, hidden: Sequence[int] | int) -> Tensor:
    """Up-projection masked to ``hidden[i]`` outputs, GeLU, down-projection masked to the same inputs."""
    h = mat_linear(x, up, hidden, mat_input=False)
    return mat_linear(gelu(h), down, hidden, mat_input=True)


def ffn(x: Tensor, up: MatLinearParams, down: MatLinearParams) -> Tensor:
    h = matmul(x, transpose(up.weight))
    if up.bias is not None:
        h = add(h, up.bias)
    y = matmul(gelu(h), transpose(down.weight))
    return add(y, down.bias) if down.bias is not None else y


def slice_for_inference(up: MatLinearParams, down: MatLinearParams, hidden: int):
    """Return ``(up, down)`` restricted to the first ``hidden`` units; weights become [k, d] and [d, k]."""
    full = up.out_dim
    if not 1 <= hidden <= full or down.in_dim != full:
        raise MatDimOutOfRange(f"hidden {hidden} outside [1, {full}]")
    if hidden == full:
        return up, down
    up_s = MatLinearParams(
        Tensor(up.weight.data[:hidden]),
        None if up.bias is None else Tensor(up.bias.data[:hidden]),
    )
    down_s = MatLinearParams(Tensor(np.ascontiguousarray(down.weight.data[:, :hidden])), down.bias)
    return up_s, down_s
