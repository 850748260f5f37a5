"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy arrays. Operations are recorded on the innermost
active :class:`Tape` whenever at least one input requires a gradient; outside
a tape nothing is recorded, which is how inference runs.

The primitive set is deliberately closed: matmul, add, mul, gelu,
masked_softmax, layer_norm, slice, concat, broadcast, sum/mean, transpose,
plus reshape and a fused cross-entropy. Everything else in the package is
composed from these.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import AllMaskedRow, GraphCycle, LabelOutOfRange, NonDeterministicF, ShapeMismatch

PRECISIONS = {"high": np.float64, "standard": np.float32}

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(mode: str):
    """Set the dtype of newly created tensors: ``"high"`` (float64) or ``"standard"``."""
    previous = default_dtype()
    _state.dtype = PRECISIONS[mode]
    try:
        yield
    finally:
        _state.dtype = previous


def _tapes() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Temporarily suspend recording on every active tape."""
    stack = _tapes()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications; usable as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    be = kernels.backend
    return _record("gelu", be.gelu_fwd(xd), (x,), lambda g: (be.gelu_bwd(xd, g),))


def masked_softmax(scores: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (shape ``[..., N, M]`` -> last two dims).

    Forbidden entries come out exactly zero; each row is stabilised by the
    maximum over its permitted entries.
    """
    sd = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != sd.shape[-2:]:
            raise ShapeMismatch(f"mask {mask.shape} vs scores {sd.shape}")
        empty = ~mask.any(axis=-1)
        if empty.any():
            raise AllMaskedRow(f"rows {np.flatnonzero(empty).tolist()} have no permitted entry")
        if mask.all():
            mask = None
    be = kernels.backend
    y = be.softmax_fwd(sd, mask)
    return _record("masked_softmax", y, (scores,), lambda g: (be.softmax_bwd(y, g),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    be = kernels.backend
    y, xhat, rstd = be.layernorm_fwd(x.data, gain.data, bias.data, eps)

    def backward(g):
        dx, dg, db = be.layernorm_bwd(g, xhat, rstd, gain.data)
        return dx, dg, db

    return _record("layer_norm", y, (x, gain, bias), backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))):
            raise TypeError(f"slice supports basic indexing only, got {type(k).__name__}")
    xd = x.data

    def backward(g):
        out = np.zeros_like(xd)
        out[key] = g
        return (out,)

    return _record("slice", xd[key], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    datas = [t.data for t in tensors]
    ax = axis % datas[0].ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate(datas, axis=ax), tensors, backward)


def broadcast(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()
    return _record("broadcast", out, (x,), lambda g: (_unbroadcast(g, src),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _record("sum", np.asarray(xd.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is None:
        count = xd.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([xd.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xd.shape).copy(),)

    return _record("mean", np.asarray(xd.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    xd = x.data
    if axes is None:
        axes = tuple(range(xd.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose",
        np.ascontiguousarray(xd.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Per-row cross-entropy of ``logits[B, C]`` against integer ``labels[B]``; returns shape ``[B]``."""
    ld = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    n, c = ld.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} vs logits {ld.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    m = ld.max(axis=1, keepdims=True)
    shifted = ld - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    target = np.full_like(ld, smoothing / c)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = -(target * logp).sum(axis=1)

    def backward(g):
        return ((np.exp(logp) - target) * g[:, None],)

    return _record("cross_entropy", loss, (logits,), backward)


# ----------------------------------------------------------- differentiation


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf on ``tape``.

    ``leaves`` lists extra parameters that should receive an explicit zero
    gradient when the recorded computation never touched them.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {}
    for i, node in enumerate(tape.nodes):
        produced[id(node.output)] = i
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            j = produced.get(id(t))
            if j is not None and j >= i:
                raise GraphCycle(f"node {i} ({node.op}) consumes output of node {j}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaf_map.setdefault(id(t), t)
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            if id(t) not in produced:
                leaf_map.setdefault(id(t), t)
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in leaves:
        leaf_map.setdefault(id(leaf), leaf)
    for key, leaf in leaf_map.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def value_and_grad(f: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape, leaves=params)
    return loss.item(), [p.grad for p in params]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` evaluates the scalar objective from the current contents of
    ``params``. Entries are perturbed in place and restored. When
    ``max_entries`` is given, that many entries per parameter are sampled.
    """
    _, analytic = value_and_grad(f, params)
    with no_record():
        base = f().item()
        if f().item() != base:
            raise NonDeterministicF("objective differs between two identical evaluations")
        worst = 0.0
        rng = rng or np.random.default_rng(0)
        for p, g_ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            g_flat = g_ad.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                g_fd = (up - down) / (2 * eps)
                a = float(g_flat[i])
                err = abs(a - g_fd) / max(1e-8, abs(a) + abs(g_fd))
                worst = max(worst, err)
    return worst
