"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only what the invertible network needs is provided: same-padding 2D
convolution, same-shape elementwise arithmetic, per-channel affine maps,
channel slicing/concatenation, a differentiable matrix inverse for 1x1
channel mixing, and scalar reductions.

Every tensor is rank 4, ``(N, C, H, W)``.  Tensors created while a
:class:`Tape` is involved carry a node id on that tape; :func:`backward`
walks the tape in reverse to accumulate gradients.

Arithmetic runs in float32.  Inside ``with float64():`` freshly created
tensors are float64 instead, which is what the finite-difference gradient
checks use.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "float64",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "tanh",
    "leaky_relu",
    "conv2d",
    "channel_slice",
    "split",
    "concat",
    "affine_channels",
    "unaffine_channels",
    "inv1x1",
    "sum",
    "mean",
    "mse",
]

_dtype = np.float32


def default_dtype():
    return _dtype


@contextlib.contextmanager
def float64() -> Iterator[None]:
    """Create new tensors (and model parameters) in 64-bit precision."""
    global _dtype
    prev, _dtype = _dtype, np.float64
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    """Rank-4 array with an optional position on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, tape=None, node=None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    vjp: Optional[Callable]
    shape: tuple
    name: Optional[str] = None


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, tuple] = {}
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, array: np.ndarray, name: Optional[str] = None) -> Tensor:
        """Track ``array`` (not a copy) as a differentiable input.

        Registering the same array twice returns the same node, so a
        parameter used in several places accumulates one gradient.
        """
        key = id(array)
        hit = self._leaves.get(key)
        if hit is not None:
            return hit[1]
        if array.ndim != 4:
            raise DimensionError(f"leaf arrays must be rank 4, got shape {array.shape}")
        t = Tensor._wrap(array, self, len(self.nodes))
        self.nodes.append(_Node("leaf", (), None, array.shape, name))
        # keep the array alive so its id stays unique for the tape's lifetime
        self._leaves[key] = (array, t)
        return t

    def _record(self, op, inputs, data, vjp) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        t = Tensor._wrap(data, self, len(self.nodes))
        self.nodes.append(_Node(op, ids, vjp, data.shape))
        return t


class Gradients:
    """Gradients from one :func:`backward` call, indexed by tensor or node id."""

    def __init__(self, tape: Tape, values: dict):
        self.tape = tape
        self._values = values

    def __getitem__(self, key: Union[Tensor, int]) -> np.ndarray:
        if isinstance(key, Tensor):
            if key.tape is not self.tape:
                raise ContractError("tensor does not belong to this tape")
            node = key.node
        else:
            node = key
        g = self._values.get(node)
        if g is None:
            n = self.tape.nodes[node]
            return np.zeros(n.shape, dtype=_dtype)
        return g

    def __contains__(self, key):
        node = key.node if isinstance(key, Tensor) else key
        return node in self._values


def _released(g):
    raise ContractError("vjp already released")  # pragma: no cover


def backward(loss: Tensor, retain_all: bool = False) -> Gradients:
    """Reverse-accumulate d(loss)/d(node) over the loss's tape.

    Only leaf gradients are kept unless ``retain_all`` is set.  Each node's
    saved values are released as soon as its vjp has run (tensors, tape and
    vjp closures form reference cycles that the garbage collector is slow to
    break), so a tape supports a single backward pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was not computed on a tape")
    if tape.consumed:
        raise ContractError("tape was already consumed by a backward pass")
    tape.consumed = True
    acc: list = [None] * len(tape.nodes)
    acc[loss.node] = np.ones_like(loss.data)
    kept = {}
    for i in range(loss.node, -1, -1):
        g = acc[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            kept[i] = g
            continue
        if retain_all:
            kept[i] = g
        acc[i] = None
        vjp, node.vjp = node.vjp, _released
        for j, gj in zip(node.inputs, vjp(g)):
            if j is None or gj is None:
                continue
            acc[j] = gj if acc[j] is None else acc[j] + gj
    for node in tape.nodes:
        if node.vjp is not None:
            node.vjp = _released
    tape.grads = kept
    return Gradients(tape, kept)


# --------------------------------------------------------------------------
# op plumbing


def _tape_of(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _finish(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(data)
    return tape._record(op, inputs, data, vjp)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True)


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _finish("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _finish("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", (a,), out, lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _finish("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = a.data
    s = x.dtype.type(slope)
    out = np.maximum(x, x * s)

    def vjp(g):
        pos = x > 0
        return (g * (pos * (1 - s) + s),)

    return _finish("leaky_relu", (a,), out, vjp)


# --------------------------------------------------------------------------
# convolution


_scratch = threading.local()


def _buffer(tag: str, shape: tuple, dtype) -> np.ndarray:
    # Per-thread reusable temporaries; fresh large allocations cost page faults.
    bufs = _scratch.__dict__.setdefault("bufs", {})
    key = (tag, shape, np.dtype(dtype).str)
    buf = bufs.get(key)
    if buf is None:
        buf = bufs[key] = np.zeros(shape, dtype=dtype)
    return buf


def _pad(x: np.ndarray, p: int, tag: str) -> np.ndarray:
    if p == 0:
        return x
    N, C, H, W = x.shape
    # keyed by p too: the zero border is only valid for one interior placement
    xp = _buffer(f"{tag}{p}", (N, C, H + 2 * p, W + 2 * p), x.dtype)
    xp[:, :, p : p + H, p : p + W] = x
    return xp


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = _buffer("cols", (N, C, k, k, H, W), xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(N, C * k * k, H * W)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x`` with ``weight`` plus per-channel bias.

    ``weight`` is ``(Cout, Cin, k, k)`` with odd k; ``bias`` is ``(1, Cout, 1, 1)``.
    """
    N, Cin, H, W = x.shape
    Cout, Cin_w, k, k2 = weight.shape
    if Cin_w != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels, weight expects {Cin_w}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (1, Cout, 1, 1):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != (1, {Cout}, 1, 1)")
    if not 0 <= padding <= k - 1:
        raise DimensionError(f"conv2d: padding must lie in [0, {k - 1}], got {padding}")
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")

    pointwise = k == 1
    w2 = weight.data.reshape(Cout, Cin * k * k)

    def columns():
        if pointwise:
            return x.data.reshape(N, Cin, H * W)
        return _im2col(_pad(x.data, padding, "pad_x"), k, Ho, Wo)

    out = np.matmul(w2, columns())
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1)
    out = out.reshape(N, Cout, Ho, Wo)

    def vjp(g):
        g2 = g.reshape(N, Cout, Ho * Wo)
        gw = np.matmul(g2, columns().transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if pointwise:
            gx = np.matmul(w2.T, g2).reshape(x.shape)
        else:
            # input gradient = full correlation of g with the flipped, transposed kernel
            gp = _pad(g, k - 1 - padding, "pad_g")
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(Cin, Cout * k * k)
            gx = np.matmul(wf, _im2col(gp, k, H, W)).reshape(x.shape)
        gb = None if bias is None else g2.sum(axis=(0, 2)).reshape(bias.shape)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish("conv2d", inputs, out, vjp)


# --------------------------------------------------------------------------
# channel plumbing


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise DimensionError(f"channel_slice [{start}:{stop}] out of range for {C} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _finish("channel_slice", (x,), out, vjp)


def split(x: Tensor, at: Optional[int] = None) -> tuple:
    """Split along channels; by default into two equal halves."""
    C = x.shape[1]
    if at is None:
        if C % 2:
            raise DimensionError(f"cannot split {C} channels into equal halves")
        at = C // 2
    return channel_slice(x, 0, at), channel_slice(x, at, C)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    N, _, H, W = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (N, H, W):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _finish("concat", tensors, out, vjp)


def affine_channels(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """x * scale + bias with ``(1, C, 1, 1)`` scale and bias."""
    C = x.shape[1]
    if scale.shape != (1, C, 1, 1) or bias.shape != (1, C, 1, 1):
        raise DimensionError(f"affine_channels: parameters must be (1, {C}, 1, 1)")
    xd, s = x.data, scale.data
    out = xd * s + bias.data

    def vjp(g):
        return g * s, _reduce_channel(g * xd), _reduce_channel(g)

    return _finish("affine_channels", (x, scale, bias), out, vjp)


def unaffine_channels(y: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """(y - bias) / scale, the inverse of :func:`affine_channels`."""
    C = y.shape[1]
    if scale.shape != (1, C, 1, 1) or bias.shape != (1, C, 1, 1):
        raise DimensionError(f"unaffine_channels: parameters must be (1, {C}, 1, 1)")
    s = scale.data
    out = (y.data - bias.data) / s

    def vjp(g):
        gy = g / s
        return gy, _reduce_channel(-gy * out), _reduce_channel(-gy)

    return _finish("unaffine_channels", (y, scale, bias), out, vjp)


def inv1x1(weight: Tensor, inverse: Optional[np.ndarray] = None) -> Tensor:
    """Matrix inverse of a ``(C, C, 1, 1)`` channel-mixing kernel.

    ``inverse`` may carry a precomputed inverse (e.g. from a cached LU
    factorization); it is trusted as-is.
    """
    C = weight.shape[0]
    if weight.shape != (C, C, 1, 1):
        raise DimensionError(f"inv1x1 expects (C, C, 1, 1), got {weight.shape}")
    if inverse is None:
        inverse = np.linalg.inv(weight.data.reshape(C, C))
    inv = np.asarray(inverse, dtype=weight.dtype).reshape(C, C)

    def vjp(g):
        gw = -inv.T @ g.reshape(C, C) @ inv.T
        return (gw.reshape(weight.shape),)

    return _finish("inv1x1", (weight,), inv.reshape(C, C, 1, 1).copy(), vjp)


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return _finish("sum", (x,), out, lambda g: (np.full(x.shape, g.reshape(()), dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = (x.data.sum(dtype=np.float64) / n).astype(x.dtype).reshape(1, 1, 1, 1)
    return _finish(
        "mean", (x,), out, lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))
