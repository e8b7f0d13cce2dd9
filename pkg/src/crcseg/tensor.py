"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op runs eagerly on numpy. When a Tape is active and an argument needs
gradients, the op appends a backward closure to the tape; Tape.backward then
replays the records in reverse. No tape active means pure inference: no
closures, no graph, no overhead beyond the numpy call.

Broadcasting is deliberately narrow: equal shapes, or a C×1×1 vector against
a C×H×W map. That is all the model needs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    """Array with shape metadata and an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_in_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._in_graph = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Tape:
    """Ordered record of executed ops; replaying it in reverse yields grads.

    Built fresh for every forward pass. Leaves (requires_grad inputs) are
    tracked so that parameters left off the loss path still end up with an
    explicit zero gradient after backward().
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def clear(self) -> None:
        self._records.clear()
        self._leaves.clear()

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._in_graph


def _tape_for(*tensors: Tensor) -> Tape | None:
    if _ACTIVE is None:
        return None
    for t in tensors:
        if _needs(t):
            return _ACTIVE
    return None


def _record(tape: Tape, out: Tensor, bwd: Callable[[np.ndarray], None],
            *inputs: Tensor) -> None:
    out._in_graph = True
    tape._records.append((out, bwd))
    for t in inputs:
        if t.requires_grad and not t._in_graph:
            tape._leaves.append(t)
            t._in_graph = True


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _needs(t):
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse-accumulate gradients of a scalar loss through the tape."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(tape._records):
        if out.grad is not None:
            bwd(out.grad)
    for leaf in tape._leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _tape_for(x)
    if tape is not None:
        mask = x.data > 0

        def bwd(g, x=x, mask=mask):
            _accum(x, g * mask)

        _record(tape, out, bwd, x)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, s=s):
            _accum(x, g * s * (1.0 - s))

        _record(tape, out, bwd, x)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2D tensor, max-subtracted for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2D tensor, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, s=s):
            dot = (g * s).sum(axis=1, keepdims=True)
            _accum(x, s * (g - dot))

        _record(tape, out, bwd, x)
    return out


def activations(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_rows":
        return softmax_rows(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, a=a, b=b):
            if _needs(a):
                _accum(a, g @ b.data.T)
            if _needs(b):
                _accum(b, a.data.T @ g)

        _record(tape, out, bwd, a, b)
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2D tensor, got {x.shape}")
    out = Tensor(x.data.T)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x):
            _accum(x, g.T)

        _record(tape, out, bwd, x)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x):
            _accum(x, g.reshape(x.data.shape))

        _record(tape, out, bwd, x)
    return out


def _as_pads(padding) -> tuple[int, int]:
    if isinstance(padding, tuple):
        ph, pw = padding
    else:
        ph = pw = padding
    if ph < 0 or pw < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return int(ph), int(pw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding=0,
           dilation: int = 1) -> Tensor:
    """Cross-correlate C_in×H×W with C_out×C_in×kh×kw; zero padding.

    padding may be a single int or an (ph, pw) pair; the 1×7/7×1 blocks need
    the asymmetric form.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs CHW input and OIHW kernel, got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {w.shape[1]}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    ph, pw = _as_pads(padding)
    oh = kernels.conv_out_size(x.shape[1], w.shape[2], stride, ph, dilation)
    ow = kernels.conv_out_size(x.shape[2], w.shape[3], stride, pw, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty: {oh}x{ow}")
    out = Tensor(kernels.conv2d_forward(x.data, w.data, stride, ph, pw, dilation))
    tape = _tape_for(x, w)
    if tape is not None:

        def bwd(g, x=x, w=w, stride=stride, ph=ph, pw=pw, dilation=dilation):
            dx, dw = kernels.conv2d_backward(x.data, w.data, g, stride, ph, pw,
                                             dilation, _needs(x), _needs(w))
            if dx is not None:
                _accum(x, dx)
            if dw is not None:
                _accum(w, dw)

        _record(tape, out, bwd, x, w)
    return out


# ---------------------------------------------------------------------------
# pooling / resizing


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool needs C×H×W, got {x.shape}")
    out = Tensor(x.data.mean(axis=(1, 2), keepdims=True))
    tape = _tape_for(x)
    if tape is not None:
        n = x.shape[1] * x.shape[2]

        def bwd(g, x=x, n=n):
            _accum(x, np.broadcast_to(g / n, x.data.shape))

        _record(tape, out, bwd, x)
    return out


def bilinear_resize(x: Tensor, h: int, w: int) -> Tensor:
    """Corner-aligned bilinear resize of C×H×W to C×h×w."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize needs C×H×W, got {x.shape}")
    if h < 1 or w < 1:
        raise ValueError("target size must be at least 1x1")
    out = Tensor(kernels.bilinear_resize_forward(x.data, h, w))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x):
            _accum(x, kernels.bilinear_resize_backward(g, x.shape[1], x.shape[2]))

        _record(tape, out, bwd, x)
    return out


def pool_and_resize(x: Tensor, kind: str, h: int | None = None,
                    w: int | None = None) -> Tensor:
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "bilinear_resize":
        return bilinear_resize(x, h, w)
    raise ValueError(f"unknown pooling kind {kind!r}")


def spatial_weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """C×1×1 mean of a C×H×W map under fixed spatial weights summing to 1."""
    if x.data.ndim != 3 or weights.shape != x.data.shape[1:]:
        raise ShapeError(f"weights {weights.shape} do not match map {x.shape}")
    v = np.einsum("chw,hw->c", x.data, weights).reshape(-1, 1, 1)
    out = Tensor(v)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, weights=weights):
            _accum(x, g.reshape(-1, 1, 1) * weights[None, :, :])

        _record(tape, out, bwd, x)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    sa, sb = a.shape, b.shape
    gate_over_map = (
        len(sa) == 3 and len(sb) == 3
        and (sa[1:] == (1, 1) or sb[1:] == (1, 1))
        and sa[0] == sb[0]
    )
    if not gate_over_map:
        raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=(1, 2), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        _record(tape, out, bwd, a, b)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data - b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, -_unbroadcast(g, b.data.shape))

        _record(tape, out, bwd, a, b)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, a=a, b=b):
            if _needs(a):
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if _needs(b):
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        _record(tape, out, bwd, a, b)
    return out


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack C_i×H×W tensors along the channel axis."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    base = tensors[0].data.shape[1:]
    for t in tensors:
        if t.data.ndim != 3 or t.data.shape[1:] != base:
            raise ShapeError("concat_channels: spatial dims differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    tape = _tape_for(*tensors)
    if tape is not None:
        splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

        def bwd(g, tensors=tensors, splits=splits):
            for t, piece in zip(tensors, np.split(g, splits, axis=0)):
                _accum(t, piece)

        _record(tape, out, bwd, *tensors)
    return out


def elementwise_and_concat(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "concat_channels":
        return concat_channels(a, b)
    raise ValueError(f"unknown kind {kind!r}")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"slice_channels needs C×H×W, got {x.shape}")
    out = Tensor(x.data[lo:hi])
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, lo=lo, hi=hi):
            if _needs(x):
                full = np.zeros_like(x.data)
                full[lo:hi] = g
                _accum(x, full)

        _record(tape, out, bwd, x)
    return out


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with scalar constants."""
    out = Tensor(scale * x.data + shift)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, scale=scale):
            _accum(x, scale * g)

        _record(tape, out, bwd, x)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x):
            _accum(x, g / x.data)

        _record(tape, out, bwd, x)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero outside [lo, hi]."""
    out = Tensor(np.clip(x.data, lo, hi))
    tape = _tape_for(x)
    if tape is not None:
        inside = (x.data >= lo) & (x.data <= hi)

        def bwd(g, x=x, inside=inside):
            _accum(x, g * inside)

        _record(tape, out, bwd, x)
    return out


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()))
    tape = _tape_for(x)
    if tape is not None:
        n = x.size

        def bwd(g, x=x, n=n):
            _accum(x, np.broadcast_to(g / n, x.data.shape))

        _record(tape, out, bwd, x)
    return out


def colwise_scale(x: Tensor, col: np.ndarray) -> Tensor:
    """Multiply every row of a 2D tensor by a fixed per-column weight."""
    if x.data.ndim != 2 or col.shape != (x.shape[1],):
        raise ShapeError(f"colwise_scale: {x.shape} vs column {col.shape}")
    out = Tensor(x.data * col[None, :])
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x, col=col):
            _accum(x, g * col[None, :])

        _record(tape, out, bwd, x)
    return out


def colwise_shift(x: Tensor, col: np.ndarray) -> Tensor:
    """Add a fixed per-column offset to every row of a 2D tensor."""
    if x.data.ndim != 2 or col.shape != (x.shape[1],):
        raise ShapeError(f"colwise_shift: {x.shape} vs column {col.shape}")
    out = Tensor(x.data + col[None, :])
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, x=x):
            _accum(x, g)

        _record(tape, out, bwd, x)
    return out
