"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the active :class:`Tape`;
:func:`backward` replays that tape in reverse.  Values are numpy arrays in
the engine's working precision (float32 by default, float64 inside
:func:`precision`).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "tape",
    "no_grad",
    "precision",
    "get_dtype",
    "tensor",
    "record",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "clamp01",
    "absolute",
    "elementwise",
    "take",
    "stack",
    "reshape",
    "sum_all",
    "sum_squares",
    "mean_spatial",
    "linear",
    "conv2d",
    "maxpool2",
    "log_softmax",
    "nll_loss",
    "backward",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the engine to ``dtype`` (``"float32"`` or ``"float64"``) for the block."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    prev, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass
class _Op:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    ops: list[_Op] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ops)

    def clear(self) -> None:
        """Drop every recorded op and detach its output (ops and outputs form reference cycles)."""
        for op in self.ops:
            op.output._tape = None
            op.output._node = None
            op.output.requires_grad = False
        self.ops.clear()


_ACTIVE_TAPE: Tape | None = None


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Open a fresh tape.  Operations in the block are recorded onto it."""
    global _ACTIVE_TAPE
    prev, _ACTIVE_TAPE = _ACTIVE_TAPE, Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = prev


def _current_tape() -> Tape:
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is None:
        # Implicit tape for ad-hoc use outside a ``with tape()`` block.
        _ACTIVE_TAPE = Tape()
    return _ACTIVE_TAPE


class Tensor:
    """Dense array plus an optional gradient buffer.

    ``data`` is a contiguous numpy array in the working precision.  Leaves
    created with ``requires_grad=True`` receive ``grad`` after
    :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        if isinstance(index, tuple) and len(index) == 2 and index[0] == slice(None):
            return take(self, index[1], axis=1)
        return take(self, index, axis=0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap ``out_data`` in a tensor and record its backward rule.

    ``backward_fn`` maps the upstream gradient to one gradient (or ``None``)
    per input.  Used by every primitive here and by custom ops elsewhere
    (e.g. the rotation warp).
    """
    _check_finite(out_data, name)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        t = _current_tape()
        out.requires_grad = True
        out._tape = t
        out._node = len(t.ops)
        t.ops.append(_Op(tuple(inputs), out, backward_fn, name))
    return out


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape and b.data.size != 1:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(like.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (g, _reduce_to(g, b)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (g, _reduce_to(-g, b)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (g * bd, _reduce_to(g * ad, b)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = _DTYPE(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(_DTYPE), (a,),
                  lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return record(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def clamp01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes only where the input is strictly inside."""
    inside = (a.data > 0) & (a.data < 1)
    return record(np.clip(a.data, 0, 1), (a,), lambda g: (g * inside,), "clamp01")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "clamp01": clamp01, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale (b a constant), relu, sigmoid, clamp01, abs."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, float(b))
    if kind in _BINARY:
        return _BINARY[kind](a, _as_tensor(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# structural


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; an integer index drops the axis."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("take needs integer indices")
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for axis {axis} of size {n}")
    out = np.take(a.data, idx, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, axis, 0) if idx.ndim else g
        np.add.at(moved, idx, gm)
        return (ga,)

    return record(out, (a,), bwd, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(out, tuple(tensors), bwd, "stack")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    return record(np.asarray(a.data.sum(), dtype=_DTYPE), (a,),
                  lambda g: (np.full_like(a.data, g),), "sum")


def sum_squares(a: Tensor) -> Tensor:
    """Sum of squared entries, accumulated in float64 and rounded once."""
    acc = np.square(a.data.astype(np.float64)).sum()
    ad = a.data
    return record(np.asarray(acc, dtype=_DTYPE), (a,),
                  lambda g: (2 * g * ad,), "sum_squares")


def mean_spatial(x: Tensor) -> Tensor:
    """Global average pool: [N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape
    inv = _DTYPE(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).astype(_DTYPE),)

    return record(x.data.mean(axis=(2, 3)).astype(_DTYPE), (x,), bwd, "mean_spatial")


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ValueError("linear expects x[N,F], W[F,O], b[O]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"linear: dimension mismatch {x.shape} @ {W.shape} + {b.shape}")
    xd, Wd = x.data, W.data

    def bwd(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return record(xd @ Wd + b.data, (x, W, b), bwd, "linear")


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k > size + 2 * pad:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ValueError(f"non-integral output size for input {size}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding via im2col."""
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {kc}")
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return record(out, (x, kernel), bwd, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties go to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial size, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return record(np.ascontiguousarray(out), (x,), bwd, "maxpool2")


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("log_softmax expects [N, K] with K >= 1")
    _check_finite(x.data, "log_softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return record(out, (x,), bwd, "log_softmax")


def nll_loss(logp: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of integer labels ``y``."""
    y = np.asarray(y, dtype=np.int64)
    n, k = logp.shape
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    picked = logp.data[np.arange(n), y]
    val = np.asarray(-picked.sum(dtype=np.float64) / n, dtype=_DTYPE)

    def bwd(g):
        gl = np.zeros_like(logp.data)
        gl[np.arange(n), y] = -g / n
        return (gl,)

    return record(val, (logp,), bwd, "nll_loss")


# ---------------------------------------------------------------------------
# differentiation


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every requires-grad leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None or root._node is None:
        raise RuntimeError("root is not attached to a tape")
    ops = root._tape.ops
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for op in reversed(ops[: root._node + 1]):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
            if inp._tape is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``fn`` must rebuild its scalar output from ``params`` on each call.  The
    whole check runs in float64; parameters are temporarily upcast.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with precision("float64"):
        saved = [(p.data, p.grad) for p in params]
        try:
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            with tape():
                out = fn()
                if out.data.size != 1:
                    raise ValueError("gradcheck function must return a scalar")
                _check_finite(out.data, "gradcheck function")
                if out._tape is not None:
                    backward(out)
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            worst = 0.0
            with no_grad():
                for p, ga in zip(params, analytic):
                    flat = p.data.reshape(-1)
                    gaf = ga.reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        fp = fn().item()
                        flat[i] = orig - eps
                        fm = fn().item()
                        flat[i] = orig
                        if not (math.isfinite(fp) and math.isfinite(fm)):
                            raise NonFiniteError("non-finite value during gradcheck")
                        num = (fp - fm) / (2 * eps)
                        worst = max(worst, abs(gaf[i] - num) / max(1.0, abs(num)))
            return worst
        finally:
            for p, (d, g) in zip(params, saved):
                p.data, p.grad = d, g
