"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

The computation graph is built define-by-run: every op records its parents
and a vector-Jacobian closure on the output node, and ``backward`` walks the
graph once in reverse topological order. Models here are small, so a plain
O(n^3) matmul and direct convolution are sufficient; there is no GPU path.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "NumericError",
    "Tensor",
    "Parameter",
    "add", "sub", "mul", "div", "neg", "scale",
    "exp", "log", "sigmoid", "softplus", "elu", "relu", "clip",
    "matmul", "conv2d", "reduce_sum", "reduce_mean", "logsumexp",
    "concat", "reshape", "shift_down", "maximum_const",
    "backward", "grad_check",
    "save_tensor", "load_tensor",
]


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN/Inf."""


# Finiteness is checked after every forward op; cheap at desk scale and it
# converts silent NaN propagation into a hard error state.
CHECK_FINITE = True


def _check_finite(data: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense row-major float64 array node in the differentiation graph."""

    __slots__ = ("data", "grad", "parents", "vjps", "requires_grad", "op")

    def __init__(self, data, parents: tuple = (), vjps: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.vjps = vjps
        self.op = op
        self.requires_grad = any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars are promoted to leaf tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"


class Parameter(Tensor):
    """A trainable leaf tensor with an accumulated gradient and Polyak shadow."""

    __slots__ = ("shadow", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.requires_grad = True
        self.name = name
        self.shadow = self.data.copy()

    def polyak_update(self, alpha: float) -> None:
        # alpha = 0 snaps the shadow to the current value
        self.shadow = alpha * self.shadow + (1.0 - alpha) * self.data


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward direction."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a: Tensor, b: Tensor, out: np.ndarray,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    _check_finite(out, op)
    return Tensor(
        out, (a, b),
        (lambda g: _unbroadcast(da(g), a.shape), lambda g: _unbroadcast(db(g), b.shape)),
        op,
    )


def _unary(op: str, a: Tensor, out: np.ndarray,
           da: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    _check_finite(out, op)
    return Tensor(out, (a,), (da,), op)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _binary("div", a, b, out,
                   lambda g: g / b.data, lambda g: -g * out / b.data)


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a, -a.data, lambda g: -g)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary("scale", a, c * a.data, lambda g: c * g)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes a NumericError below
        out = np.exp(a.data)
    return _unary("exp", a, out, lambda g: g * out)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive operand")
    return _unary("log", a, np.log(a.data), lambda g: g / a.data)


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _expit(a.data)
    return _unary("sigmoid", a, out, lambda g: g * out * (1.0 - out))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    s = _expit(a.data)
    return _unary("softplus", a, out, lambda g: g * s)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, alpha * np.expm1(x))
    local = np.where(x > 0, 1.0, out + alpha)
    return _unary("elu", a, out, lambda g: g * local)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _unary("relu", a, a.data * pos, lambda g: g * pos)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _unary("clip", a, out, lambda g: g * inside)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """max(c, a) elementwise; gradient flows only where a > c."""
    return clip(a, lo=c, hi=None)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _binary("matmul", a, b, out,
                   lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def _norm_padding(padding) -> tuple:
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    t, b, l, r = padding
    return (int(t), int(b), int(l), int(r))


def conv2d(x: Tensor, kernel: Tensor, mask: np.ndarray, padding=0) -> Tensor:
    """2-D correlation with a fixed binary connectivity mask on the kernel.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernel`` is
    (C_out, C_in, kh, kw); ``mask`` has the kernel's shape with {0,1} entries.
    ``padding`` is a single extent or per-side (top, bottom, left, right).
    Masked taps never influence the output and receive zero gradient.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != kernel.shape:
        raise DomainError(f"mask shape {mask.shape} != kernel shape {kernel.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DomainError("mask entries must be binary")

    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != kernel.shape[1]:
        raise DomainError(f"conv2d input shape {x.shape} incompatible with kernel {kernel.shape}")

    pt, pb, pl, pr = _norm_padding(padding)
    co, ci, kh, kw = kernel.shape
    w_eff = kernel.data * mask
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hh, ww = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if hh <= 0 or ww <= 0:
        raise DomainError("conv2d output would be empty")

    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", view, w_eff, optimize=True)
    _check_finite(out, "conv2d")

    def d_x(g: np.ndarray) -> np.ndarray:
        g = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hh, j:j + ww] += np.einsum(
                    "bohw,oc->bchw", g, w_eff[:, :, i, j], optimize=True)
        h, w = xd.shape[2], xd.shape[3]
        dx = dxp[:, :, pt:pt + h, pl:pl + w]
        return dx[0] if squeeze else dx

    def d_k(g: np.ndarray) -> np.ndarray:
        g = g[None] if squeeze else g
        dk = np.einsum("bohw,bchwij->ocij", g, view, optimize=True)
        return dk * mask

    return Tensor(out[0] if squeeze else out, (x, kernel), (d_x, d_k), "conv2d")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes)

    def d(g: np.ndarray) -> np.ndarray:
        ge = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(ge, a.shape).copy()

    return _unary("sum", a, out, d)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise DomainError("mean over empty axis")
    return scale(reduce_sum(a, axes), 1.0 / n)


def logsumexp(a: Tensor, axes=None) -> Tensor:
    """Stabilized log-sum-exp reduction (max subtraction)."""
    axes = _norm_axes(axes, a.data.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise DomainError("logsumexp over empty axis")
    m = a.data.max(axis=axes, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axes, keepdims=True)
    out = (m + np.log(s)).reshape(
        tuple(d for i, d in enumerate(a.shape) if i not in axes))
    soft = e / s

    def d(g: np.ndarray) -> np.ndarray:
        ge = np.expand_dims(g, axes) if axes else g
        return soft * ge

    return _unary("logsumexp", a, out, d)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _unary("reshape", a, a.data.reshape(shape), lambda g: g.reshape(old))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))), "concat")


def shift_down(a: Tensor, n: int = 1) -> Tensor:
    """Shift rows down by n along the second-to-last axis, zero-filling the top."""
    x = a.data
    out = np.zeros_like(x)
    if n < x.shape[-2]:
        out[..., n:, :] = x[..., : x.shape[-2] - n, :]

    def d(g: np.ndarray) -> np.ndarray:
        dg = np.zeros_like(g)
        if n < g.shape[-2]:
            dg[..., : g.shape[-2] - n, :] = g[..., n:, :]
        return dg

    return _unary("shift_down", a, out, d)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate gradients of a scalar loss into every reachable node.

    Gradients add across calls; zero them between optimizer steps.
    """
    if loss.data.size != 1:
        raise DomainError(f"backward requires a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.full_like(loss.data, seed))
    for node in reversed(order):
        g = node.grad if node is loss else node._pending_grad()
        for p, vjp in zip(node.parents, node.vjps):
            if p.requires_grad:
                p._accumulate(np.asarray(vjp(g)))


def _pending_grad(self: Tensor) -> np.ndarray:
    return self.grad if self.grad is not None else np.zeros_like(self.data)


Tensor._pending_grad = _pending_grad  # type: ignore[attr-defined]


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued; the relative error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Parameter(x.copy())
    out = f(xt)
    backward(out)
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            pert = flat.copy()
            pert[i] += sign * eps
            val = f(Tensor(pert.reshape(x.shape))).item()
            if not np.isfinite(val):
                raise NumericError("non-finite evaluation in grad_check")
            numeric.reshape(-1)[i] += val if slot == 0 else -val
    numeric /= 2.0 * eps

    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# tensor container: little-endian binary blob, magic "NDT1"

_MAGIC = b"NDT1"
_DTYPES = {0: np.float64, 1: np.float32, 2: np.uint8}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_tensor(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", code, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.astype(array.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError("bad magic: not an NDT1 tensor blob")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    payload = blob[6 + 4 * rank:]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_DTYPES[code])
