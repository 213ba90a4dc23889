"""Dense float32 tensors with reverse-mode automatic differentiation.

Define-by-run: each op wires its output tensor to its inputs through a
backward closure, so the tape is the implicit DAG over ``Tensor`` nodes.
``backward`` runs one reverse topological sweep, accumulates gradients
additively into ``.grad``, and releases the graph afterwards; callers are
responsible for zeroing grads between sweeps.

Storage is row-major float32 throughout. A tape belongs to one logical
thread of execution; tensors themselves are safe to read concurrently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the context (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float32 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={tuple(self.shape)}{flag}{op})"

    # arithmetic sugar, all deferring to module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / float(other))
        raise ContractError("tensor division is only defined for scalar divisors")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add operands do not broadcast: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _from_op(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub operands do not broadcast: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _from_op(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul operands do not broadcast: {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _from_op(-a.data, (a,), backward, "neg")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; both operands rank >= 2, equal leading batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (
        a.ndim >= 2
        and b.ndim >= 2
        and a.shape[-1] == b.shape[-2]
        and a.shape[:-2] == b.shape[:-2]
    )
    if not ok:
        raise ShapeError(f"matmul shapes do not agree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _from_op(data, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inverse))

    return _from_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _from_op(data, (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat shapes do not agree along axis {axis}: {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(idx)])

    return _from_op(data, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            _accum(a, _restore_axes(np.asarray(g), a.shape, axis, keepdims))

    return _from_op(data, (a,), backward, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    count = a.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    inv = np.float32(1.0 / float(count))

    def backward(g):
        if a.requires_grad:
            _accum(a, _restore_axes(np.asarray(g) * inv, a.shape, axis, keepdims))

    return _from_op(data, (a,), backward, "reduce_mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rejects non-finite input."""
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    return _softmax_raw(a, None, axis)


def _softmax_raw(a: Tensor, additive_mask: np.ndarray | None, axis: int) -> Tensor:
    """Softmax core shared with masked attention; mask entries are 0 or -inf.

    Masked positions turn into exact zero weights (exp of -inf) without
    tripping the public finiteness check, so every row must keep at least
    one unmasked entry.
    """
    z = a.data if additive_mask is None else a.data + additive_mask
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - inner))

    return _from_op(y, (a,), backward, "softmax")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * data * (1.0 - data))

    return _from_op(data, (a,), backward, "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - data * data))

    return _from_op(data, (a,), backward, "tanh")


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _from_op(data, (a,), backward, "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = np.float32(_GELU_C) * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    data = np.float32(0.5) * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            d_inner = np.float32(_GELU_C) * (1.0 + np.float32(3 * 0.044715) * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            _accum(a, g * local)

    return _from_op(data, (a,), backward, "gelu")


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1] if a.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must be ({d},) for input {a.shape}, "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True, dtype=np.float32)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float32)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _from_op(data, (a, gain, bias), backward, "layernorm")


# ---------------------------------------------------------------------------
# patch extraction: im2col core shared by conv2d / unfold / fold


def _conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_patch_geometry(name: str, H: int, W: int, k: int, stride: int, pad: int) -> None:
    if k < 1 or stride < 1 or pad < 0:
        raise ContractError(f"{name}: kernel/stride must be >= 1 and pad >= 0, got k={k} s={stride} p={pad}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeError(f"{name}: kernel {k}x{k} exceeds padded input {H + 2 * pad}x{W + 2 * pad}")


def _im2col(img: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Extract k*k patches as rows.

    Rows run over output positions row-major; within a row, entries are
    channel-major, then patch row, then patch column.
    """
    C, H, W = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad))) if pad else img
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(Ho * Wo, C * k * k)
    return cols, Ho, Wo


def _col2im(cols: np.ndarray, C: int, H: int, W: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Overlap-add patch rows back into a (C, H, W) image; adjoint of _im2col."""
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = _conv_out_len(H, k, stride, pad), _conv_out_len(W, k, stride, pad)
    out = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    patches = cols.reshape(Ho, Wo, C, k, k).transpose(2, 3, 4, 0, 1)
    for di in range(k):
        for dj in range(k):
            out[:, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += patches[:, di, dj]
    if pad:
        out = out[:, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(out)


def conv2d(x, kernels, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (C_in, H, W) input with (C_out, C_in, k, k) kernels.

    Zero padding; output height is (H + 2*pad - k) // stride + 1. Bias is
    not part of this op; add one separately.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D input and 4-D kernels, got {x.shape} and {kernels.shape}")
    Cout, Cin, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kernels.shape}")
    if Cin != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    C, H, W = x.shape
    _check_patch_geometry("conv2d", H, W, kh, stride, pad)
    cols, Ho, Wo = _im2col(x.data, kh, stride, pad)
    w2 = kernels.data.reshape(Cout, Cin * kh * kw)
    data = np.ascontiguousarray((cols @ w2.T).T).reshape(Cout, Ho, Wo)

    def backward(g):
        gcols = g.reshape(Cout, Ho * Wo).T
        if kernels.requires_grad:
            _accum(kernels, (gcols.T @ cols).reshape(kernels.shape))
        if x.requires_grad:
            _accum(x, _col2im(gcols @ w2, C, H, W, kh, stride, pad))

    return _from_op(data, (x, kernels), backward, "conv2d")


def unfold(x, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Soft split: overlapping k*k patches of a (C, H, W) image as rows.

    Output is (N, C*k*k) with N = out_h * out_w; row entries are
    channel-major, then patch row, then patch column.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"unfold expects a 3-D (C, H, W) input, got {x.shape}")
    C, H, W = x.shape
    _check_patch_geometry("unfold", H, W, kernel, stride, pad)
    cols, _, _ = _im2col(x.data, kernel, stride, pad)

    def backward(g):
        if x.requires_grad:
            _accum(x, _col2im(g, C, H, W, kernel, stride, pad))

    return _from_op(cols, (x,), backward, "unfold")


def fold(patches, out_shape: tuple[int, int, int], kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Overlap-add inverse of unfold onto a (C, H, W) canvas.

    Overlapping contributions sum; divide by ``count_map`` to normalize.
    """
    patches = _as_tensor(patches)
    C, H, W = (int(v) for v in out_shape)
    _check_patch_geometry("fold", H, W, kernel, stride, pad)
    n = _conv_out_len(H, kernel, stride, pad) * _conv_out_len(W, kernel, stride, pad)
    if patches.ndim != 2 or patches.shape != (n, C * kernel * kernel):
        raise ShapeError(
            f"fold patches {patches.shape} do not match target {out_shape} "
            f"with k={kernel} s={stride} p={pad} (expected ({n}, {C * kernel * kernel}))"
        )
    data = _col2im(patches.data, C, H, W, kernel, stride, pad)

    def backward(g):
        if patches.requires_grad:
            _accum(patches, _im2col(g, kernel, stride, pad)[0])

    return _from_op(data, (patches,), backward, "fold")


def count_map(h: int, w: int, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """How many unfold patches cover each pixel: fold of all-ones patches."""
    _check_patch_geometry("count_map", h, w, kernel, stride, pad)
    n = _conv_out_len(h, kernel, stride, pad) * _conv_out_len(w, kernel, stride, pad)
    ones = np.ones((n, kernel * kernel), dtype=np.float32)
    return _col2im(ones, 1, h, w, kernel, stride, pad)[0]


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; frees the tape as it goes."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad (no tape to walk)")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is not None and node.grad is not None:
            fn(node.grad)
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int
    worst_index: int


def grad_check(f, x: Tensor, step: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare the autodiff gradient of scalar f(x) against central differences.

    Every element of ``x`` is bumped by ±step (the effective step is
    measured after float32 rounding). The reported error is
    max|ad - fd| / max(1, max|ad|, max|fd|), which behaves like a plain
    relative error for O(1) gradients without exploding on near-zero ones.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    backward(out)
    if leaf.grad is None:
        raise ContractError("grad_check: f(x) does not depend on x")
    ad = leaf.grad.astype(np.float64).ravel()

    fd = np.zeros_like(ad)
    flat = leaf.data.ravel()
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + np.float32(step)
            hi_x = float(flat[i])
            f_hi = f(leaf).item()
            flat[i] = orig - np.float32(step)
            lo_x = float(flat[i])
            f_lo = f(leaf).item()
            flat[i] = orig
            fd[i] = (f_hi - f_lo) / (hi_x - lo_x)

    denom = max(1.0, float(np.abs(ad).max()), float(np.abs(fd).max()))
    err = np.abs(ad - fd) / denom
    worst = int(err.argmax()) if err.size else 0
    max_err = float(err[worst]) if err.size else 0.0
    return GradCheckReport(
        max_rel_error=max_err,
        tol=float(tol),
        passed=bool(max_err < tol),
        n_checked=int(flat.size),
        worst_index=worst,
    )
