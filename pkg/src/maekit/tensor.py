"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable op wires a closure into
the graph that routes the output gradient back to its parents. Graphs are
built eagerly, walked once by ``backward()``, and then garbage-collected
with the tensors that anchor them.

Two precision modes exist: ``single`` (training) and ``double`` (gradient
checking, where float32 finite differences would be too noisy). All
tensors participating in one graph must share the active mode.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DimensionError,
    IndexRangeError,
    UnsupportedConfigError,
)

_DTYPES = {"single": np.float32, "double": np.float64}
_mode = "single"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_precision(mode: str) -> None:
    global _mode
    if mode not in _DTYPES:
        raise ContractError(f"unknown precision mode {mode!r}; expected 'single' or 'double'")
    _mode = mode


def get_precision() -> str:
    return _mode


def active_dtype():
    return _DTYPES[_mode]


@contextmanager
def precision(mode: str):
    """Temporarily switch the precision mode (used by gradient checks)."""
    global _mode
    previous = _mode
    set_precision(mode)
    try:
        yield
    finally:
        _mode = previous


class Tensor:
    """A dense row-major array plus reverse-mode bookkeeping.

    ``data`` is a numpy array in C (row-major) order; ``grad`` is filled in
    by ``backward()`` for every reachable tensor with ``requires_grad``.
    Tensors are immutable after construction except for grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=active_dtype()))
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def _check_dtype(*tensors: Tensor) -> None:
    want = active_dtype()
    for t in tensors:
        if t.data.dtype != want:
            raise ContractError(
                f"tensor dtype {t.data.dtype} does not match active precision"
                f" mode '{_mode}'"
            )


def _sum_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo broadcasting: sum grad down to the given operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}"
        ) from None


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _sum_to(g, a.data.shape))
        _accumulate(b, _sum_to(g, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    _broadcast_check(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _sum_to(g, a.data.shape))
        _accumulate(b, _sum_to(-g, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _sum_to(g * b.data, a.data.shape))
        _accumulate(b, _sum_to(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward(g):
        _accumulate(a, g * s)

    return Tensor._result(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return Tensor._result(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-form GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + x * pdf))

    return Tensor._result(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return Tensor._result(out_data, (a,), backward)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize along one axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = np.mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def backward(g):
        gm = np.mean(g, axis=axis, keepdims=True)
        gy = np.mean(g * out_data, axis=axis, keepdims=True)
        _accumulate(a, inv * (g - gm - out_data * gy))

    return Tensor._result(out_data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    x = a.data
    out_data = np.mean(x, axis=axis)
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(a, np.full_like(x, g / count))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), x.shape) / count)

    return Tensor._result(np.asarray(out_data), (a,), backward)


def variance(a: Tensor, axis: int | None = None) -> Tensor:
    """Population variance along an axis (or the whole tensor)."""
    x = a.data
    mu = np.mean(x, axis=axis, keepdims=True)
    xc = x - mu
    out_data = np.mean(xc * xc, axis=axis)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            gb = g
        else:
            gb = np.expand_dims(g, axis)
        _accumulate(a, 2.0 * xc * gb / count)

    return Tensor._result(np.asarray(out_data), (a,), backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    x = a.data
    out_data = np.sum(x, axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(a, np.full_like(x, g))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return Tensor._result(np.asarray(out_data), (a,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_dtype(pred, target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"mse: prediction shape {pred.data.shape} does not match target"
            f" shape {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray(np.mean(diff * diff))

    def backward(g):
        d = (2.0 / n) * diff * g
        _accumulate(pred, d)
        _accumulate(target, -d)

    return Tensor._result(out_data, (pred, target), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor._result(out_data, (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return Tensor._result(out_data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return Tensor._result(out_data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    _check_dtype(*parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, s in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + s)
            _accumulate(p, g[tuple(index)])
            offset += s

    return Tensor._result(out_data, tuple(parts), backward)


def expand(a: Tensor, shape: tuple) -> Tensor:
    """Broadcast to a larger shape; backward sums over the expanded axes."""
    try:
        out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise DimensionError(
            f"expand: cannot broadcast {a.data.shape} to {shape}"
        ) from None

    def backward(g):
        _accumulate(a, _sum_to(g, a.data.shape))

    return Tensor._result(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul and structured ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul: operands must have rank >= 2, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree between {a.data.shape} and {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, b.data.swapaxes(-1, -2))
        db = np.matmul(a.data.swapaxes(-1, -2), g)
        _accumulate(a, _sum_to(da, a.data.shape))
        _accumulate(b, _sum_to(db, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows: out[i] = x[idx[i]] (2-d input), or per-sample rows for
    a batched [B, n, d] input with an index array of shape [B, k]."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim == 2:
        if idx.ndim != 1:
            raise DimensionError(
                f"gather_rows: expected 1-d indices for input {x.data.shape}, got {idx.shape}"
            )
        n = x.data.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexRangeError(
                f"gather_rows: index out of range [0, {n}) in {idx.tolist()}"
            )
        out_data = np.ascontiguousarray(x.data[idx])

        def backward(g):
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            _accumulate(x, dx)

        return Tensor._result(out_data, (x,), backward)

    if x.data.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
            raise DimensionError(
                f"gather_rows: expected [B, k] indices for input {x.data.shape}, got {idx.shape}"
            )
        n = x.data.shape[1]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexRangeError(f"gather_rows: index out of range [0, {n})")
        rows = np.arange(x.data.shape[0])[:, None]
        out_data = np.ascontiguousarray(x.data[rows, idx])

        def backward(g):
            dx = np.zeros_like(x.data)
            np.add.at(dx, (rows, idx), g)
            _accumulate(x, dx)

        return Tensor._result(out_data, (x,), backward)

    raise DimensionError(f"gather_rows: unsupported input rank {x.data.ndim}")


def scatter_rows(x: Tensor, idx, n: int) -> Tensor:
    """Inverse of gather_rows: out[idx[i]] = x[i], zeros elsewhere.

    Indices must be unique; with a permutation this inverts gather_rows.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise DimensionError(
            f"scatter_rows: expected [k, d] input with k indices, got"
            f" {x.data.shape} and {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexRangeError(f"scatter_rows: index out of range [0, {n})")
    if np.unique(idx).size != idx.size:
        raise IndexRangeError("scatter_rows: duplicate target indices")
    out_data = np.zeros((n, x.data.shape[1]), dtype=x.data.dtype)
    out_data[idx] = x.data

    def backward(g):
        _accumulate(x, g[idx])

    return Tensor._result(out_data, (x,), backward)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 2) -> Tensor:
    """Transposed convolution with a 2x2 kernel and stride 2.

    Doubles both spatial dimensions; the only configuration the model
    family needs. Accepts [c_in, h, w] or batched [B, c_in, h, w] input
    with weights [c_in, c_out, 2, 2].
    """
    _check_dtype(x, w)
    if stride != 2 or w.data.ndim != 4 or w.data.shape[2:] != (2, 2):
        raise UnsupportedConfigError(
            f"conv_transpose2d supports only 2x2 kernels with stride 2, got"
            f" kernel {w.data.shape} stride {stride}"
        )
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input {x.data.shape} incompatible with"
            f" weights {w.data.shape}"
        )
    batch, _, h, wd_ = xd.shape
    c_out = w.data.shape[1]
    out6 = np.einsum("bchw,cdij->bdhiwj", xd, w.data)
    out_data = np.ascontiguousarray(out6.reshape(batch, c_out, 2 * h, 2 * wd_))
    if bias is not None:
        _check_dtype(bias)
        out_data = out_data + bias.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]

    def backward(g):
        gb = g[None] if squeeze else g
        g6 = gb.reshape(batch, c_out, h, 2, wd_, 2)
        dx = np.einsum("bdhiwj,cdij->bchw", g6, w.data)
        dw = np.einsum("bchw,bdhiwj->cdij", xd, g6)
        _accumulate(x, dx[0] if squeeze else dx)
        _accumulate(w, dw)
        if bias is not None:
            _accumulate(bias, gb.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(out_data, parents, backward)


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"cross_entropy: got logits {logits.data.shape} and labels {labels.shape}"
        )
    z = logits.data
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    b = z.shape[0]
    picked = logp[np.arange(b), labels]
    out_data = np.asarray(-np.mean(picked))

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        _accumulate(logits, (g / b) * p)

    return Tensor._result(out_data, (logits,), backward)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    _check_dtype(logits, targets)
    if logits.data.shape != targets.data.shape:
        raise DimensionError(
            f"bce_with_logits: shapes {logits.data.shape} and {targets.data.shape} differ"
        )
    z = logits.data
    t = targets.data
    n = z.size
    out_data = np.asarray(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))

    def backward(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accumulate(logits, (g / n) * (s - t))

    return Tensor._result(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable, inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f(*inputs)`` to central differences.

    Returns the maximum over all input elements of
    |g_analytic - g_fd| / max(1, |g_analytic|, |g_fd|). Requires double
    precision; float32 differences are too coarse to judge correctness.
    """
    if get_precision() != "double":
        raise ContractError("grad_check requires double precision mode")
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must all have requires_grad")
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(
            f"grad_check expects a scalar-valued function, got shape {out.data.shape}"
        )
    out.backward()
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data))
                for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(*inputs).item()
            flat[i] = orig - step
            f_minus = f(*inputs).item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * step)
            denom = max(1.0, abs(ga_flat[i]), abs(g_fd))
            worst = max(worst, abs(ga_flat[i] - g_fd) / denom)
    for t in inputs:
        t.zero_grad()
    return worst
