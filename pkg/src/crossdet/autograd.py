"""Minimal dense tensor with reverse-mode automatic differentiation.

Only the operations the detection model needs are implemented; everything
runs on numpy arrays. The graph is built implicitly through parent links,
and ``Tensor.backward`` walks it once in reverse topological order.
"""

import math

import numpy as np

_DTYPE = np.float64
_NAN_GUARD = True


class NumericError(FloatingPointError):
    """A documented operation produced NaN/Inf from finite inputs."""


def set_dtype(dtype):
    """Set the global precision mode (np.float64 for oracles/tests,
    np.float32 permitted for training loops)."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be np.float32 or np.float64")
    _DTYPE = dtype


def get_dtype():
    return _DTYPE


def set_nan_guard(enabled):
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


def _guard(arr, opname):
    if _NAN_GUARD and not np.all(np.isfinite(arr)):
        raise NumericError(f"{opname} produced non-finite values")
    return arr


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        The loss must be scalar. Repeated calls without zeroing grads
        accumulate (explicit-reset contract).
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward, opname):
    data = _guard(np.asarray(data, dtype=_DTYPE), opname)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _row_broadcastable(a_shape, b_shape):
    # the only broadcast the model's math needs: row vector over matrix rows
    return (
        len(a_shape) == 2
        and (b_shape == (a_shape[1],) or b_shape == (1, a_shape[1]))
    )


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _row_broadcastable(a.shape, b.shape):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            gb = g if b.shape == a.shape else g.sum(axis=0).reshape(b.shape)
            b._accumulate(gb)

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    return add(a, scale(b, -1.0))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        a._accumulate(c * g)

    return _make(a.data * c, (a,), backward, "scale")


def hadamard(a, b):
    """Elementwise product; b may be a row vector broadcast over a's rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _row_broadcastable(a.shape, b.shape):
        raise ValueError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g * b.data)
        if b.requires_grad or b._parents:
            gb = g * a.data
            if b.shape != a.shape:
                gb = gb.sum(axis=0).reshape(b.shape)
            b._accumulate(gb)

    return _make(a.data * b.data, (a, b), backward, "hadamard")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), backward, "transpose")


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def relu(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def softmax_rows(a):
    """Row-wise softmax with per-row max subtraction for stability."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax_rows")


def mean_pool(a, axis):
    a = as_tensor(a)
    if axis >= a.ndim:
        raise ValueError(f"mean_pool: axis {axis} out of range for rank {a.ndim}")
    n = a.shape[axis]
    if n == 0:
        raise ValueError("mean_pool: empty axis extent")

    def backward(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy())

    return _make(a.data.mean(axis=axis), (a,), backward, "mean_pool")


def sum_all(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.full(a.shape, float(g)))

    return _make(a.data.sum(), (a,), backward, "sum_all")


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)


def absolute(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward, "absolute")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"maximum: shapes differ {a.shape} vs {b.shape}")
    mask = a.data >= b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g * mask)
        if b.requires_grad or b._parents:
            b._accumulate(g * ~mask)

    return _make(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"minimum: shapes differ {a.shape} vs {b.shape}")
    mask = a.data <= b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g * mask)
        if b.requires_grad or b._parents:
            b._accumulate(g * ~mask)

    return _make(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def divide(a, b):
    """Elementwise a/b; b must be bounded away from zero by the caller."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"divide: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g / b.data)
        if b.requires_grad or b._parents:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward, "divide")


def add_const(a, c):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g)

    return _make(a.data + c, (a,), backward, "add_const")


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad or p._parents:
                p._accumulate(g[off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=0),
                 tuple(parts), backward, "concat_rows")


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad or p._parents:
                p._accumulate(g[:, off:off + n])
            off += n

    return _make(np.concatenate([p.data for p in parts], axis=1),
                 tuple(parts), backward, "concat_cols")


def gather_rows(a, indices):
    """Select rows by index; backward scatter-adds (duplicates accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accumulate(ga)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def slice_cols(a, start, end):
    a = as_tensor(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, start:end] = g
        a._accumulate(ga)

    return _make(a.data[:, start:end], (a,), backward, "slice_cols")


def layer_norm_rows(x, gain, bias, eps=1e-5):
    """Per-row layer normalization with learned scale/shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    out_data = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad or bias._parents:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            # standard layer-norm backward, fused per row
            dx = ivar * (dxhat
                         - dxhat.mean(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            x._accumulate(dx)

    return _make(out_data, (x, gain, bias), backward, "layer_norm_rows")


def cross_entropy_logits(logits, targets, weights=None):
    """Mean over rows of -log softmax(logits)[i, targets[i]].

    Optional per-row weights turn the plain mean into a weighted mean
    (normalized by the weight sum).
    """
    logits = as_tensor(logits)
    idx = np.asarray(targets, dtype=np.intp)
    n, v = logits.shape
    if idx.shape != (n,):
        raise ValueError(f"cross_entropy_logits: need {n} targets, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"cross_entropy_logits: target index out of range [0,{v})")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out_data = -(w * logp[np.arange(n), idx]).sum() / wsum

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), idx] -= 1.0
        logits._accumulate(float(g) * (w[:, None] * p) / wsum)

    return _make(out_data, (logits,), backward, "cross_entropy_logits")


def check_finite(t, context=""):
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values{': ' + context if context else ''}")
    return t


def finite_difference_grad(f, x, step=1e-5):
    """Central finite differences of a scalar-valued f w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g
