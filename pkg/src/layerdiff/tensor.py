"""Minimal reverse-mode autodiff on dense numpy arrays.

Only the operations the layered U-Net needs: convolution, batched matmul,
elementwise arithmetic with numpy broadcasting, reductions, reshapes,
nearest-neighbor upsampling, softmax, sigmoid/SiLU and an embedding gather.
float32 and float64 are the only supported dtypes; everything is
deterministic given identical inputs and dtype.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "set_check_finite",
    "concat",
    "conv2d",
    "matmul",
    "nearest_upsample",
    "softmax",
    "gather_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dims."""


class NonFiniteError(FloatingPointError):
    """Raised in check-finite mode when an op produces NaN or Inf."""


_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op result (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A node in the autodiff graph wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite value produced")
        return out

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return Tensor._make(out_data, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

        return Tensor._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data
        a, b = self.data, other.data

        def backward(g):
            return (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            )

        return Tensor._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise ShapeError("pow supports scalar exponents only")
        p = float(exponent)
        out_data = self.data**p
        x = self.data

        def backward(g):
            return (g * p * x ** (p - 1.0),)

        return Tensor._make(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self):
        out_data = _sigmoid(self.data)

        def backward(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, (self,), backward)

    def silu(self):
        s = _sigmoid(self.data)
        out_data = self.data * s
        x = self.data

        def backward(g):
            return (g * (s * (1.0 + x * (1.0 - s))),)

        return Tensor._make(out_data, (self,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            return (_spread(g, shape, axis, keepdims),)

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.shape
        count = self.data.size if axis is None else _axis_count(shape, axis)

        def backward(g):
            return (_spread(g, shape, axis, keepdims) / count,)

        return Tensor._make(out_data, (self,), backward)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, shape):
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def __getitem__(self, key):
        out_data = self.data[key]
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[key] = g
            return (gx,)

        return Tensor._make(out_data, (self,), backward)

    # -- autodiff driver --------------------------------------------------------

    def backward_graph(self):
        """Populate .grad on every reachable node requiring grad.

        The loss must be scalar. Gradients from a previous call are
        overwritten, never accumulated across calls.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        # iterative topo sort; graphs are deep enough to overflow recursion
        while stack:
            node, it = stack[-1]
            advanced = False
            for parent in it:
                if id(parent) not in seen and parent.requires_grad:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()

        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if g.shape != parent.data.shape:
                    g = g.reshape(parent.data.shape)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _spread(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


# -- free-function ops ---------------------------------------------------------


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out_data, tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]}"
        )
    out_data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out_data, (a, b), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    out_data = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor._make(out_data, (x,), backward)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample expects NCHW, got ndim {x.ndim}")
    f = int(factor)
    out_data = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return Tensor._make(out_data, (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: table[V, E] indexed by an integer array of ids."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(
            f"ids out of range [0, {table.shape[0]}): min {ids.min()} max {ids.max()}"
        )
    out_data = table.data[ids]
    v, e = table.shape

    def backward(g):
        gt = np.zeros((v, e), dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, e))
        return (gt,)

    return Tensor._make(out_data, (table,), backward)


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation (deep-learning convention), NCHW x OCkk -> NOHW."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got ndim {x.ndim}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be [O,C,k,k], got {weight.shape}")
    n, c, h, w = x.shape
    o, cw, k, _ = weight.shape
    if cw != c:
        raise ShapeError(
            f"conv2d channel mismatch: input has C={c}, weight expects C={cw}"
        )
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(
            f"kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")

    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)  # N,C,k,k,Ho,Wo
    cols_mat = cols.reshape(n, c * k * k, ho * wo)
    w_mat = weight.data.reshape(o, c * k * k)
    out_data = np.matmul(w_mat, cols_mat).reshape(n, o, ho, wo)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, o, 1, 1)

    hp, wp = h + 2 * padding, w + 2 * padding

    def backward(g):
        g_mat = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,ncp->oc", g_mat, cols_mat, optimize=True).reshape(
            o, c, k, k
        )
        gcols = np.matmul(w_mat.T, g_mat).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out_data, parents, backward)
