"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable quantity in this repo lives in a :class:`Tensor`.
Forward ops build a graph of vector-Jacobian-product closures; ``backward``
on a scalar walks the graph in reverse topological order and accumulates
``grad`` buffers (+=) on every reachable tensor with ``requires_grad``.

Conventions:
  * float64 everywhere; data is row-major numpy.
  * Tensors are immutable after construction except ``grad`` (and ``data``
    of leaf parameters, which optimizers update between graphs).
  * Broadcasting is supported for elementwise ops (bias-add, scalar ops);
    matmul is strictly 2-D.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, ShapeError, TruncatedFileError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph and from gradients."""
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    # arithmetic operators -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(_as_tensor(other), self)

    def __truediv__(self, other):
        return divide(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return divide(_as_tensor(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "subtract")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "multiply")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def divide(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "divide")
    if np.any(b.data == 0.0):
        raise DomainError("divide: divisor contains zero")
    inv = 1.0 / b.data
    return _node(a.data * inv, (a, b),
                 lambda g: (_unbroadcast(g * inv, a.shape),
                            _unbroadcast(-g * a.data * inv * inv, b.shape)))


def negate(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input contains nonpositive values")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input contains negative values")
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: default transpose expects 2-D, got {a.shape}")
        return _node(a.data.T, (a,), lambda g: (g.T,))
    inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    old = a.shape
    return _node(out_data, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices, no fancy indexing); gradient scatters back."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def vjp(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _node(out_data, (a,), vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 by integer index (duplicates allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(a.data[idx], (a,), vjp)


def take_pairs(a: Tensor, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] into a 1-D tensor (duplicates allowed)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_pairs: expected 2-D tensor, got {a.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (r, c), g)
        return (z,)

    return _node(a.data[r, c], (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)
    return _node(out_data, (a,),
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize along the last axis: (x - mean) / sqrt(var + eps). No affine."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - y * gym),)

    return _node(y, (a,), vjp)


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    if axis is None:
        return _node(np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _node(a.data.mean(axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every reachable requires_grad tensor.

    `loss` must be a scalar. Calling twice without zero_grad accumulates.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    pass_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = pass_grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = pass_grads.get(id(parent))
            pass_grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def _eval_scalar(f: Callable[[], object]) -> float:
    v = f()
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def finite_difference(f: Callable[[], object], params: Sequence[Tensor],
                      eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient estimate of scalar f() w.r.t. each param.

    f is a zero-argument callable re-running the computation on the live
    param tensors; their .data is perturbed in place and restored.
    """
    if eps <= 0:
        raise DomainError("finite_difference: eps must be positive")
    grads = []
    for p in params:
        g = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval_scalar(f)
            flat[i] = orig - eps
            fm = _eval_scalar(f)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def finite_difference_at(f: Callable[[], object], param: Tensor, flat_index: int,
                         eps: float = 1e-5) -> float:
    """Central difference for a single flat coordinate of `param`."""
    if eps <= 0:
        raise DomainError("finite_difference_at: eps must be positive")
    flat = param.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    fp = _eval_scalar(f)
    flat[flat_index] = orig - eps
    fm = _eval_scalar(f)
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * eps)


# ---------------------------------------------------------------------------
# binary serialization: u32 rank, rank x u64 dims, little-endian f64 row-major
# ---------------------------------------------------------------------------

def write_array(stream: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d, but 0-d is always contiguous
    stream.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        stream.write(struct.pack("<Q", d))
    stream.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_array(stream: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = [struct.unpack("<Q", _read_exact(stream, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    raw = _read_exact(stream, count * 8)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
