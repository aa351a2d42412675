"""Small reverse-mode autodiff core on top of float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
record a closure on the output tensor; :func:`backward` walks the recorded
graph in reverse topological order and accumulates ``.grad`` on leaves that
were created with ``requires_grad=True``.

Elementwise operations follow numpy broadcasting; gradients are summed back
to the operand shape.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

GUMBEL_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Wrap an op result, attaching it to the tape only if a parent needs grad."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    out.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad, out._parents, out._backward = True, parents, backward
    else:
        out.requires_grad, out._parents, out._backward = False, (), None
    return out


def scatter_rows(ids, values, n):
    """out[i] = sum of values[j] over j with ids[j] == i, for n output rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if values.ndim == 1:
        return np.bincount(ids, weights=values, minlength=n).astype(np.float64)
    flat = values.reshape(values.shape[0], -1)
    mat = sp.csr_matrix((np.ones(len(ids)), (ids, np.arange(len(ids)))), shape=(n, len(ids)))
    return np.asarray(mat @ flat).reshape((n,) + values.shape[1:])


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def _bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), _bw, "div")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x):
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def safe_reciprocal(x, eps=1e-12):
    """1/x where x > eps, 0 elsewhere."""
    x = as_tensor(x)
    ok = x.data > eps
    out = np.where(ok, 1.0 / np.where(ok, x.data, 1.0), 0.0)
    return _make(out, (x,), lambda g: (-g * out * out,), "safe_reciprocal")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), _bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + shift
    soft = e / s

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), _bw, "logsumexp")


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw, "softmax")


def log_softmax(x, axis=-1):
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def l2_normalize(x, axis=-1, eps=1e-12):
    """Scale slices along ``axis`` to unit Euclidean norm.

    Raises ValueError if any slice has norm below ``eps``.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise ValueError(f"l2_normalize: input has a slice with norm < {eps:g}")
    out = x.data / norm

    def _bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), _bw, "l2_normalize")


# ---------------------------------------------------------------- structure

def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, _bw, "concat")


def index(x, idx):
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    x = as_tensor(x)
    out = x.data[idx]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), _bw, "index")


def take_rows(x, rows):
    """Gather rows of a 2-D tensor (rows may repeat)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows]

    def _bw(g):
        return (scatter_rows(rows, g, x.shape[0]),)

    return _make(out, (x,), _bw, "take_rows")


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets given per-row ids."""
    x = as_tensor(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {ids.shape[0]} ids for input of shape {x.shape}")
    out = scatter_rows(ids, x.data, num_segments)
    return _make(out, (x,), lambda g: (g[ids],), "segment_sum")


def segment_softmax(logits, segment_ids, num_segments):
    """Softmax of a 1-D logit vector within each segment."""
    logits = as_tensor(logits)
    ids = np.asarray(segment_ids, dtype=np.int64)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, ids, logits.data)
    shifted = sub(logits, seg_max[ids])
    e = exp(shifted)
    denom = segment_sum(e, ids, num_segments)
    return div(e, take_rows(denom, ids))


def conv2d(x, w, b=None, stride=1):
    """Valid 2-D convolution, channels-last.

    x: (B, H, W, C), w: (k, k, C, O), b: (O,) -> (B, H', W', O)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    k, s = w.shape[0], stride
    B, H, W, C = x.shape
    oh, ow = (H - k) // s + 1, (W - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(1, 2))
    # win: (B, H-k+1, W-k+1, C, k, k)
    cols = win[:, ::s, ::s][:, :oh, :ow].transpose(0, 1, 2, 4, 5, 3).reshape(B * oh * ow, k * k * C)
    wmat = w.data.reshape(k * k * C, -1)
    out = (cols @ wmat).reshape(B, oh, ow, -1)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def _bw(g):
        g2 = g.reshape(B * oh * ow, -1)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, oh, ow, k, k, C)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, i:i + s * oh:s, j:j + s * ow:s, :] += gcols[:, :, :, i, j, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, _bw, "conv2d")


# ---------------------------------------------------------------- backward

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls add to existing gradients; use :func:`zero_grad` between
    steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ValueError(f"backward: loss must be a scalar tensor, got {shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {n: n.grad for n in order if n._backward is None}


def zero_grad(params):
    for p in params:
        p.grad = None


def finite_difference_grad(fn, param, h=1e-5, entries=None):
    """Central-difference gradient of scalar ``fn()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored. ``entries`` restricts
    the check to a subset of flat indices.
    """
    flat = param.data.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    out = {}
    for i in entries:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[int(i)] = (up - down) / (2 * h)
    return out


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded PCG64 stream. Same seed gives the same sample sequence."""

    def __init__(self, seed):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @property
    def generator(self):
        return self._gen

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def gumbel_sample(rng, n):
    """Draw ``n`` standard Gumbel samples as a constant tensor."""
    if n < 1:
        raise ValueError(f"gumbel_sample: n must be >= 1, got {n}")
    return Tensor(gumbel_from_uniform(rng.uniform(size=n)))
