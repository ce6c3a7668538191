"""
Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the handful of operations needed by the model zoo and the attack losses
are provided. Every operation is a plain function that takes ``Tensor``
inputs, computes its value eagerly and, when any input requires gradients,
attaches a ``Node`` holding the inputs and a closure computing the adjoint.
``backward`` walks the resulting DAG in reverse topological order.

Values are float32. Scalar reductions (``reduce_mean`` / ``reduce_sum``)
accumulate and return float64 so that small loss terms can be summed and
logged without float32 round-off; gradients are cast back to each input's
dtype on the way down.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Node:
    """One recorded operation: kind, inputs, and the adjoint closure."""

    __slots__ = ("kind", "inputs", "adjoint")

    def __init__(self, kind, inputs, adjoint):
        self.kind = kind
        self.inputs = inputs
        self.adjoint = adjoint

    def __repr__(self):
        return f"Node({self.kind}, n_inputs={len(self.inputs)})"


class Tensor:
    """Array with optional gradient tracking.

    ``grad`` is allocated lazily on the first backward pass touching the
    tensor and accumulates additively until ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar used by tests and the loss code
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, factor):
        return scale(self, factor)

    __rmul__ = __mul__


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, kind, inputs, adjoint):
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, tuple(inputs), adjoint)
    return out


def _cast(g, like):
    return g if g.dtype == like.dtype else g.astype(like.dtype)


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Topologically ordered operation records reachable from one output."""

    def __init__(self, output):
        self.output = output
        self.order = []
        seen = set()
        # iterative DFS; recursion would overflow on long chains
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))

    @property
    def nodes(self):
        return [t.node for t in self.order if t.node is not None]

    def __len__(self):
        return len(self.order)


def backward(loss):
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is detached from any tensor requiring grad")

    graph = Graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                g = _cast(np.asarray(g).reshape(t.shape), t.data)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        input_grads = t.node.adjoint(g)
        for parent, pg in zip(t.node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# operations


def dense(x, weight, bias=None):
    """``x @ weight + bias`` with ``x`` [batch, in] and ``weight`` [in, out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("dense", f"input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("dense", f"bias {bias.shape} does not match out features {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def adjoint(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "dense", inputs, adjoint)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, weight [out, in, kh, kw].

    Lowered to a single GEMM over unfolded patches.
    """
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected NCHW input and 4-d weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d", f"bias {bias.shape} does not match {o} output channels")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def adjoint(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, "conv2d", inputs, adjoint)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def adjoint(g):
        return (g * mask,)

    return _record(out, "relu", (x,), adjoint)


def _pool_windows(op, x, size, stride):
    if x.ndim != 4:
        raise ShapeError(op, f"expected NCHW input, got {x.shape}")
    stride = size if stride is None else stride
    if size < 1 or stride < 1:
        raise ShapeError(op, f"size and stride must be >= 1, got {size}, {stride}")
    h, w = x.shape[2:]
    if size > h or size > w:
        raise ShapeError(op, f"window {size} larger than input {h}x{w}")
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    win = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win, stride, ho, wo


def _scatter_windows(gwin, shape, size, stride, ho, wo):
    # gwin: [n, c, ho, wo, size, size] -> gradient on the input grid
    gx = np.zeros(shape, dtype=gwin.dtype)
    for i in range(size):
        for j in range(size):
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gwin[..., i, j]
    return gx


def maxpool2d(x, size=2, stride=None):
    """Max pooling; the first maximal element in each window takes the gradient."""
    win, stride, ho, wo = _pool_windows("maxpool2d", x, size, stride)
    flat = win.reshape(*win.shape[:4], size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (_scatter_windows(gflat.reshape(win.shape), x.shape, size, stride, ho, wo),)

    return _record(np.ascontiguousarray(out), "maxpool2d", (x,), adjoint)


def avgpool2d(x, size=2, stride=None):
    win, stride, ho, wo = _pool_windows("avgpool2d", x, size, stride)
    out = win.mean(axis=(-2, -1), dtype=x.dtype)

    def adjoint(g):
        gwin = np.broadcast_to((g / (size * size))[..., None, None], win.shape)
        return (_scatter_windows(gwin, x.shape, size, stride, ho, wo),)

    return _record(out, "avgpool2d", (x,), adjoint)


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    if x.ndim < 1:
        raise ShapeError("flatten", "cannot flatten a scalar")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def adjoint(g):
        return (g.reshape(shape),)

    return _record(out, "flatten", (x,), adjoint)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    """Elementwise sum. ``b`` may broadcast onto ``a`` (bias-style), not the reverse."""
    try:
        bshape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        bshape = None
    if bshape != a.shape:
        raise ShapeError("add", f"second operand {b.shape} does not broadcast onto {a.shape}")
    out = a.data + b.data
    if out.dtype != a.dtype:
        out = out.astype(a.dtype)

    def adjoint(g):
        gb = _cast(_unbroadcast(g, b.shape), b.data) if b.requires_grad else None
        return _cast(g, a.data), gb

    return _record(out, "add", (a, b), adjoint)


def sub(a, b):
    return add(a, scale(b, -1.0))


def scale(x, factor):
    """Multiply by a constant: a Python scalar or an array broadcasting onto ``x``."""
    f = np.asarray(factor, dtype=x.dtype)
    if np.broadcast_shapes(x.shape, f.shape) != x.shape:
        raise ShapeError("scale", f"factor {f.shape} does not broadcast onto {x.shape}")
    out = x.data * f

    def adjoint(g):
        return (g * f,)

    return _record(out, "scale", (x,), adjoint)


def clamp(x, lo=None, hi=None):
    """Elementwise clip; gradient passes where ``lo <= x <= hi`` (boundaries included)."""
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)

    def adjoint(g):
        return (g * mask,)

    return _record(out, "clamp_elementwise", (x,), adjoint)


clamp_elementwise = clamp


def _check_rows(op, logits, index, *, allow_scalar=True):
    if logits.ndim != 2:
        raise ShapeError(op, f"expected [batch, C] logits, got {logits.shape}")
    b, c = logits.shape
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim == 0 and allow_scalar:
        idx = np.full(b, int(idx), dtype=np.int64)
    if idx.shape != (b,):
        raise ShapeError(op, f"index shape {idx.shape} does not match batch {b}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise IndexError(f"{op}: class index out of range [0, {c})")
    return idx


def pick(logits, index):
    """Row-wise gather ``logits[i, index[i]]``."""
    idx = _check_rows("pick", logits, index)
    rows = np.arange(logits.shape[0])
    out = logits.data[rows, idx]

    def adjoint(g):
        gx = np.zeros_like(logits.data)
        gx[rows, idx] = g
        return (gx,)

    return _record(out, "pick", (logits,), adjoint)


def reduce_max_excluding(logits, excluded):
    """Per-row max over every class except ``excluded[i]``.

    Ties resolve to the lowest class index, which alone receives gradient.
    """
    if logits.ndim == 2 and logits.shape[1] < 2:
        raise ShapeError("reduce_max_excluding", "needs at least 2 classes")
    idx = _check_rows("reduce_max_excluding", logits, excluded)
    rows = np.arange(logits.shape[0])
    masked = logits.data.copy()
    masked[rows, idx] = -np.inf
    arg = masked.argmax(axis=1)
    out = logits.data[rows, arg]

    def adjoint(g):
        gx = np.zeros_like(logits.data)
        gx[rows, arg] = g
        return (gx,)

    return _record(out, "reduce_max_excluding", (logits,), adjoint)


def take_rows(x, start, stop):
    """Rows ``start:stop`` along the leading axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError("take_rows", f"row range {start}:{stop} outside batch of {x.shape[0]}")
    out = x.data[start:stop]

    def adjoint(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _record(out, "take_rows", (x,), adjoint)


def reduce_mean(x):
    n = x.data.size
    if n == 0:
        raise ShapeError("reduce_mean", "empty input")
    out = np.asarray(x.data.mean(dtype=np.float64))

    def adjoint(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _record(out, "reduce_mean", (x,), adjoint)


def reduce_sum(x):
    out = np.asarray(x.data.sum(dtype=np.float64))

    def adjoint(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record(out, "reduce_sum", (x,), adjoint)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Per-row cross-entropy between ``softmax(logits)`` and one-hot ``targets``; returns [batch]."""
    idx = _check_rows("softmax_cross_entropy_from_logits", logits, targets)
    rows = np.arange(logits.shape[0])
    lsm = log_softmax(logits.data)
    out = -lsm[rows, idx]

    def adjoint(g):
        gx = np.exp(lsm)
        gx[rows, idx] -= 1
        return (gx * g[:, None],)

    return _record(out, "softmax_cross_entropy_from_logits", (logits,), adjoint)


softmax_cross_entropy_from_logits = softmax_cross_entropy


_KINDS = {
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "flatten": flatten,
    "add": add,
    "scale": scale,
    "clamp_elementwise": clamp,
    "reduce_max_excluding": reduce_max_excluding,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "softmax_cross_entropy_from_logits": softmax_cross_entropy,
    "pick": pick,
    "take_rows": take_rows,
}


def forward_op(kind, inputs, **params):
    """Dispatch by operation name; ``params`` are the op's keyword attributes."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **params)
