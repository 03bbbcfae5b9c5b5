"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 or float64) plus optional gradient
state.  Operations record their inputs and a backward closure on the output,
so the computation graph doubles as the tape: node order is recovered by a
topological sort at ``backward`` time and every node is visited exactly once.
Gradients accumulate additively into ``.grad`` for tensors used more than
once.  A graph can be backpropagated a single time; a second ``backward`` on
the same loss raises instead of silently double-accumulating.

Layout is NCHW row-major throughout.  Broadcasting follows numpy's trailing
dimension rules, with gradients summed back onto the original shapes.
"""

from __future__ import annotations

import numpy as np

LOG_CLAMP = 1e-12

_DTYPES = (np.float32, np.float64)


class Tensor:
    """n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below are the actual implementation
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Backpropagate from a scalar loss through the recorded graph."""
        backward(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a, b):
    if a.data.dtype != b.data.dtype:
        raise TypeError(
            f"mixed dtypes in one graph: {a.data.dtype} vs {b.data.dtype}")


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a buffer shared with another parent's gradient
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were expanded by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _require_broadcastable(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_dtype(a, b)
    _require_broadcastable(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def sub(a, b):
    _check_same_dtype(a, b)
    _require_broadcastable(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "sub")


def mul(a, b):
    _check_same_dtype(a, b)
    _require_broadcastable(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def div(a, b):
    _check_same_dtype(a, b)
    _require_broadcastable(a, b, "div")
    out_data = a.data / b.data

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward_fn, "div")


def scale(a, c):
    """Multiply by a python constant; the constant is not differentiated."""
    c = float(c)
    out_data = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward_fn(g):
        _accumulate(a, g * np.asarray(c, dtype=a.data.dtype))

    return _make(out_data, (a,), backward_fn, "scale")


def relu(a):
    out_data = np.maximum(a.data, 0)

    def backward_fn(g):
        # subgradient at 0 is taken as 0 (dead-unit convention)
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward_fn, "relu")


def sigmoid(a):
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward_fn, "sigmoid")


def exp(a):
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward_fn, "exp")


def log(a):
    """Natural log of the input clamped to >= 1e-12, so the result is finite."""
    clamped = np.maximum(a.data, LOG_CLAMP)
    out_data = np.log(clamped)

    def backward_fn(g):
        _accumulate(a, g * (a.data > LOG_CLAMP) / clamped)

    return _make(out_data, (a,), backward_fn, "log")


def clamp_min(a, floor):
    floor = float(floor)
    out_data = np.maximum(a.data, floor)

    def backward_fn(g):
        _accumulate(a, g * (a.data > floor))

    return _make(out_data, (a,), backward_fn, "clamp_min")


# ---------------------------------------------------------------------------
# shape and reduction operations
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward_fn, "reshape")


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects rank-2, got shape {a.data.shape}")
    out_data = a.data.T.copy()

    def backward_fn(g):
        _accumulate(a, g.T)

    return _make(out_data, (a,), backward_fn, "transpose")


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def gather_rows(a, indices):
    """Select rows of a rank-2 tensor; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows expects rank-2, got shape {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    out_data = a.data[idx]

    def backward_fn(g):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(out_data, (a,), backward_fn, "gather_rows")


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward_fn, "matmul")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    """Patch matrix in (C*kh*kw, N*Ho*Wo) layout so one gemm covers the batch."""
    n, c, _, _ = xp.shape
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation over NCHW input, full backward for both operands."""
    _check_same_dtype(x, kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects rank-4 input and kernel, got {x.data.shape} and {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin != cin_k:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    stride = int(stride)
    padding = int(padding)
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d output extent is not integral for input {x.data.shape}, "
            f"kernel {kernel.data.shape}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output extent not positive: {ho}x{wo}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)           # (Cin*kh*kw, N*Ho*Wo)
    wm = kernel.data.reshape(cout, cin * kh * kw)
    out2 = wm @ cols                                     # (Cout, N*Ho*Wo)
    out_data = np.ascontiguousarray(
        out2.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout,
                                                                   n * ho * wo)
        if kernel.requires_grad:
            _accumulate(kernel, (g2 @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = wm.T @ g2
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    return _make(out_data, (x, kernel), backward_fn, "conv2d")


def global_avg_pool(x):
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects rank-4, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(
            (g / (h * w))[:, :, None, None], x.data.shape).copy())

    return _make(out_data, (x,), backward_fn, "global_avg_pool")


def softmax(x):
    """Row softmax of a rank-2 tensor, computed with max subtraction."""
    if x.data.ndim != 2:
        raise ValueError(f"softmax expects rank-2, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), backward_fn, "softmax")


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _toposort(root):
    """Order the graph reached from root so every node follows its inputs."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad tensor.

    The loss must be a scalar (a single element).  Each graph may be
    backpropagated once; reset by building a fresh graph (and zeroing
    parameter grads between steps).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward already ran on this graph; rebuild the graph "
                           "instead of re-accumulating")
    loss._backward_ran = True
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # free intermediate graph state so activations can be collected
    for node in order:
        if node is not loss and node._backward is not None:
            node._parents = ()
            node._backward = None


def grad_of(t):
    """Gradient array for a parameter, exact zeros when it went unused."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad
