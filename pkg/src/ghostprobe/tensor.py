"""Dense tensor with reverse-mode automatic differentiation.

Values are numpy arrays, float32 by default.  Every op that sees a
gradient-tracked input records its parents and a backward closure on the
output; ``backward(loss)`` replays the tape in reverse topological order.
A float64 mode exists for finite-difference gradient checking, where
float32 rounding would swamp the comparison.

Layout conventions: image tensors are [B, C, H, W]; point-feature tensors
are [B, N, D]; attention operates on [B, rows, cols] with softmax over the
last axis.
"""

import contextlib

import numpy as np

from .errors import DomainError, NumericsError, ShapeError

# When True every op output is scanned for NaN/Inf; enabled on demand to
# locate the first bad op after a NaN loss (too slow to leave on always).
_nan_guard = False

# When False, ops skip tape recording and outputs never require gradients.
_grad_enabled = True


def set_nan_guard(enabled):
    global _nan_guard
    _nan_guard = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the tape.

    Inference-only code should use this: each recorded op closes over its
    inputs and output, forming reference cycles that keep large buffers
    alive until the cyclic collector runs.  Enter and exit on one thread;
    worker threads may run forwards while the context is held.
    """
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in (np.float32, np.float64):
            raise ShapeError(f"tensors hold float32/float64 data, got {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Gradient buffer; materialized as zeros on first access."""
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        if self._grad is not None:
            self._grad.fill(0.0)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result_dtype(*tensors):
    dt = np.float32
    for t in tensors:
        if t.data.dtype == np.float64:
            dt = np.float64
    return dt


def _make(data, parents, backward_fn, op_name):
    """Wrap an op result, wiring the tape when any parent tracks gradients."""
    if _nan_guard and not np.all(np.isfinite(data)):
        raise NumericsError(op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    if t.requires_grad:
        buf = t.grad
        buf += g


def _unbroadcast(g, shape):
    """Reduce gradient g back to the pre-broadcast operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- graph traversal ---------------------------------------------------------


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(x) to every gradient-tracked tensor in the graph.

    ``loss`` must be scalar.  Parameters not reachable from the loss keep
    their (zero) gradient buffers untouched.  The tape is single-use: each
    node's closure and parent links are released as the sweep passes it, so
    intermediate buffers free by reference count instead of lingering in
    closure cycles until the garbage collector notices them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad[...] = 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
        node._backward = None
        node._parents = ()


# -- elementwise and structural ops ------------------------------------------


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        data = a.data + np.asarray(b, dtype=a.data.dtype)

        def bwd():
            _accum(a, _unbroadcast(out.grad, a.shape))

        out = _make(data, (a,), bwd, "add")
        return out
    data = a.data + b.data

    def bwd():
        g = out.grad
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    out = _make(data, (a, b), bwd, "add")
    return out


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        data = a.data * c

        def bwd():
            _accum(a, _unbroadcast(out.grad * c, a.shape))

        out = _make(data, (a,), bwd, "mul")
        return out
    data = a.data * b.data

    def bwd():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    out = _make(data, (a, b), bwd, "mul")
    return out


def matmul(a, b):
    """Matrix product with numpy batching: (..., M, K) @ (..., K, N)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd():
        g = out.grad
        _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    out = _make(data, (a, b), bwd, "matmul")
    return out


def relu(x):
    data = np.maximum(x.data, 0.0)

    def bwd():
        _accum(x, out.grad * (x.data > 0.0))

    out = _make(data, (x,), bwd, "relu")
    return out


def sigmoid(x):
    # split by sign to avoid exp overflow
    d = x.data
    data = np.empty_like(d)
    pos = d >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd():
        _accum(x, out.grad * data * (1.0 - data))

    out = _make(data, (x,), bwd, "sigmoid")
    return out


def reshape(x, shape):
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def bwd():
        _accum(x, out.grad.reshape(x.shape))

    out = _make(data, (x,), bwd, "reshape")
    return out


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd():
        _accum(x, out.grad.transpose(inv))

    out = _make(data, (x,), bwd, "transpose")
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            _accum(t, g)

    out = _make(data, tuple(tensors), bwd, "concat")
    return out


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(x.data[idx])

    def bwd():
        g = np.zeros_like(x.data)
        g[idx] = out.grad
        _accum(x, g)

    out = _make(data, (x,), bwd, "narrow")
    return out


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.data.dtype)

    def bwd():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    out = _make(data, (x,), bwd, "sum")
    return out


def mean(x):
    n = x.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd():
        _accum(x, np.broadcast_to(out.grad / n, x.shape))

    out = _make(data, (x,), bwd, "mean")
    return out


def reduce_max(x, axis, keepdims=False):
    """Max along one axis; ties route the gradient to the first maximum."""
    data = x.data.max(axis=axis, keepdims=keepdims)
    amax = np.argmax(x.data, axis=axis)

    def bwd():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(amax, axis), g, axis=axis)
        _accum(x, gx)

    out = _make(data, (x,), bwd, "max")
    return out


def softmax_rows(x):
    """Softmax over the last axis; each row is nonnegative and sums to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd():
        g = out.grad
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(x, data * (g - inner))

    out = _make(data, (x,), bwd, "softmax_rows")
    return out


def gather_points(x, idx):
    """Select rows of a point set: x [B,N,D], idx [B,M] or [B,M,K] -> [B,M(,K),D].

    Indices are data (no gradient); gradients scatter-add back into x.
    """
    if x.ndim != 3:
        raise ShapeError(f"gather_points expects [B,N,D], got {x.shape}")
    idx = np.asarray(idx)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError("gather_points batch extents differ")
    B, N, D = x.shape
    flat = idx.reshape(B, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= N):
        raise ShapeError("gather_points index out of range")
    batch = np.arange(B)[:, None]
    data = np.ascontiguousarray(x.data[batch, flat].reshape(idx.shape + (D,)))

    def bwd():
        g = out.grad.reshape(B, -1, D)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, flat), g)
        _accum(x, gx)

    out = _make(data, (x,), bwd, "gather_points")
    return out


# -- image ops ---------------------------------------------------------------


def _conv_out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    # padded [B,C,Hp,Wp] -> [B, C*kh*kw, ho*wo]; plain slice copies keep this
    # in BCHW-native order so no transpose is needed anywhere in conv2d
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation: x [B,C,H,W], w [O,C,kh,kw], b [O] -> [B,O,H',W']."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weights expect {Cw}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d input {H}x{W} smaller than kernel {kh}x{kw} after padding")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({O},)")
    ho = _conv_out_extent(H, kh, stride, padding)
    wo = _conv_out_extent(W, kw, stride, padding)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(O, C * kh * kw)
    data = np.matmul(wmat, cols).reshape(B, O, ho, wo)
    if b is not None:
        data += b.data[None, :, None, None]

    def bwd():
        g = out.grad
        gf = g.reshape(B, O, ho * wo)
        if w.requires_grad:
            _accum(w, np.matmul(gf, cols.swapaxes(1, 2)).sum(axis=0).reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            qh, qw = kh - 1 - p, kw - 1 - p
            if stride == 1 and qh >= 0 and qw >= 0:
                # input gradient = correlation of the output gradient with the
                # channel-transposed, spatially flipped kernel
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw))) if qh or qw else g
                gcols = _im2col(gp, kh, kw, 1, H, W)
                _accum(x, np.matmul(wt.reshape(C, O * kh * kw), gcols).reshape(B, C, H, W))
            else:
                gcols = np.matmul(wmat.T, gf).reshape(B, C, kh, kw, ho, wo)
                gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                _accum(x, gxp[:, :, p:p + H, p:p + W])

    parents = (x, w) if b is None else (x, w, b)
    out = _make(data, parents, bwd, "conv2d")
    return out


def transpose_conv2x2(x, w, b=None):
    """2x2 stride-2 transpose convolution: doubles H and W.

    x [B,C,H,W], w [C,O,2,2], b [O] -> [B,O,2H,2W].  Stride equals the
    kernel so output taps never overlap.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"transpose_conv2x2 expects [B,C,H,W] and [C,O,2,2], got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Cw, O = w.shape[0], w.shape[1]
    if C != Cw:
        raise ShapeError(f"transpose_conv2x2 channel mismatch: input has {C}, weights expect {Cw}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"transpose_conv2x2 bias shape {b.shape} != ({O},)")
    xf = x.data.reshape(B, C, H * W)
    # all four taps in one GEMM: rows of wflat are (o, di, dj) triples, so the
    # product unpacks to [B,O,2,2,H,W] and interleaves into [B,O,2H,2W]
    wflat = np.ascontiguousarray(w.data.reshape(C, O * 4).T)
    taps = np.matmul(wflat, xf).reshape(B, O, 2, 2, H, W)
    data = taps.transpose(0, 1, 4, 2, 5, 3).reshape(B, O, 2 * H, 2 * W)
    if b is not None:
        data += b.data[None, :, None, None]

    def bwd():
        g = out.grad
        gtaps = np.ascontiguousarray(
            g.reshape(B, O, H, 2, W, 2).transpose(0, 1, 3, 5, 2, 4)).reshape(B, O * 4, H * W)
        if x.requires_grad:
            gx = np.matmul(wflat.T, gtaps)
            _accum(x, gx.reshape(B, C, H, W))
        if w.requires_grad:
            gw = np.matmul(xf, gtaps.swapaxes(1, 2)).sum(axis=0)
            _accum(w, gw.reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    out = _make(data, parents, bwd, "transpose_conv2x2")
    return out


def maxpool2x2(x):
    """2x2 max pooling, stride 2; requires even spatial extents."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 requires even spatial extents, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    amax = win.argmax(axis=-1)
    data = np.ascontiguousarray(np.take_along_axis(win, amax[..., None], axis=-1)[..., 0])

    def bwd():
        gw = np.zeros_like(win)
        np.put_along_axis(gw, amax[..., None], out.grad[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accum(x, gx)

    out = _make(data, (x,), bwd, "maxpool2x2")
    return out


def concat_channels(a, b):
    """Channel concatenation of [B,C,H,W] maps."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-d inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels extents differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def flatten_spatial(x):
    """[B,C,H,W] -> [B, H*W, C] (row-major over pixels)."""
    if x.ndim != 4:
        raise ShapeError(f"flatten_spatial expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (B, H * W, C))


# -- loss --------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps].

    ``target`` is data (0/1 mask), never differentiated.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss target shape {t.shape} != prediction shape {pred.shape}")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("bce_loss targets must lie in [0, 1]")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = pred.size
    data = np.asarray((-(t * np.log(p) + (1.0 - t) * np.log1p(-p))).mean(), dtype=pred.data.dtype)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def bwd():
        g = out.grad / n
        _accum(pred, g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)))

    out = _make(data, (pred,), bwd, "bce_loss")
    return out
