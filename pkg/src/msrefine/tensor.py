"""Dense tensors with eager reverse-mode autodiff.

Every op below builds its result eagerly. When grad mode is on and at least one
input participates in a graph, the result carries a ``_Node`` recording the op,
its inputs, and a closure mapping the output gradient to input gradients.
``backward`` walks those nodes in reverse topological order, accumulates into
``.grad`` of leaf tensors only, then frees the graph.

Images use channels-first layout: ``C x H x W`` or batched ``N x C x H x W``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DegenerateMaskError, GraphError, NonFiniteError, ShapeError

_state = threading.local()
_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Set the dtype used when tensors are built from Python/numpy values."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


def _frozen_ids():
    ids = getattr(_state, "frozen", None)
    if ids is None:
        ids = _state.frozen = set()
    return ids


@contextlib.contextmanager
def frozen(tensors):
    """Treat ``tensors`` as constants on the current thread.

    Other threads still see the tensors' own ``requires_grad`` flags, so a
    shared model can be frozen by concurrent refinement sessions.
    """
    ids = _frozen_ids()
    added = {id(t) for t in tensors} - ids
    ids.update(added)
    try:
        yield
    finally:
        ids.difference_update(added)


class Tensor:
    __slots__ = ("data", "_requires_grad", "grad", "_node", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._consumed = False

    @property
    def requires_grad(self):
        if not self._requires_grad:
            return False
        ids = getattr(_state, "frozen", None)
        return not ids or id(self) not in ids

    @requires_grad.setter
    def requires_grad(self, flag):
        self._requires_grad = bool(flag)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t._consumed = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _make(op, data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        out._node = _Node(op, parents, backward_fn)
    return out


def backward(loss):
    """Backpropagate from a scalar ``loss`` into every reachable leaf.

    Leaf gradients accumulate until cleared with ``zero_grad``. The graph is
    released afterwards; calling ``backward`` on it again raises ``GraphError``.
    """
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a graph")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    for t in order:
        if t._node is not None:
            t._node = None
            t._consumed = True


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g if a.data.ndim else g.sum()
        gb = g if b.data.ndim else g.sum()
        return ga, gb

    return _make("add", a.data + b.data, (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def tsum(a):
    a = as_tensor(a)
    return _make("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    return _make("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def leaky_relu(x, slope=0.2):
    """max(x, slope*x) for slope <= 1; the gradient at exactly 0 is 1."""
    x = as_tensor(x)
    d = x.data
    out = np.where(d >= 0, d, d * d.dtype.type(slope))
    return _make("leaky_relu", out, (x,), lambda g: (np.where(d >= 0, g, g * slope),))


def sigmoid(x):
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def crop(x, top, left, height, width):
    """Spatial crop of the trailing two axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ShapeError(f"crop window out of bounds for spatial size {(H, W)}")
    out = x.data[..., top:top + height, left:left + width].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return _make("crop", out, (x,), bw)


# ------------------------------------------------------------- convolution


def _batched(x):
    return (x[None], True) if x.ndim == 3 else (x, False)


def _pad2(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(n, k, stride):
    return (n - k) // stride + 1


def _im2col(xp, k, stride):
    """Patches of padded ``xp`` (N,C,Hp,Wp) as a (C*k*k, N*Ho*Wo) matrix."""
    N, C, Hp, Wp = xp.shape
    Ho, Wo = _out_size(Hp, k, stride), _out_size(Wp, k, stride)
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, N, Ho, Wo), dtype=xp.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(C * k * k, N * Ho * Wo), (Ho, Wo)


def _corr(xp, w, stride, cols=None):
    """Cross-correlate padded batch ``xp`` (N,C,Hp,Wp) with ``w`` (O,C,k,k)."""
    N = xp.shape[0]
    O, k = w.shape[0], w.shape[-1]
    if cols is None:
        cols, _ = _im2col(xp, k, stride)
    Ho, Wo = _out_size(xp.shape[2], k, stride), _out_size(xp.shape[3], k, stride)
    out = w.reshape(O, -1) @ cols
    return np.ascontiguousarray(out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3))


def _corr_adjoint(g, w, stride, padded_hw):
    """Adjoint of ``_corr``: scatter ``g`` (N,O,Ho,Wo) back to (N,C,Hp,Wp)."""
    N, O, Ho, Wo = g.shape
    C, k = w.shape[1], w.shape[-1]
    s = stride
    gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
    cols = (w.reshape(O, -1).T @ gm).reshape(C, k, k, N, Ho, Wo)
    # accumulate each output phase (row % s, col % s) separately so that every
    # add below touches contiguous rows; interleave once at the end
    Hq = max(Ho + (k - 1) // s, -(-padded_hw[0] // s))
    Wq = max(Wo + (k - 1) // s, -(-padded_hw[1] // s))
    phases = np.zeros((s, s, C, N, Hq, Wq), dtype=g.dtype)
    for i in range(k):
        qi, ri = divmod(i, s)
        for j in range(k):
            qj, rj = divmod(j, s)
            phases[ri, rj, :, :, qi:qi + Ho, qj:qj + Wo] += cols[:, i, j]
    out = phases.transpose(3, 2, 4, 0, 5, 1).reshape(N, C, Hq * s, Wq * s)
    return np.ascontiguousarray(out[:, :, :padded_hw[0], :padded_hw[1]])


def _corr_weight_grad(xp, g, k, stride, cols=None):
    O = g.shape[1]
    if cols is None:
        cols, _ = _im2col(xp, k, stride)
    gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
    return (gm @ cols.T).reshape(O, xp.shape[1], k, k)


def _check_conv(x, w, b, stride, padding, what):
    if x.ndim not in (3, 4):
        raise ShapeError(f"{what}: input must be CxHxW or NxCxHxW, got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{what}: weights must be 4-D with square kernels, got {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"{what}: stride must be >= 1 and padding >= 0")
    if x.shape[-3] != w.shape[1 if what == "conv2d" else 0]:
        raise ShapeError(f"{what}: input has {x.shape[-3]} channels, weights expect "
                         f"{w.shape[1 if what == 'conv2d' else 0]}")
    out_ch = w.shape[0 if what == "conv2d" else 1]
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(f"{what}: bias shape {b.shape} != ({out_ch},)")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``weight`` is ``C_out x C_in x k x k``. Output spatial size is
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv(x, weight, bias, stride, padding, "conv2d")
    k = weight.shape[-1]
    H, W = x.shape[-2:]
    if k > H + 2 * padding or k > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(H, W)}")

    xb, squeeze = _batched(x.data)
    xp = _pad2(xb, padding)
    cols = None
    if weight.requires_grad and is_grad_enabled():
        cols, _ = _im2col(xp, k, stride)
    out = _corr(xp, weight.data, stride, cols)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gb = g[None] if squeeze else g
        gx = gw = gbias = None
        if x.requires_grad:
            gxp = _corr_adjoint(gb, weight.data, stride, xp.shape[2:])
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = _corr_weight_grad(xp, gb, k, stride, cols)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out[0] if squeeze else out, parents, bw)


def transposed_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution, the adjoint of ``conv2d`` with the same weights.

    ``weight`` is ``C_in x C_out x k x k`` (i.e. the weight of the conv2d that
    maps ``C_out`` channels back to ``C_in``). Output spatial size is
    ``(H - 1)*stride - 2*padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv(x, weight, bias, stride, padding, "transposed_conv2d")
    k = weight.shape[-1]
    H, W = x.shape[-2:]
    full = ((H - 1) * stride + k, (W - 1) * stride + k)
    Ho, Wo = full[0] - 2 * padding, full[1] - 2 * padding
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"transposed_conv2d: padding {padding} leaves empty output")

    xb, squeeze = _batched(x.data)
    out = _corr_adjoint(xb, weight.data, stride, full)
    out = np.ascontiguousarray(out[:, :, padding:padding + Ho, padding:padding + Wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gb = g[None] if squeeze else g
        gp = _pad2(gb, padding)
        gx = gw = gbias = None
        if x.requires_grad:
            gx = _corr(gp, weight.data, stride)
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = _corr_weight_grad(gp, xb, k, stride)
        if bias is not None and bias.requires_grad:
            gbias = gb.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("transposed_conv2d", out[0] if squeeze else out, parents, bw)


def separable_linear(x, rows, cols, op="separable_linear"):
    """Apply ``rows @ X @ cols.T`` to every trailing 2-D slice of ``x``.

    Linear resampling and filtering operators are expressed this way; the
    backward pass is the exact adjoint ``rows.T @ G @ cols``.
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ShapeError(f"{op}: operator {rows.shape}/{cols.shape} does not fit input {x.shape}")
    out = rows @ x.data @ cols.T
    return _make(op, out, (x,), lambda g: (rows.T @ g @ cols,))


# ------------------------------------------------------------------- losses


def _mask_array(mask, like):
    m = _array(mask).astype(like.dtype, copy=False)
    spatial = like.shape[-2:]
    if m.shape[-2:] != spatial:
        raise ShapeError(f"mask {m.shape} not congruent with {like.shape}")
    if like.ndim == 4:
        if m.ndim == 2:
            m = np.broadcast_to(m, (like.shape[0],) + spatial)
        if m.shape[0] != like.shape[0]:
            raise ShapeError(f"mask batch {m.shape} vs {like.shape}")
        return m[:, None]
    if m.ndim != 2:
        raise ShapeError(f"mask must be HxW for unbatched input, got {m.shape}")
    return m[None]


def l1_masked(a, b, mask):
    """Mean of |a - b| over masked pixels and all channels.

    ``mask`` is a binary H x W field (N x H x W for batched operands) and is
    treated as a constant.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_masked: shapes {a.shape} and {b.shape} differ")
    if a.ndim not in (3, 4):
        raise ShapeError(f"l1_masked: expected CxHxW or NxCxHxW, got {a.shape}")
    m = _mask_array(mask, a.data)
    count = float(m.sum()) * a.shape[-3]
    if count == 0:
        raise DegenerateMaskError("l1_masked: mask is empty")
    diff = a.data - b.data
    loss = np.asarray(np.sum(np.abs(diff) * m) / count, dtype=a.dtype)

    def bw(g):
        ga = np.sign(diff) * m * (g / count)
        return ga, -ga

    return _make("l1_masked", loss, (a, b), bw)
