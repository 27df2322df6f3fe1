"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
walks the graph in reverse topological order and accumulates gradients
into every reachable tensor with requires_grad set.  The op set is the
minimum the networks and fitting loops need: broadcast arithmetic,
elementwise transcendentals, batched matmul, reductions, indexing,
conv2d / deconv2d / maxpool2d / leaky_relu, the three losses, and Adam.

Float width convention: network weights are float32, optimization
variables and energies float64; mixed graphs follow numpy promotion.
"""
from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Tests flip this on to assert the all-finite forward invariant; off by
# default because the scan is measurable in training hot loops.
CHECK_FINITE = False


def _as_array(x):
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


class Tensor:
    """Node in a reverse-mode graph; value-semantic once built in."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make numpy defer to the reflected Tensor operators for ndarray <op> Tensor
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = _as_array(data)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in forward op output")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    # -- graph -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:  # iterative DFS, graphs can be thousands of nodes deep
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self:
                node._parents = ()  # release graph references as we go
                node._backward = None

    def _accum(self, g):
        if self.grad is None:
            # owning copy: g may alias another tensor's buffer
            self.grad = np.array(np.broadcast_to(g, self.data.shape),
                                 dtype=np.float64)
        else:
            self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _unary(self, np.negative, lambda g, a, out: -g)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        return _unary(self, lambda a: a ** p,
                      lambda g, a, out: g * p * a ** (p - 1))

    def __matmul__(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data
        a, b = self.data, other.data

        def bwd(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(b, -1, -2) if b.ndim > 1 else np.outer(g, b)
                self._accum(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                gb = np.swapaxes(a, -1, -2) @ g if a.ndim > 1 else np.outer(a, g)
                other._accum(_unbroadcast(gb, b.shape))

        return _make(out_data, (self, other), bwd)

    # -- elementwise ---------------------------------------------------------

    def exp(self):
        return _unary(self, np.exp, lambda g, a, out: g * out)

    def log(self):
        return _unary(self, np.log, lambda g, a, out: g / a)

    def sqrt(self):
        return _unary(self, np.sqrt, lambda g, a, out: g / (2.0 * out))

    def sin(self):
        return _unary(self, np.sin, lambda g, a, out: g * np.cos(a))

    def cos(self):
        return _unary(self, np.cos, lambda g, a, out: -g * np.sin(a))

    def abs(self):
        return _unary(self, np.abs, lambda g, a, out: g * np.sign(a))

    def sigmoid(self):
        return _unary(self, _expit, lambda g, a, out: g * out * (1.0 - out))

    def clip(self, lo, hi):
        # pass-through gradient strictly inside the interval
        return _unary(self, lambda a: np.clip(a, lo, hi),
                      lambda g, a, out: g * ((a > lo) & (a < hi)))

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if not self.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(gg, self.data.shape))

        return _make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- shape -------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _unary_shaped(self, self.data.reshape(shape),
                             lambda g: g.reshape(old))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _unary_shaped(self, self.data.transpose(axes),
                             lambda g: g.transpose(inv))

    def astype(self, dtype):
        # value cast only; gradients accumulate in float64 regardless
        return _unary_shaped(self, self.data.astype(dtype), lambda g: g)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape = self.data.shape

        def bwd(g):
            if not self.requires_grad:
                return
            gx = np.zeros(shape, dtype=np.float64)
            if _advanced_index(idx):
                np.add.at(gx, idx, g)
            else:
                gx[idx] += g
            self._accum(gx)

        return _make(out_data, (self,), bwd)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=bwd)


def _unary(x, f, dfdx):
    x = as_tensor(x)
    out_data = f(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(dfdx(g, x.data, out_data))

    return _make(out_data, (x,), bwd)


def _unary_shaped(x, out_data, gmap):
    def bwd(g):
        if x.requires_grad:
            x._accum(gmap(g))

    return _make(out_data, (x,), bwd)


def _binary(a, b, f, dfda, dfdb):
    a, b = as_tensor(a), as_tensor(b)
    out_data = f(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(dfda(g, a.data, b.data), a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(dfdb(g, a.data, b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _advanced_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _expit(a):
    # logistic without overflow on either tail
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out.astype(a.dtype) if a.dtype == np.float32 else out


def maximum(a, b):
    return _binary(a, b, np.maximum,
                   lambda g, x, y: g * (x >= y), lambda g, x, y: g * (x < y))


def minimum(a, b):
    return _binary(a, b, np.minimum,
                   lambda g, x, y: g * (x <= y), lambda g, x, y: g * (x > y))


def relu(x):
    return maximum(x, 0.0)


def where(cond, a, b):
    """Select by a constant boolean mask; gradient flows to the taken side."""
    cond = np.asarray(cond, dtype=bool)
    return _binary(a, b, lambda x, y: np.where(cond, x, y),
                   lambda g, x, y: g * cond, lambda g, x, y: g * ~cond)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(out_data, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), bwd)


# --- network layer ops ------------------------------------------------------


def _im2col(xp, stride, ho, wo):
    """(N,C,Hp,Wp) -> (N, C*9, Ho*Wo) gathered 3x3 windows, tap-major."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, 9, ho, wo), dtype=xp.dtype)
    for a in range(3):
        for b in range(3):
            col[:, :, 3 * a + b] = xp[:, :, a:a + stride * ho:stride,
                                      b:b + stride * wo:stride]
    return col.reshape(n, c * 9, ho * wo)


def _col2im(col, shape, stride, ho, wo):
    """Adjoint of _im2col: scatter-add (N, C*9, Ho*Wo) back to (N,C,Hp,Wp)."""
    n, c = shape[:2]
    buf = np.zeros(shape, dtype=col.dtype)
    col = col.reshape(n, c, 9, ho, wo)
    for a in range(3):
        for b in range(3):
            buf[:, :, a:a + stride * ho:stride,
                b:b + stride * wo:stride] += col[:, :, 3 * a + b]
    return buf


def conv2d(x, weights, bias=None, stride=1, padding=1):
    """Cross-correlation of NCHW (or CHW) input with OIHW 3x3 weights."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    w = weights.data
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel axes must be 3x3, got {w.shape[2:]}")
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be CHW or NCHW, got {x.data.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d: channel axis mismatch, input has {xd.shape[1]} "
            f"channels but weights expect {w.shape[1]}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else xd
    N = xd.shape[0]
    Co = w.shape[0]
    Ho = (xp.shape[2] - 3) // stride + 1
    Wo = (xp.shape[3] - 3) // stride + 1
    # one fused GEMM in the promoted dtype; float32 nets stay in float32
    ctype = np.result_type(xd.dtype, w.dtype)
    xp = xp.astype(ctype, copy=False)
    w2 = w.reshape(Co, -1).astype(ctype, copy=False)
    col = _im2col(xp, stride, Ho, Wo)
    out = np.matmul(w2, col).reshape(N, Co, Ho, Wo)
    del col  # rebuilt on demand in backward; keeping it per-layer is too big
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (w.shape[0],):
            raise ValueError(
                f"conv2d: bias axis has {bias.data.shape}, expected ({w.shape[0]},)")
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bwd(g):
        if squeeze:
            g = g.reshape((1,) + g.shape) if g.ndim == 3 else g
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        g2 = g.reshape(N, Co, Ho * Wo).astype(ctype, copy=False)
        if weights.requires_grad:
            col_b = _im2col(xp, stride, Ho, Wo)
            gw = np.matmul(g2, col_b.transpose(0, 2, 1)).sum(axis=0)
            weights._accum(gw.reshape(w.shape))
        if x.requires_grad:
            gxp = _col2im(np.matmul(w2.T, g2), xp.shape, stride, Ho, Wo)
            gx = gxp[:, :, padding:padding + xd.shape[2],
                     padding:padding + xd.shape[3]] if padding else gxp
            x._accum(gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, parents, bwd)


def deconv2d(x, weights, bias=None, stride=1, padding=1, out_hw=None):
    """Transpose convolution, the adjoint of conv2d with the same weights.

    weights is (C_in, C_out, 3, 3) with C_in the deconv input channels; the
    raw output extent (Hi-1)*stride + 3 - 2*padding is cropped top-left to
    out_hw when the mirrored encoder extent is smaller.
    """
    x = as_tensor(x)
    weights = as_tensor(weights)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    w = weights.data
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"deconv2d: kernel axes must be 3x3, got {w.shape[2:]}")
    if xd.shape[1] != w.shape[0]:
        raise ValueError(
            f"deconv2d: channel axis mismatch, input has {xd.shape[1]} "
            f"channels but weights expect {w.shape[0]}")
    N, Ci, Hi, Wi = xd.shape
    Hraw = (Hi - 1) * stride + 3 - 2 * padding
    Wraw = (Wi - 1) * stride + 3 - 2 * padding
    if out_hw is None:
        out_hw = (Hraw, Wraw)
    oh, ow = out_hw
    if oh > Hraw or ow > Wraw:
        raise ValueError(
            f"deconv2d: requested extent {out_hw} exceeds raw output "
            f"({Hraw}, {Wraw}); crop can only shrink")
    ctype = np.result_type(xd.dtype, w.dtype)
    # rows of w_r are (out channel, tap) pairs so one GEMM fills every tap
    w_r = np.ascontiguousarray(w.transpose(1, 2, 3, 0)).reshape(-1, Ci)
    w_r = w_r.astype(ctype, copy=False)
    x2 = xd.reshape(N, Ci, Hi * Wi).astype(ctype, copy=False)
    buf_shape = (N, w.shape[1], (Hi - 1) * stride + 3, (Wi - 1) * stride + 3)
    buf = _col2im(np.matmul(w_r, x2), buf_shape, stride, Hi, Wi)
    out = buf[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bwd(g):
        if squeeze:
            g = g.reshape((1,) + g.shape) if g.ndim == 3 else g
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        gbuf = np.zeros(buf_shape, dtype=ctype)
        gbuf[:, :, padding:padding + oh, padding:padding + ow] = g
        col_g = _im2col(gbuf, stride, Hi, Wi)  # (N, Co*9, Hi*Wi)
        if weights.requires_grad:
            gw = np.matmul(x2, col_g.transpose(0, 2, 1)).sum(axis=0)
            weights._accum(gw.reshape(Ci, w.shape[1], 3, 3))
        if x.requires_grad:
            gx = np.matmul(w_r.T, col_g).reshape(xd.shape)
            x._accum(gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, parents, bwd)


def maxpool2d(x):
    """2x2 max pooling, stride 2, floor semantics on odd extents.

    Returns (pooled, indices); indices are window-local argmax positions
    in 0..3, row-major, ties broken toward the earlier index.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    Ho, Wo = H // 2, W // 2
    win = xd[:, :, :2 * Ho, :2 * Wo].reshape(N, C, Ho, 2, Wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        if squeeze:
            g = g.reshape((1,) + g.shape) if g.ndim == 3 else g
        gwin = np.zeros((N, C, Ho, Wo, 4), dtype=np.float64)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(xd.shape, dtype=np.float64)
        gx[:, :, :2 * Ho, :2 * Wo] = gwin.reshape(
            N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            N, C, 2 * Ho, 2 * Wo)
        x._accum(gx[0] if squeeze else gx)

    out_t = _make(out[0] if squeeze else out, (x,), bwd)
    return out_t, (idx[0] if squeeze else idx)


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0,1), got {slope}")
    x = as_tensor(x)
    pos = x.data >= 0
    out_data = np.where(pos, x.data, slope * x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * np.where(pos, 1.0, slope))

    return _make(out_data, (x,), bwd)


# --- losses -------------------------------------------------------------------

_BCE_EPS = 1e-7


def losses(prediction, target, kind, mask=None):
    """Mean l1 / bce / mse over unmasked elements.

    bce consumes probabilities in [0,1] (clamped away from the log
    singularities); targets must be binary.  An all-zero mask defines the
    loss as 0 and emits a RuntimeWarning.
    """
    pred = as_tensor(prediction)
    tgt = np.asarray(as_tensor(target).data, dtype=np.float64)
    if tgt.shape != pred.data.shape:
        tgt = np.broadcast_to(tgt, pred.data.shape)
    if kind == "l1":
        elem = (pred - tgt).abs()
    elif kind == "mse":
        diff = pred - tgt
        elem = diff * diff
    elif kind == "bce":
        if not np.all((tgt == 0) | (tgt == 1)):
            raise ValueError("losses: bce targets must be binary")
        p = pred.clip(_BCE_EPS, 1.0 - _BCE_EPS)
        elem = -(p.log() * tgt + (1.0 - p).log() * (1.0 - tgt))
    else:
        raise ValueError(f"losses: unknown kind {kind!r}")
    if mask is None:
        return elem.mean() if elem.size > 1 else elem.reshape(())
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != elem.data.shape:
        m = np.broadcast_to(m, elem.data.shape)
    denom = m.sum()
    if denom == 0:
        warnings.warn("losses: mask excludes every element, defining loss as 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    return (elem * m).sum() / denom


# --- Adam ---------------------------------------------------------------------


class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameter shapes."""

    def __init__(self, shapes, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]


def adam_step(params, grads, state):
    """One in-place Adam update; a non-finite gradient rejects the whole step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params/grads/state length mismatch")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(
                f"adam_step: shape mismatch {g.shape} vs {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                "adam_step: non-finite gradient, step rejected")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        upd = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p.data -= upd.astype(p.data.dtype)
    return params


class Adam:
    """Optimizer facade over adam_step for a list of leaf Tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState([p.data.shape for p in self.params],
                               lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros(p.data.shape)
                 for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
