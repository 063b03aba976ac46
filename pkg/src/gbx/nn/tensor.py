"""Minimal reverse-mode autograd over numpy arrays.

Every op builds a closure computing parent gradients; ``Tensor.backward``
topologically sorts the tape and accumulates. Ops preserve the input dtype,
so the same graph runs in float32 for training and float64 for the
finite-difference gradient checks.
"""
from contextlib import contextmanager

import numpy as np

from .. import accel

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None, free_graph=True):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward is not None or p.requires_grad:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for p, g in zip(node._parents, pgrads):
                if g is None:
                    continue
                p.grad = g if p.grad is None else p.grad + g
            if free_graph:
                node._parents = ()
                node._backward = None
                if node is not self and not node.requires_grad:
                    node.grad = None

    # convenience arithmetic (graph-building)
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def reshape(self, *shape):
        return reshape(self, shape if not (len(shape) == 1 and isinstance(shape[0], tuple)) else shape[0])


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        t = Tensor(data, requires_grad=True)
        t._parents = parents
        t._backward = backward
        return t
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def scale(a, s):
    a = astensor(a)
    out = a.data * a.data.dtype.type(s)

    def backward(g):
        return (g * a.data.dtype.type(s),)

    return _make(out, (a,), backward)


def matmul(a, b):
    """Batched matmul (..., M, K) @ (..., K, N)."""
    a, b = astensor(a), astensor(b)
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def reshape(a, shape):
    a = astensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def transpose(a, axes):
    a = astensor(a)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (a,), backward)


def concat(tensors, axis):
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return [np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
                for i in range(len(tensors))]

    return _make(out, tensors, backward)


def split(a, sections, axis):
    """Split into chunks of the given sizes along axis."""
    a = astensor(a)
    offsets = np.cumsum([0] + list(sections))
    outs = []
    for i in range(len(sections)):
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        piece = np.ascontiguousarray(a.data[tuple(sl)])
        idx = i

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(offsets[idx], offsets[idx + 1])
            full[tuple(sl)] = g
            return (full,)

        outs.append(_make(piece, (a,), backward))
    return outs


def sum_(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _sigmoid(x):
    with np.errstate(over="ignore"):  # exp overflow saturates correctly to 0
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a):
    a = astensor(a)
    out = _sigmoid(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def silu(a):
    a = astensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Tanh-approximation GELU."""
    a = astensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner),)

    return _make(out, (a,), backward)


def softmax(a, axis=-1):
    a = astensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


def embedding(weight, ids):
    """Row lookup. weight: Tensor (V, D); ids: int array (...,)."""
    weight = astensor(weight)
    ids = np.asarray(ids)
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), backward)


def linear(x, w, b=None):
    """x (..., in) @ w (in, out) + b."""
    x, w = astensor(x), astensor(w)
    out = x.data @ w.data
    if b is not None:
        b = astensor(b)
        out = out + b.data

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            return g @ np.swapaxes(w.data, 0, 1), x2.T @ g2, g2.sum(axis=0)

        return _make(out, (x, w, b), backward)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return g @ np.swapaxes(w.data, 0, 1), x2.T @ g2

    return _make(out, (x, w), backward)


def conv2d(x, w, b=None, stride=1, pad=0):
    """x (B,Cin,H,W), w (Cout,Cin,k,k) -> (B,Cout,OH,OW).

    Runs as a single GEMM over batch-folded im2col columns.
    """
    x, w = astensor(x), astensor(w)
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    cols = accel.im2col(x.data, k, stride, pad)          # (Cin*k*k, B*L)
    w2 = w.data.reshape(Cout, -1)
    y = np.matmul(w2, cols)                              # (Cout, B*L)
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    out = np.ascontiguousarray(y.reshape(Cout, B, OH, OW).swapaxes(0, 1))
    parents = [x, w]
    if b is not None:
        b = astensor(b)
        out += b.data.reshape(1, Cout, 1, 1)
        parents.append(b)

    def backward(g):
        gt = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(Cout, -1)
        gw = np.matmul(gt, cols.T).reshape(w.shape)
        gcols = np.matmul(w2.T, gt)                      # (Cin*k*k, B*L)
        gx = accel.col2im(gcols, (B, Cin, H, W), k, stride, pad)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _make(out, parents, backward)


def pixel_shuffle2x(x):
    """Depth-to-space: (B, 4C, H, W) -> (B, C, 2H, 2W)."""
    x = astensor(x)
    B, C4, H, W = x.shape
    if C4 % 4:
        raise ValueError("pixel_shuffle2x needs channels divisible by 4")
    C = C4 // 4
    out = (x.data.reshape(B, C, 2, 2, H, W)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(B, C, 2 * H, 2 * W))

    def backward(g):
        return (np.ascontiguousarray(
            g.reshape(B, C, H, 2, W, 2).transpose(0, 1, 3, 5, 2, 4)).reshape(x.shape),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2x(x):
    x = astensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def groupnorm(x, gamma, beta, groups, eps=1e-5):
    """x (B,C,H,W); gamma/beta (C,). Normalizes over each group's (C/G,H,W)."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    B, C, H, W = x.shape
    G = groups
    xg = x.data.reshape(B, G, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (xg - mu) * inv
    xn4 = xn.reshape(B, C, H, W)
    out = xn4 * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        ggamma = (g * xn4).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxn = (g * gamma.data.reshape(1, C, 1, 1)).reshape(B, G, -1)
        m = gxn.shape[2]
        s1 = gxn.sum(axis=2, keepdims=True)
        s2 = (gxn * xn).sum(axis=2, keepdims=True)
        gx = inv * (gxn - s1 / m - xn * s2 / m)
        return gx.reshape(B, C, H, W), ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last dim. x (..., D); gamma/beta (D,)."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (x.data - mu) * inv
    out = xn * gamma.data + beta.data

    def backward(g):
        d = x.shape[-1]
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xn).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxn = g * gamma.data
        s1 = gxn.sum(axis=-1, keepdims=True)
        s2 = (gxn * xn).sum(axis=-1, keepdims=True)
        gx = inv * (gxn - s1 / d - xn * s2 / d)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def mse_loss(pred, target):
    """Mean squared error; target is constant (no grad)."""
    pred = astensor(pred)
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = pred.data - tdata
    out = np.array((diff * diff).mean(), dtype=pred.dtype)

    def backward(g):
        return (g * diff * (2.0 / diff.size),)

    return _make(out, (pred,), backward)
