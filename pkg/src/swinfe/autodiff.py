"""Dense tensors with an explicit reverse-mode tape and a MAC counter.

A :class:`Tape` is the unit of computation: it fixes the float precision,
owns the recorded graph and the :class:`FlopCounter`, and exposes every
differentiable operation as a method::

    tape = Tape(np.float64)
    y = tape.matmul(a, b)
    loss = tape.sum(y)
    tape.backward(loss)

Nodes are appended in creation order, which is already a topological order,
so the backward pass is a single reverse sweep.
"""
from collections import defaultdict
import math

import numpy as np

from . import kernels

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """An ndarray with an optional gradient.

    Leaves (parameters, inputs) are created directly; everything else comes
    out of a :class:`Tape` method.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class FlopCounter:
    """Cumulative multiply-accumulate count with a per-key breakdown."""

    def __init__(self):
        self.total = 0
        self.by_op = defaultdict(int)

    def add(self, key, macs):
        macs = int(macs)
        self.total += macs
        self.by_op[key] += macs

    def reset(self):
        self.total = 0
        self.by_op.clear()

    def get(self, *keys):
        return sum(self.by_op.get(k, 0) for k in keys)

    def snapshot(self):
        return dict(self.by_op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Recording context for one forward/backward pass.

    ``dtype`` is the working precision; inputs of another float type are cast
    on entry. ``corrupt`` names an operation whose backward is deliberately
    perturbed (used to prove the gradient checker can fail).
    """

    def __init__(self, dtype=np.float32, corrupt=None):
        self.dtype = np.dtype(dtype)
        self.flops = FlopCounter()
        self.nodes = []
        self.corrupt = corrupt

    # -- bookkeeping -----------------------------------------------------
    def clear(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def const(self, data):
        """Wrap ``data`` as a non-differentiable tensor in tape precision."""
        if isinstance(data, Tensor):
            return self._cast(data)
        return Tensor(np.asarray(data, dtype=self.dtype))

    def _cast(self, t):
        if not isinstance(t, Tensor):
            return Tensor(np.asarray(t, dtype=self.dtype))
        if t.data.dtype == self.dtype:
            return t
        return self._record(t.data.astype(self.dtype), (t,),
                            lambda g: (g.astype(t.data.dtype),), "cast")

    def _record(self, out, parents, backward, op):
        t = Tensor(out)
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._tape = self
            if self.corrupt == op:
                inner = backward
                backward = lambda g: tuple(None if x is None else 1.1 * x for x in inner(g))
            self.nodes.append((t, parents, backward, op))
        return t

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached.

        ``params`` (optional iterable of leaves) get a zero gradient first, so
        parameters unused by this pass end up with an explicit zero.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if params is not None:
            for p in params:
                if p.requires_grad:
                    p.zero_grad()
        if not loss.requires_grad:
            return
        if not self.nodes:
            raise ContractError("backward on an empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, parents, fn, _ in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgs = fn(g)
            for p, pg in zip(parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
                if p._tape is None:
                    leaves[k] = p
        for k, p in leaves.items():
            g = np.asarray(grads[k], dtype=p.data.dtype).reshape(p.shape)
            if p.grad is None:
                p.grad = g.copy()
            else:
                p.grad = p.grad + g

    # -- elementwise -----------------------------------------------------
    def add(self, a, b):
        a, b = self._cast(a), self._cast(b)
        sa, sb = a.shape, b.shape
        return self._record(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")

    def sub(self, a, b):
        a, b = self._cast(a), self._cast(b)
        sa, sb = a.shape, b.shape
        return self._record(a.data - b.data, (a, b),
                            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")

    def mul(self, a, b):
        a, b = self._cast(a), self._cast(b)
        ad, bd = a.data, b.data
        return self._record(ad * bd, (a, b),
                            lambda g: (_unbroadcast(g * bd, ad.shape),
                                       _unbroadcast(g * ad, bd.shape)), "mul")

    def scale(self, a, alpha):
        a = self._cast(a)
        alpha = self.dtype.type(alpha)
        return self._record(a.data * alpha, (a,), lambda g: (g * alpha,), "scale")

    def add_scaled(self, a, b, alpha):
        """``a + alpha * b`` for same-shape tensors."""
        a, b = self._cast(a), self._cast(b)
        if a.shape != b.shape:
            raise ShapeError(f"add_scaled shape mismatch: {a.shape} vs {b.shape}")
        alpha = self.dtype.type(alpha)
        return self._record(a.data + alpha * b.data, (a, b),
                            lambda g: (g, g * alpha), "add_scaled")

    def relu(self, x):
        x = self._cast(x)
        mask = x.data > 0
        return self._record(np.where(mask, x.data, 0).astype(self.dtype), (x,),
                            lambda g: (g * mask,), "relu")

    def gelu(self, x):
        """tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
        x = self._cast(x)
        xd = x.data
        c, k = self.dtype.type(GELU_C), self.dtype.type(GELU_K)
        u = c * (xd + k * xd ** 3)
        t = np.tanh(u)
        out = 0.5 * xd * (1 + t)

        def back(g):
            du = c * (1 + 3 * k * xd ** 2)
            return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * du),)
        return self._record(out, (x,), back, "gelu")

    def sigmoid(self, x):
        x = self._cast(x)
        s = 0.5 * (np.tanh(0.5 * x.data) + 1)
        return self._record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")

    def exp(self, x):
        x = self._cast(x)
        e = np.exp(x.data)
        return self._record(e, (x,), lambda g: (g * e,), "exp")

    # -- shape -----------------------------------------------------------
    def reshape(self, x, shape):
        x = self._cast(x)
        s = x.shape
        return self._record(x.data.reshape(shape), (x,), lambda g: (g.reshape(s),), "reshape")

    def permute(self, x, axes):
        x = self._cast(x)
        inv = tuple(np.argsort(axes))
        return self._record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                            lambda g: (g.transpose(inv),), "permute")

    def roll(self, x, shifts, axes):
        x = self._cast(x)
        neg = tuple(-s for s in shifts)
        return self._record(np.roll(x.data, shifts, axes), (x,),
                            lambda g: (np.roll(g, neg, axes),), "roll")

    def getitem(self, x, index):
        """Basic (non-repeating) indexing; backward scatters into zeros."""
        x = self._cast(x)
        s = x.shape

        def back(g):
            full = np.zeros(s, dtype=g.dtype)
            full[index] = g
            return (full,)
        return self._record(np.ascontiguousarray(x.data[index]), (x,), back, "getitem")

    def take_rows(self, x, idx):
        """``x[idx]`` along axis 0 with repeats allowed."""
        x = self._cast(x)
        idx = np.asarray(idx, dtype=np.int64)
        s = x.shape

        def back(g):
            full = np.zeros(s, dtype=g.dtype)
            np.add.at(full, idx, g)
            return (full,)
        return self._record(x.data[idx], (x,), back, "take_rows")

    def concat(self, xs, axis):
        xs = [self._cast(x) for x in xs]
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                            lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")

    # -- reductions ------------------------------------------------------
    def sum(self, x, axis=None, keepdims=False):
        x = self._cast(x)
        s = x.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, s).copy(),)
        return self._record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")

    def mean(self, x, axis=None, keepdims=False):
        x = self._cast(x)
        n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return self.scale(self.sum(x, axis, keepdims), 1.0 / n)

    # -- linear algebra --------------------------------------------------
    def matmul(self, a, b, tag="matmul"):
        a, b = self._cast(a), self._cast(b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        try:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
        m, k = a.shape[-2:]
        n = b.shape[-1]
        self.flops.add(tag, int(np.prod(batch, dtype=np.int64)) * m * n * k)
        ad, bd = a.data, b.data

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb
        return self._record(ad @ bd, (a, b), back, "matmul")

    def linear(self, x, weight, bias=None, tag="linear"):
        """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
        y = self.matmul(x, weight, tag=tag)
        return y if bias is None else self.add(y, bias)

    # -- normalisation / attention primitives ----------------------------
    def softmax_lastdim(self, x):
        x = self._cast(x)
        if x.ndim == 0 or x.shape[-1] < 1:
            raise ShapeError(f"softmax needs a non-empty last dim, got {x.shape}")
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
        return self._record(p, (x,), back, "softmax")

    def layer_norm(self, x, gamma, beta, eps=1e-5):
        x, gamma, beta = self._cast(x), self._cast(gamma), self._cast(beta)
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
        xd = x.data
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.dtype.type(eps))
        xhat = xc * rstd
        out = xhat * gamma.data + beta.data
        lead = tuple(range(xd.ndim - 1))

        def back(g):
            gg = g.sum(axis=lead)
            ggam = (g * xhat).sum(axis=lead)
            gx_hat = g * gamma.data
            gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                         - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            return gx, ggam, gg
        return self._record(out, (x, gamma, beta), back, "layer_norm")

    # -- convolution -----------------------------------------------------
    def conv2d(self, x, kernel, stride=1, pad=0, bias=None, tag="conv2d"):
        """Cross-correlation of ``[B, Cin, H, W]`` with ``[Cout, Cin, kh, kw]``.

        ``pad`` is symmetric, or ``(before, after)`` applied to both spatial
        axes; the output size must come out integral.
        """
        x, kernel = self._cast(x), self._cast(kernel)
        if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
            raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
        B, C, H, W = x.shape
        cout, _, kh, kw = kernel.shape
        lo, hi = (pad, pad) if np.isscalar(pad) else pad
        num_h, num_w = H + lo + hi - kh, W + lo + hi - kw
        if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
            raise ShapeError(f"conv2d output size not integral: H={H} W={W} k={kh}x{kw} "
                             f"stride={stride} pad={pad}")
        oh, ow = num_h // stride + 1, num_w // stride + 1
        xp = np.pad(x.data, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if lo or hi else x.data
        Hp, Wp = xp.shape[2:]
        cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)
        kmat = kernel.data.reshape(cout, -1)
        self.flops.add(tag, B * oh * ow * cout * C * kh * kw)
        out = (cols @ kmat.T).transpose(0, 3, 1, 2)

        def back(g):
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            gk = (gt.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(kernel.shape)
            gx = None
            if x.requires_grad:
                gpad = kernels.col2im(gt @ kmat, C, Hp, Wp, kh, kw, stride)
                gx = gpad[:, :, lo:lo + H, lo:lo + W]
            return gx, gk
        y = self._record(np.ascontiguousarray(out), (x, kernel), back, "conv2d")
        if bias is not None:
            y = self.add(y, self.reshape(bias, (1, cout, 1, 1)))
        return y

    def upsample_nearest_2x(self, x):
        x = self._cast(x)
        out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def back(g):
            s = g.shape
            return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)
        return self._record(out, (x,), back, "upsample")

    # -- losses ----------------------------------------------------------
    def bce_with_logits_sum(self, logits, targets):
        """Summed binary cross-entropy on logits, stable for large |logit|."""
        logits = self._cast(logits)
        z = logits.data
        y = np.asarray(targets, dtype=self.dtype)
        loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        s = 0.5 * (np.tanh(0.5 * z) + 1)
        return self._record(np.asarray(loss.sum(), dtype=self.dtype), (logits,),
                            lambda g: (g * (s - y),), "bce")

    def smooth_l1_sum(self, pred, target, beta):
        pred = self._cast(pred)
        d = pred.data - np.asarray(target, dtype=self.dtype)
        ad = np.abs(d)
        beta = self.dtype.type(beta)
        small = ad < beta
        loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
        grad = np.where(small, d / beta, np.sign(d)).astype(self.dtype)
        return self._record(np.asarray(loss.sum(), dtype=self.dtype), (pred,),
                            lambda g: (g * grad,), "smooth_l1")


def numerical_grad(f, arr, indices, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` entries, perturbed in place."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * h)
    return out
