"""Minimal reverse-mode autodiff over numpy arrays, plus a first-order trainer.

Gradients follow the real inner-product convention: for a real scalar loss L
and a (possibly complex) tensor X, the stored gradient G satisfies
dL = Re <G, dX> = Re sum(conj(G) * dX). For real tensors this is the ordinary
gradient; for complex parameters a gradient-descent step X -= lr * G descends.

Checkpoints are a directory of UST tensors plus a `manifest.txt` listing
name/shape/dtype in layer order.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np
from scipy.special import expit

from . import core
from .core import ConfigError, NumericalError

EPS_MSLE = 1e-8
_GAP_CLAMP = 1e-6

REGISTERED_OPS = []


def _register(name):
    REGISTERED_OPS.append(name)
    return name


class Var:
    """Node in a dynamically recorded computation graph."""

    __slots__ = ("value", "op", "parents", "requires_grad", "grad", "name")

    def __init__(self, value, op="leaf", parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.op = op
        self.parents = parents          # tuple of (Var, vjp(out_grad) -> parent grad)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def parameter(value, name=None):
    return Var(np.array(value), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    # reduce a broadcast gradient back to `shape`
    if grad.shape == tuple(shape):
        return grad
    nd = grad.ndim - len(shape)
    for _ in range(nd):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _cast_like(grad, ref):
    if not np.iscomplexobj(ref) and np.iscomplexobj(grad):
        return grad.real
    return grad


# ---------------------------------------------------------------------------
# primitives

_register("add")


def add(a, b):
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, "add",
               ((a, lambda g: _cast_like(_unbroadcast(g, a.shape), a.value)),
                (b, lambda g: _cast_like(_unbroadcast(g, b.shape), b.value))))


_register("neg")


def neg(a):
    a = as_var(a)
    return Var(-a.value, "neg", ((a, lambda g: -g),))


def sub(a, b):
    return add(a, neg(b))


_register("mul")


def mul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv, "mul",
               ((a, lambda g: _cast_like(_unbroadcast(g * np.conj(bv), a.shape), av)),
                (b, lambda g: _cast_like(_unbroadcast(g * np.conj(av), b.shape), bv))))


_register("matmul")


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av @ bv, "matmul",
               ((a, lambda g: _cast_like(g @ np.swapaxes(bv, -1, -2).conj(), av)),
                (b, lambda g: _cast_like(np.swapaxes(av, -1, -2).conj() @ g, bv))))


_register("conj")


def conj(a):
    a = as_var(a)
    return Var(np.conj(a.value), "conj", ((a, lambda g: np.conj(g)),))


_register("real")


def real(a):
    a = as_var(a)
    return Var(a.value.real.copy(), "real", ((a, lambda g: _cast_like(g + 0j, a.value) if np.iscomplexobj(a.value) else g),))


_register("abs2")


def abs2(a):
    """|x|^2, real-valued."""
    a = as_var(a)
    av = a.value
    return Var((av * np.conj(av)).real, "abs2",
               ((a, lambda g: _cast_like(2.0 * g * av, av)),))


_register("log")


def log(a):
    a = as_var(a)
    av = a.value
    return Var(np.log(av), "log", ((a, lambda g: g / av),))


_register("sqrt")


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, "sqrt", ((a, lambda g: g / (2.0 * out)),))


_register("relu")


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), "relu", ((a, lambda g: g * mask),))


_register("reciprocal")


def _reciprocal(a):
    a = as_var(a)
    av = a.value
    return Var(1.0 / av, "reciprocal", ((a, lambda g: -g / (np.conj(av) ** 2)),))


_register("sigmoid")


def sigmoid(a):
    a = as_var(a)
    s = expit(a.value)
    return Var(s, "sigmoid", ((a, lambda g: g * s * (1.0 - s)),))


_register("sum")


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return Var(out, "sum", ((a, vjp),))


_register("mean")


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / n, a.shape).copy()

    return Var(out, "mean", ((a, vjp),))


_register("reshape")


def reshape(a, shape):
    a = as_var(a)
    old = a.shape
    return Var(a.value.reshape(shape), "reshape", ((a, lambda g: g.reshape(old)),))


_register("transpose")


def transpose(a, axes):
    a = as_var(a)
    inv = tuple(np.argsort(axes))
    return Var(a.value.transpose(axes), "transpose", ((a, lambda g: g.transpose(inv)),))


_register("concat")


def concat(parts, axis=-1):
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offs[i], offs[i + 1])
            return g[tuple(sl)]
        return vjp

    return Var(out, "concat", tuple((p, make_vjp(i)) for i, p in enumerate(parts)))


_register("downsample")


def downsample(a, factor, offset=0):
    """Keep every factor-th pixel of the two trailing axes."""
    a = as_var(a)
    out = a.value[..., offset::factor, offset::factor]

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., offset::factor, offset::factor] = g
        return _cast_like(full, a.value)

    return Var(out.copy(), "downsample", ((a, vjp),))


_register("upsample_zeros")


def upsample_zeros(a, factor, offset=0):
    """Zero-insertion upsampling of the two trailing axes (adjoint of downsample)."""
    a = as_var(a)
    sh = list(a.shape)
    sh[-2] *= factor
    sh[-1] *= factor
    out = np.zeros(sh, dtype=a.value.dtype)
    out[..., offset::factor, offset::factor] = a.value
    return Var(out, "upsample_zeros",
               ((a, lambda g: g[..., offset::factor, offset::factor].copy()),))


_register("dropout")


def dropout(a, p, rng=None):
    """Inverted dropout; eval mode (rng=None) is the identity."""
    a = as_var(a)
    if rng is None or p <= 0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return Var(a.value * mask, "dropout", ((a, lambda g: g * mask),))


_register("conv2d")


def _conv2d_raw(x, k):
    # zero-padded same-size cross-correlation; x: (..., C, H, W), k: (O, C, kh, kw)
    kh, kw = k.shape[-2:]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad)
    H, W = x.shape[-2:]
    dt = np.result_type(x.dtype, k.dtype)
    out_shape = x.shape[:-3] + (k.shape[0], H, W)
    out = np.zeros(out_shape, dtype=dt)
    for dy in range(kh):
        for dx in range(kw):
            win = xp[..., :, dy:dy + H, dx:dx + W]
            out += np.einsum("oc,...chw->...ohw", k[:, :, dy, dx], win)
    return out


def conv2d(x, k):
    """Same-size zero-padded cross-correlation.

    x: (..., C_in, H, W); k: (C_out, C_in, kh, kw) with odd kernel sides.
    out[..., o, i, j] = sum_c sum_{u,v} k[o, c, u, v] * x[..., c, i+u-kh//2, j+v-kw//2]
    """
    x, k = as_var(x), as_var(k)
    kv = k.value
    if kv.ndim != 4:
        raise ConfigError("conv2d kernels must be (C_out, C_in, kh, kw)")
    kh, kw = kv.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d requires odd kernel sides")
    if x.value.shape[-3] != kv.shape[1]:
        raise ConfigError(f"conv2d channel mismatch: input {x.value.shape[-3]}, kernels {kv.shape[1]}")
    xv = x.value
    out = _conv2d_raw(xv, kv)
    H, W = xv.shape[-2:]
    ph, pw = kh // 2, kw // 2

    def vjp_x(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(ph, ph), (pw, pw)]
        acc = np.zeros(xv.shape[:-3] + (xv.shape[-3], H + 2 * ph, W + 2 * pw),
                       dtype=np.result_type(g.dtype, kv.dtype))
        for dy in range(kh):
            for dx in range(kw):
                acc[..., :, dy:dy + H, dx:dx + W] += np.einsum(
                    "oc,...ohw->...chw", np.conj(kv[:, :, dy, dx]), g)
        return _cast_like(acc[..., :, ph:ph + H, pw:pw + W], xv)

    def vjp_k(g):
        xp = np.conj(np.pad(xv, [(0, 0)] * (xv.ndim - 2) + [(ph, ph), (pw, pw)]))
        gb = g.reshape(-1, g.shape[-3], H, W)
        gk = np.zeros_like(kv, dtype=np.result_type(g.dtype, xv.dtype))
        for dy in range(kh):
            for dx in range(kw):
                win = xp[..., :, dy:dy + H, dx:dx + W].reshape(-1, kv.shape[1], H, W)
                gk[:, :, dy, dx] = np.einsum("bohw,bchw->oc", gb, win)
        return _cast_like(gk, kv)

    return Var(out, "conv2d", ((x, vjp_x), (k, vjp_k)))


_register("soft_threshold")


def soft_threshold(x, alpha):
    """Complex magnitude soft threshold: x * max(0, 1 - alpha/|x|)."""
    x, alpha = as_var(x), as_var(alpha)
    xv, a = x.value, float(alpha.value)
    mag = np.abs(xv)
    safe = np.maximum(mag, 1e-300)
    scale = np.maximum(0.0, 1.0 - a / safe)
    out = scale * xv
    active = mag > a
    xhat = xv / safe

    def vjp_x(g):
        gx = g * scale
        corr = (a / safe) * np.real(np.conj(xhat) * g) * xhat
        return _cast_like(np.where(active, gx + corr, 0.0), xv)

    def vjp_a(g):
        return np.array(-np.sum(np.real(np.conj(g) * xhat) * active))

    return Var(out, "soft_threshold", ((x, vjp_x), (alpha, vjp_a)))


_register("mixed_l12_threshold")


def mixed_l12_threshold(x, alpha):
    """Row-wise l2 shrinkage: row * max(0, 1 - alpha/||row||)."""
    x, alpha = as_var(x), as_var(alpha)
    xv, a = x.value, float(alpha.value)
    rn = np.linalg.norm(xv, axis=-1, keepdims=True)
    safe = np.maximum(rn, 1e-300)
    scale = np.maximum(0.0, 1.0 - a / safe)
    out = scale * xv
    active = rn > a
    xhat = xv / safe

    def vjp_x(g):
        gx = g * scale
        inner = np.sum(np.real(np.conj(xhat) * g), axis=-1, keepdims=True)
        corr = (a / safe) * inner * xhat
        return _cast_like(np.where(active, gx + corr, 0.0), xv)

    def vjp_a(g):
        inner = np.sum(np.real(np.conj(g) * xhat), axis=-1, keepdims=True)
        return np.array(-np.sum(inner * active))

    return Var(out, "mixed_l12_threshold", ((x, vjp_x), (alpha, vjp_a)))


_register("svt")


def svt(x, alpha):
    """Singular value thresholding of a matrix: U max(S - alpha, 0) V^H.

    Backward treats the map as a spectral function; divided differences
    (g_i - g_j)/(s_i - s_j) are bounded by 1 for this g and the symmetric
    sums (g_i + g_j)/(s_i + s_j) are clamped at 1e-6, which keeps the
    adjoint finite even for repeated or vanishing singular values.
    """
    x, alpha = as_var(x), as_var(alpha)
    xv, a = x.value, float(alpha.value)
    if a < 0:
        raise ConfigError("svt threshold must be nonnegative")
    u, s, vh = core.svd(xv)
    g = np.maximum(s - a, 0.0)
    out = (u * g) @ vh
    active = s > a

    def vjp_x(gr):
        r = s.size
        gp = u.conj().T @ gr @ vh.conj().T          # r x r projected adjoint
        ds = s[:, None] - s[None, :]
        dg = g[:, None] - g[None, :]
        A = np.where(np.abs(ds) > _GAP_CLAMP, dg / np.where(np.abs(ds) > _GAP_CLAMP, ds, 1.0), 0.0)
        np.fill_diagonal(A, active.astype(float))
        ss = s[:, None] + s[None, :]
        sg = g[:, None] + g[None, :]
        B = sg / np.maximum(ss, _GAP_CLAMP)
        sym = 0.5 * (gp + gp.conj().T)
        asym = 0.5 * (gp - gp.conj().T)
        middle = A * sym + B * asym
        gx = u @ middle @ vh
        # components outside the thin subspaces
        ratio = g / np.maximum(s, _GAP_CLAMP)
        gv = gr @ vh.conj().T                       # M x r
        gu = u.conj().T @ gr                        # r x N
        gx = gx + (gv - u @ (u.conj().T @ gv)) * ratio[None, :] @ vh
        gx = gx + (u * ratio[None, :]) @ (gu - (gu @ vh.conj().T) @ vh)
        return _cast_like(gx, xv)

    def vjp_a(gr):
        gp_diag = np.einsum("ij,ij->j", u.conj(), gr @ vh.conj().T)
        return np.array(-np.sum(np.real(gp_diag) * active))

    return Var(out, "svt", ((x, vjp_x), (alpha, vjp_a)))


_register("sigmoid_soft_threshold")


def sigmoid_soft_threshold(x, lam, beta=20.0):
    """Smooth threshold gate: x * logistic(beta * (|x| - lam)).

    Odd in x, bounded by |x|, and approaches a hard magnitude gate as
    beta grows. Differentiable everywhere, so thresholds can be trained.
    """
    x, lam = as_var(x), as_var(lam)
    xv, lv = x.value, float(lam.value)
    mag = np.abs(xv)
    sig = expit(beta * (mag - lv))
    out = xv * sig
    dsig = beta * sig * (1.0 - sig)
    safe = np.maximum(mag, 1e-300)
    xhat = np.where(mag > 0, xv / safe, 0.0)

    def vjp_x(g):
        gx = g * sig
        corr = np.real(np.conj(g) * xv) * dsig * xhat
        return _cast_like(gx + corr, xv)

    def vjp_l(g):
        return np.array(-np.sum(np.real(np.conj(g) * xv) * dsig))

    return Var(out, "sigmoid_soft_threshold", ((x, vjp_x), (lam, vjp_l)))


# ---------------------------------------------------------------------------
# composites

_register("anti_rectifier")


def anti_rectifier(x, eps=1e-12):
    """Center per sample, l2-normalize, concatenate the positive parts of +/-.

    x: (..., F). Output (..., 2F), always nonnegative with norm <= 1 + eps.
    """
    x = as_var(x)
    centered = sub(x, vmean(x, axis=-1, keepdims=True))
    norm = sqrt(add(vsum(abs2(centered), axis=-1, keepdims=True), eps**2))
    normalized = mul(centered, _reciprocal(norm))
    return concat([relu(normalized), relu(neg(normalized))], axis=-1)


_register("msle")


def msle_loss(yhat, y, eps=EPS_MSLE):
    """Sum of squared log10 errors of the positive and negative parts."""
    yhat, y = as_var(yhat), as_var(y)
    ln10 = float(np.log(10.0))

    def log10p(v):
        return mul(log(add(relu(v), eps)), 1.0 / ln10)

    pos = sub(log10p(yhat), log10p(y))
    negp = sub(log10p(neg(yhat)), log10p(neg(y)))
    return add(vsum(abs2(pos)), vsum(abs2(negp)))


def mse_loss(yhat, y):
    """Mean over leading axis of squared Frobenius error (complex-safe)."""
    yhat, y = as_var(yhat), as_var(y)
    d = sub(yhat, y)
    n = yhat.value.shape[0] if yhat.value.ndim > 2 else 1
    return mul(vsum(abs2(d)), 1.0 / n)


# ---------------------------------------------------------------------------
# backward

def backward(root: Var, params=None):
    """Accumulate gradients of a scalar root into requires_grad leaves.

    If `params` (iterable of Var) is given, any of them left untouched by the
    graph walk receives an explicit zero gradient.
    """
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    if np.iscomplexobj(root.value) and abs(root.value.imag) > 1e-12 * (abs(root.value.real) + 1):
        raise NumericalError("backward root has a nonzero imaginary part")
    known = set(REGISTERED_OPS) | {"leaf"}
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op not in known:
            raise ConfigError(f"unregistered op in graph: {node.op}")
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    adj = {id(root): np.ones_like(root.value, dtype=np.float64 if not np.iscomplexobj(root.value) else np.complex128)}
    for node in reversed(topo):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + contrib
            else:
                adj[key] = np.asarray(contrib, dtype=contrib.dtype)
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.value)


# ---------------------------------------------------------------------------
# gradient checking

def gradcheck(loss_fn, params, h=1e-6, n_directions=3, seed=0, rtol=1e-4):
    """Compare reverse-mode gradients with central finite differences.

    loss_fn() rebuilds the graph from `params` (dict name -> Var) and returns
    the scalar Var. Random directions probe each parameter; returns the worst
    relative error found.
    """
    g = core.rng(seed)
    for p in params.values():
        p.zero_grad()
    out = loss_fn()
    backward(out)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        base = p.value.copy()
        for _ in range(n_directions):
            d = g.standard_normal(base.shape)
            if np.iscomplexobj(base):
                d = d + 1j * g.standard_normal(base.shape)
            d = d / max(np.linalg.norm(d), 1e-300)
            p.value = base + h * d
            lp = float(np.real(loss_fn().value))
            p.value = base - h * d
            lm = float(np.real(loss_fn().value))
            p.value = base
            fd = (lp - lm) / (2 * h)
            an = float(np.sum(np.real(np.conj(grads[name]) * d)))
            denom = max(abs(fd), abs(an), 1e-8)
            rel = abs(fd - an) / denom
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# optimizer + training loop

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.value.shape) for k, p in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * np.abs(g) ** 2
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class Sgd:
    def __init__(self, params, lr=1e-3, momentum=0.0):
        self.params = dict(params)
        self.lr, self.mu = lr, momentum
        self.vel = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.vel[k] = self.mu * self.vel[k] + p.grad
            p.value = p.value - self.lr * self.vel[k]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class TrainingDiverged(NumericalError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def train(params, loss_fn, train_data, val_data=None, epochs=10, batch_size=8,
          lr=1e-3, method="adam", momentum=0.0, seed=0, clamp=None, shuffle=True):
    """Generic minibatch training loop.

    params: dict name -> Var with requires_grad.
    loss_fn(batch, rng) -> scalar Var; rng is None during validation so
    stochastic layers (dropout) switch to eval behavior.
    clamp: dict name -> (lo, hi) applied after each step.
    Returns (best_params_values, history); history rows are
    (epoch, train_loss, val_loss). Raises TrainingDiverged on NaN.
    """
    if method == "adam":
        opt = Adam(params, lr=lr)
    elif method == "sgd":
        opt = Sgd(params, lr=lr, momentum=momentum)
    else:
        raise ConfigError(f"unknown optimizer {method!r}")
    g = core.rng(seed)
    history = []
    data = list(train_data)
    val = list(val_data) if val_data is not None else None

    def eval_loss(ds):
        tot = 0.0
        for i in range(0, len(ds), batch_size):
            b = ds[i:i + batch_size]
            tot += float(np.real(loss_fn(b, None).value)) * len(b)
        return tot / max(len(ds), 1)

    best_val = eval_loss(val) if val is not None else None
    best = {k: p.value.copy() for k, p in params.items()}
    for epoch in range(epochs):
        order = g.permutation(len(data)) if shuffle else np.arange(len(data))
        run = 0.0
        for i in range(0, len(data), batch_size):
            batch = [data[j] for j in order[i:i + batch_size]]
            opt.zero_grad()
            loss = loss_fn(batch, g)
            lval = float(np.real(loss.value))
            if not np.isfinite(lval):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", history)
            backward(loss)
            opt.step()
            if clamp:
                for k, (lo, hi) in clamp.items():
                    if k in params:
                        params[k].value = np.clip(params[k].value.real, lo, hi).astype(params[k].value.dtype)
            run += lval * len(batch)
        train_loss = run / max(len(data), 1)
        val_loss = eval_loss(val) if val is not None else None
        history.append((epoch, train_loss, val_loss))
        if val is not None and (best_val is None or val_loss < best_val):
            best_val = val_loss
            best = {k: p.value.copy() for k, p in params.items()}
    if val is None:
        best = {k: p.value.copy() for k, p in params.items()}
    return best, history


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(directory, values: dict):
    """Write parameters as UST tensors plus a manifest, atomically per file."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in values:
        arr = np.asarray(values[name])
        fname = name.replace("/", "_") + ".ust"
        tmp = tempfile.NamedTemporaryFile(dir=directory, delete=False)
        tmp.close()
        core.write_tensor(tmp.name, arr)
        os.replace(tmp.name, os.path.join(directory, fname))
        kind = "complex128" if np.iscomplexobj(arr) else "real64"
        shape = ",".join(map(str, arr.shape)) or "-"
        lines.append(f"{name} {fname} {kind} {shape}")
    tmp = tempfile.NamedTemporaryFile(dir=directory, delete=False, mode="w")
    tmp.write("\n".join(lines) + "\n")
    tmp.close()
    os.replace(tmp.name, os.path.join(directory, "manifest.txt"))


def load_checkpoint(directory):
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise core.DataError(f"{directory}: missing manifest.txt")
    values = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise core.DataError(f"bad manifest line: {line!r}")
            name, fname, kind, shape = parts
            arr = core.read_tensor(os.path.join(directory, fname))
            want = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            if arr.shape != want:
                raise core.DataError(f"{name}: manifest shape {want} != file shape {arr.shape}")
            values[name] = arr
    return values
