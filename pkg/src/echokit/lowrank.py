"""Clutter suppression by low-rank plus sparse decomposition.

A movie is an (H, W, T) complex stack; its Casorati matrix is the
(H*W, T) reshape with one row per pixel. Tissue is modeled as low rank in
that matrix, blood as row-sparse (few pixels, coherent over time):

    minimize  1/2 ||D - L - S||_F^2 + lam1 ||L||_* + lam2 ||S||_{1,2}

The solver alternates proximal gradient steps on L and S with step 1/2
(the Lipschitz constant of the coupled fidelity term is 2):

    L <- SVT_{lam1/2}( (L - S + D) / 2 )
    S <- MT_{lam2/2}( (S - L + D) / 2 )

The unfolded network generalizes the two updates: the three fixed
rescalings feeding each prox become per-layer learned convolutions, and
the thresholds become per-layer learned scalars. With delta kernels at
+-1/2 and thresholds lam/2 each layer reproduces one solver iteration
exactly, which is both the initialization and the module's keystone
equivalence test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import core, nn
from .core import ConfigError, NumericalError


# ---------------------------------------------------------------------------
# layout helpers

def casorati(movie):
    """(H, W, T) -> (H*W, T)."""
    if movie.ndim != 3:
        raise ConfigError("expected an (H, W, T) movie")
    return movie.reshape(-1, movie.shape[-1])


def movie_from_casorati(mat, hw):
    h, w = hw
    if mat.shape[0] != h * w:
        raise ConfigError(f"casorati rows {mat.shape[0]} != {h}x{w}")
    return mat.reshape(h, w, mat.shape[-1])


# ---------------------------------------------------------------------------
# proximal operators (plain numpy; the autodiff twins live in nn)

def soft_threshold(x, alpha):
    """Magnitude-wise shrink: x * max(0, 1 - alpha/|x|).

    Proximal operator of alpha*||.||_1 (entrywise, complex-safe). For real
    input this is the classic (|x| - alpha)_+ * sign(x).
    """
    if alpha < 0:
        raise ConfigError("threshold must be nonnegative")
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.maximum(0.0, 1.0 - alpha / np.maximum(mag, 1e-300))
    return scale * x


def mixed_l12_threshold(x, alpha):
    """Row-wise shrink: row * max(0, 1 - alpha/||row||_2).

    Proximal operator of alpha * sum_rows ||row||_2. Zero rows pass through.
    """
    if alpha < 0:
        raise ConfigError("threshold must be nonnegative")
    x = np.asarray(x)
    rn = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.maximum(0.0, 1.0 - alpha / np.maximum(rn, 1e-300))
    return scale * x


def svt(x, alpha):
    """Singular value thresholding: U max(S - alpha, 0) V^H."""
    if alpha < 0:
        raise ConfigError("threshold must be nonnegative")
    u, s, vh = core.svd(np.asarray(x))
    return (u * np.maximum(s - alpha, 0.0)) @ vh


def svd_filter(d, n_cut):
    """Remove the best rank-n_cut approximation (assumed tissue), keep the rest."""
    mat = casorati(d) if d.ndim == 3 else np.asarray(d)
    kmax = min(mat.shape)
    if not 0 <= n_cut <= kmax:
        raise ConfigError(f"n_cut must be in [0, {kmax}]")
    if n_cut == 0:
        return np.array(d, copy=True)
    u, s, vh = core.svd(mat)
    keep = s.copy()
    keep[:n_cut] = 0.0
    out = (u * keep) @ vh
    return out.reshape(d.shape)


# ---------------------------------------------------------------------------
# iterative solver

class RpcaResult(NamedTuple):
    l: np.ndarray
    s: np.ndarray
    objective: np.ndarray
    n_iter: int
    converged: bool


def rpca_objective(d, l, s, lam1, lam2):
    fid = 0.5 * np.linalg.norm(d - l - s) ** 2
    nuc = np.linalg.svd(l, compute_uv=False).sum()
    l12 = np.linalg.norm(s, axis=-1).sum()
    return fid + lam1 * nuc + lam2 * l12


def default_lambdas(d):
    """Scale-aware defaults: lam1 = ||D||_2 / 10, lam2 = lam1 / sqrt(max(M,T))."""
    mat = casorati(d) if d.ndim == 3 else np.asarray(d)
    lam1 = np.linalg.svd(mat, compute_uv=False)[0] / 10.0
    return lam1, lam1 / np.sqrt(max(mat.shape))


def rpca_fista(d, lam1=None, lam2=None, max_iter=200, tol=1e-7,
               momentum=False, init="zeros", step=0.5):
    """Low-rank + row-sparse split of d by proximal gradient iterations.

    d may be an (H, W, T) movie or an (M, T) Casorati matrix; l and s come
    back in the same shape. `init` is "zeros" or "data" (L0 = D warm start;
    helps when the target S is much weaker than L). `momentum` adds the
    standard accelerated overrelaxation sequence; off by default so the
    iterates follow the plain update rule. `step` is the gradient step on
    the shared fidelity term; values above 1 are unstable and exist only to
    exercise the divergence guard.
    """
    d = np.asarray(d, dtype=np.complex128)
    shape = d.shape
    mat = casorati(d) if d.ndim == 3 else d
    if lam1 is None or lam2 is None:
        dl1, dl2 = default_lambdas(mat)
        lam1 = dl1 if lam1 is None else lam1
        lam2 = dl2 if lam2 is None else lam2
    if lam1 <= 0 or lam2 <= 0:
        raise ConfigError("lam1 and lam2 must be positive")
    if init == "zeros":
        l = np.zeros_like(mat)
        s = np.zeros_like(mat)
    elif init == "data":
        l = mat.copy()
        s = np.zeros_like(mat)
    else:
        raise ConfigError(f"unknown init {init!r}")
    ly, sy = l.copy(), s.copy()
    t = 1.0
    objective = []
    rising = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        ln = svt(ly - step * (ly + sy - mat), step * lam1)
        sn = mixed_l12_threshold(sy - step * (ly + sy - mat), step * lam2)
        if momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            ly = ln + ((t - 1.0) / t_next) * (ln - l)
            sy = sn + ((t - 1.0) / t_next) * (sn - s)
            t = t_next
        else:
            ly, sy = ln, sn
        dl = np.linalg.norm(ln - l) + np.linalg.norm(sn - s)
        l, s = ln, sn
        objective.append(rpca_objective(mat, l, s, lam1, lam2))
        if len(objective) > 1 and objective[-1] > objective[-2] * (1 + 1e-12):
            rising += 1
            if rising >= 50:
                raise NumericalError("objective increased for 50 consecutive iterations")
        else:
            rising = 0
        if not np.isfinite(objective[-1]):
            raise NumericalError("objective became non-finite")
        denom = np.linalg.norm(l) + np.linalg.norm(s)
        if tol > 0 and dl <= tol * max(denom, 1e-30):
            converged = True
            break
    return RpcaResult(l.reshape(shape), s.reshape(shape),
                      np.asarray(objective), it, converged)


# ---------------------------------------------------------------------------
# unfolded network

@dataclass
class CoronaParams:
    """Per-layer conv kernels and thresholds of the unfolded solver.

    w: (K, 6, 1, 1, k, k) complex. Slots 0..5 hold W1..W6: W1,W3,W5 feed the
    low-rank update (data, sparse, low-rank inputs); W2,W6,W4 feed the sparse
    update (data, low-rank, sparse inputs). lam1/lam2: (K,) thresholds.
    """
    w: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.complex128)
        self.lam1 = np.atleast_1d(np.asarray(self.lam1, dtype=np.float64))
        self.lam2 = np.atleast_1d(np.asarray(self.lam2, dtype=np.float64))
        if self.w.ndim != 6 or self.w.shape[1] != 6 or self.w.shape[2:4] != (1, 1):
            raise ConfigError("kernel stack must be (K, 6, 1, 1, k, k)")
        k = self.w.shape[0]
        if k < 1:
            raise ConfigError("need at least one layer")
        if self.lam1.shape != (k,) or self.lam2.shape != (k,):
            raise ConfigError("one threshold pair per layer")
        if np.any(self.lam1 < 0) or np.any(self.lam2 < 0):
            raise ConfigError("thresholds must be nonnegative")

    @property
    def k_layers(self):
        return self.w.shape[0]

    @property
    def kernel_size(self):
        return self.w.shape[-1]

    def to_values(self):
        out = {}
        for k in range(self.k_layers):
            for j in range(6):
                out[f"layer{k}/w{j + 1}"] = self.w[k, j].copy()
            out[f"layer{k}/lam1"] = np.array(self.lam1[k])
            out[f"layer{k}/lam2"] = np.array(self.lam2[k])
        return out

    @classmethod
    def from_values(cls, values):
        layers = sorted({int(name.split("/")[0][5:]) for name in values})
        if layers != list(range(len(layers))):
            raise core.DataError("checkpoint layers are not contiguous")
        kk = len(layers)
        ks = values["layer0/w1"].shape[-1]
        w = np.zeros((kk, 6, 1, 1, ks, ks), dtype=np.complex128)
        lam1 = np.zeros(kk)
        lam2 = np.zeros(kk)
        for k in range(kk):
            for j in range(6):
                w[k, j] = values[f"layer{k}/w{j + 1}"]
            lam1[k] = float(values[f"layer{k}/lam1"].real)
            lam2[k] = float(values[f"layer{k}/lam2"].real)
        return cls(w, lam1, lam2)


def corona_init_from_fista(k_layers, lam1, lam2, kernel_size=3):
    """Delta-kernel initialization making each layer one solver iteration.

    The solver's update feeds (L - S + D)/2 into the low-rank prox and
    (S - L + D)/2 into the sparse prox, so the six kernels start as center
    taps of +1/2 (data and own-variable slots) and -1/2 (cross slots), with
    thresholds lam/2.
    """
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ConfigError("kernel_size must be odd")
    if k_layers < 1:
        raise ConfigError("need at least one layer")
    c = kernel_size // 2
    delta = np.zeros((1, 1, kernel_size, kernel_size), dtype=np.complex128)
    delta[0, 0, c, c] = 1.0
    w = np.zeros((k_layers, 6, 1, 1, kernel_size, kernel_size), dtype=np.complex128)
    w[:, 0] = 0.5 * delta   # W1: data -> low-rank input
    w[:, 1] = 0.5 * delta   # W2: data -> sparse input
    w[:, 2] = -0.5 * delta  # W3: sparse -> low-rank input
    w[:, 3] = 0.5 * delta   # W4: sparse -> sparse input
    w[:, 4] = 0.5 * delta   # W5: low-rank -> low-rank input
    w[:, 5] = -0.5 * delta  # W6: low-rank -> sparse input
    return CoronaParams(w, np.full(k_layers, lam1 / 2.0), np.full(k_layers, lam2 / 2.0))


def _vars_from_params(params, requires_grad):
    return {name: nn.Var(val, requires_grad=requires_grad, name=name)
            for name, val in params.to_values().items()}


def _to_cas(frames, h, w, t):
    # (T, 1, H, W) -> (H*W, T)
    return nn.reshape(nn.transpose(frames, (1, 2, 3, 0)), (h * w, t))


def _to_frames(cas, h, w, t):
    # (H*W, T) -> (T, 1, H, W)
    return nn.transpose(nn.reshape(cas, (1, h, w, t)), (3, 0, 1, 2))


def corona_graph(d, pvars, k_layers):
    """Build the unfolded forward graph; returns (L, S) Casorati Vars.

    d: (H, W, T) ndarray; pvars: dict of Vars named layer{k}/w{1..6},
    layer{k}/lam1, layer{k}/lam2. Starts from L0 = S0 = 0.
    """
    h, w, t = d.shape
    dd = np.ascontiguousarray(np.moveaxis(d, -1, 0))[:, None]   # (T, 1, H, W)
    df = nn.Var(dd)
    lf = nn.Var(np.zeros_like(dd))
    sf = nn.Var(np.zeros_like(dd))
    lc = sc = None
    for k in range(k_layers):
        w1, w2, w3 = pvars[f"layer{k}/w1"], pvars[f"layer{k}/w2"], pvars[f"layer{k}/w3"]
        w4, w5, w6 = pvars[f"layer{k}/w4"], pvars[f"layer{k}/w5"], pvars[f"layer{k}/w6"]
        lin = nn.add(nn.add(nn.conv2d(df, w1), nn.conv2d(sf, w3)), nn.conv2d(lf, w5))
        sin = nn.add(nn.add(nn.conv2d(df, w2), nn.conv2d(lf, w6)), nn.conv2d(sf, w4))
        lc = nn.svt(_to_cas(lin, h, w, t), pvars[f"layer{k}/lam1"])
        sc = nn.mixed_l12_threshold(_to_cas(sin, h, w, t), pvars[f"layer{k}/lam2"])
        lf = _to_frames(lc, h, w, t)
        sf = _to_frames(sc, h, w, t)
    return lc, sc


def corona_forward(d, params):
    """Run the K-layer unfolded net on an (H, W, T) movie; returns (L, S)."""
    d = np.asarray(d, dtype=np.complex128)
    if d.ndim != 3:
        raise ConfigError("expected an (H, W, T) movie")
    pvars = _vars_from_params(params, requires_grad=False)
    lc, sc = corona_graph(d, pvars, params.k_layers)
    hw = d.shape[:2]
    return (movie_from_casorati(lc.value, hw), movie_from_casorati(sc.value, hw))


def corona_train(dataset, k_layers=4, kernel_size=3, epochs=15, lr=1e-3,
                 batch_size=4, seed=0, val_data=None, lam1=None, lam2=None):
    """Fit per-layer kernels and thresholds to known (D, L, S) triples.

    Loss is the mean over samples of (||S - S_hat||_F^2 + ||L - L_hat||_F^2)/2.
    Initialization reproduces the iterative solver, so training starts from a
    sensible decomposition and only has to improve on it. Returns
    (CoronaParams with best validation loss, history).
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("empty training set")
    if lam1 is None or lam2 is None:
        pairs = [default_lambdas(d) for d, _, _ in dataset]
        dl1 = float(np.mean([p[0] for p in pairs]))
        dl2 = float(np.mean([p[1] for p in pairs]))
        lam1 = dl1 if lam1 is None else lam1
        lam2 = dl2 if lam2 is None else lam2
    params = corona_init_from_fista(k_layers, lam1, lam2, kernel_size)
    pvars = _vars_from_params(params, requires_grad=True)

    def loss_fn(batch, rng):
        total = None
        for d, l_true, s_true in batch:
            lc, sc = corona_graph(np.asarray(d, dtype=np.complex128), pvars, k_layers)
            lt = casorati(np.asarray(l_true, dtype=np.complex128))
            st = casorati(np.asarray(s_true, dtype=np.complex128))
            err = nn.add(nn.vsum(nn.abs2(nn.sub(sc, st))),
                         nn.vsum(nn.abs2(nn.sub(lc, lt))))
            total = err if total is None else nn.add(total, err)
        return nn.mul(total, 0.5 / len(batch))

    clamp = {}
    for k in range(k_layers):
        clamp[f"layer{k}/lam1"] = (0.0, np.inf)
        clamp[f"layer{k}/lam2"] = (0.0, np.inf)
    best, history = nn.train(pvars, loss_fn, dataset, val_data=val_data,
                             epochs=epochs, batch_size=batch_size, lr=lr,
                             seed=seed, clamp=clamp)
    return CoronaParams.from_values(best), history


def corona_loss(dataset, params):
    """Mean of (||S - S_hat||^2 + ||L - L_hat||^2)/2 over a dataset."""
    tot = 0.0
    for d, l_true, s_true in dataset:
        l_hat, s_hat = corona_forward(d, params)
        tot += 0.5 * (np.linalg.norm(s_hat - s_true) ** 2
                      + np.linalg.norm(l_hat - l_true) ** 2)
    return tot / len(dataset)


# ---------------------------------------------------------------------------
# contrast scoring

class CnrCr(NamedTuple):
    cnr: float
    cr: float
    cr_db: float
    cr_defined: bool


def cnr_cr(image, signal_mask, background_mask):
    """Contrast-to-noise ratio and contrast ratio between two regions.

    CNR = |mu_s - mu_b| / sqrt(var_s + var_b) (linear); CR = mu_s / mu_b
    reported also as 20*log10. A zero background mean leaves CR undefined
    (flag cleared, NaN values).
    """
    image = np.asarray(image)
    sm = np.asarray(signal_mask, dtype=bool)
    bm = np.asarray(background_mask, dtype=bool)
    if sm.shape != image.shape or bm.shape != image.shape:
        raise ConfigError("masks must match the image shape")
    if not sm.any() or not bm.any():
        raise ConfigError("masks must be nonempty")
    if (sm & bm).any():
        raise ConfigError("masks must be disjoint")
    s = image[sm].real
    b = image[bm].real
    mu_s, mu_b = s.mean(), b.mean()
    var_s, var_b = s.var(), b.var()
    num = abs(mu_s - mu_b)
    den = np.sqrt(var_s + var_b)
    cnr = 0.0 if num == 0 else (np.inf if den == 0 else num / den)
    if mu_b == 0:
        return CnrCr(float(cnr), float("nan"), float("nan"), False)
    cr = mu_s / mu_b
    cr_db = 20.0 * np.log10(cr) if cr > 0 else float("nan")
    return CnrCr(float(cnr), float(cr), float(cr_db), True)
