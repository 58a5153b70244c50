"""Super-resolution localization of point scatterers.

A frame of well-separated microbubbles can be localized one peak at a
time (classic processing: detect, centroid, accumulate).  At high
concentration the echoes overlap and localization becomes a sparse
recovery problem y = A x + w on an upsampled grid, solved either by
ISTA/FISTA or by a small convolutional network that unrolls a fixed
number of ISTA-like steps with learned kernels and thresholds.

Conventions: high-res images are real and nonnegative (envelope
domain); measurements may be complex, and gradients use the real part
of the adjoint, which is the exact gradient for a real-valued unknown.
Positions are (row, col) in high-res pixel units throughout.
"""

import dataclasses
import math

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.signal import fftconvolve

from . import core, nn, sim
from .core import ConfigError, DataError, NumericalError


# ---------------------------------------------------------------------------
# measurement operator

@dataclasses.dataclass(frozen=True)
class MeasurementOperator:
    """y = downsample(conv_same(x, psf)); the adjoint zero-fills and correlates."""
    psf: np.ndarray
    factor: int
    lr_shape: tuple
    hr_shape: tuple
    offset: int
    mu_max: float   # operator norm estimate from power iteration

    def forward(self, x):
        x = np.asarray(x)
        if x.shape != self.hr_shape:
            raise ConfigError(f"expected high-res shape {self.hr_shape}, got {x.shape}")
        blurred = fftconvolve(x, self.psf, mode="same")
        return blurred[self.offset::self.factor, self.offset::self.factor]

    def adjoint(self, y):
        y = np.asarray(y)
        if y.shape != self.lr_shape:
            raise ConfigError(f"expected low-res shape {self.lr_shape}, got {y.shape}")
        up = np.zeros(self.hr_shape, dtype=y.dtype)
        up[self.offset::self.factor, self.offset::self.factor] = y
        return fftconvolve(up, np.conj(self.psf[::-1, ::-1]), mode="same")


def build_operator(psf, grid_or_shape, factor=None):
    """Assemble the blur + decimate operator for a given grid.

    `grid_or_shape` is an ImageGrid (factor taken from its upscale) or a
    low-res (nz, nx) tuple with `factor` given explicitly.
    """
    if isinstance(grid_or_shape, sim.ImageGrid):
        lr_shape = (grid_or_shape.nz, grid_or_shape.nx)
        factor = grid_or_shape.upscale
    else:
        lr_shape = tuple(int(v) for v in grid_or_shape)
        if factor is None:
            raise ConfigError("factor is required when passing a bare shape")
    factor = int(factor)
    if factor < 1:
        raise ConfigError("factor must be >= 1")
    psf = np.asarray(psf)
    if psf.ndim != 2 or psf.shape[0] % 2 == 0 or psf.shape[1] % 2 == 0:
        raise ConfigError("psf must be 2-D with odd sides")
    if not np.all(np.isfinite(psf)):
        raise DataError("psf contains non-finite values")
    hr_shape = (lr_shape[0] * factor, lr_shape[1] * factor)
    if psf.shape[0] > hr_shape[0] or psf.shape[1] > hr_shape[1]:
        raise ConfigError(f"psf {psf.shape} larger than high-res grid {hr_shape}")
    op = MeasurementOperator(psf, factor, lr_shape, hr_shape, factor // 2, 0.0)
    g = core.rng(12345)
    v = g.standard_normal(hr_shape)
    v /= np.linalg.norm(v)
    for _ in range(50):
        v = op.adjoint(op.forward(v)).real
        v /= max(np.linalg.norm(v), 1e-300)
    mu_max = float(np.linalg.norm(op.forward(v)))
    object.__setattr__(op, "mu_max", mu_max)
    return op


def lambda_max(op, y):
    """Smallest regularization that provably keeps the recovery at zero."""
    return float(np.max(np.abs(op.adjoint(y))))


def ista_recover(y, op, lam, mu=None, n_iters=50, variant="ista"):
    """Nonnegative l1-regularized recovery by proximal gradient.

    Iterates x+ = max(x - mu*Re(A^H(Ax - y)) - lam*mu, 0); the one-sided
    threshold is the prox of lam*||x||_1 restricted to x >= 0.  Returns
    the recovered high-res frame and the objective value per iteration.
    """
    y = np.asarray(y)
    if y.shape != op.lr_shape:
        raise ConfigError(f"expected low-res shape {op.lr_shape}, got {y.shape}")
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    if variant not in ("ista", "fista"):
        raise ConfigError(f"unknown variant '{variant}'")
    bound = 2.0 / op.mu_max ** 2
    if mu is None:
        mu = 0.5 * bound
    if not 0 < mu < bound:
        raise ConfigError(f"mu must be in (0, {bound:.3g}) for this operator")
    n_iters = int(n_iters)
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1")

    def objective(x):
        r = op.forward(x) - y
        return 0.5 * np.sum(np.abs(r) ** 2) + lam * np.sum(x)

    x = np.zeros(op.hr_shape)
    base = objective(x)
    z, t = x, 1.0
    trace = []
    for _ in range(n_iters):
        grad = np.real(op.adjoint(op.forward(z) - y))
        x_new = np.maximum(z - mu * grad - lam * mu, 0.0)
        if variant == "fista":
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        else:
            z = x_new
        x = x_new
        trace.append(objective(x))
        if not np.isfinite(trace[-1]) or trace[-1] > 1e6 * (base + 1.0):
            raise NumericalError("objective diverging; decrease the step size mu")
    return x, trace


# ---------------------------------------------------------------------------
# classic localization

@dataclasses.dataclass(frozen=True)
class LocalizationSet:
    positions: np.ndarray    # (n, 2) sub-pixel (row, col), high-res units
    intensities: np.ndarray  # (n,) > 0
    shape: tuple             # high-res grid bounds

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        inten = np.asarray(self.intensities, dtype=np.float64).ravel()
        if len(pos) != len(inten):
            raise ConfigError("positions and intensities must match in length")
        if len(inten) and inten.min() <= 0:
            raise DataError("intensities must be positive")
        shape = tuple(int(s) for s in self.shape)
        if len(pos) and (pos.min() < -0.5 or np.any(pos.max(axis=0) > np.array(shape) - 0.5)):
            raise DataError("positions outside the grid bounds")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "shape", shape)

    def __len__(self):
        return len(self.intensities)


def classic_ulm(frame, detect_threshold, min_separation=2.0, factor=1):
    """Peak detection + 3x3 intensity-weighted centroid refinement.

    Works on the envelope of a single frame (2-D) or a stack (3-D,
    returning one LocalizationSet per frame).  `min_separation` is in
    input pixels; positions are returned in high-res units, i.e. scaled
    by `factor` with the decimation offset folded in.
    """
    frame = np.asarray(frame)
    if frame.ndim == 3:
        return [classic_ulm(f, detect_threshold, min_separation, factor) for f in frame]
    if frame.ndim != 2:
        raise ConfigError("frame must be 2-D (or a 3-D stack)")
    factor = int(factor)
    env = np.abs(frame)
    h, w = env.shape
    peaks = (env == maximum_filter(env, size=3)) & (env > detect_threshold)
    rows, cols = np.nonzero(peaks)
    order = np.argsort(env[rows, cols])[::-1]
    kept_r, kept_c, kept_a = [], [], []
    for k in order:
        r, c = rows[k], cols[k]
        if any((r - kr) ** 2 + (c - kc) ** 2 < min_separation ** 2
               for kr, kc in zip(kept_r, kept_c)):
            continue
        sl = env[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
        rr, cc = np.mgrid[max(r - 1, 0):min(r + 2, h), max(c - 1, 0):min(c + 2, w)]
        tot = sl.sum()
        kept_r.append(float((rr * sl).sum() / tot))
        kept_c.append(float((cc * sl).sum() / tot))
        kept_a.append(float(env[r, c]))
    pos = np.array([kept_r, kept_c], dtype=np.float64).T.reshape(-1, 2)
    pos = pos * factor + factor // 2
    return LocalizationSet(pos, np.asarray(kept_a),
                           (h * factor, w * factor))


def accumulate(items, shape=None):
    """Sum per-frame recoveries (or bin localization sets) into one image."""
    items = list(items)
    if not items:
        raise ConfigError("nothing to accumulate")
    if isinstance(items[0], LocalizationSet):
        shapes = {s.shape for s in items}
        if len(shapes) != 1:
            raise ConfigError(f"inconsistent grids: {sorted(shapes)}")
        shape = items[0].shape
        out = np.zeros(shape)
        for s in items:
            if len(s) == 0:
                continue
            r = np.clip(np.rint(s.positions[:, 0]).astype(int), 0, shape[0] - 1)
            c = np.clip(np.rint(s.positions[:, 1]).astype(int), 0, shape[1] - 1)
            np.add.at(out, (r, c), s.intensities)
        return out
    frames = [np.asarray(f) for f in items]
    if len({f.shape for f in frames}) != 1:
        raise ConfigError("frames must share one shape")
    return np.sum(np.stack(frames), axis=0)


# ---------------------------------------------------------------------------
# unfolded network

@dataclasses.dataclass(frozen=True)
class UnfoldedUlmParams:
    """Per-layer kernel pairs + thresholds for the unrolled recovery net.

    Layer k computes x <- gate(W1_k * up(y) + W2_k * x) where * is
    same-size correlation, up is zero-insertion upsampling and gate is
    the sigmoid soft threshold with smoothness beta; the final layer is
    clamped one-sided so the output is a nonnegative intensity image.
    """
    w1: tuple                 # K kernels, each (1, 1, kh, kw)
    w2: tuple
    lam: np.ndarray           # (K,) thresholds
    beta: float = 20.0
    factor: int = 8

    def __post_init__(self):
        w1 = tuple(np.asarray(w, dtype=np.float64) for w in self.w1)
        w2 = tuple(np.asarray(w, dtype=np.float64) for w in self.w2)
        lam = np.asarray(self.lam, dtype=np.float64).ravel()
        if not (len(w1) == len(w2) == len(lam)) or len(w1) == 0:
            raise ConfigError("need matching per-layer kernels and thresholds")
        for w in w1 + w2:
            if w.ndim != 4 or w.shape[:2] != (1, 1):
                raise ConfigError("kernels must be (1, 1, kh, kw)")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "lam", lam)

    @property
    def k_layers(self):
        return len(self.w1)

    def param_count(self):
        return sum(w.size for w in self.w1) + sum(w.size for w in self.w2) + self.lam.size

    def to_values(self):
        out = {}
        for k in range(self.k_layers):
            out[f"layer{k}/w1"] = self.w1[k]
            out[f"layer{k}/w2"] = self.w2[k]
            out[f"layer{k}/lam"] = np.asarray(self.lam[k])
        out["beta"] = np.asarray(self.beta)
        out["factor"] = np.asarray(float(self.factor))
        return out

    @classmethod
    def from_values(cls, values):
        k = 0
        while f"layer{k}/w1" in values:
            k += 1
        if k == 0:
            raise ConfigError("checkpoint holds no unfolded-net layers")
        try:
            w1 = tuple(values[f"layer{i}/w1"] for i in range(k))
            w2 = tuple(values[f"layer{i}/w2"] for i in range(k))
            lam = np.array([float(values[f"layer{i}/lam"]) for i in range(k)])
            beta = float(values["beta"])
            factor = int(float(values["factor"]))
        except KeyError as exc:
            raise ConfigError(f"checkpoint missing {exc}") from exc
        return cls(w1, w2, lam, beta, factor)


def init_unfolded_ulm(k_layers=10, kernel_size=5, seed=0, factor=8, beta=20.0):
    """Random small-kernel start: identity-leaning W2, blur-sized W1."""
    g = core.rng(seed)
    scale = 1.0 / kernel_size
    w1, w2 = [], []
    for _ in range(k_layers):
        w1.append(scale * g.standard_normal((1, 1, kernel_size, kernel_size)))
        k2 = 0.1 * scale * g.standard_normal((1, 1, kernel_size, kernel_size))
        k2[0, 0, kernel_size // 2, kernel_size // 2] += 1.0
        w2.append(k2)
    return UnfoldedUlmParams(tuple(w1), tuple(w2), np.full(k_layers, 0.1),
                             beta, factor)


def _center_crop(kernel, size):
    pad = [(max(size - s, 0) // 2 + (max(size - s, 0) % 2),
            max(size - s, 0) // 2) for s in kernel.shape]
    kernel = np.pad(kernel, pad)
    r0 = (kernel.shape[0] - size) // 2
    c0 = (kernel.shape[1] - size) // 2
    return kernel[r0:r0 + size, c0:c0 + size]


def matched_filter_init(psf, k_layers=10, kernel_size=17, scale=0.01,
                        lam0=0.02, factor=8, beta=20.0):
    """Model-based start: every layer correlates the input with the psf
    (W1 = scale * psf) and passes the state through unchanged (W2 =
    identity).  The stack then accumulates matched-filter evidence; for
    decimated grids the kernel must span a couple of decimation periods
    so detections interpolate between low-res sample sites.
    """
    psf = np.asarray(psf, dtype=np.float64)
    k1 = _center_crop(scale * psf, kernel_size)[None, None]
    k2 = np.zeros((kernel_size, kernel_size))
    k2[kernel_size // 2, kernel_size // 2] = 1.0
    k2 = k2[None, None]
    return UnfoldedUlmParams(
        tuple(k1.copy() for _ in range(k_layers)),
        tuple(k2.copy() for _ in range(k_layers)),
        np.full(k_layers, float(lam0)), beta, factor)


def unfolded_from_ista(psf, mu, lam, k_layers=10, kernel_size=5, factor=8,
                       beta=20.0):
    """Initialize layers to mimic ISTA steps for the given blur.

    W1 = mu * psf (as a correlation kernel this is the adjoint of the
    blur) and W2 = identity - mu * (psf autocorrelation), both cropped
    to the kernel size; thresholds start at lam * mu.  Exact only for
    factor 1, where A^H A is a pure convolution; otherwise a starting
    point for training.
    """
    psf = np.asarray(psf, dtype=np.float64)
    k1 = _center_crop(mu * psf, kernel_size)[None, None]
    auto = fftconvolve(psf, psf[::-1, ::-1], mode="full")
    k2 = _center_crop(-mu * auto, kernel_size)
    k2[kernel_size // 2, kernel_size // 2] += 1.0
    k2 = k2[None, None]
    return UnfoldedUlmParams(
        tuple(k1.copy() for _ in range(k_layers)),
        tuple(k2.copy() for _ in range(k_layers)),
        np.full(k_layers, lam * mu), beta, factor)


def _upsampled_input(y, params):
    y = np.asarray(y)
    if y.ndim != 2:
        raise ConfigError("observation must be a 2-D frame")
    f = params.factor
    up = np.zeros((y.shape[0] * f, y.shape[1] * f))
    up[f // 2::f, f // 2::f] = y.real
    return up


def unfolded_ulm_forward(y, params):
    """Run the unrolled net on one low-res frame; plain numpy fast path."""
    from scipy.special import expit
    u = _upsampled_input(y, params)[None]       # (1, H, W) channel axis
    x = np.zeros_like(u)
    last = params.k_layers - 1
    for k in range(params.k_layers):
        v = nn._conv2d_raw(u, params.w1[k]) + nn._conv2d_raw(x, params.w2[k])
        x = v * expit(params.beta * (np.abs(v) - params.lam[k]))
        if k == last:
            x = np.maximum(x, 0.0)
    return x[0]


def _vars_from_unfolded(params):
    pvars = {}
    for k in range(params.k_layers):
        pvars[f"layer{k}/w1"] = nn.parameter(params.w1[k], f"layer{k}/w1")
        pvars[f"layer{k}/w2"] = nn.parameter(params.w2[k], f"layer{k}/w2")
        pvars[f"layer{k}/lam"] = nn.parameter(np.asarray(params.lam[k]),
                                              f"layer{k}/lam")
    return pvars


def _unfolded_graph(u, pvars, k_layers, beta, clamp=True):
    """u: (..., 1, H, W) constant input; returns the output Var.

    Training runs with clamp=False: the one-sided output clamp has zero
    gradient wherever the net is negative, which otherwise turns
    "everything negative" into an absorbing state.  Inference clamps.
    """
    u = nn.as_var(u)
    x = nn.as_var(np.zeros_like(u.value))
    for k in range(k_layers):
        v = nn.add(nn.conv2d(u, pvars[f"layer{k}/w1"]),
                   nn.conv2d(x, pvars[f"layer{k}/w2"]))
        x = nn.sigmoid_soft_threshold(v, pvars[f"layer{k}/lam"], beta)
    return nn.relu(x) if clamp else x


def unfolded_ulm_train(dataset, params=None, sigma_g=1.0, gamma=1e-2,
                       epochs=10, lr=1e-3, batch_size=4, seed=0,
                       val_data=None):
    """Fit the unrolled net to Gaussian-blurred ground-truth spike maps.

    Loss per frame: ||f(y) - G(sigma_g) * x_true||^2 + gamma * ||f(y)||_1.
    The blur makes near-miss localizations cheap instead of all-or-
    nothing; gamma keeps the background dark.  Returns the best
    validation parameters and the training history.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("empty training set")
    if params is None:
        params = init_unfolded_ulm(seed=seed)
    if gamma < 0 or sigma_g <= 0:
        raise ConfigError("need gamma >= 0 and sigma_g > 0")

    def prep(frame):
        if not hasattr(frame, "y") or not hasattr(frame, "x_true"):
            raise ConfigError("training frames must carry y and x_true")
        target = gaussian_filter(np.asarray(frame.x_true, dtype=np.float64),
                                 sigma_g, mode="constant")
        return _upsampled_input(frame.y, params), target

    train_pairs = [prep(f) for f in dataset]
    val_pairs = [prep(f) for f in val_data] if val_data else None
    k_layers, beta = params.k_layers, params.beta

    def loss_fn(batch, rng):
        u = nn.as_var(np.stack([b[0] for b in batch])[:, None])
        target = np.stack([b[1] for b in batch])[:, None]
        out = _unfolded_graph(u, loss_fn.pvars, k_layers, beta, clamp=False)
        err = nn.vsum(nn.abs2(nn.sub(out, target)))
        penalty = nn.mul(gamma, nn.vsum(nn.sqrt(nn.add(nn.abs2(out), 1e-12))))
        return nn.mul(1.0 / len(batch), nn.add(err, penalty))

    pvars = _vars_from_unfolded(params)
    loss_fn.pvars = pvars
    best, history = nn.train(pvars, loss_fn, train_pairs, val_data=val_pairs,
                             epochs=epochs, lr=lr, batch_size=batch_size,
                             seed=seed, clamp={f"layer{k}/lam": (0.0, np.inf)
                                               for k in range(k_layers)})
    best = dict(best)
    best["beta"] = np.asarray(beta)
    best["factor"] = np.asarray(float(params.factor))
    return UnfoldedUlmParams.from_values(best), history


# ---------------------------------------------------------------------------
# metrics

@dataclasses.dataclass(frozen=True)
class UlmMetrics:
    precision: float   # nan when nothing was estimated
    recall: float      # nan when the truth is empty
    loc_rmse: float    # nan when nothing matched
    n_est: int
    n_truth: int
    n_matched: int


def _as_localizations(obj, what):
    if isinstance(obj, LocalizationSet):
        return obj
    frame = np.asarray(obj)
    if frame.ndim != 2:
        raise ConfigError(f"{what} must be a LocalizationSet or a 2-D frame")
    rows, cols = np.nonzero(frame)
    return LocalizationSet(np.stack([rows, cols], axis=1).astype(np.float64),
                           np.abs(frame[rows, cols]), frame.shape)


def ulm_metrics(est, truth, match_radius=2.0):
    """Greedy matching in descending estimated intensity, truth used once."""
    if match_radius <= 0:
        raise ConfigError("match_radius must be positive")
    est = _as_localizations(est, "estimate")
    truth = _as_localizations(truth, "truth")
    order = np.argsort(-est.intensities, kind="stable")
    used = np.zeros(len(truth), dtype=bool)
    dists = []
    for k in order:
        if used.all():
            break
        d = np.linalg.norm(truth.positions - est.positions[k], axis=1)
        d[used] = np.inf
        j = int(np.argmin(d)) if len(d) else 0
        if len(d) and d[j] <= match_radius:
            used[j] = True
            dists.append(d[j])
    n_matched = len(dists)
    precision = n_matched / len(est) if len(est) else float("nan")
    recall = n_matched / len(truth) if len(truth) else float("nan")
    rmse = float(np.sqrt(np.mean(np.square(dists)))) if dists else float("nan")
    return UlmMetrics(precision, recall, rmse, len(est), len(truth), n_matched)
