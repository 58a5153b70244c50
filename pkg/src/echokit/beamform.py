"""Receive beamforming: geometric delays, delay-and-sum, minimum-variance
adaptive weights, and a small learned apodization agent.

Channel records are (n_elements, n_samples) complex arrays sampled at
geom.sampling_rate. A delay table holds the two-way time of flight per
pixel and element (plane-wave transmit path plus return path, constant
speed of sound). Delay-and-sum interpolates each channel at its delay and
sums under an apodization window. The adaptive path estimates a spatially
smoothed, diagonally loaded covariance from predelayed snapshots and
solves for the distortionless minimum-variance weights

    w = R^-1 a / (a^H R^-1 a),

which keep unit gain toward the focus (a is the all-ones vector once the
data are delay-corrected) while minimizing output power. The agent is a
small fully connected network trained to map a predelayed snapshot to
weights that mimic the adaptive ones through a log-domain pixel loss and
a soft sum-to-one penalty.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import core, nn
from .core import ConfigError, DataError, NumericalError


# ---------------------------------------------------------------------------
# delays

@dataclass(frozen=True)
class DelayTable:
    """Two-way delays in seconds, (nz, nx, n_elements)."""
    delays: np.ndarray
    interpolation: str = "linear"

    def __post_init__(self):
        d = np.asarray(self.delays, dtype=np.float64)
        if d.ndim != 3:
            raise ConfigError("delay table must be (nz, nx, n_elements)")
        if self.interpolation != "linear":
            raise ConfigError(f"unsupported interpolation {self.interpolation!r}")
        if not np.all(np.isfinite(d)) or d.min() < 0:
            raise DataError("delays must be finite and nonnegative")
        object.__setattr__(self, "delays", d)


def compute_delays(geom, grid, tx_angle=0.0):
    """Plane-wave transmit path plus per-element return path, over the grid."""
    z, x = grid.pixel_coords()
    tx = z[:, None] * math.cos(tx_angle) + x[None, :] * math.sin(tx_angle)
    ex = geom.element_positions[:, 0]
    ez = geom.element_positions[:, 1]
    rx = np.sqrt((x[None, :, None] - ex) ** 2 + (z[:, None, None] - ez) ** 2)
    return DelayTable((tx[:, :, None] + rx) / geom.speed_of_sound)


# ---------------------------------------------------------------------------
# delay-and-sum

def _resolve_apod(apod, n):
    if apod is None:
        apod = "hann"
    if isinstance(apod, str):
        if apod == "hann":
            w = np.hanning(n)
            return w / w.sum()
        if apod == "uniform":
            return np.full(n, 1.0 / n)
        raise ConfigError(f"unknown apodization {apod!r}")
    w = np.asarray(apod)
    if w.shape[-1] != n:
        raise ConfigError("apodization length must match element count")
    return w


def _sample_channels(geom, channels, delays, sample_offset=0.0):
    """Linear-interpolated channel values at delay + offset/fs per pixel.

    Returns (values (nz, nx, N), valid (nz, nx)); pixels needing samples
    outside the record are zeroed and flagged.
    """
    ch = np.asarray(channels, dtype=np.complex128)
    n_el, n_t = ch.shape
    idx = delays.delays * geom.sampling_rate + sample_offset
    if n_el != idx.shape[-1]:
        raise ConfigError("channel count does not match delay table")
    lo = np.floor(idx).astype(np.int64)
    frac = idx - lo
    valid = np.all((lo >= 0) & (lo + 1 <= n_t - 1), axis=-1)
    lo_safe = np.clip(lo, 0, n_t - 2)
    el = np.arange(n_el)
    vals = ch[el, lo_safe] * (1.0 - frac) + ch[el, lo_safe + 1] * frac
    vals[~valid] = 0.0
    return vals, valid


def das_beamform(geom, channels, delays, apod="hann"):
    """Apodized coherent sum per pixel; returns (image, valid mask)."""
    vals, valid = _sample_channels(geom, channels, delays)
    w = _resolve_apod(apod, vals.shape[-1])
    image = np.sum(w * vals, axis=-1)
    image[~valid] = 0.0
    return image, valid


# ---------------------------------------------------------------------------
# covariance and adaptive weights

@dataclass(frozen=True)
class CovarianceEstimate:
    """Spatially smoothed sample covariance after diagonal loading."""
    r: np.ndarray
    subarray_length: int
    loading: float

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.complex128)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ConfigError("covariance must be square")
        if np.max(np.abs(r - r.conj().T)) > 1e-12 * max(np.max(np.abs(r)), 1e-300):
            raise NumericalError("covariance estimate is not Hermitian")
        object.__setattr__(self, "r", r)


def estimate_covariance(snapshots, subarray_len=None, n_avg_fast=3, delta=1e-3):
    """Average uu^H over sliding subarrays and fast-time rows, then load.

    snapshots: (N,) single snapshot or (M, N) with fast-time rows; when M
    exceeds n_avg_fast only the central n_avg_fast rows enter. Diagonal
    loading adds delta * trace(R)/L to each diagonal entry.
    """
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=np.complex128))
    m, n = snaps.shape
    if subarray_len is None:
        subarray_len = max(n // 2, 1)
    L = int(subarray_len)
    if not 1 <= L <= n:
        raise ConfigError("subarray length must be in [1, n_elements]")
    if n_avg_fast < 1:
        raise ConfigError("need at least one fast-time row")
    if delta < 0:
        raise ConfigError("loading must be nonnegative")
    if m > n_avg_fast:
        start = (m - n_avg_fast) // 2
        snaps = snaps[start:start + n_avg_fast]
        m = n_avg_fast
    n_sub = n - L + 1
    count = m * n_sub
    if count < L:
        warnings.warn("covariance averaged over fewer snapshots than its size; "
                      "estimate is rank-deficient (loading keeps it invertible)",
                      RuntimeWarning, stacklevel=2)
    windows = np.lib.stride_tricks.sliding_window_view(snaps, L, axis=1)
    windows = windows.reshape(count, L)
    r = np.einsum("ka,kb->ab", windows, windows.conj()) / count
    r = (r + r.conj().T) / 2.0
    r = r + delta * (np.trace(r).real / L) * np.eye(L)
    return CovarianceEstimate(r, L, delta)


def mvdr_weights(cov, a=None):
    """Distortionless minimum-variance weights w = R^-1 a / (a^H R^-1 a)."""
    r = cov.r if isinstance(cov, CovarianceEstimate) else np.asarray(cov, dtype=np.complex128)
    if a is None:
        a = np.ones(r.shape[0], dtype=np.complex128)
    a = np.asarray(a, dtype=np.complex128)
    if a.shape != (r.shape[0],):
        raise ConfigError("steering vector length must match covariance size")
    if not np.any(a):
        raise ConfigError("steering vector must be nonzero")
    try:
        x = core.solve_hermitian(r, a)
    except Exception as exc:
        raise NumericalError(
            "covariance solve failed; try increasing diagonal loading") from exc
    denom = a.conj() @ x
    if not np.isfinite(denom) or denom.real <= 0:
        raise NumericalError(
            "covariance is not positive definite; try increasing diagonal loading")
    w = x / denom
    return w / np.conj(w.conj() @ a)


def predelayed_snapshots(geom, channels, delays, n_fast=3):
    """Fast-time neighbor snapshots per pixel: (nz, nx, n_fast, N) + mask."""
    if n_fast < 1:
        raise ConfigError("need at least one fast-time sample")
    stacks, masks = [], []
    for k in range(n_fast):
        off = k - (n_fast - 1) // 2
        vals, valid = _sample_channels(geom, channels, delays, sample_offset=off)
        stacks.append(vals)
        masks.append(valid)
    snaps = np.stack(stacks, axis=2)
    valid = np.logical_and.reduce(masks)
    snaps[~valid] = 0.0
    return snaps, valid


def mvdr_beamform(geom, channels, delays, subarray_len=None, n_avg_fast=3,
                  delta=1e-3):
    """Per-pixel adaptive beamforming; returns (image, valid mask).

    Each pixel gets its own smoothed covariance and weights; the output is
    the weight response averaged over the center snapshot's subarrays.
    """
    snaps, valid = predelayed_snapshots(geom, channels, delays, n_fast=n_avg_fast)
    nz, nx, _, n = snaps.shape
    L = max(n // 2, 1) if subarray_len is None else int(subarray_len)
    image = np.zeros((nz, nx), dtype=np.complex128)
    center = (n_avg_fast - 1) // 2
    for i in range(nz):
        for j in range(nx):
            if not valid[i, j] or not snaps[i, j].any():
                continue
            cov = estimate_covariance(snaps[i, j], L, n_avg_fast, delta)
            w = mvdr_weights(cov)
            u = np.lib.stride_tricks.sliding_window_view(snaps[i, j, center], L)
            image[i, j] = np.mean(u @ w.conj())
    return image, valid


# ---------------------------------------------------------------------------
# learned apodization agent

@dataclass
class AgentParams:
    """Fully connected stack; hidden layers use the mirrored-rectifier."""
    ws: tuple
    bs: tuple

    def __post_init__(self):
        if len(self.ws) != len(self.bs) or not self.ws:
            raise ConfigError("need matching weight/bias stacks")

    @property
    def n_elements(self):
        return self.ws[-1].shape[1] // 2

    def to_values(self):
        out = {}
        for k, (w, b) in enumerate(zip(self.ws, self.bs)):
            out[f"layer{k}/w"] = w
            out[f"layer{k}/b"] = b
        return out

    @classmethod
    def from_values(cls, values):
        ws, bs = [], []
        for k in range(len(values) // 2):
            try:
                ws.append(np.asarray(values[f"layer{k}/w"], dtype=np.float64))
                bs.append(np.asarray(values[f"layer{k}/b"], dtype=np.float64))
            except KeyError as exc:
                raise ConfigError(f"missing agent parameter {exc}") from exc
        return cls(tuple(ws), tuple(bs))


def make_interference_scene(seed, n_elements=8, p_int=100.0, noise_power=0.01):
    """Snapshots of a broadside target plus one strong off-axis interferer.

    Returns (snapshots, interference_plus_noise_covariance); the latter is
    the analytic R_in for SINR bookkeeping.  Steering assumes a half-ish
    wavelength pitch linear array at 5 MHz.
    """
    g = core.rng(seed)
    n = int(n_elements)
    x = (np.arange(n) - (n - 1) / 2) * 3e-4
    theta = np.deg2rad(g.uniform(10, 60)) * g.choice([-1.0, 1.0])
    d = np.exp(2j * np.pi * 5e6 / 1540.0 * x * np.sin(theta))
    rows = []
    for _ in range(3):
        s = (g.standard_normal() + 1j * g.standard_normal()) / np.sqrt(2)
        i = np.sqrt(p_int) * (g.standard_normal() + 1j * g.standard_normal()) / np.sqrt(2)
        nv = np.sqrt(noise_power) * (g.standard_normal(n) + 1j * g.standard_normal(n)) / np.sqrt(2)
        rows.append(s * np.ones(n) + i * d + nv)
    r_in = p_int * np.outer(d, d.conj()) + noise_power * np.eye(n)
    return np.stack(rows), r_in


def init_agent(n_elements, hidden=(32, 32, 32), seed=0):
    """Glorot-initialized stack: 2N -> hidden... -> 2N real features."""
    if n_elements < 1 or any(h < 1 for h in hidden):
        raise ConfigError("layer widths must be positive")
    g = core.rng(seed)
    ws, bs = [], []
    fan_in = 2 * n_elements
    for h in hidden:
        ws.append(g.standard_normal((fan_in, h)) * math.sqrt(2.0 / (fan_in + h)))
        bs.append(np.zeros(h))
        fan_in = 2 * h          # mirrored rectifier doubles the width
    out = 2 * n_elements
    ws.append(g.standard_normal((fan_in, out)) * math.sqrt(2.0 / (fan_in + out)))
    bs.append(np.zeros(out))
    return AgentParams(tuple(ws), tuple(bs))


def _vars_from_agent(params, requires_grad=True):
    out = {}
    for k, (w, b) in enumerate(zip(params.ws, params.bs)):
        out[f"layer{k}/w"] = nn.Var(w, requires_grad=requires_grad, name=f"layer{k}/w")
        out[f"layer{k}/b"] = nn.Var(b, requires_grad=requires_grad, name=f"layer{k}/b")
    return out


def _agent_graph(features, pvars, n_layers, rng=None, dropout_p=0.2):
    x = nn.as_var(features)
    for k in range(n_layers - 1):
        x = nn.add(nn.matmul(x, pvars[f"layer{k}/w"]), pvars[f"layer{k}/b"])
        x = nn.anti_rectifier(x)
        x = nn.dropout(x, dropout_p, rng)
    k = n_layers - 1
    return nn.add(nn.matmul(x, pvars[f"layer{k}/w"]), pvars[f"layer{k}/b"])


def _split_features(u):
    u = np.atleast_2d(np.asarray(u, dtype=np.complex128))
    return np.concatenate([u.real, u.imag], axis=1), u


def agent_weights(params, snapshots):
    """Evaluate the trained agent: snapshot(s) (N,) or (B, N) -> weights."""
    feats, u = _split_features(snapshots)
    if u.shape[1] != params.n_elements:
        raise ConfigError("snapshot length does not match the trained agent")
    pvars = _vars_from_agent(params, requires_grad=False)
    y = _agent_graph(feats, pvars, len(params.ws), rng=None).value
    n = params.n_elements
    w = y[:, :n] + 1j * y[:, n:]
    return w[0] if np.asarray(snapshots).ndim == 1 else w


def train_apodization_agent(dataset, hidden=(32, 32, 32), epochs=40, lr=1e-3,
                            batch_size=64, seed=0, lambda_u=1.0, dropout_p=0.2,
                            val_data=None, init_params=None):
    """Fit the agent to (snapshot, target weights) pairs.

    The loss is the log-domain squared error between the agent-beamformed
    pixel power and the target-weight pixel power, plus
    lambda_u * |sum(w) - 1|^2 softly holding the distortionless gain.
    init_params warm-starts from an earlier run (hidden is then ignored).
    Returns (AgentParams, history from the trainer).
    """
    if not dataset:
        raise ConfigError("empty training set")
    n = np.asarray(dataset[0][0]).shape[-1]
    init = init_params or init_agent(n, hidden=hidden, seed=seed)
    n_layers = len(init.ws)
    pvars = _vars_from_agent(init)

    def prep(pairs):
        out = []
        for u, wt in pairs:
            u = np.asarray(u, dtype=np.complex128)
            out.append((u, np.abs(np.vdot(wt, u)) ** 2))
        return out

    def loss_fn(batch, rng=None):
        u = np.stack([s[0] for s in batch])
        target_p2 = np.array([s[1] for s in batch])
        feats = np.concatenate([u.real, u.imag], axis=1)
        y = _agent_graph(feats, pvars, n_layers, rng=rng, dropout_p=dropout_p)
        # the real feature row acts as complex weights via fixed mixings:
        # sum(y * mix) recovers Re/Im of w^H u and of sum(w)
        re_mix = np.concatenate([u.real, u.imag], axis=1)
        im_mix = np.concatenate([u.imag, -u.real], axis=1)
        pix_re = nn.vsum(nn.mul(y, re_mix), axis=1)
        pix_im = nn.vsum(nn.mul(y, im_mix), axis=1)
        p2 = nn.add(nn.abs2(pix_re), nn.abs2(pix_im))
        ones_re = np.concatenate([np.ones(n), np.zeros(n)])
        ones_im = np.concatenate([np.zeros(n), np.ones(n)])
        sum_re = nn.vsum(nn.mul(y, ones_re), axis=1)
        sum_im = nn.vsum(nn.mul(y, ones_im), axis=1)
        penalty = nn.add(nn.vsum(nn.abs2(nn.sub(sum_re, 1.0))), nn.vsum(nn.abs2(sum_im)))
        loss = nn.add(nn.msle_loss(p2, target_p2), nn.mul(penalty, lambda_u))
        return nn.mul(loss, 1.0 / len(batch))

    best, history = nn.train(pvars, loss_fn, prep(dataset),
                             val_data=prep(val_data) if val_data else None,
                             epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    return AgentParams.from_values(best), history
