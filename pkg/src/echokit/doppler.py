"""Slow-time spectral estimation and autocorrelation velocimetry.

Doppler processing works along the slow-time axis: a pixel or range gate
is revisited once per frame and blood motion shows up as a complex
rotation across frames.  This module provides the standard estimators
for that axis: Welch-averaged periodograms, a Capon (minimum-variance)
filterbank whose every filter is constrained to unity response at its
own frequency, short-time spectrograms built from either estimator, and
the Kasai lag-1 autocorrelator for mean-velocity maps.

Frequencies are cycles per slow-time sample on [-0.5, 0.5).  Welch
spectra are density-normalized: summed over bins times the bin width,
white noise integrates to its variance and a unit-amplitude exponential
to ~1.  Capon reports power matched per steering vector, so the same
unit tone reads ~1 directly at its bin regardless of filter length.
"""

import dataclasses

import numpy as np

from . import core
from .core import ConfigError, DataError, NumericalError


@dataclasses.dataclass(frozen=True)
class SpectralEstimate:
    freqs: np.ndarray
    power: np.ndarray
    estimator: str

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=np.float64)
        power = np.asarray(self.power, dtype=np.float64)
        if freqs.ndim != 1 or power.shape != freqs.shape:
            raise ConfigError("freqs and power must be matching 1-D arrays")
        if freqs.min() < -0.5 or freqs.max() >= 0.5:
            raise DataError("frequencies must lie in [-0.5, 0.5) cycles/sample")
        if power.min() < -1e-12 * max(power.max(initial=0.0), 1.0):
            raise DataError("spectral power must be nonnegative")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "power", np.maximum(power, 0.0))


@dataclasses.dataclass(frozen=True)
class FilterBank:
    freqs: np.ndarray
    weights: np.ndarray   # (F, M), row f steered to freqs[f]

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.complex128)
        if weights.ndim != 2 or freqs.shape != (weights.shape[0],):
            raise ConfigError("filter bank needs one length-M filter per frequency")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "weights", weights)

    @property
    def filter_len(self):
        return self.weights.shape[1]


@dataclasses.dataclass(frozen=True)
class VelocityMap:
    phase: np.ndarray       # radians/frame, in (-pi, pi]
    magnitude: np.ndarray   # mean |lag-1 autocorrelation| over the gate
    mask: np.ndarray        # False where the gate had no signal
    gate: tuple


def _window(window, n):
    if isinstance(window, str):
        if window == "hann":
            return np.hanning(n)
        if window == "uniform":
            return np.ones(n)
        raise ConfigError(f"unknown window '{window}'")
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"window length {w.shape} does not match segment {n}")
    return w


def welch_psd(x, segment_len=None, overlap_frac=0.5, window="hann"):
    """Average of windowed-segment periodograms, density-normalized."""
    x = np.asarray(x, dtype=np.complex128).ravel()
    n = len(x)
    if n == 0:
        raise DataError("empty signal")
    if segment_len is None:
        segment_len = n
    segment_len = int(segment_len)
    if not 1 <= segment_len <= n:
        raise ConfigError(f"segment_len {segment_len} must be in [1, {n}]")
    if not 0.0 <= overlap_frac < 1.0:
        raise ConfigError("overlap_frac must be in [0, 1)")
    w = _window(window, segment_len)
    hop = max(1, int(round(segment_len * (1.0 - overlap_frac))))
    acc = np.zeros(segment_len)
    starts = range(0, n - segment_len + 1, hop)
    for s in starts:
        acc += np.abs(np.fft.fft(w * x[s:s + segment_len])) ** 2
    acc /= len(starts) * np.sum(w ** 2)
    return SpectralEstimate(np.fft.fftshift(np.fft.fftfreq(segment_len)),
                            np.fft.fftshift(acc), "welch")


def steering_vectors(freqs, filter_len):
    """Complex exponentials e_w, one row per frequency: (F, M)."""
    n = np.arange(int(filter_len))
    return np.exp(2j * np.pi * np.asarray(freqs, dtype=np.float64)[:, None] * n)


def capon_filterbank(r, freqs):
    """Minimum-variance filters w = R^-1 e / (e^H R^-1 e) per frequency.

    Each filter passes its own frequency with unity gain and spends its
    remaining degrees of freedom suppressing whatever else the
    covariance says is present.
    """
    r = np.asarray(getattr(r, "r", r), dtype=np.complex128)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ConfigError("covariance must be a square matrix")
    scale = np.abs(r).max()
    if np.abs(r - r.conj().T).max() > 1e-10 * max(scale, 1e-300):
        raise DataError("covariance must be Hermitian")
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    e = steering_vectors(freqs, r.shape[0])          # (F, M)
    try:
        x = core.solve_hermitian(r, e.T)             # columns R^-1 e_w
    except Exception as exc:
        raise NumericalError(
            "covariance solve failed; try increasing diagonal loading") from exc
    denom = np.einsum("fm,mf->f", e.conj(), x)
    if not np.all(np.isfinite(denom)) or np.any(denom.real <= 0):
        raise NumericalError(
            "covariance is not positive definite; try increasing diagonal loading")
    w = x.T / denom[:, None]
    # pin the unity constraint against solver roundoff
    w = w / np.einsum("fm,fm->f", e.conj(), w)[:, None]
    return FilterBank(freqs, w)


def capon_psd(x, filter_len=16, loading=1e-2, n_freqs=128):
    """Capon spectrum of a slow-time signal.

    The covariance is averaged over forward and time-reversed-conjugated
    length-M snapshots (forward-backward smoothing) and diagonally
    loaded by `loading` times the mean eigenvalue before inversion.
    """
    x = np.asarray(x, dtype=np.complex128).ravel()
    m = int(filter_len)
    if m < 1:
        raise ConfigError("filter_len must be >= 1")
    if len(x) < 2 * m:
        raise ConfigError(f"need at least {2 * m} samples for filter_len {m}")
    if loading < 0:
        raise ConfigError("loading must be >= 0")
    if int(n_freqs) < 1:
        raise ConfigError("n_freqs must be >= 1")
    snaps = np.lib.stride_tricks.sliding_window_view(x, m)
    r = np.einsum("ka,kb->ab", snaps, snaps.conj()) / len(snaps)
    r = 0.5 * (r + r[::-1, ::-1].conj())             # forward-backward
    r = 0.5 * (r + r.conj().T)
    r += loading * (np.trace(r).real / m) * np.eye(m)
    freqs = np.fft.fftshift(np.fft.fftfreq(int(n_freqs)))
    bank = capon_filterbank(r, freqs)
    power = np.einsum("fa,ab,fb->f", bank.weights.conj(), r, bank.weights).real
    return SpectralEstimate(freqs, power, "capon")


def kasai_velocity(iq, gate=None):
    """Mean Doppler phase per pixel from the lag-1 autocorrelation.

    `iq` is pixels x slow-time (a 1-D signal is a single pixel).  The
    gate is (fast_len, slow_len): lag-1 products from `slow_len`
    consecutive frames are summed and then averaged over a centered
    window of `fast_len` neighboring pixels (truncated at the edges).
    """
    iq = np.asarray(iq, dtype=np.complex128)
    squeeze = iq.ndim == 1
    iq = np.atleast_2d(iq)
    if iq.ndim != 2:
        raise ConfigError("iq must be 1-D or pixels x slow-time")
    n_pix, n_slow = iq.shape
    if n_slow < 2:
        raise ConfigError("need at least two slow-time samples")
    if gate is None:
        gate = (1, n_slow)
    fast_len, slow_len = int(gate[0]), int(gate[1])
    if fast_len < 1 or not 2 <= slow_len <= n_slow:
        raise ConfigError(f"gate {gate} does not fit data {iq.shape}")
    lag1 = iq[:, 1:slow_len] * iq[:, :slow_len - 1].conj()
    s = lag1.sum(axis=1)
    cs = np.concatenate([[0.0 + 0.0j], np.cumsum(s)])
    lo = np.clip(np.arange(n_pix) - (fast_len - 1) // 2, 0, n_pix)
    hi = np.clip(lo + fast_len, 0, n_pix)
    tot = cs[hi] - cs[lo]
    count = (hi - lo) * (slow_len - 1)
    mask = np.abs(tot) > 0
    phase = np.where(mask, np.angle(tot), 0.0)
    phase = np.where(phase == -np.pi, np.pi, phase)
    magnitude = np.abs(tot) / count
    if squeeze:
        phase, magnitude, mask = phase[0], magnitude[0], mask[0]
    return VelocityMap(phase, magnitude, mask, (fast_len, slow_len))


@dataclasses.dataclass(frozen=True)
class Spectrogram:
    freqs: np.ndarray
    times: np.ndarray    # center sample index of each column
    power: np.ndarray    # (F, n_columns)
    estimator: str


def spectrogram(x, window_len=64, hop=None, estimator="welch", **kwargs):
    """Short-time spectra: column t covers x[t*hop : t*hop + window_len]."""
    x = np.asarray(x, dtype=np.complex128).ravel()
    window_len = int(window_len)
    if not 1 <= window_len <= len(x):
        raise ConfigError(f"window_len {window_len} must be in [1, {len(x)}]")
    if hop is None:
        hop = max(1, window_len // 2)
    hop = int(hop)
    if hop < 1:
        raise ConfigError("hop must be >= 1")
    if estimator == "welch":
        est = lambda seg: welch_psd(seg, **kwargs)
    elif estimator == "capon":
        est = lambda seg: capon_psd(seg, **kwargs)
    else:
        raise ConfigError(f"unknown estimator '{estimator}'")
    cols, times = [], []
    for s in range(0, len(x) - window_len + 1, hop):
        cols.append(est(x[s:s + window_len]))
        times.append(s + (window_len - 1) / 2.0)
    power = np.stack([c.power for c in cols], axis=1)
    return Spectrogram(cols[0].freqs, np.asarray(times), power, estimator)
