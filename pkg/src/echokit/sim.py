"""Synthetic forward models with ground truth retained for scoring.

Everything here is seeded and pure: identical seeds give bit-identical
outputs. Functions that generate frame sequences accept either a Generator
(sequential draws) or an integer base seed, in which case frame i uses the
derived stream seed = base ^ i and frames can be produced in any order or
in parallel without changing the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from . import core
from .core import ConfigError, DataError


def _resolve_rng(rng, frame_index=None):
    if isinstance(rng, (int, np.integer)):
        if frame_index is None:
            return core.rng(int(rng))
        return core.frame_rng(int(rng), frame_index)
    return rng


# ---------------------------------------------------------------------------
# array geometry and channel data

@dataclass(frozen=True)
class ArrayGeometry:
    """Linear (or arbitrary) receive array in the x-z plane, elements at z~0."""
    element_positions: np.ndarray       # (N, 2) of (x, z) in meters
    pitch: float                        # meters
    speed_of_sound: float = 1540.0      # m/s
    sampling_rate: float = 2.0e7        # Hz
    modulation_frequency: float = 5.0e6  # Hz

    def __post_init__(self):
        pos = np.asarray(self.element_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 2:
            raise ConfigError("need at least 2 elements as (x, z) pairs")
        if self.pitch <= 0:
            raise ConfigError("pitch must be positive")
        if self.sampling_rate < 4 * self.modulation_frequency:
            raise ConfigError("sampling rate must be at least 4x the modulation frequency")
        object.__setattr__(self, "element_positions", pos)

    @property
    def n_elements(self):
        return self.element_positions.shape[0]


def linear_array(n_elements=64, pitch=3.0e-4, speed_of_sound=1540.0,
                 sampling_rate=2.0e7, modulation_frequency=5.0e6):
    x = (np.arange(n_elements) - (n_elements - 1) / 2.0) * pitch
    pos = np.stack([x, np.zeros(n_elements)], axis=1)
    return ArrayGeometry(pos, pitch, speed_of_sound, sampling_rate, modulation_frequency)


@dataclass(frozen=True)
class Scatterer:
    position: tuple      # (x, z) meters, z > 0 below the array
    reflectivity: complex = 1.0


_PULSE_DEFAULTS = {"center_freq": None, "bandwidth": 0.6, "cycles": 4.0}
_TX_DEFAULTS = {"plane_wave_angle": 0.0}


def _merge_config(user, defaults, what):
    cfg = dict(defaults)
    if user:
        for k in user:
            if k not in defaults:
                raise ConfigError(f"unknown {what} key {k!r}")
        cfg.update(user)
    return cfg


def analytic_pulse(t, center_freq, bandwidth=0.6, cycles=4.0):
    """Gaussian-windowed complex sinusoid.

    bandwidth is the fractional -6 dB (amplitude) width of the envelope
    spectrum; cycles sets a hard support of +-cycles/(2 fc) so the kernel
    is compact.
    """
    t = np.asarray(t, dtype=np.float64)
    sigma = math.sqrt(2.0 * math.log(2.0)) / (math.pi * bandwidth * center_freq)
    half = cycles / (2.0 * center_freq)
    out = np.exp(-0.5 * (t / sigma) ** 2) * np.exp(2j * np.pi * center_freq * t)
    out[np.abs(t) > half] = 0.0
    return out


def propagation_delays(geom, position, plane_wave_angle=0.0):
    """Two-way delay per element: plane-wave transmit path plus return path."""
    x, z = position
    tx = z * math.cos(plane_wave_angle) + x * math.sin(plane_wave_angle)
    d = np.hypot(geom.element_positions[:, 0] - x, geom.element_positions[:, 1] - z)
    return (tx + d) / geom.speed_of_sound


def simulate_channel_data(geom, scatterers, pulse=None, tx=None,
                          n_samples=None, noise_level=0.0, rng=None):
    """Per-channel sums of delayed pulse replicas (elements x fast-time).

    Each scatterer contributes reflectivity * p(t - tau_ik) on channel k,
    where tau_ik is the plane-wave transmit path plus the element return
    path, divided by the speed of sound.
    """
    if not scatterers:
        raise ConfigError("need at least one scatterer")
    pulse = _merge_config(pulse, _PULSE_DEFAULTS, "pulse")
    tx = _merge_config(tx, _TX_DEFAULTS, "tx")
    fc = pulse["center_freq"] or geom.modulation_frequency
    angle = tx["plane_wave_angle"]
    fs = geom.sampling_rate
    half = pulse["cycles"] / (2.0 * fc)
    delays = []
    for sc in scatterers:
        x, z = sc.position
        if z <= 0:
            raise DataError(f"scatterer at z={z} is not below the array")
        delays.append(propagation_delays(geom, sc.position, angle))
    last = max(d.max() for d in delays)
    if n_samples is None:
        n_samples = int(math.ceil((last + half) * fs)) + 1
    elif (last + half) * fs >= n_samples:
        raise DataError("scatterer outside acquirable depth for the requested window")
    t = np.arange(n_samples) / fs
    out = np.zeros((geom.n_elements, n_samples), dtype=np.complex128)
    for sc, tau in zip(scatterers, delays):
        out += sc.reflectivity * analytic_pulse(
            t[None, :] - tau[:, None], fc, pulse["bandwidth"], pulse["cycles"])
    if noise_level > 0:
        g = _resolve_rng(rng)
        out += noise_level / np.sqrt(2) * (
            g.standard_normal(out.shape) + 1j * g.standard_normal(out.shape))
    return out


# ---------------------------------------------------------------------------
# microbubble frames

@dataclass(frozen=True)
class ImageGrid:
    """Frame size plus physical spacing and the super-resolution upscale.

    Pixel (i, j) sits at depth z_start + i*dz and lateral position
    x_center + (j - (nx-1)/2)*dx; the physical fields only matter for
    beamforming, localization grids can ignore them.
    """
    nz: int
    nx: int
    upscale: int = 8
    dz: float = 1.0e-4
    dx: float = 1.0e-4
    z_start: float = 1.0e-3
    x_center: float = 0.0

    def __post_init__(self):
        if self.nz < 1 or self.nx < 1 or self.upscale < 1:
            raise ConfigError("grid sizes and upscale must be positive")
        if self.dz <= 0 or self.dx <= 0 or self.z_start <= 0:
            raise ConfigError("pixel spacing and start depth must be positive")

    @property
    def hr_shape(self):
        return (self.nz * self.upscale, self.nx * self.upscale)

    def pixel_coords(self):
        """(z, x) axis coordinate vectors in meters."""
        z = self.z_start + np.arange(self.nz) * self.dz
        x = self.x_center + (np.arange(self.nx) - (self.nx - 1) / 2.0) * self.dx
        return z, x


class GroundTruthFrame(NamedTuple):
    y: np.ndarray        # (nz, nx) complex low-res observation
    x_true: np.ndarray   # (nz*up, nx*up) nonnegative spike image
    psf: np.ndarray      # high-res kernel, unit peak


def make_psf(sigma_lat, sigma_ax, mod_cycles_per_px=0.0, half_width=None):
    """Anisotropic Gaussian envelope, optionally axially modulated; unit peak."""
    if sigma_lat <= 0 or sigma_ax <= 0:
        raise ConfigError("psf widths must be positive")
    if half_width is None:
        half_width = int(math.ceil(3.5 * max(sigma_lat, sigma_ax)))
    z, x = np.mgrid[-half_width:half_width + 1, -half_width:half_width + 1]
    env = np.exp(-0.5 * ((x / sigma_lat) ** 2 + (z / sigma_ax) ** 2))
    if mod_cycles_per_px:
        return env * np.exp(2j * np.pi * mod_cycles_per_px * z)
    return env


def psf_forward(x_hr, psf, factor, offset=None):
    """Blur with the psf (true convolution, same size) and decimate by factor.

    Low-res pixel (i, j) samples high-res position (factor*i + offset,
    factor*j + offset); offset defaults to factor//2 (block centers).
    """
    if offset is None:
        offset = factor // 2
    blurred = fftconvolve(x_hr, psf, mode="same")
    return blurred[offset::factor, offset::factor]


def _stamp_psf(shape, psf, rows, cols, amps):
    """Exact sparse convolution: add amp * psf centered at each spike."""
    out = np.zeros(shape, dtype=psf.dtype if np.iscomplexobj(psf) else np.float64)
    kh, kw = psf.shape
    ch, cw = kh // 2, kw // 2
    H, W = shape
    for r, c, a in zip(rows, cols, amps):
        r0, r1 = r - ch, r - ch + kh
        c0, c1 = c - cw, c - cw + kw
        pr0, pc0 = max(0, -r0), max(0, -c0)
        pr1, pc1 = kh - max(0, r1 - H), kw - max(0, c1 - W)
        out[max(r0, 0):min(r1, H), max(c0, 0):min(c1, W)] += a * psf[pr0:pr1, pc0:pc1]
    return out


def simulate_ulm_frames(grid, psf, n_frames, bubbles_per_frame, noise_level, rng):
    """Sparse high-res spike images observed through blur + 8x decimation.

    y = downsample(conv(x_true, psf)) + w with complex white noise w of
    standard deviation noise_level. x_true holds exactly bubbles_per_frame
    spikes at distinct high-res pixels, amplitudes log-uniform over one
    decade [1, 10).
    """
    if grid.upscale != 8:
        raise ConfigError("super-resolution grid must be 8x the low-res grid")
    psf = np.asarray(psf)
    if abs(np.max(np.abs(psf)) - 1.0) > 1e-6:
        raise ConfigError("psf must be normalized to unit peak")
    hz, hx = grid.hr_shape
    cap = 0.1 * hz * hx
    if bubbles_per_frame > cap:
        raise ConfigError(
            f"{bubbles_per_frame} bubbles exceeds 10% occupancy of the {hz}x{hx} grid")
    frames = []
    seeded = isinstance(rng, (int, np.integer))
    for i in range(n_frames):
        g = _resolve_rng(rng, i) if seeded else rng
        x_true = np.zeros((hz, hx))
        if bubbles_per_frame > 0:
            flat = g.choice(hz * hx, size=bubbles_per_frame, replace=False)
            rows, cols = np.divmod(flat, hx)
            amps = 10.0 ** g.uniform(0.0, 1.0, bubbles_per_frame)
            x_true[rows, cols] = amps
            y_hr = _stamp_psf((hz, hx), psf, rows, cols, amps)
        else:
            y_hr = np.zeros((hz, hx), dtype=psf.dtype)
        off = grid.upscale // 2
        y = y_hr[off::grid.upscale, off::grid.upscale].astype(np.complex128)
        if noise_level > 0:
            y = y + noise_level / np.sqrt(2) * (
                g.standard_normal(y.shape) + 1j * g.standard_normal(y.shape))
        frames.append(GroundTruthFrame(y, x_true, psf))
    return frames


# ---------------------------------------------------------------------------
# low-rank + sparse movies

def simulate_lowrank_sparse(m_pixels, n_frames, rank, sparse_fraction,
                            amplitude_ratio, rng, tissue_floor_rel=0.7):
    """Casorati matrices (D, L, S) with known decomposition.

    L: `rank` outer products of smooth complex spatial modes (unit norm,
    Gaussian-blurred noise on the sqrt(m) x sqrt(m) grid) and slow orthonormal
    temporal rotations, singular weights geometrically spaced from
    amplitude_ratio * sqrt(m*T) down to tissue_floor_rel * sigma1(S).

    S: sparse "vessel" rows with 0.9 frame-to-frame support persistence,
    Doppler-band temporal oscillation (0.19..0.47 cycles/frame, random sign),
    unit on-support rms. Each row is orthogonalized against the tissue
    temporal modes restricted to its support, so the sparse part is
    identifiable rather than absorbable into L.
    """
    m, T = int(m_pixels), int(n_frames)
    side = math.isqrt(m)
    if side * side != m:
        raise ConfigError("m_pixels must be a perfect square (spatial modes are 2-D)")
    if not 0 <= rank <= min(m, T):
        raise ConfigError("rank must satisfy 0 <= rank <= min(m_pixels, n_frames)")
    if not 0 <= sparse_fraction <= 0.2:
        raise ConfigError("sparse_fraction must lie in [0, 0.2]")
    if amplitude_ratio <= 0:
        raise ConfigError("amplitude_ratio must be positive")
    g = _resolve_rng(rng)
    occ = 0.9
    n = np.arange(T)
    vs = [np.exp(2j * np.pi * (r / T) * n) / np.sqrt(T) for r in range(rank)]
    p_v = min(sparse_fraction / occ, 1.0)
    vessel = g.random(m) < p_v
    amp = g.uniform(0.7, 1.3, m)
    fb = g.uniform(0.19, 0.47, m) * g.choice([-1.0, 1.0], m)
    ph = g.uniform(0, 2 * np.pi, m)
    q = min(0.1 * occ / (1 - occ), 1.0)
    on = vessel & (g.random(m) < occ)
    mask = np.zeros((m, T), bool)
    for t in range(T):
        mask[:, t] = on
        u = g.random(m)
        on = np.where(on, u < 0.9, vessel & (u < q))
    s_mat = np.where(mask, amp[:, None] * np.exp(1j * (2 * np.pi * fb[:, None] * n + ph[:, None])), 0)
    if rank > 0 and mask.any():
        v_modes = np.stack(vs, axis=1)          # T x rank
        for i in np.nonzero(mask.any(axis=1))[0]:
            vm = v_modes * mask[i][:, None]
            gram = vm.conj().T @ vm
            c = np.linalg.lstsq(gram, vm.conj().T @ s_mat[i], rcond=None)[0]
            s_mat[i] -= vm @ c
    if mask.any():
        s_mat /= np.sqrt((np.abs(s_mat[mask]) ** 2).mean())
        sig_s = np.linalg.svd(s_mat, compute_uv=False)[0]
    else:
        sig_s = 0.0
    l_mat = np.zeros((m, T), dtype=np.complex128)
    s1 = amplitude_ratio * np.sqrt(m * T)
    if rank == 1:
        weights = [s1]
    else:
        weights = list(np.geomspace(s1, max(tissue_floor_rel * sig_s, 1e-12), rank))
    for r in range(rank):
        sp = gaussian_filter(g.standard_normal((side, side)), side / 10) \
            + 1j * gaussian_filter(g.standard_normal((side, side)), side / 10)
        sp = sp.ravel()
        sp /= np.linalg.norm(sp)
        l_mat += weights[r] * np.outer(sp, vs[r])
    return l_mat + s_mat, l_mat, s_mat


# ---------------------------------------------------------------------------
# slow-time Doppler samples

def simulate_slow_time(components, n_samples, noise_power, rng):
    """Sum of complex exponentials plus complex white noise.

    components: list of {"doppler_freq_cyc_per_sample": f, "power": p} with
    optional "phase"; omitted phases are drawn uniformly. noise_power is the
    complex noise variance E|w|^2.
    """
    if n_samples < 8:
        raise ConfigError("need at least 8 slow-time samples")
    g = _resolve_rng(rng)
    n = np.arange(n_samples)
    x = np.zeros(n_samples, dtype=np.complex128)
    for comp in components:
        extra = set(comp) - {"doppler_freq_cyc_per_sample", "power", "phase"}
        if extra:
            raise ConfigError(f"unknown component keys {sorted(extra)}")
        f = comp["doppler_freq_cyc_per_sample"]
        if abs(f) > 0.5:
            raise DataError(f"doppler frequency {f} cycles/sample is aliased")
        p = comp["power"]
        if p < 0:
            raise ConfigError("component power must be nonnegative")
        phi = comp["phase"] if "phase" in comp else g.uniform(0, 2 * np.pi)
        x += np.sqrt(p) * np.exp(1j * (2 * np.pi * f * n + phi))
    if noise_power > 0:
        x += np.sqrt(noise_power / 2) * (g.standard_normal(n_samples)
                                         + 1j * g.standard_normal(n_samples))
    return x
