"""Numerical substrate: complex linear algebra, deterministic RNG, tensor file IO.

Everything downstream stores data as float64 / complex128 numpy arrays and
moves them between processes via the UST binary tensor format defined here.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np
import scipy.linalg


class ConfigError(ValueError):
    """Invalid configuration or parameters (CLI exit code 65)."""


class DataError(ValueError):
    """Malformed or unreadable input data (CLI exit code 66)."""


class NumericalError(ArithmeticError):
    """Numerical failure: divergence, non-finite values, failed decomposition (CLI exit code 70)."""


# ---------------------------------------------------------------------------
# RNG

def rng(seed: int) -> np.random.Generator:
    """Counter-based generator; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    """Independent per-frame stream (key = base xor frame index) so parallel
    frame generation is order-independent."""
    return rng(int(seed) ^ int(frame_index))


# ---------------------------------------------------------------------------
# Linear algebra

class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vh: np.ndarray


def svd(x: np.ndarray) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    The largest-magnitude entry of each column of U is rotated to be real and
    positive (a phase rotation for complex input), with the inverse rotation
    applied to the matching row of Vh, so repeated runs and different LAPACK
    builds produce identical factors.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("svd expects a matrix")
    if not np.all(np.isfinite(x)):
        raise NumericalError("svd: non-finite input")
    try:
        u, s, vh = np.linalg.svd(x, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"svd did not converge: {e}") from e
    # pivot on the largest-magnitude entry of each U column
    piv = np.argmax(np.abs(u), axis=0)
    lead = u[piv, np.arange(u.shape[1])]
    mag = np.abs(lead)
    phase = np.where(mag > 0, lead / np.where(mag > 0, mag, 1.0), 1.0)
    u = u * phase.conj()[None, :]
    vh = vh * phase[:, None]
    if not np.iscomplexobj(x):
        u = u.real
        vh = vh.real
    return SvdResult(u, s, vh)


def solve_hermitian(r: np.ndarray, b: np.ndarray, herm_tol: float = 1e-10) -> np.ndarray:
    """Solve R z = b for Hermitian positive-definite R via Cholesky.

    Raises NumericalError if R is not Hermitian to herm_tol (relative) or the
    factorization fails; the caller is expected to apply diagonal loading.
    """
    r = np.asarray(r)
    b = np.asarray(b)
    scale = max(np.abs(r).max(), 1e-300)
    if np.abs(r - r.conj().T).max() > herm_tol * scale:
        raise NumericalError("solve_hermitian: matrix is not Hermitian")
    try:
        c, low = scipy.linalg.cho_factor(r, check_finite=True)
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"solve_hermitian: Cholesky failed: {e}") from e
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


# ---------------------------------------------------------------------------
# UST tensor file format
#
# Little-endian. Layout:
#   magic "USTD" | u32 version=1 | u8 dtype (1=real64, 2=complex128) |
#   u8 ndim | u16 reserved=0 | ndim x u64 extents | row-major payload
# Complex values are stored as (re, im) float64 pairs. No padding.

_MAGIC = b"USTD"
_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<c16")}
_CODE_FOR_KIND = {"f": 1, "c": 2}


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8", copy=False)
    elif arr.dtype.kind == "c":
        arr = arr.astype("<c16", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<f8")
    else:
        raise DataError(f"unsupported dtype for tensor file: {arr.dtype}")
    code = _CODE_FOR_KIND[arr.dtype.kind]
    header = _MAGIC + struct.pack("<IBBH", _VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a UST tensor file")
    version, code, ndim, reserved = struct.unpack_from("<IBBH", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported UST version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    if reserved != 0:
        raise DataError(f"{path}: nonzero reserved field")
    off = 12
    if len(raw) < off + 8 * ndim:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(shape)) if ndim else 1
    need = off + n * dtype.itemsize
    if len(raw) < need:
        raise DataError(f"{path}: truncated payload (have {len(raw)}, need {need})")
    if len(raw) > need:
        raise DataError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw[off:need], dtype=dtype).copy()
    return data.reshape(shape)
