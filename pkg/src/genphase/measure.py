"""Measurement operators and noisy magnitude measurements.

Three operator families share the same interface (``apply`` / ``adjoint``,
``m`` / ``n``):

* :class:`GaussianOperator` -- dense i.i.d. complex Gaussian matrix. Entries
  have real and imaginary parts drawn from N(0, 1/(2m)), so a row has unit
  expected squared norm scaled by 1/m and ``E||Ax||^2 = ||x||^2`` for any
  ``x``; measurement magnitudes stay comparable across measurement counts.
* :class:`CDPOperator` -- per mask: elementwise unit-modulus diagonal, unitary
  2-D FFT (scale 1/sqrt(h*w)), then a row subsample; mask outputs are
  concatenated. With a single mask and full sampling the operator is an exact
  isometry.
* :class:`TransmissionMatrixOperator` -- dense complex rows taken from a
  calibrated transmission-matrix file after residual filtering.

Operators are immutable after construction and ``apply`` / ``adjoint`` are
pure, so concurrent use is safe. All randomness is seeded per call; there is
no shared RNG state.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError


def _check_len(name, vec, expect):
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] != expect:
        raise DimensionError(f"{name} has shape {vec.shape}, expected ({expect},)")
    return vec


@dataclass(frozen=True)
class _DenseOperator:
    matrix: np.ndarray  # complex, (m, n)

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def n(self):
        return self.matrix.shape[1]

    def apply(self, x):
        x = _check_len("x", x, self.n)
        return self.matrix @ x

    def adjoint(self, v):
        v = _check_len("v", v, self.m)
        return self.matrix.conj().T @ v

    def astype(self, dtype):
        return type(self)(matrix=self.matrix.astype(dtype))


class GaussianOperator(_DenseOperator):
    pass


class TransmissionMatrixOperator(_DenseOperator):
    pass


@dataclass(frozen=True)
class CDPOperator:
    """Stack of masked, subsampled unitary Fourier transforms."""

    masks: np.ndarray        # complex, (num_masks, h, w), unit modulus
    selections: tuple        # per mask: int array of flat indices into h*w
    grid: tuple              # (h, w)

    @property
    def m(self):
        return sum(len(s) for s in self.selections)

    @property
    def n(self):
        return self.grid[0] * self.grid[1]

    def apply(self, x):
        x = _check_len("x", x, self.n)
        h, w = self.grid
        img = x.reshape(h, w)
        parts = []
        for mask, sel in zip(self.masks, self.selections):
            spectrum = np.fft.fft2(mask * img, norm="ortho")
            parts.append(spectrum.ravel()[sel])
        return np.concatenate(parts)

    def adjoint(self, v):
        v = _check_len("v", v, self.m)
        h, w = self.grid
        out = np.zeros(h * w, dtype=np.result_type(v.dtype, self.masks.dtype))
        start = 0
        for mask, sel in zip(self.masks, self.selections):
            grid = np.zeros(h * w, dtype=out.dtype)
            grid[sel] = v[start:start + len(sel)]
            start += len(sel)
            back = np.fft.ifft2(grid.reshape(h, w), norm="ortho")
            out += (mask.conj() * back).ravel()
        return out

    def astype(self, dtype):
        return CDPOperator(masks=self.masks.astype(dtype),
                           selections=self.selections, grid=self.grid)


def apply(op, x):
    """Forward measurement: complex vector of length ``op.m``."""
    return op.apply(np.asarray(x).ravel())


def apply_adjoint(op, v):
    """Exact conjugate-transpose action: complex vector of length ``op.n``."""
    return op.adjoint(np.asarray(v).ravel())


def make_gaussian(m, n, seed):
    """Dense i.i.d. complex Gaussian operator; deterministic in ``seed``."""
    if m < 1 or n < 1:
        raise ConfigError(f"operator size must be positive, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(1.0 / (2.0 * m))
    a = rng.normal(0.0, sd, (m, n)) + 1j * rng.normal(0.0, sd, (m, n))
    return GaussianOperator(matrix=a)


def make_cdp(h, w, num_masks, samples_per_mask, seed):
    """Coded-diffraction operator: ``num_masks`` random unit-modulus diagonal
    masks, each followed by a unitary 2-D FFT and ``samples_per_mask`` rows
    picked without replacement."""
    if h < 1 or w < 1 or num_masks < 1 or samples_per_mask < 1:
        raise ConfigError("CDP dimensions and counts must be positive")
    if samples_per_mask > h * w:
        raise ConfigError(
            f"cannot sample {samples_per_mask} of {h * w} rows without replacement"
        )
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, (num_masks, h, w))
    masks = np.exp(1j * theta)
    selections = tuple(
        np.sort(rng.choice(h * w, size=samples_per_mask, replace=False))
        for _ in range(num_masks)
    )
    return CDPOperator(masks=masks, selections=selections, grid=(h, w))


def make_cdp_total(h, w, m, seed):
    """CDP operator with exactly ``m`` rows: ceil(m / (h*w)) masks, samples
    spread across masks as evenly as possible."""
    n = h * w
    if h < 1 or w < 1 or m < 1:
        raise ConfigError("CDP dimensions and row count must be positive")
    num_masks = -(-m // n)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi, (num_masks, h, w))
    masks = np.exp(1j * theta)
    base, extra = divmod(m, num_masks)
    counts = [base + (1 if i < extra else 0) for i in range(num_masks)]
    selections = tuple(
        np.sort(rng.choice(n, size=c, replace=False)) for c in counts
    )
    return CDPOperator(masks=masks, selections=selections, grid=(h, w))


@dataclass(frozen=True)
class MeasurementVector:
    """Magnitude measurements plus the noise metadata used to make them.

    ``y`` is stored exactly as synthesized: additive noise may push entries
    slightly negative and no clamping is applied.
    """

    y: np.ndarray
    noise_sigma: float
    seed: int
    noise_percent: float = 0.0
    noise_mode: str = "relative"


def measure_magnitude(op, x, noise_percent, noise_mode="relative", seed=0):
    """Synthesize ``y = |A x| + n`` with i.i.d. Gaussian noise.

    ``absolute`` mode uses sigma = percent/100 (the convention for images
    scaled to [0, 1]); ``relative`` mode scales sigma by the RMS of the clean
    magnitudes, which is invariant to the operator's normalization.
    """
    if noise_percent < 0:
        raise ConfigError(f"noise percent must be >= 0, got {noise_percent}")
    if noise_mode not in ("relative", "absolute"):
        raise ConfigError(f"unknown noise mode {noise_mode!r}")
    mag = np.abs(apply(op, x))
    if noise_mode == "absolute":
        sigma = noise_percent / 100.0
    else:
        sigma = (noise_percent / 100.0) * float(np.sqrt(np.mean(mag ** 2)))
    noise = np.random.default_rng(seed).normal(0.0, 1.0, mag.shape) * sigma
    return MeasurementVector(y=mag + noise, noise_sigma=sigma, seed=seed,
                             noise_percent=noise_percent, noise_mode=noise_mode)


# ---------------------------------------------------------------------------
# transmission-matrix datasets (PRTM files)
# ---------------------------------------------------------------------------
#
# Binary, little-endian: magic "PRTM", u8 version (0x01), u32 m_total, u32 n,
# f32 residuals[m_total], then 2*m_total*n f32 values: the complex matrix
# row-major with re/im interleaved.

_TM_MAGIC = b"PRTM"
_TM_VERSION = 1


@dataclass(frozen=True)
class TMDataset:
    """Calibrated transmission matrix plus per-row normalized residuals."""

    matrix: np.ndarray     # complex, (m_total, n)
    residuals: np.ndarray  # float in [0, 1], (m_total,)

    def __post_init__(self):
        if self.residuals.shape != (self.matrix.shape[0],):
            raise DataError("residual vector length does not match TM row count")
        if np.any(self.residuals < 0) or np.any(self.residuals > 1):
            raise DataError("residual values must lie in [0, 1]")


def write_prtm(path, matrix, residuals):
    matrix = np.asarray(matrix, dtype=np.complex128)
    residuals = np.asarray(residuals, dtype=np.float64)
    TMDataset(matrix=matrix, residuals=residuals)  # validates
    m_total, n = matrix.shape
    buf = io.BytesIO()
    buf.write(_TM_MAGIC)
    buf.write(struct.pack("<B", _TM_VERSION))
    buf.write(struct.pack("<II", m_total, n))
    buf.write(residuals.astype("<f4").tobytes())
    inter = np.empty((m_total, 2 * n), dtype="<f4")
    inter[:, 0::2] = matrix.real
    inter[:, 1::2] = matrix.imag
    buf.write(inter.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_prtm(path):
    with open(path, "rb") as fh:
        head = fh.read(5)
        if len(head) < 5 or head[:4] != _TM_MAGIC:
            raise FormatError(f"{path}: not a PRTM file")
        if head[4] != _TM_VERSION:
            raise FormatError(f"{path}: unsupported PRTM version {head[4]}")
        raw = fh.read(8)
        if len(raw) < 8:
            raise FormatError(f"{path}: truncated header")
        m_total, n = struct.unpack("<II", raw)
        res_raw = fh.read(4 * m_total)
        mat_raw = fh.read(8 * m_total * n)
        if len(res_raw) < 4 * m_total or len(mat_raw) < 8 * m_total * n:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    residuals = np.frombuffer(res_raw, dtype="<f4").astype(np.float64)
    inter = np.frombuffer(mat_raw, dtype="<f4").reshape(m_total, 2 * n)
    matrix = inter[:, 0::2].astype(np.float64) + 1j * inter[:, 1::2].astype(np.float64)
    return TMDataset(matrix=matrix, residuals=residuals)


def load_tm(path, residual_threshold, rows, seed):
    """Build a dense operator from the best-calibrated TM rows.

    Keeps rows with residual strictly below ``residual_threshold``, then
    samples ``rows`` of them uniformly without replacement (seeded).
    """
    ds = read_prtm(path)
    return select_tm_rows(ds, residual_threshold, rows, seed)


def select_tm_rows(dataset, residual_threshold, rows, seed):
    ok = np.flatnonzero(dataset.residuals < residual_threshold)
    if len(ok) < rows:
        raise DataError(
            f"only {len(ok)} TM rows have residual < {residual_threshold}, "
            f"need {rows}"
        )
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(ok, size=rows, replace=False))
    return TransmissionMatrixOperator(matrix=dataset.matrix[pick])


def synthetic_tm_dataset(m_total, n, seed, residual_low=0.1, residual_high=1.0):
    """Seeded stand-in for a calibrated TM: complex Gaussian rows scaled like
    :func:`make_gaussian` at the full row count, residuals uniform in
    [residual_low, residual_high]."""
    rng = np.random.default_rng(seed)
    sd = np.sqrt(1.0 / (2.0 * m_total))
    matrix = rng.normal(0.0, sd, (m_total, n)) + 1j * rng.normal(0.0, sd, (m_total, n))
    residuals = rng.uniform(residual_low, residual_high, m_total)
    return TMDataset(matrix=matrix, residuals=residuals)


def tm_csv_to_prtm(matrix_csv, residual_csv, out_path):
    """Convert the two-file plain-text form into PRTM.

    ``matrix_csv``: one row per TM row, 2n comma-separated floats
    (re, im interleaved). ``residual_csv``: one residual per line.
    """
    try:
        inter = np.loadtxt(matrix_csv, delimiter=",", dtype=np.float64, ndmin=2)
        residuals = np.loadtxt(residual_csv, dtype=np.float64, ndmin=1)
    except ValueError as exc:
        raise FormatError(f"could not parse TM text input: {exc}") from exc
    if inter.shape[1] % 2:
        raise FormatError(
            f"{matrix_csv}: rows must hold interleaved re,im pairs "
            f"(got {inter.shape[1]} columns)"
        )
    matrix = inter[:, 0::2] + 1j * inter[:, 1::2]
    if residuals.shape[0] != matrix.shape[0]:
        raise DataError(
            f"residual count {residuals.shape[0]} does not match "
            f"{matrix.shape[0]} matrix rows"
        )
    write_prtm(out_path, matrix, residuals)
    return out_path
