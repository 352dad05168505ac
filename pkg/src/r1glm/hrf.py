"""Reference hemodynamic response sampling and basis set construction.

The canonical response is the difference of two gamma densities (response
peak at 6 s, undershoot at 16 s, unit dispersions, undershoot scaled by
1/6), peak-normalized so its maximum equals one. Three basis families are
supported: the fixed canonical waveform, the canonical plus its temporal
and dispersion derivatives, and the finite impulse response (stick) basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

PEAK_DELAY = 6.0
UNDERSHOOT_DELAY = 16.0
PEAK_DISPERSION = 1.0
UNDERSHOOT_DISPERSION = 1.0
UNDERSHOOT_RATIO = 1.0 / 6.0
DEFAULT_DURATION = 32.0

TEMPORAL_SHIFT = 1.0      # backward difference shift for the time derivative, seconds
DISPERSION_STEP = 0.01    # finite-difference step on the peak dispersion


@dataclass(frozen=True)
class SampledHrf:
    """A hemodynamic response evaluated on a regular time grid."""

    samples: np.ndarray
    dt: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError("samples must be a 1-d vector")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt


@dataclass(frozen=True)
class BasisSet:
    """A set of waveforms spanning the admissible response shapes.

    ``matrix`` has one column per basis element, sampled every ``dt``
    seconds. ``reference`` is the canonical response on the same grid and
    fixes the sign convention of estimated responses.
    """

    matrix: np.ndarray
    kind: str
    dt: float
    reference: SampledHrf = field(repr=False)

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", matrix)
        if self.kind not in ("fixed", "3hrf", "fir"):
            raise ValueError(f"unknown basis kind: {self.kind!r}")
        if np.linalg.matrix_rank(matrix) != matrix.shape[1]:
            raise ValueError("basis columns must be linearly independent")

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    def reconstruct(self, coefficients: np.ndarray) -> SampledHrf:
        """Build the response waveform for a coefficient vector."""
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (self.size,):
            raise ValueError(
                f"expected {self.size} coefficients, got {coefficients.shape}"
            )
        return SampledHrf(self.matrix @ coefficients, self.dt)


def _double_gamma(t: np.ndarray, peak_dispersion: float = PEAK_DISPERSION) -> np.ndarray:
    """Raw canonical response: peak gamma density minus scaled undershoot."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    peak = stats.gamma.pdf(
        t[pos], PEAK_DELAY / peak_dispersion, loc=0, scale=peak_dispersion
    )
    undershoot = stats.gamma.pdf(
        t[pos], UNDERSHOOT_DELAY / UNDERSHOOT_DISPERSION,
        loc=0, scale=UNDERSHOOT_DISPERSION,
    )
    out[pos] = peak - UNDERSHOOT_RATIO * undershoot
    return out


def _time_grid(dt: float, duration: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if duration < 2 * dt:
        raise ValueError("duration must cover at least two samples")
    n = int(np.floor(duration / dt)) + 1
    return np.arange(n) * dt


def sample_reference_hrf(dt: float, duration: float = DEFAULT_DURATION) -> SampledHrf:
    """Sample the canonical response at t = 0, dt, ..., duration.

    The result is peak-normalized: its maximum equals 1, reached near 5 s.
    """
    t = _time_grid(dt, duration)
    raw = _double_gamma(t)
    return SampledHrf(raw / raw.max(), dt)


def _peak_normalize_columns(matrix: np.ndarray) -> np.ndarray:
    scale = np.abs(matrix).max(axis=0)
    scale[scale == 0] = 1.0
    return matrix / scale


def make_fixed_basis(dt: float, duration: float = DEFAULT_DURATION) -> BasisSet:
    """Single-element basis holding only the canonical response."""
    reference = sample_reference_hrf(dt, duration)
    return BasisSet(reference.samples[:, None], "fixed", dt, reference)


def make_3hrf_basis(dt: float, duration: float = DEFAULT_DURATION) -> BasisSet:
    """Canonical response plus its temporal and dispersion derivatives.

    The temporal derivative is the backward difference over a 1 s shift;
    the dispersion derivative differences the normalized response against
    one with peak dispersion widened by 0.01. All columns are scaled to
    unit peak magnitude.
    """
    reference = sample_reference_hrf(dt, duration)
    t = reference.times

    raw = _double_gamma(t)
    peak = raw.max()
    canonical = raw / peak

    shifted = _double_gamma(t - TEMPORAL_SHIFT) / peak
    temporal = (canonical - shifted) / TEMPORAL_SHIFT

    widened_raw = _double_gamma(t, peak_dispersion=PEAK_DISPERSION + DISPERSION_STEP)
    widened = widened_raw / widened_raw.max()
    dispersion = (canonical - widened) / DISPERSION_STEP

    matrix = np.column_stack([canonical, temporal, dispersion])
    return BasisSet(_peak_normalize_columns(matrix), "3hrf", dt, reference)


def make_fir_basis(size: int, dt: float = 1.0) -> BasisSet:
    """Stick basis: the identity matrix, one element per post-onset lag."""
    if size < 1:
        raise ValueError("FIR basis size must be at least 1")
    duration = max((size - 1) * dt, DEFAULT_DURATION)
    full = sample_reference_hrf(dt, duration)
    samples = full.samples[:size].copy()
    peak = np.abs(samples).max()
    if peak > 0:
        samples = samples / peak
    reference = SampledHrf(samples, dt)
    return BasisSet(np.eye(size), "fir", dt, reference)


def make_basis(kind: str, dt: float, duration: float = DEFAULT_DURATION,
               fir_size: int | None = None) -> BasisSet:
    """Dispatch on basis kind; FIR needs an explicit size."""
    if kind == "fixed":
        return make_fixed_basis(dt, duration)
    if kind == "3hrf":
        return make_3hrf_basis(dt, duration)
    if kind == "fir":
        if fir_size is None:
            raise ValueError("FIR basis requires fir_size")
        return make_fir_basis(fir_size, dt)
    raise ValueError(f"unknown basis kind: {kind!r}")


def hrf_peak_amplitude(h: SampledHrf | np.ndarray) -> float:
    """Signed sample of greatest magnitude."""
    samples = h.samples if isinstance(h, SampledHrf) else np.asarray(h, dtype=float)
    if samples.size == 0:
        raise ValueError("empty response vector")
    return float(samples[np.argmax(np.abs(samples))])
