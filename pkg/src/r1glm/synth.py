"""Synthetic BOLD-like data generation and local polynomial detrending.

Ground-truth voxels follow the shared-shape signal model: a design built
from random onsets, a response shape with unit peak, per-condition
amplitudes, an orthonormal polynomial drift, and white Gaussian noise.
Everything is reproducible from the configured seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .design import DesignMatrix, EventTable, NuisanceMatrix, build_design, build_drift
from .estimators import VoxelFit
from .hrf import UNDERSHOOT_RATIO, BasisSet, SampledHrf, make_basis


@dataclass(frozen=True)
class SynthConfig:
    """Recipe for one synthetic voxel or dataset."""

    n_scans: int = 200
    tr: float = 1.0
    n_conditions: int = 5
    events_per_condition: int = 4
    basis_kind: str = "fir"
    fir_length: int = 20
    noise_sigma: float = 0.0
    drift_amplitude: float = 0.0
    drift_order: int = 3
    beta_low: float = 0.5
    beta_high: float = 1.5
    constant_beta: bool = False
    peak_interval: tuple[float, float] = (5.0, 5.0)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.n_scans < 2 or self.tr <= 0:
            raise ValueError("need at least two scans and a positive tr")
        if self.events_per_condition < 1 or self.n_conditions < 1:
            raise ValueError("need at least one event per condition")

    def basis(self) -> BasisSet:
        return make_basis(self.basis_kind, dt=self.tr / 16
                          if self.basis_kind != "fir" else self.tr,
                          fir_size=self.fir_length)


def jittered_shape(peak_delay: float, lags: np.ndarray) -> np.ndarray:
    """Double-gamma samples with a shifted response peak, unit peak height."""
    under_delay = peak_delay + 10.0
    out = np.zeros_like(lags, dtype=float)
    pos = lags > 0
    out[pos] = (stats.gamma.pdf(lags[pos], peak_delay + 1.0, scale=1.0)
                - UNDERSHOOT_RATIO * stats.gamma.pdf(lags[pos], under_delay,
                                                     scale=1.0))
    top = np.abs(out).max()
    return out / top if top > 0 else out


def random_events(config: SynthConfig, rng: np.random.Generator) -> EventTable:
    n_events = config.n_conditions * config.events_per_condition
    margin = max(4, min(config.fir_length, config.n_scans // 4))
    usable = config.n_scans - margin
    if usable < n_events:
        raise ValueError("event schedule does not fit the acquisition")
    scans = rng.choice(usable, size=n_events, replace=False)
    conditions = np.repeat(np.arange(config.n_conditions),
                           config.events_per_condition)
    rng.shuffle(conditions)
    order = np.argsort(scans, kind="stable")
    return EventTable(np.sort(scans).astype(float) * config.tr,
                      conditions[order], config.n_conditions)


def _true_shape(config: SynthConfig, basis: BasisSet,
                rng: np.random.Generator) -> np.ndarray:
    """Shape coefficients with the configured peak time, unit response peak,
    positive correlation with the reference."""
    low, high = config.peak_interval
    peak = rng.uniform(low, high) if high > low else low
    if basis.kind == "fir":
        h = jittered_shape(peak, np.arange(basis.size) * basis.dt)
    elif basis.kind == "3hrf":
        target = jittered_shape(peak, basis.reference.times)
        h, *_ = np.linalg.lstsq(basis.matrix, target, rcond=None)
    else:
        h = np.ones(1)
    raw = basis.matrix @ h
    scale = np.abs(raw).max()
    sign = 1.0 if raw @ basis.reference.samples >= 0 else -1.0
    return h / (scale * sign)


def _draw_betas(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if config.constant_beta:
        c = rng.uniform(config.beta_low, config.beta_high) * rng.choice([-1.0, 1.0])
        return np.full(config.n_conditions, c)
    magnitudes = rng.uniform(config.beta_low, config.beta_high,
                             size=config.n_conditions)
    signs = rng.choice([-1.0, 1.0], size=config.n_conditions)
    return magnitudes * signs


def generate_voxel(config: SynthConfig,
                   events: EventTable | None = None,
                   design: DesignMatrix | None = None,
                   drift: NuisanceMatrix | None = None,
                   rng: np.random.Generator | None = None
                   ) -> tuple[np.ndarray, VoxelFit, EventTable]:
    """One synthetic time course plus the generating truth."""
    rng = rng or np.random.default_rng(config.seed)
    basis = config.basis()
    if events is None:
        events = random_events(config, rng)
    if design is None:
        design = build_design(events, basis, config.tr, config.n_scans)
    if drift is None:
        drift = build_drift(config.n_scans, config.drift_order)

    h_true = _true_shape(config, basis, rng)
    beta_true = _draw_betas(config, rng)
    omega_true = (config.drift_amplitude
                  * rng.standard_normal(drift.size))
    coef = (beta_true[:, None] * h_true[None, :]).ravel()
    y = design.matrix @ coef + drift.matrix @ omega_true
    if config.noise_sigma > 0:
        y = y + config.noise_sigma * rng.standard_normal(config.n_scans)
    truth = VoxelFit(
        h=h_true, hrf=SampledHrf(basis.matrix @ h_true, basis.dt),
        beta=beta_true, omega=omega_true, r=None,
        objective=0.0, iterations=0, converged=True,
    )
    return y, truth, events


def generate_dataset(config: SynthConfig, n_voxels: int
                     ) -> tuple[np.ndarray, list[VoxelFit], EventTable]:
    """Independent voxels sharing one event schedule and design.

    Per-voxel response shapes draw their peak time from the configured
    interval; amplitudes and noise are redrawn per voxel.
    """
    if n_voxels < 1:
        raise ValueError("need at least one voxel")
    rng = np.random.default_rng(config.seed)
    basis = config.basis()
    events = random_events(config, rng)
    design = build_design(events, basis, config.tr, config.n_scans)
    drift = build_drift(config.n_scans, config.drift_order)
    Y = np.zeros((config.n_scans, n_voxels))
    truths = []
    for v in range(n_voxels):
        y, truth, _ = generate_voxel(config, events=events, design=design,
                                     drift=drift, rng=rng)
        Y[:, v] = y
        truths.append(truth)
    return Y, truths, events


def generate_multirun_dataset(config: SynthConfig, n_voxels: int, n_runs: int
                              ) -> tuple[np.ndarray, list[VoxelFit], EventTable]:
    """Stacked runs sharing per-voxel truth, with per-run schedules.

    Every run presents the same conditions under a fresh event schedule;
    shapes and amplitudes are fixed per voxel while drift and noise are
    redrawn per run. Rows are stacked run-major; the returned event table
    carries run ids.
    """
    if n_runs < 1:
        raise ValueError("need at least one run")
    if n_runs == 1:
        Y, truths, events = generate_dataset(config, n_voxels)
        events = EventTable(events.onsets, events.conditions,
                            events.n_conditions,
                            runs=np.zeros(events.onsets.size, dtype=int))
        return Y, truths, events
    rng = np.random.default_rng(config.seed)
    basis = config.basis()
    drift = build_drift(config.n_scans, config.drift_order)

    truths = []
    shapes = np.zeros((n_voxels, basis.size))
    betas = np.zeros((n_voxels, config.n_conditions))
    for v in range(n_voxels):
        shapes[v] = _true_shape(config, basis, rng)
        betas[v] = _draw_betas(config, rng)
        truths.append(VoxelFit(
            h=shapes[v], hrf=SampledHrf(basis.matrix @ shapes[v], basis.dt),
            beta=betas[v], omega=np.zeros(drift.size), r=None,
            objective=0.0, iterations=0, converged=True,
        ))

    onset_parts, condition_parts, run_parts = [], [], []
    blocks = []
    for r in range(n_runs):
        events = random_events(config, rng)
        design = build_design(events, basis, config.tr, config.n_scans)
        Y = np.zeros((config.n_scans, n_voxels))
        for v in range(n_voxels):
            coef = (betas[v][:, None] * shapes[v][None, :]).ravel()
            y = design.matrix @ coef
            y = y + (config.drift_amplitude
                     * (drift.matrix @ rng.standard_normal(drift.size)))
            if config.noise_sigma > 0:
                y = y + config.noise_sigma * rng.standard_normal(config.n_scans)
            Y[:, v] = y
        blocks.append(Y)
        onset_parts.append(events.onsets)
        condition_parts.append(events.conditions)
        run_parts.append(np.full(events.onsets.size, r))
    table = EventTable(np.concatenate(onset_parts),
                       np.concatenate(condition_parts),
                       config.n_conditions,
                       runs=np.concatenate(run_parts))
    return np.vstack(blocks), truths, table


def _savgol_smooth(y: np.ndarray, window: int, degree: int) -> np.ndarray:
    half = window // 2
    n = y.size
    t = np.arange(n, dtype=float)
    # centered stencil applied wherever the window fits
    offsets = np.arange(-half, half + 1, dtype=float)
    vander = np.vander(offsets, degree + 1, increasing=True)
    center_row = np.linalg.pinv(vander)[0]
    smooth = np.convolve(y, center_row[::-1], mode="same")
    # near the edges, refit on the truncated window
    for i in list(range(half)) + list(range(n - half, n)):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        local = np.vander(t[lo:hi] - t[i], degree + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(local, y[lo:hi], rcond=None)
        smooth[i] = coef[0]
    return smooth


def savgol_detrend(y: np.ndarray, window: int = 91, degree: int = 4) -> np.ndarray:
    """Subtract a sliding local polynomial fit from the signal.

    Each sample is replaced by its residual against a least-squares
    polynomial of the given degree over a centered window; windows are
    truncated (and the polynomial refit) at the edges.
    """
    y = np.asarray(y, dtype=float)
    if window % 2 == 0 or window <= degree:
        raise ValueError("window must be odd and larger than the degree")
    if y.size < window:
        raise ValueError("signal shorter than the window")
    return y - _savgol_smooth(y, window, degree)
