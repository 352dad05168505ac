"""Design matrix construction from event tables.

Events are treated as unit impulses. Regressors are built by convolving
each condition's onset train with every basis waveform on a grid
oversampled 16x relative to the scan period, then subsampled at scan
times. Columns are ordered condition-major, so a stacked coefficient
vector reads as one basis-coefficient block per condition.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .hrf import BasisSet

OVERSAMPLE = 16


@dataclass(frozen=True)
class EventTable:
    """Stimulus onsets with dense integer condition labels."""

    onsets: np.ndarray
    conditions: np.ndarray
    n_conditions: int
    runs: np.ndarray | None = None

    def __post_init__(self):
        onsets = np.asarray(self.onsets, dtype=float)
        conditions = np.asarray(self.conditions, dtype=int)
        if onsets.shape != conditions.shape or onsets.ndim != 1:
            raise ValueError("onsets and conditions must be matching 1-d vectors")
        if onsets.size and onsets.min() < 0:
            raise ValueError("onsets must be non-negative")
        if self.n_conditions < 1:
            raise ValueError("need at least one condition")
        if conditions.size and (conditions.min() < 0 or conditions.max() >= self.n_conditions):
            raise ValueError("condition ids must lie in [0, n_conditions)")
        runs = self.runs
        if runs is not None:
            runs = np.asarray(runs, dtype=int)
            if runs.shape != onsets.shape:
                raise ValueError("runs must match onsets in shape")
        order = np.argsort(onsets, kind="stable")
        object.__setattr__(self, "onsets", onsets[order])
        object.__setattr__(self, "conditions", conditions[order])
        object.__setattr__(self, "runs", None if runs is None else runs[order])

    def onsets_for(self, condition: int) -> np.ndarray:
        return self.onsets[self.conditions == condition]

    def subset_run(self, run: int) -> "EventTable":
        if self.runs is None:
            raise ValueError("event table carries no run ids")
        mask = self.runs == run
        return EventTable(self.onsets[mask], self.conditions[mask],
                          self.n_conditions, self.runs[mask])


@dataclass(frozen=True)
class DesignMatrix:
    """Convolved regressors, one basis-sized column block per condition."""

    matrix: np.ndarray
    tr: float
    n_conditions: int
    basis_size: int

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", matrix)
        if matrix.shape[1] != self.n_conditions * self.basis_size:
            raise ValueError("column count must equal n_conditions * basis_size")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("design entries must be finite")

    @property
    def n_scans(self) -> int:
        return self.matrix.shape[0]

    def condition_block(self, condition: int) -> np.ndarray:
        d = self.basis_size
        return self.matrix[:, condition * d:(condition + 1) * d]


@dataclass(frozen=True)
class SeparateDesigns:
    """Per-condition design pairs: own columns and the sum of all others."""

    own: np.ndarray     # (k, n, d)
    others: np.ndarray  # (k, n, d)
    tr: float

    @property
    def n_conditions(self) -> int:
        return self.own.shape[0]

    @property
    def n_scans(self) -> int:
        return self.own.shape[1]

    @property
    def basis_size(self) -> int:
        return self.own.shape[2]

    def pair(self, condition: int) -> tuple[np.ndarray, np.ndarray]:
        return self.own[condition], self.others[condition]

    def stacked(self) -> DesignMatrix:
        """Reassemble the plain design from the per-condition blocks."""
        k, n, d = self.own.shape
        matrix = np.transpose(self.own, (1, 0, 2)).reshape(n, k * d)
        return DesignMatrix(matrix, self.tr, k, d)


@dataclass(frozen=True)
class NuisanceMatrix:
    """Orthonormal slow-trend regressors; first column is the constant."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_scans(self) -> int:
        return self.matrix.shape[0]

    @property
    def size(self) -> int:
        return self.matrix.shape[1]


def _resample_to_fine(column: np.ndarray, dt: float, step: float) -> np.ndarray:
    """Zero-order-hold resampling of a basis column onto the fine grid."""
    ratio = dt / step
    if abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1:
        return np.repeat(column, int(round(ratio)))
    inverse = step / dt
    if abs(inverse - round(inverse)) < 1e-9 and round(inverse) >= 1:
        return column[:: int(round(inverse))]
    raise ValueError(
        f"basis dt {dt} incompatible with oversampled step {step}: "
        "one must divide the other"
    )


def build_condition_regressor(onsets: np.ndarray, basis_column: np.ndarray,
                              dt: float, tr: float, n_scans: int) -> np.ndarray:
    """Convolve one onset train with one basis waveform, sampled at scans."""
    onsets = np.asarray(onsets, dtype=float)
    if onsets.size and onsets.max() >= n_scans * tr:
        raise ValueError("onset beyond the acquisition window")
    step = tr / OVERSAMPLE
    fine_len = n_scans * OVERSAMPLE
    sticks = np.zeros(fine_len)
    for onset in onsets:
        idx = int(round(onset / step))
        if idx < fine_len:
            sticks[idx] += 1.0
    waveform = _resample_to_fine(np.asarray(basis_column, dtype=float), dt, step)
    fine = np.convolve(sticks, waveform)[:fine_len]
    return fine[::OVERSAMPLE].copy()


def build_design(events: EventTable, basis: BasisSet, tr: float,
                 n_scans: int) -> DesignMatrix:
    """Stack convolved regressors for every (condition, basis element) pair."""
    if events.n_conditions < 1:
        raise ValueError("need at least one condition")
    if events.onsets.size and events.onsets.max() >= n_scans * tr:
        raise ValueError("onset beyond the acquisition window")
    k, d = events.n_conditions, basis.size
    matrix = np.zeros((n_scans, k * d))
    for j in range(k):
        onsets = events.onsets_for(j)
        for m in range(d):
            matrix[:, j * d + m] = build_condition_regressor(
                onsets, basis.matrix[:, m], basis.dt, tr, n_scans
            )
    return DesignMatrix(matrix, tr, k, d)


def build_separate_designs(events: EventTable, basis: BasisSet, tr: float,
                           n_scans: int) -> SeparateDesigns:
    """Per-condition designs pairing own columns with the summed rest."""
    design = build_design(events, basis, tr, n_scans)
    return separate_from_design(design)


def separate_from_design(design: DesignMatrix) -> SeparateDesigns:
    k, d = design.n_conditions, design.basis_size
    own = np.transpose(
        design.matrix.reshape(design.n_scans, k, d), (1, 0, 2)
    ).copy()
    total = own.sum(axis=0)
    others = total[None, :, :] - own
    return SeparateDesigns(own, others, design.tr)


def build_drift(n_scans: int, order: int = 3) -> NuisanceMatrix:
    """Orthonormal polynomial trend columns of degree 0..order."""
    if order < 0:
        raise ValueError("order must be non-negative")
    if n_scans <= order:
        raise ValueError("need more scans than the polynomial order")
    t = np.linspace(-1.0, 1.0, n_scans)
    vander = np.vander(t, order + 1, increasing=True)
    q, _ = np.linalg.qr(vander)
    # fix signs so every column is positive at the final scan
    signs = np.sign(q[-1, :])
    signs[signs == 0] = 1.0
    return NuisanceMatrix(q * signs)


def concat_runs(designs: list[DesignMatrix],
                drifts: list[NuisanceMatrix]) -> tuple[DesignMatrix, NuisanceMatrix]:
    """Stack run designs vertically; keep nuisance blocks per run."""
    if not designs or len(designs) != len(drifts):
        raise ValueError("need one drift matrix per run design")
    first = designs[0]
    for design in designs[1:]:
        if (design.n_conditions, design.basis_size) != (first.n_conditions,
                                                        first.basis_size):
            raise ValueError("runs must share condition count and basis size")
        if design.tr != first.tr:
            raise ValueError("runs must share the scan period")
    for design, drift in zip(designs, drifts):
        if drift.n_scans != design.n_scans:
            raise ValueError("drift rows must match the run design")
    stacked = np.vstack([design.matrix for design in designs])
    nuisance = block_diag(*[drift.matrix for drift in drifts])
    return (
        DesignMatrix(stacked, first.tr, first.n_conditions, first.basis_size),
        NuisanceMatrix(nuisance),
    )


def read_events_csv(path_or_text) -> EventTable:
    """Parse an event table from `onset,condition[,run]` CSV."""
    if hasattr(path_or_text, "read"):
        handle = path_or_text
        rows = list(csv.DictReader(handle))
    else:
        with open(path_or_text, newline="") as handle:
            rows = list(csv.DictReader(handle))
    if not rows:
        raise ValueError("event table is empty")
    onsets = np.array([float(r["onset"]) for r in rows])
    conditions = np.array([int(r["condition"]) for r in rows])
    runs = None
    if "run" in rows[0] and rows[0]["run"] not in (None, ""):
        runs = np.array([int(r["run"]) for r in rows])
    return EventTable(onsets, conditions, int(conditions.max()) + 1, runs)


def write_events_csv(events: EventTable, path) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if events.runs is None:
        writer.writerow(["onset", "condition"])
        for onset, condition in zip(events.onsets, events.conditions):
            writer.writerow([repr(float(onset)), int(condition)])
    else:
        writer.writerow(["onset", "condition", "run"])
        for onset, condition, run in zip(events.onsets, events.conditions,
                                         events.runs):
            writer.writerow([repr(float(onset)), int(condition), int(run)])
    with open(path, "w", newline="") as handle:
        handle.write(buffer.getvalue())
