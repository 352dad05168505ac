"""Scoring and statistical testing for encoding and decoding studies.

Includes correlation scores, an exact (enumerated) signed-rank test for
small samples, a two-proportion test for identification accuracies,
ridge regression with its regularization weight picked by generalized
cross-validation, and the image identification procedure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .design import build_condition_regressor
from .hrf import SampledHrf


class UndefinedScoreError(ValueError):
    """A score is undefined for this input (e.g. zero variance)."""


class DegenerateTestError(ValueError):
    """A statistical test has no information in this input."""


def pearson_r(a, b) -> float:
    """Centered correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be matching vectors of length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.linalg.norm(ac) * np.linalg.norm(bc)
    if denom == 0:
        raise UndefinedScoreError("zero variance input")
    return float(np.clip(ac @ bc / denom, -1.0, 1.0))


def kendall_tau(a, b) -> float:
    """Tie-corrected rank correlation (tau-b) over all pairs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be matching vectors of length >= 2")
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(a.size, k=1)
    concordant_minus_discordant = float(np.sum(da[upper] * db[upper]))
    n0 = a.size * (a.size - 1) / 2.0
    ties_a = n0 - np.count_nonzero(da[upper])
    ties_b = n0 - np.count_nonzero(db[upper])
    denom = math.sqrt((n0 - ties_a) * (n0 - ties_b))
    if denom == 0:
        raise UndefinedScoreError("all values tied on one side")
    return float(np.clip(concordant_minus_discordant / denom, -1.0, 1.0))


def _normal_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _signed_rank_distribution(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each achievable doubled rank-sum under random signs."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[:total + 1 - rank]
        counts = counts + shifted
    return counts


EXACT_LIMIT = 20


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_used: int
    exact: bool


def wilcoxon_signed_rank(a, b, sides: str = "two-sided") -> WilcoxonResult:
    """Signed-rank test on paired differences.

    Zero differences are dropped. With at most 20 informative pairs the
    null distribution is enumerated exactly (ties get average ranks);
    larger samples use the normal approximation with tie correction.
    `sides` is one of "two-sided", "greater" (a tends above b), "less".
    """
    if sides not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown sides {sides!r}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be matching vectors")
    diff = a - b
    diff = diff[diff != 0]
    m = diff.size
    if m == 0:
        raise DegenerateTestError("all paired differences are zero")
    magnitudes = np.abs(diff)
    order = np.argsort(magnitudes, kind="stable")
    ranks = np.empty(m)
    sorted_mag = magnitudes[order]
    i = 0
    position = 1
    while i < m:
        j = i
        while j + 1 < m and sorted_mag[j + 1] == sorted_mag[i]:
            j += 1
        ranks[order[i:j + 1]] = (position + position + (j - i)) / 2.0
        position += j - i + 1
        i = j + 1
    w_plus = float(ranks[diff > 0].sum())

    if m <= EXACT_LIMIT:
        doubled = np.rint(2.0 * ranks).astype(int)
        counts = _signed_rank_distribution(doubled)
        total_patterns = counts.sum()
        w2 = int(round(2.0 * w_plus))
        p_greater = counts[w2:].sum() / total_patterns
        p_less = counts[:w2 + 1].sum() / total_patterns
        exact = True
    else:
        mean = m * (m + 1) / 4.0
        tie_sizes = np.unique(sorted_mag, return_counts=True)[1]
        correction = float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
        var = m * (m + 1) * (2 * m + 1) / 24.0 - correction
        z = (w_plus - mean) / math.sqrt(var)
        p_greater = _normal_sf(z)
        p_less = _normal_sf(-z)
        exact = False

    if sides == "greater":
        p = p_greater
    elif sides == "less":
        p = p_less
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return WilcoxonResult(w_plus, float(p), m, exact)


def binomial_proportion_test(p_a: float, p_b: float, n: int) -> tuple[float, float]:
    """Score test comparing two success rates over n repetitions each.

    Returns the statistic and the upper-tail normal p-value for the
    one-tailed alternative that the first rate is higher.
    """
    if not (0 <= p_a <= 1 and 0 <= p_b <= 1):
        raise ValueError("rates must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be positive")
    pooled = (p_a + p_b) / 2.0
    if pooled in (0.0, 1.0):
        raise DegenerateTestError("pooled rate saturates at 0 or 1")
    t = (p_a - p_b) / math.sqrt(pooled * (1.0 - pooled) * 2.0 / n)
    return t, _normal_sf(t)


@dataclass(frozen=True)
class RidgeGcvResult:
    best_lambda: float
    weights: np.ndarray
    scores: dict[float, float] = field(repr=False)


def default_lambda_grid() -> np.ndarray:
    return np.logspace(-3, 3, 30)


def ridge_gcv(features, targets, lambda_grid=None) -> RidgeGcvResult:
    """Ridge weights with the penalty chosen by generalized cross-validation.

    A single SVD of the feature matrix is reused across the grid. The
    GCV score for a penalty is n * ||(I - H) t||^2 / tr(I - H)^2 with H
    the ridge hat matrix.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError("feature matrix must be 2-d with >= 1 column")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid()
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0 or np.any(lambda_grid <= 0):
        raise ValueError("lambda grid must be non-empty and positive")
    n = features.shape[0]
    u, s, vt = np.linalg.svd(features, full_matrices=False)
    uty = u.T @ targets
    scores = {}
    best = None
    for lam in lambda_grid:
        shrink = s**2 / (s**2 + lam)
        fitted_rot = shrink * uty
        residual = targets - u @ fitted_rot
        trace_ih = n - float(shrink.sum())
        if trace_ih <= 0:
            continue
        score = n * float(residual @ residual) / trace_ih**2
        scores[float(lam)] = score
        if best is None or score < best[1]:
            best = (float(lam), score)
    if best is None:
        raise UndefinedScoreError("no usable penalty in the grid")
    lam = best[0]
    weights = vt.T @ (s / (s**2 + lam) * uty)
    return RidgeGcvResult(lam, weights, scores)


@dataclass(frozen=True)
class IdentificationResult:
    accuracy: float
    assignments: np.ndarray
    n_ties: int
    n_excluded: int


def identify_images(predicted, measured) -> IdentificationResult:
    """Match each measured pattern to the best-correlated predicted one.

    Rows are candidate stimuli, columns are voxels. A row is correct when
    its own prediction correlates highest; ties go to the lowest index,
    and zero-variance rows are excluded and counted as misses.
    """
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if predicted.shape != measured.shape or predicted.ndim != 2:
        raise ValueError("predicted and measured must have matching 2-d shapes")
    m = predicted.shape[0]
    if m < 2:
        raise ValueError("need at least two candidate patterns")

    def center_scale(rows):
        centered = rows - rows.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(centered, axis=1)
        return centered, norms

    pred_c, pred_norm = center_scale(predicted)
    meas_c, meas_norm = center_scale(measured)
    usable_pred = pred_norm > 0
    assignments = np.full(m, -1)
    n_ties = 0
    n_excluded = 0
    for i in range(m):
        if meas_norm[i] == 0:
            n_excluded += 1
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = pred_c @ meas_c[i] / (pred_norm * meas_norm[i])
        corr[~usable_pred] = -np.inf
        if not np.isfinite(corr).any():
            n_excluded += 1
            continue
        best = corr.max()
        winners = np.flatnonzero(corr == best)
        if winners.size > 1:
            n_ties += 1
        assignments[i] = winners[0]
    accuracy = float(np.mean(assignments == np.arange(m)))
    return IdentificationResult(accuracy, assignments, n_ties, n_excluded)


def predict_bold(events_by_condition, betas, hrf: SampledHrf, tr: float,
                 n_scans: int) -> np.ndarray:
    """Synthesize a time course from per-condition onsets, amplitudes and
    one response waveform."""
    out = np.zeros(n_scans)
    for onsets, beta in zip(events_by_condition, betas):
        if len(onsets) == 0 or beta == 0:
            continue
        out += beta * build_condition_regressor(
            np.asarray(onsets, dtype=float), hrf.samples, hrf.dt, tr, n_scans
        )
    return out


def encoding_score(train_betas, train_features, test_features, test_events,
                   test_bold, hrfs, tr: float, lambda_grid=None) -> np.ndarray:
    """Held-out prediction score per voxel.

    For every voxel, ridge regression (penalty by GCV) maps stimulus
    features to that voxel's training amplitudes; the learned map
    predicts amplitudes for the held-out conditions, those are convolved
    with the voxel's response waveform, and the synthesized signal is
    correlated against the measured held-out time course.

    `test_events` lists the onset vector of each held-out condition, in
    the row order of `test_features`; `hrfs` holds one response per voxel.
    """
    train_betas = np.asarray(train_betas, dtype=float)    # (V, k_train)
    train_features = np.asarray(train_features, dtype=float)
    test_features = np.asarray(test_features, dtype=float)
    test_bold = np.asarray(test_bold, dtype=float)        # (n_test, V)
    n_voxels = train_betas.shape[0]
    if len(hrfs) != n_voxels or test_bold.shape[1] != n_voxels:
        raise ValueError("per-voxel inputs disagree on the voxel count")
    n_test = test_bold.shape[0]
    scores = np.zeros(n_voxels)
    for v in range(n_voxels):
        fit = ridge_gcv(train_features, train_betas[v], lambda_grid)
        predicted_betas = test_features @ fit.weights
        predicted = predict_bold(test_events, predicted_betas, hrfs[v],
                                 tr, n_test)
        try:
            scores[v] = pearson_r(predicted, test_bold[:, v])
        except UndefinedScoreError:
            scores[v] = 0.0
    return scores
