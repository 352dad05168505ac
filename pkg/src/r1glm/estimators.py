"""Estimators for activation coefficients and response shapes.

Four families are implemented per voxel: plain least squares on the full
design, least squares on per-condition separate designs, and their
rank-1 constrained counterparts where one response shape is shared by
all conditions so the coefficient vector factors into shape times
amplitudes. A parametric variant optimizes the response's generating
parameters directly. `fit_volume` runs any of them across voxels.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .design import DesignMatrix, NuisanceMatrix, SeparateDesigns, separate_from_design
from .hrf import BasisSet, SampledHrf, hrf_peak_amplitude, sample_reference_hrf
from .solver import SolverConfig, lbfgs_box_minimize, qr_reduce

PINV_RCOND = 1e-10
DEGENERATE_PEAK = 1e-8
PENALTY_WEIGHT = 1.0


@dataclass
class VoxelFit:
    """Estimated response and amplitudes for one voxel."""

    h: np.ndarray
    hrf: SampledHrf
    beta: np.ndarray
    omega: np.ndarray
    r: np.ndarray | None
    objective: float
    iterations: int
    converged: bool
    degenerate: bool = False


@dataclass
class VolumeFitResult:
    """Per-voxel amplitudes and responses for a whole data matrix."""

    betas: np.ndarray    # (V, k)
    hrfs: np.ndarray     # (V, L)
    hrf_dt: float
    diagnostics: list[dict]

    @property
    def n_voxels(self) -> int:
        return self.betas.shape[0]


def _as_array(m) -> np.ndarray:
    if isinstance(m, (DesignMatrix, NuisanceMatrix)):
        return m.matrix
    return np.asarray(m, dtype=float)


def _rank_revealing_pinv(a: np.ndarray) -> tuple[np.ndarray, int]:
    """Pseudoinverse with a 1e-10 relative singular value cutoff."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0])), 0
    keep = s > PINV_RCOND * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T, int(keep.sum())


def glm_fit(X, Z, y) -> tuple[np.ndarray, np.ndarray]:
    """Least squares of y on [X Z]; returns condition and nuisance parts."""
    Xm, Zm = _as_array(X), _as_array(Z)
    y = np.asarray(y, dtype=float)
    stacked = np.hstack([Xm, Zm]) if Zm.size else Xm
    pinv, rank = _rank_revealing_pinv(stacked)
    nonzero_cols = int(np.any(stacked != 0, axis=0).sum())
    if rank < nonzero_cols:
        warnings.warn("rank-deficient design, using pseudoinverse solution",
                      RuntimeWarning)
    coef = pinv @ y
    d = Xm.shape[1]
    return coef[:d], coef[d:]


def extract_betas_and_hrfs(
    v: np.ndarray, basis: BasisSet
) -> tuple[np.ndarray, list[SampledHrf], SampledHrf]:
    """Split a stacked coefficient vector into per-condition amplitudes and
    unit-peak response shapes, plus their mean shape."""
    v = np.asarray(v, dtype=float)
    d = basis.size
    if v.size % d != 0:
        raise ValueError("coefficient length must be a multiple of basis size")
    k = v.size // d
    betas = np.zeros(k)
    hrfs = []
    for j in range(k):
        raw = basis.matrix @ v[j * d:(j + 1) * d]
        peak = np.abs(raw).max()
        if peak < DEGENERATE_PEAK:
            betas[j] = 0.0
            hrfs.append(SampledHrf(np.zeros(basis.n_samples), basis.dt))
            continue
        amplitude = hrf_peak_amplitude(raw)
        betas[j] = amplitude
        hrfs.append(SampledHrf(raw / amplitude, basis.dt))
    valid = [h.samples for h in hrfs if np.abs(h.samples).max() > 0]
    if valid:
        mean = np.mean(valid, axis=0)
        peak = np.abs(mean).max()
        if peak > 0:
            mean = mean / hrf_peak_amplitude(mean)
    else:
        mean = np.zeros(basis.n_samples)
    return betas, hrfs, SampledHrf(mean, basis.dt)


def _separate_systems(S: SeparateDesigns, Z) -> list[np.ndarray]:
    Zm = _as_array(Z)
    systems = []
    for i in range(S.n_conditions):
        own, others = S.pair(i)
        blocks = [own, others]
        if Zm.size:
            blocks.append(Zm)
        systems.append(np.hstack(blocks))
    return systems


def glms_fit(S: SeparateDesigns, Z, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-condition least squares against [own, rest, nuisance] designs.

    Returns the k x d own-coefficient slices, the k x d rest slices, and
    the nuisance coefficients averaged over conditions.
    """
    y = np.asarray(y, dtype=float)
    d, q = S.basis_size, _as_array(Z).shape[1]
    slices = np.zeros((S.n_conditions, d))
    rests = np.zeros((S.n_conditions, d))
    omegas = np.zeros((S.n_conditions, q))
    for i, system in enumerate(_separate_systems(S, Z)):
        pinv, rank = _rank_revealing_pinv(system)
        nonzero_cols = int(np.any(system != 0, axis=0).sum())
        if rank < nonzero_cols:
            warnings.warn("rank-deficient separate design, using pseudoinverse",
                          RuntimeWarning)
        coef = pinv @ y
        slices[i] = coef[:d]
        rests[i] = coef[d:2 * d]
        omegas[i] = coef[2 * d:]
    return slices, rests, omegas.mean(axis=0)


def _default_shape(basis: BasisSet) -> np.ndarray:
    if basis.kind == "fir":
        return basis.reference.samples.copy()
    e = np.zeros(basis.size)
    e[0] = 1.0
    return e


def glms_initializer(slices, rests, omega, basis: BasisSet,
                     with_rest: bool = False) -> VoxelFit:
    """Collapse per-condition slices into a single shared-shape start point.

    The shape is the unit-peak mean of the per-condition normalized
    slices; amplitudes are their signed peaks re-expressed at that scale.
    """
    slices = np.asarray(slices, dtype=float)
    rests = np.asarray(rests, dtype=float)
    k = slices.shape[0]
    peaks = np.array([hrf_peak_amplitude(basis.matrix @ s) if
                      np.abs(basis.matrix @ s).max() > DEGENERATE_PEAK else 0.0
                      for s in slices])
    usable = np.abs(peaks) > DEGENERATE_PEAK
    if usable.any():
        h0 = np.mean(slices[usable] / peaks[usable, None], axis=0)
        if np.abs(basis.matrix @ h0).max() < DEGENERATE_PEAK:
            h0 = _default_shape(basis)
    else:
        h0 = _default_shape(basis)
    scale = np.abs(h0).max()
    if scale > 1.0:
        h0 = h0 / scale
    p0 = hrf_peak_amplitude(basis.matrix @ h0)
    if abs(p0) < DEGENERATE_PEAK:
        h0 = _default_shape(basis)
        p0 = hrf_peak_amplitude(basis.matrix @ h0)
    beta0 = peaks / p0
    r0 = None
    if with_rest:
        rest_peaks = np.array([
            hrf_peak_amplitude(basis.matrix @ s) if
            np.abs(basis.matrix @ s).max() > DEGENERATE_PEAK else 0.0
            for s in rests
        ])
        r0 = rest_peaks / p0
    return VoxelFit(
        h=h0, hrf=SampledHrf(basis.matrix @ h0, basis.dt), beta=beta0,
        omega=np.asarray(omega, dtype=float).copy(), r=r0,
        objective=np.inf, iterations=0, converged=False,
    )


def r1_objective_grad(z, X, y, Z, basis: BasisSet,
                      penalty_weight: float = PENALTY_WEIGHT):
    """Value and gradient of the shared-shape least squares objective.

    The packed variable is [shape coefficients, amplitudes, nuisance].
    Kronecker-structured products are applied through reshapes; nothing
    of size d*k by d*k is ever formed.
    """
    Xm, Zm = _as_array(X), _as_array(Z)
    d = basis.size
    q = Zm.shape[1]
    k = Xm.shape[1] // d
    if z.shape != (d + k + q,):
        raise ValueError(f"expected packed vector of length {d + k + q}")
    fn = make_r1_objective(Xm, np.asarray(y, dtype=float), Zm, basis,
                           penalty_weight, k)
    return fn(np.asarray(z, dtype=float))


def make_r1_objective(Xm, y, Zm, basis, penalty_weight, k):
    d = basis.size
    q = Zm.shape[1]
    c0 = float(basis.matrix[:, 0] @ basis.matrix[:, 0])

    def objective(z):
        h = z[:d]
        beta = z[d:d + k]
        omega = z[d + k:]
        coef = (beta[:, None] * h[None, :]).ravel()
        residual = y - Xm @ coef
        if q:
            residual = residual - Zm @ omega
        value = 0.5 * float(residual @ residual)
        value -= penalty_weight * c0 * h[0] * h[0]
        xtr = (Xm.T @ residual).reshape(k, d)
        grad_h = -(xtr.T @ beta)
        grad_h[0] -= 2.0 * penalty_weight * c0 * h[0]
        grad_beta = -(xtr @ h)
        grad_omega = -(Zm.T @ residual) if q else np.zeros(0)
        return value, np.concatenate([grad_h, grad_beta, grad_omega])

    return objective


def r1glms_objective_grad(z, X, y, Z, basis: BasisSet,
                          penalty_weight: float = PENALTY_WEIGHT):
    """Value and gradient of the separate-designs shared-shape objective.

    The packed variable is [shape, amplitudes, nuisance, rest amplitudes];
    each condition's term regresses the data on its own regressors plus
    the pooled remainder scaled by the rest amplitude.
    """
    Xm, Zm = _as_array(X), _as_array(Z)
    d = basis.size
    q = Zm.shape[1]
    k = Xm.shape[1] // d
    if z.shape != (d + 2 * k + q,):
        raise ValueError(f"expected packed vector of length {d + 2 * k + q}")
    fn = make_r1glms_objective(Xm, np.asarray(y, dtype=float), Zm, basis,
                               penalty_weight, k)
    return fn(np.asarray(z, dtype=float))


def make_r1glms_objective(Xm, y, Zm, basis, penalty_weight, k):
    d = basis.size
    q = Zm.shape[1]
    n = Xm.shape[0]
    c0 = float(basis.matrix[:, 0] @ basis.matrix[:, 0])
    blocks = Xm.reshape(n, k, d)

    def objective(z):
        h = z[:d]
        beta = z[d:d + k]
        omega = z[d + k:d + k + q]
        rest = z[d + k + q:]
        u = blocks @ h                       # (n, k): own regressor courses
        total = u.sum(axis=1)
        base = y - Zm @ omega if q else y
        residual = (base[:, None] - total[:, None] * rest[None, :]
                    + u * (rest - beta)[None, :])
        value = 0.5 * float(np.sum(residual * residual))
        value -= penalty_weight * c0 * h[0] * h[0]
        pooled = residual @ rest
        weights = residual * (beta - rest)[None, :] + pooled[:, None]
        grad_h = -np.einsum("nkd,nk->d", blocks, weights)
        grad_h[0] -= 2.0 * penalty_weight * c0 * h[0]
        grad_beta = -np.einsum("nk,nk->k", u, residual)
        grad_rest = -np.einsum("nk,nk->k", total[:, None] - u, residual)
        grad_omega = -(Zm.T @ residual.sum(axis=1)) if q else np.zeros(0)
        return value, np.concatenate([grad_h, grad_beta, grad_omega, grad_rest])

    return objective


def _finalize(h, beta, omega, rest, basis: BasisSet, objective_value,
              iterations, converged) -> VoxelFit:
    """Rescale so the response has unit peak and correlates positively
    with the reference; amplitudes absorb the inverse scale."""
    raw = basis.matrix @ h
    peak = np.abs(raw).max()
    if peak < DEGENERATE_PEAK:
        return VoxelFit(
            h=h.copy(), hrf=SampledHrf(np.zeros(basis.n_samples), basis.dt),
            beta=np.zeros_like(beta), omega=omega.copy(),
            r=None if rest is None else np.zeros_like(rest),
            objective=objective_value, iterations=iterations,
            converged=converged, degenerate=True,
        )
    sign = 1.0 if raw @ basis.reference.samples >= 0 else -1.0
    scale = peak * sign
    return VoxelFit(
        h=h / scale, hrf=SampledHrf(raw / scale, basis.dt),
        beta=beta * scale, omega=omega.copy(),
        r=None if rest is None else rest * scale,
        objective=objective_value, iterations=iterations, converged=converged,
    )


def _zero_fit(basis: BasisSet, k: int, q: int, with_rest: bool) -> VoxelFit:
    return VoxelFit(
        h=np.zeros(basis.size),
        hrf=SampledHrf(np.zeros(basis.n_samples), basis.dt),
        beta=np.zeros(k), omega=np.zeros(q),
        r=np.zeros(k) if with_rest else None,
        objective=0.0, iterations=0, converged=True, degenerate=True,
    )


def _solve_rank1(objective, z0, d, config, alpha_bounds=None):
    dim = z0.size
    lower = np.full(dim, -np.inf)
    upper = np.full(dim, np.inf)
    if alpha_bounds is None:
        lower[:d] = -1.0
        upper[:d] = 1.0
    else:
        lower[:d], upper[:d] = alpha_bounds
    z0 = np.clip(z0, lower, upper)
    return lbfgs_box_minimize(objective, z0, lower, upper, config)


def r1glm_fit(X, y, Z, basis: BasisSet, config: SolverConfig | None = None,
              init: VoxelFit | None = None, use_qr: bool = True,
              penalty_weight: float = PENALTY_WEIGHT) -> VoxelFit:
    """Fit a shared response shape and per-condition amplitudes jointly."""
    Xm, Zm = _as_array(X), _as_array(Z)
    y = np.asarray(y, dtype=float)
    config = config or SolverConfig()
    d = basis.size
    q = Zm.shape[1]
    k = Xm.shape[1] // d
    if not np.any(y):
        return _zero_fit(basis, k, q, with_rest=False)

    if init is None:
        sep = separate_from_design(DesignMatrix(Xm, 1.0, k, d))
        slices, rests, omega0 = glms_fit(sep, Zm, y)
        init = glms_initializer(slices, rests, omega0, basis)

    offset = 0.0
    Xf, Zf, yf = Xm, Zm, y
    if use_qr and Xm.shape[0] > Xm.shape[1] + q:
        Xf, Zf, yf, offset = qr_reduce(Xm, Zm, y)

    objective = make_r1_objective(Xf, yf, Zf, basis, penalty_weight, k)
    z0 = np.concatenate([init.h, init.beta, init.omega])
    result = _solve_rank1(objective, z0, d, config)
    h = result.x[:d]
    beta = result.x[d:d + k]
    omega = result.x[d + k:]
    residual_value = max(result.value + penalty_weight * (
        float(basis.matrix[:, 0] @ basis.matrix[:, 0]) * h[0] * h[0]
    ) + offset, 0.0)
    return _finalize(h, beta, omega, None, basis, residual_value,
                     result.iterations, result.converged)


def r1glms_fit(S: SeparateDesigns, y, Z, basis: BasisSet,
               config: SolverConfig | None = None,
               init: VoxelFit | None = None, use_qr: bool = True,
               penalty_weight: float = PENALTY_WEIGHT) -> VoxelFit:
    """Separate-designs variant sharing one shape across conditions."""
    Zm = _as_array(Z)
    y = np.asarray(y, dtype=float)
    config = config or SolverConfig()
    design = S.stacked()
    Xm = design.matrix
    d, k, q = basis.size, S.n_conditions, Zm.shape[1]
    if not np.any(y):
        return _zero_fit(basis, k, q, with_rest=True)

    if init is None or init.r is None:
        slices, rests, omega0 = glms_fit(S, Zm, y)
        init = glms_initializer(slices, rests, omega0, basis, with_rest=True)

    offset = 0.0
    Xf, Zf, yf = Xm, Zm, y
    if use_qr and Xm.shape[0] > Xm.shape[1] + q:
        Xf, Zf, yf, offset = qr_reduce(Xm, Zm, y)
        offset *= k  # the orthogonal remainder appears in every term

    objective = make_r1glms_objective(Xf, yf, Zf, basis, penalty_weight, k)
    z0 = np.concatenate([init.h, init.beta, init.omega, init.r])
    result = _solve_rank1(objective, z0, d, config)
    h = result.x[:d]
    beta = result.x[d:d + k]
    omega = result.x[d + k:d + k + q]
    rest = result.x[d + k + q:]
    residual_value = max(result.value + penalty_weight * (
        float(basis.matrix[:, 0] @ basis.matrix[:, 0]) * h[0] * h[0]
    ) + offset, 0.0)
    return _finalize(h, beta, omega, rest, basis, residual_value,
                     result.iterations, result.converged)


@dataclass(frozen=True)
class ParametricHrfModel:
    """Response shape as a function of a few interpretable parameters."""

    fn: callable
    initial: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_samples: int
    dt: float

    @property
    def n_params(self) -> int:
        return self.initial.size

    def __call__(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(params), dtype=float)

    def jacobian(self, params: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian of the shape in its parameters."""
        out = np.zeros((self.n_samples, self.n_params))
        for j in range(self.n_params):
            delta = step * max(1.0, abs(params[j]))
            e = np.zeros_like(params)
            e[j] = delta
            out[:, j] = (self(params + e) - self(params - e)) / (2.0 * delta)
        return out


def make_two_gamma_model(n_lags: int, dt: float = 1.0) -> ParametricHrfModel:
    """Two-parameter response model: peak delay and undershoot delay."""
    from .hrf import UNDERSHOOT_RATIO
    from scipy import stats

    lags = np.arange(n_lags) * dt

    def fn(params):
        peak_delay, under_delay = params
        out = np.zeros(n_lags)
        pos = lags > 0
        out[pos] = (stats.gamma.pdf(lags[pos], peak_delay, scale=1.0)
                    - UNDERSHOOT_RATIO * stats.gamma.pdf(lags[pos], under_delay,
                                                         scale=1.0))
        top = np.abs(out).max()
        return out / top if top > 0 else out

    return ParametricHrfModel(
        fn=fn, initial=np.array([6.0, 16.0]),
        lower=np.array([2.0, 8.0]), upper=np.array([12.0, 30.0]),
        n_samples=n_lags, dt=dt,
    )


def make_parametric_objective(Xm, y, Zm, model: ParametricHrfModel, k):
    d1 = model.n_params
    q = Zm.shape[1]

    def objective(z):
        alpha = z[:d1]
        beta = z[d1:d1 + k]
        omega = z[d1 + k:]
        h = model(alpha)
        coef = (beta[:, None] * h[None, :]).ravel()
        residual = y - Xm @ coef
        if q:
            residual = residual - Zm @ omega
        value = 0.5 * float(residual @ residual)
        xtr = (Xm.T @ residual).reshape(k, model.n_samples)
        grad_h = -(xtr.T @ beta)
        grad_alpha = model.jacobian(alpha).T @ grad_h
        grad_beta = -(xtr @ h)
        grad_omega = -(Zm.T @ residual) if q else np.zeros(0)
        return value, np.concatenate([grad_alpha, grad_beta, grad_omega])

    return objective


def r1glm_parametric_fit(hrf_model: ParametricHrfModel, X, y, Z,
                         config: SolverConfig | None = None,
                         init: VoxelFit | None = None,
                         use_qr: bool = True) -> VoxelFit:
    """Optimize the response's generating parameters and amplitudes.

    The design must be built with a stick basis whose size matches the
    model's sample count; the fitted shape is the model output itself.
    """
    Xm, Zm = _as_array(X), _as_array(Z)
    y = np.asarray(y, dtype=float)
    config = config or SolverConfig()
    d = hrf_model.n_samples
    q = Zm.shape[1]
    k = Xm.shape[1] // d
    if Xm.shape[1] != k * d:
        raise ValueError("design columns must be a multiple of the model size")
    fir = BasisSet(np.eye(d), "fir", hrf_model.dt,
                   SampledHrf(hrf_model(hrf_model.initial), hrf_model.dt))
    if not np.any(y):
        fit = _zero_fit(fir, k, q, with_rest=False)
        fit.h = hrf_model.initial.copy()
        return fit

    if init is None:
        sep = separate_from_design(DesignMatrix(Xm, 1.0, k, d))
        slices, rests, omega0 = glms_fit(sep, Zm, y)
        init = glms_initializer(slices, rests, omega0, fir)

    offset = 0.0
    Xf, Zf, yf = Xm, Zm, y
    if use_qr and Xm.shape[0] > Xm.shape[1] + q:
        Xf, Zf, yf, offset = qr_reduce(Xm, Zm, y)

    objective = make_parametric_objective(Xf, yf, Zf, hrf_model, k)
    z0 = np.concatenate([hrf_model.initial, init.beta, init.omega])
    result = _solve_rank1(objective, z0, hrf_model.n_params, config,
                          alpha_bounds=(hrf_model.lower, hrf_model.upper))
    alpha = result.x[:hrf_model.n_params]
    beta = result.x[hrf_model.n_params:hrf_model.n_params + k]
    omega = result.x[hrf_model.n_params + k:]
    shape = hrf_model(alpha)
    peak = np.abs(shape).max()
    reference = sample_reference_hrf(hrf_model.dt,
                                     max((d - 1) * hrf_model.dt, 32.0))
    ref = reference.samples[:d]
    if peak < DEGENERATE_PEAK:
        hrf = SampledHrf(np.zeros(d), hrf_model.dt)
        beta = np.zeros_like(beta)
        degenerate = True
    else:
        sign = 1.0 if shape @ ref >= 0 else -1.0
        scale = peak * sign
        hrf = SampledHrf(shape / scale, hrf_model.dt)
        beta = beta * scale
        degenerate = False
    return VoxelFit(
        h=alpha, hrf=hrf, beta=beta, omega=omega.copy(), r=None,
        objective=max(result.value + offset, 0.0),
        iterations=result.iterations,
        converged=result.converged, degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Whole-volume fitting
# ---------------------------------------------------------------------------

_VOLUME_CONTEXT: dict = {}

METHODS = ("glm", "glms", "r1glm", "r1glms", "r1param")


def _init_volume_worker(context):
    _VOLUME_CONTEXT.clear()
    _VOLUME_CONTEXT.update(context)


def _fit_voxel_chunk(payload):
    indices, ys, inits = payload
    ctx = _VOLUME_CONTEXT
    out = []
    for idx, y, init in zip(indices, ys, inits):
        out.append((idx, _fit_single_rank1(ctx, y, init)))
    return out


def _fit_single_rank1(ctx, y, init):
    method = ctx["method"]
    try:
        if method == "r1glm":
            fit = r1glm_fit(ctx["X"], y, ctx["Z"], ctx["basis"],
                            config=ctx["config"], init=init,
                            use_qr=ctx["use_qr"])
        elif method == "r1glms":
            fit = r1glms_fit(ctx["S"], y, ctx["Z"], ctx["basis"],
                             config=ctx["config"], init=init,
                             use_qr=ctx["use_qr"])
        else:
            fit = r1glm_parametric_fit(ctx["model"], ctx["X"], y, ctx["Z"],
                                       config=ctx["config"], init=init,
                                       use_qr=ctx["use_qr"])
        return fit, None
    except Exception as exc:  # per-voxel failures must not kill the volume
        return None, f"{type(exc).__name__}: {exc}"


def fit_volume(Y, design: DesignMatrix, nuisance: NuisanceMatrix,
               basis: BasisSet, method: str,
               config: SolverConfig | None = None, jobs: int = 1,
               use_qr: bool = True,
               hrf_model: ParametricHrfModel | None = None) -> VolumeFitResult:
    """Fit every column of Y independently with the requested method.

    Output does not depend on the worker count: all shared preparation
    happens once in the parent and each voxel follows an identical,
    self-contained code path.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[1] < 1:
        raise ValueError("Y must be n_scans x n_voxels")
    config = config or SolverConfig()
    n, n_voxels = Y.shape
    k, d = design.n_conditions, design.basis_size

    if method == "r1param":
        if hrf_model is None:
            raise ValueError("r1param requires an hrf_model")
        hrf_len, hrf_dt = hrf_model.n_samples, hrf_model.dt
    else:
        hrf_len, hrf_dt = basis.n_samples, basis.dt

    betas = np.zeros((n_voxels, k))
    hrfs = np.zeros((n_voxels, hrf_len))
    diagnostics: list[dict] = []

    # contiguous per-voxel copies so every code path (parent loop, serial
    # chunk, pickled worker payload) sees an identical memory layout and
    # therefore produces identical floating-point results
    columns = [np.ascontiguousarray(Y[:, v]) for v in range(n_voxels)]

    if method in ("glm", "glms"):
        sep = separate_from_design(design) if method == "glms" else None
        if method == "glm":
            stacked = np.hstack([design.matrix, nuisance.matrix])
            pinv, rank = _rank_revealing_pinv(stacked)
            if rank < int(np.any(stacked != 0, axis=0).sum()):
                warnings.warn("rank-deficient design, using pseudoinverse",
                              RuntimeWarning)
            for v in range(n_voxels):
                coef = pinv @ columns[v]
                beta_v, _, mean_hrf = extract_betas_and_hrfs(coef[:k * d], basis)
                betas[v] = beta_v
                hrfs[v] = mean_hrf.samples
                diagnostics.append({"iterations": 0, "converged": True,
                                    "error": None})
        else:
            pinvs = [_rank_revealing_pinv(system)[0]
                     for system in _separate_systems(sep, nuisance)]
            for v in range(n_voxels):
                slices = np.vstack([(p @ columns[v])[:d] for p in pinvs])
                beta_v, _, mean_hrf = extract_betas_and_hrfs(slices.ravel(),
                                                             basis)
                betas[v] = beta_v
                hrfs[v] = mean_hrf.samples
                diagnostics.append({"iterations": 0, "converged": True,
                                    "error": None})
        return VolumeFitResult(betas, hrfs, hrf_dt, diagnostics)

    if n_voxels == 1:
        fit, error = _fit_single_rank1(
            _volume_context(design, nuisance, basis, method, config, use_qr,
                            hrf_model),
            columns[0], None,
        )
        _store_fit(0, fit, error, betas, hrfs, diagnostics, method)
        return VolumeFitResult(betas, hrfs, hrf_dt, diagnostics)

    # shared initialization pass, computed once in the parent
    sep = separate_from_design(design)
    systems = _separate_systems(sep, nuisance)
    pinvs = [_rank_revealing_pinv(system)[0] for system in systems]
    init_basis = basis
    if method == "r1param":
        init_basis = BasisSet(np.eye(d), "fir", hrf_model.dt,
                              SampledHrf(hrf_model(hrf_model.initial),
                                         hrf_model.dt))
    inits = []
    q = nuisance.matrix.shape[1]
    for v in range(n_voxels):
        if not np.any(columns[v]):
            inits.append(None)
            continue
        slices = np.zeros((k, d))
        rests = np.zeros((k, d))
        omegas = np.zeros((k, q))
        for i, p in enumerate(pinvs):
            coef = p @ columns[v]
            slices[i] = coef[:d]
            rests[i] = coef[d:2 * d]
            omegas[i] = coef[2 * d:]
        inits.append(glms_initializer(slices, rests, omegas.mean(axis=0),
                                      init_basis,
                                      with_rest=(method == "r1glms")))

    context = _volume_context(design, nuisance, basis, method, config, use_qr,
                              hrf_model, sep)
    results: list = [None] * n_voxels
    if jobs <= 1:
        _init_volume_worker(context)
        for idx, outcome in _fit_voxel_chunk(
            (list(range(n_voxels)), columns, inits)
        ):
            results[idx] = outcome
    else:
        chunk = max(1, (n_voxels + jobs * 4 - 1) // (jobs * 4))
        payloads = []
        for start in range(0, n_voxels, chunk):
            idx = list(range(start, min(start + chunk, n_voxels)))
            payloads.append((idx, [columns[v] for v in idx],
                             [inits[v] for v in idx]))
        with ProcessPoolExecutor(max_workers=jobs,
                                 initializer=_init_volume_worker,
                                 initargs=(context,)) as pool:
            for batch in pool.map(_fit_voxel_chunk, payloads):
                for idx, outcome in batch:
                    results[idx] = outcome

    for v, (fit, error) in enumerate(results):
        _store_fit(v, fit, error, betas, hrfs, diagnostics, method)
    return VolumeFitResult(betas, hrfs, hrf_dt, diagnostics)


def _volume_context(design, nuisance, basis, method, config, use_qr,
                    hrf_model, sep=None):
    return {
        "X": design.matrix,
        "Z": nuisance.matrix,
        "S": sep if sep is not None else separate_from_design(design),
        "basis": basis,
        "method": method,
        "config": config,
        "use_qr": use_qr,
        "model": hrf_model,
    }


def _store_fit(v, fit, error, betas, hrfs, diagnostics, method):
    if fit is None:
        diagnostics.append({"iterations": 0, "converged": False,
                            "error": error})
        return
    betas[v] = fit.beta
    hrfs[v] = fit.hrf.samples
    diagnostics.append({
        "iterations": fit.iterations,
        "converged": bool(fit.converged),
        "degenerate": bool(fit.degenerate),
        "error": error,
    })
