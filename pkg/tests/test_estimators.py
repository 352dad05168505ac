"""Tests for the per-voxel estimator families."""

import numpy as np
import pytest

from r1glm.design import (
    EventTable,
    NuisanceMatrix,
    build_design,
    build_drift,
    separate_from_design,
)
from r1glm.estimators import (
    extract_betas_and_hrfs,
    fit_volume,
    glm_fit,
    glms_fit,
    glms_initializer,
    make_two_gamma_model,
    r1_objective_grad,
    r1glm_fit,
    r1glm_parametric_fit,
    r1glms_fit,
    r1glms_objective_grad,
)
from r1glm.hrf import make_3hrf_basis, make_fir_basis, make_fixed_basis
from r1glm.solver import SolverConfig, check_gradient


def spaced_events(k, per_condition, n, tr=1.0, seed=0, spacing=6):
    rng = np.random.default_rng(seed)
    needed = k * per_condition
    slots = np.arange(0, n - spacing, spacing)
    if slots.size < needed:
        spacing = max(1, (n - 4) // (needed + 1))
        slots = np.arange(0, n - spacing, spacing)
    chosen = rng.choice(slots, size=needed, replace=False)
    conditions = np.repeat(np.arange(k), per_condition)
    rng.shuffle(conditions)
    return EventTable(np.sort(chosen).astype(float) * tr,
                      conditions[np.argsort(chosen, kind="stable")], k)


def rank1_instance(seed, n=200, k=5, basis=None, tr=1.0, sigma=0.0,
                   constant_beta=False):
    """Noiseless (or noisy) data from the shared-shape model."""
    rng = np.random.default_rng(seed)
    basis = basis or make_3hrf_basis(dt=tr / 16, duration=24.0)
    events = spaced_events(k, 5, n, tr, seed=seed + 1000)
    design = build_design(events, basis, tr, n)
    drift = build_drift(n, order=2)
    if basis.kind == "3hrf":
        h_true = np.array([1.0, rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)])
    elif basis.kind == "fir":
        h_true = basis.reference.samples.copy()
        h_true += 0.05 * rng.standard_normal(h_true.size)
        h_true[0] = 0.0
    else:
        h_true = np.ones(1)
    raw = basis.matrix @ h_true
    scale = np.abs(raw).max() * (1.0 if raw @ basis.reference.samples >= 0 else -1.0)
    h_true = h_true / scale
    if constant_beta:
        c = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        beta_true = np.full(k, c)
    else:
        beta_true = rng.uniform(0.5, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    omega_true = 0.5 * rng.standard_normal(drift.size)
    coef = (beta_true[:, None] * h_true[None, :]).ravel()
    y = design.matrix @ coef + drift.matrix @ omega_true
    if sigma > 0:
        y = y + sigma * rng.standard_normal(n)
    return design, drift, basis, y, h_true, beta_true, omega_true


class TestGlmFit:
    def test_orthonormal_exact(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((30, 6)))
        v_true = rng.standard_normal(6)
        y = q @ v_true
        v, omega = glm_fit(q, np.empty((30, 0)), y)
        np.testing.assert_allclose(v, v_true, atol=1e-12)
        assert omega.size == 0

    def test_orthogonal_target_gives_zero(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((30, 4))
        Z = rng.standard_normal((30, 2))
        span = np.hstack([X, Z])
        q, _ = np.linalg.qr(span)
        y = rng.standard_normal(30)
        y = y - q @ (q.T @ y)
        v, omega = glm_fit(X, Z, y)
        np.testing.assert_allclose(np.concatenate([v, omega]), 0.0, atol=1e-10)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((40, 4))
        Z = rng.standard_normal((40, 2))
        y = rng.standard_normal(40)
        v, omega = glm_fit(X, Z, y)
        A = np.hstack([X, Z])
        expected = np.linalg.solve(A.T @ A, A.T @ y)
        full = np.concatenate([v, omega])
        assert np.linalg.norm(full - expected) / np.linalg.norm(expected) < 1e-8

    def test_rank_warning(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((20, 3))
        X = np.hstack([X, X[:, :1]])
        with pytest.warns(RuntimeWarning):
            glm_fit(X, np.empty((20, 0)), rng.standard_normal(20))


class TestExtractBetasAndHrfs:
    def test_fixed_basis_passthrough(self):
        basis = make_fixed_basis(dt=1.0)
        v = np.array([1.5, -0.4, 0.0])
        betas, hrfs, _ = extract_betas_and_hrfs(v, basis)
        np.testing.assert_allclose(betas, v, atol=1e-12)
        assert np.all(hrfs[2].samples == 0)

    def test_rank_one_exact_factorization(self):
        basis = make_3hrf_basis(dt=0.5)
        rng = np.random.default_rng(4)
        h = np.array([1.0, 0.1, -0.05])
        h = h / np.abs(basis.matrix @ h).max()
        beta_true = rng.uniform(0.5, 2.0, size=4)
        v = (beta_true[:, None] * h[None, :]).ravel()
        betas, _, _ = extract_betas_and_hrfs(v, basis)
        np.testing.assert_allclose(betas, beta_true, rtol=1e-12)

    def test_matches_argmax_scan(self):
        basis = make_fir_basis(5)
        rng = np.random.default_rng(5)
        v = rng.standard_normal(15)
        betas, _, _ = extract_betas_and_hrfs(v, basis)
        for j in range(3):
            shape = basis.matrix @ v[j * 5:(j + 1) * 5]
            expected = shape[np.argmax(np.abs(shape))]
            assert betas[j] == pytest.approx(expected, rel=1e-15)


class TestGlmsFit:
    def test_single_condition_equals_glm(self):
        design, drift, basis, y, *_ = rank1_instance(0, n=120, k=1)
        sep = separate_from_design(design)
        slices, rests, omega = glms_fit(sep, drift, y)
        v, omega_glm = glm_fit(design, drift, y)
        np.testing.assert_allclose(slices[0], v, atol=1e-8)
        np.testing.assert_allclose(omega, omega_glm, atol=1e-8)
        np.testing.assert_allclose(rests[0], 0.0, atol=1e-10)

    def test_orthogonal_blocks_match_glm(self):
        # single spaced onset per condition with a short stick basis gives
        # orthogonal condition blocks, so the separate systems decouple
        n = 60
        events = EventTable(np.array([0.0, 20.0, 40.0]), np.arange(3), 3)
        basis = make_fir_basis(4, dt=1.0)
        design = build_design(events, basis, 1.0, n)
        empty = NuisanceMatrix(np.empty((n, 0)))
        rng = np.random.default_rng(6)
        y = rng.standard_normal(n)
        sep = separate_from_design(design)
        slices, _, _ = glms_fit(sep, empty, y)
        v, _ = glm_fit(design, empty, y)
        np.testing.assert_allclose(slices.ravel(), v, atol=1e-8)

    def test_matches_per_condition_pseudoinverse(self):
        design, drift, basis, y, *_ = rank1_instance(7, n=60, k=2, sigma=0.3)
        sep = separate_from_design(design)
        slices, rests, _ = glms_fit(sep, drift, y)
        for i in range(2):
            own, others = sep.pair(i)
            system = np.hstack([own, others, drift.matrix])
            coef = np.linalg.pinv(system, rcond=1e-10) @ y
            np.testing.assert_allclose(slices[i], coef[:basis.size], atol=1e-8)
            np.testing.assert_allclose(rests[i], coef[basis.size:2 * basis.size],
                                       atol=1e-8)


class TestR1Objective:
    def _instance(self, seed, n=50, k=4, d=3, q=2):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, k * d))
        Z = rng.standard_normal((n, q))
        y = rng.standard_normal(n)
        basis_matrix = rng.standard_normal((8, d))
        from r1glm.hrf import BasisSet, SampledHrf
        basis = BasisSet(basis_matrix, "3hrf" if d == 3 else "fir", 1.0,
                         SampledHrf(rng.standard_normal(8), 1.0))
        return X, Z, y, basis

    def test_zero_point(self):
        X, Z, y, basis = self._instance(0)
        z = np.zeros(3 + 4 + 2)
        value, grad = r1_objective_grad(z, X, y, Z, basis, penalty_weight=0.0)
        assert value == pytest.approx(0.5 * y @ y)
        np.testing.assert_allclose(grad[3 + 4:], -(Z.T @ y), atol=1e-12)

    def test_exact_fit_zero_residual(self):
        X, Z, y, basis = self._instance(1)
        rng = np.random.default_rng(2)
        h = rng.standard_normal(3)
        beta = rng.standard_normal(4)
        omega = rng.standard_normal(2)
        y = X @ (beta[:, None] * h[None, :]).ravel() + Z @ omega
        z = np.concatenate([h, beta, omega])
        value, grad = r1_objective_grad(z, X, y, Z, basis, penalty_weight=0.0)
        assert value == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        X, Z, y, basis = self._instance(3)
        rng = np.random.default_rng(4)
        z = rng.standard_normal(3 + 4 + 2)

        def f(zz):
            return r1_objective_grad(zz, X, y, Z, basis, penalty_weight=1.0)

        assert check_gradient(f, z, step=1e-6) < 1e-6

    def test_dimension_mismatch(self):
        X, Z, y, basis = self._instance(5)
        with pytest.raises(ValueError):
            r1_objective_grad(np.zeros(4), X, y, Z, basis)

    def test_kron_factorizations_agree(self):
        # applying the operator as beta-blocks, as (I (x) h), or as
        # (beta (x) I) must give the same predicted signal
        X, Z, y, basis = self._instance(6)
        rng = np.random.default_rng(7)
        h = rng.standard_normal(3)
        beta = rng.standard_normal(4)
        direct = X @ np.kron(beta, h)
        via_h = X @ (np.kron(np.eye(4), h[:, None]) @ beta)
        via_beta = X @ (np.kron(beta[:, None], np.eye(3)) @ h)
        np.testing.assert_allclose(direct, via_h, atol=1e-12)
        np.testing.assert_allclose(direct, via_beta, atol=1e-12)


class TestR1GlmsObjective:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        n, k, d, q = 40, 3, 4, 2
        X = rng.standard_normal((n, k * d))
        Z = rng.standard_normal((n, q))
        y = rng.standard_normal(n)
        from r1glm.hrf import BasisSet, SampledHrf
        basis = BasisSet(rng.standard_normal((6, d)), "fir", 1.0,
                         SampledHrf(rng.standard_normal(6), 1.0))
        z = rng.standard_normal(d + 2 * k + q)

        def f(zz):
            return r1glms_objective_grad(zz, X, y, Z, basis, penalty_weight=1.0)

        assert check_gradient(f, z, step=1e-6) < 1e-6


class TestR1GlmFit:
    @pytest.mark.parametrize("kind", ["3hrf", "fir"])
    def test_noiseless_recovery(self, kind):
        basis = (make_3hrf_basis(dt=1 / 16, duration=24.0) if kind == "3hrf"
                 else make_fir_basis(20, dt=1.0))
        design, drift, basis, y, h_true, beta_true, _ = rank1_instance(
            11, n=200, k=5, basis=basis
        )
        fit = r1glm_fit(design, y, drift, basis,
                        config=SolverConfig(grad_tol=1e-9, max_iter=1000))
        shape_true = basis.matrix @ h_true
        corr = np.corrcoef(fit.hrf.samples, shape_true)[0, 1]
        assert corr > 0.999
        rel = np.linalg.norm(fit.beta - beta_true) / np.linalg.norm(beta_true)
        assert rel < 1e-3

    def test_zero_signal(self):
        design, drift, basis, y, *_ = rank1_instance(12, n=100, k=3)
        fit = r1glm_fit(design, np.zeros_like(y), drift, basis)
        np.testing.assert_array_equal(fit.beta, 0.0)
        assert fit.converged

    def test_objective_not_worse_than_initializer(self):
        design, drift, basis, y, *_ = rank1_instance(13, n=150, k=4, sigma=0.5)
        sep = separate_from_design(design)
        slices, rests, omega0 = glms_fit(sep, drift, y)
        init = glms_initializer(slices, rests, omega0, basis)
        coef0 = (init.beta[:, None] * init.h[None, :]).ravel()
        residual0 = y - design.matrix @ coef0 - drift.matrix @ init.omega
        init_objective = 0.5 * residual0 @ residual0
        fit = r1glm_fit(design, y, drift, basis, init=init)
        assert fit.objective <= init_objective * (1 + 1e-9) + 1e-9

    def test_finalization_invariants(self):
        design, drift, basis, y, *_ = rank1_instance(14, n=150, k=4, sigma=0.4)
        fit = r1glm_fit(design, y, drift, basis)
        assert abs(np.abs(fit.hrf.samples).max() - 1.0) < 1e-10
        assert fit.hrf.samples @ basis.reference.samples > 0

    def test_sign_flip_invariance(self):
        design, drift, basis, y, *_ = rank1_instance(15, n=150, k=4, sigma=0.3)
        sep = separate_from_design(design)
        slices, rests, omega0 = glms_fit(sep, drift, y)
        init = glms_initializer(slices, rests, omega0, basis)
        flipped = glms_initializer(slices, rests, omega0, basis)
        flipped.h = -flipped.h
        flipped.beta = -flipped.beta
        config = SolverConfig(grad_tol=1e-10, max_iter=2000)
        fit_a = r1glm_fit(design, y, drift, basis, config=config, init=init)
        fit_b = r1glm_fit(design, y, drift, basis, config=config, init=flipped)
        np.testing.assert_allclose(fit_a.beta, fit_b.beta, atol=1e-5)
        np.testing.assert_allclose(fit_a.hrf.samples, fit_b.hrf.samples,
                                   atol=1e-5)

    def test_predicted_signal_invariant_to_finalization(self):
        design, drift, basis, y, *_ = rank1_instance(16, n=120, k=3, sigma=0.2)
        fit = r1glm_fit(design, y, drift, basis)
        # reconstruct the model signal from the finalized factors; the
        # rescaling must leave the product unchanged, so refitting the
        # amplitudes against it reproduces them
        coef = (fit.beta[:, None] * fit.h[None, :]).ravel()
        predicted = design.matrix @ coef
        coef2 = ((fit.beta * 2.0)[:, None] * (fit.h / 2.0)[None, :]).ravel()
        np.testing.assert_allclose(design.matrix @ coef2, predicted, atol=1e-12)

    def test_qr_matches_unreduced(self):
        design, drift, basis, y, *_ = rank1_instance(17, n=220, k=4, sigma=0.3)
        config = SolverConfig(grad_tol=1e-10, max_iter=2000)
        fit_qr = r1glm_fit(design, y, drift, basis, config=config, use_qr=True)
        fit_plain = r1glm_fit(design, y, drift, basis, config=config,
                              use_qr=False)
        np.testing.assert_allclose(fit_qr.beta, fit_plain.beta, atol=1e-6)
        np.testing.assert_allclose(fit_qr.hrf.samples, fit_plain.hrf.samples,
                                   atol=1e-6)

    def test_fixed_basis_reproduces_glm(self):
        basis = make_fixed_basis(dt=1 / 16, duration=24.0)
        design, drift, basis, y, *_ = rank1_instance(18, n=150, k=4,
                                                     basis=basis, sigma=0.4)
        fit = r1glm_fit(design, y, drift, basis,
                        config=SolverConfig(grad_tol=1e-10, max_iter=2000))
        v, _ = glm_fit(design, drift, y)
        betas_glm, _, _ = extract_betas_and_hrfs(v, basis)
        rel = np.linalg.norm(fit.beta - betas_glm) / np.linalg.norm(betas_glm)
        assert rel < 1e-6


class TestR1GlmsFit:
    def test_single_condition_matches_r1glm(self):
        design, drift, basis, y, *_ = rank1_instance(20, n=120, k=1, sigma=0.2)
        sep = separate_from_design(design)
        config = SolverConfig(grad_tol=1e-10, max_iter=2000)
        fit_s = r1glms_fit(sep, y, drift, basis, config=config)
        fit = r1glm_fit(design, y, drift, basis, config=config)
        np.testing.assert_allclose(fit_s.beta, fit.beta, atol=1e-5)
        np.testing.assert_allclose(fit_s.hrf.samples, fit.hrf.samples,
                                   atol=1e-4)

    def test_noiseless_recovery_shared_rest(self):
        design, drift, basis, y, h_true, beta_true, _ = rank1_instance(
            21, n=200, k=5, constant_beta=True
        )
        sep = separate_from_design(design)
        fit = r1glms_fit(sep, y, drift, basis,
                         config=SolverConfig(grad_tol=1e-9, max_iter=1000))
        rel = np.linalg.norm(fit.beta - beta_true) / np.linalg.norm(beta_true)
        assert rel < 1e-3
        corr = np.corrcoef(fit.hrf.samples, basis.matrix @ h_true)[0, 1]
        assert corr > 0.999

    def test_zero_signal(self):
        design, drift, basis, y, *_ = rank1_instance(22, n=100, k=3)
        sep = separate_from_design(design)
        fit = r1glms_fit(sep, np.zeros_like(y), drift, basis)
        np.testing.assert_array_equal(fit.beta, 0.0)
        assert fit.converged and fit.r is not None


class TestParametricFit:
    def test_recovers_peak_delay(self):
        n, k = 240, 4
        tr = 1.0
        model = make_two_gamma_model(20, tr)
        events = spaced_events(k, 6, n, tr, seed=30, spacing=8)
        fir = make_fir_basis(20, dt=tr)
        design = build_design(events, fir, tr, n)
        drift = build_drift(n, 1)
        rng = np.random.default_rng(31)
        alpha_true = np.array([6.0, 16.0])
        h_true = model(alpha_true)
        beta_true = rng.uniform(0.8, 1.5, size=k)
        y = design.matrix @ (beta_true[:, None] * h_true[None, :]).ravel()
        fit = r1glm_parametric_fit(model, design, y, drift,
                                   config=SolverConfig(grad_tol=1e-9,
                                                       max_iter=1000))
        assert abs(fit.h[0] - 6.0) < 0.25
        assert abs(np.abs(fit.hrf.samples).max() - 1.0) < 1e-10

    def test_chain_rule_gradient(self):
        rng = np.random.default_rng(32)
        n, k, d = 60, 3, 12
        model = make_two_gamma_model(d, 1.0)
        X = rng.standard_normal((n, k * d))
        Z = rng.standard_normal((n, 2))
        y = rng.standard_normal(n)
        from r1glm.estimators import make_parametric_objective

        objective = make_parametric_objective(X, y, Z, model, k)
        z = np.concatenate([np.array([5.5, 14.0]),
                            rng.standard_normal(k + 2)])
        assert check_gradient(objective, z, step=1e-6) < 1e-4


class TestFitVolume:
    def test_single_voxel_matches_direct_fit(self):
        design, drift, basis, y, *_ = rank1_instance(40, n=120, k=3, sigma=0.3)
        volume = fit_volume(y[:, None], design, drift, basis, "r1glm")
        direct = r1glm_fit(design, y, drift, basis)
        np.testing.assert_array_equal(volume.betas[0], direct.beta)
        np.testing.assert_array_equal(volume.hrfs[0], direct.hrf.samples)

    def test_voxel_permutation_invariance(self):
        design, drift, basis, y, h_true, beta_true, _ = rank1_instance(
            41, n=120, k=3, sigma=0.5
        )
        rng = np.random.default_rng(42)
        Y = np.column_stack([y + 0.1 * rng.standard_normal(y.size)
                             for _ in range(5)])
        perm = np.array([3, 0, 4, 1, 2])
        res = fit_volume(Y, design, drift, basis, "r1glm")
        res_perm = fit_volume(Y[:, perm], design, drift, basis, "r1glm")
        np.testing.assert_array_equal(res_perm.betas, res.betas[perm])

    def test_glm_volume_matches_single(self):
        design, drift, basis, y, *_ = rank1_instance(43, n=120, k=3, sigma=0.5)
        volume = fit_volume(y[:, None], design, drift, basis, "glm")
        v, _ = glm_fit(design, drift, y)
        betas, _, mean_hrf = extract_betas_and_hrfs(v, basis)
        np.testing.assert_array_equal(volume.betas[0], betas)
        np.testing.assert_array_equal(volume.hrfs[0], mean_hrf.samples)

    def test_parallel_matches_serial(self):
        design, drift, basis, y, *_ = rank1_instance(44, n=100, k=3, sigma=0.4)
        rng = np.random.default_rng(45)
        Y = np.column_stack([y + 0.2 * rng.standard_normal(y.size)
                             for _ in range(6)])
        serial = fit_volume(Y, design, drift, basis, "r1glm", jobs=1)
        parallel = fit_volume(Y, design, drift, basis, "r1glm", jobs=3)
        np.testing.assert_array_equal(serial.betas, parallel.betas)
        np.testing.assert_array_equal(serial.hrfs, parallel.hrfs)

    def test_unknown_method_rejected(self):
        design, drift, basis, y, *_ = rank1_instance(46, n=100, k=3)
        with pytest.raises(ValueError):
            fit_volume(y[:, None], design, drift, basis, "nonsense")
