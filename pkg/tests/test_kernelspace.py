import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cobras.balance import cobras_balance, linear_features, pod_basis
from cobras.kernelspace import (KernelSpec, apply_G_inverse, cross_hessian_apply, derivative_gram, eval_kernel,
                                feature_derivative, fit_kpca, grad_kernel, gram, kernel_balance,
                                kernel_balance_from_snapshots, kernel_diagnostics, kpca_features,
                                nonlinear_features)
from cobras.sampling import (GradientSampleSpec, SnapshotMatrix, build_state_matrix, concat_snapshots,
                             leading_selection, sample_gradients_long)

KERNELS = [
    KernelSpec("linear", alpha=0.5),
    KernelSpec("polynomial", alpha=1.0, degree=3.0),
    KernelSpec("polynomial", alpha=2.0, degree=2.5),
    KernelSpec("gaussian", sigma=1.5),
]


def _fd(f, x, v, eps=1e-6):
    return (f(x + eps * v) - f(x - eps * v)) / (2.0 * eps)


@pytest.fixture
def toy_factors(toy, toy_impulses):
    X = build_state_matrix(toy_impulses, leading_selection(toy_impulses, 11))
    Y = concat_snapshots([
        sample_gradients_long(toy, traj, GradientSampleSpec(L=5, s_g=40, seed=i))
        for i, traj in enumerate(toy_impulses)
    ])
    return X, Y


@pytest.fixture
def gaussian_map(rng):
    states = rng.uniform(-1.0, 1.0, size=(4, 12))
    points = rng.uniform(-1.0, 1.0, size=(4, 9))
    grads = rng.standard_normal((4, 9))
    return kernel_balance(KernelSpec("gaussian", sigma=1.2), states, (points, grads), 3)


class TestClosedForms:
    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.degree:g}")
    def test_gradient_matches_finite_differences(self, k, rng):
        for _ in range(100):
            x, y = 0.5 * rng.standard_normal(4), 0.5 * rng.standard_normal(4)
            fd = np.array([_fd(lambda z: eval_kernel(k, z, y), x, v) for v in np.eye(4)])
            assert_allclose(grad_kernel(k, x, y), fd, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.degree:g}")
    def test_cross_hessian_matches_finite_differences(self, k, rng):
        for _ in range(100):
            x, y, v = 0.5 * rng.standard_normal(4), 0.5 * rng.standard_normal(4), rng.standard_normal(4)
            fd = _fd(lambda z: grad_kernel(k, x, z), y, v)
            assert_allclose(cross_hessian_apply(k, x, y, v), fd, rtol=1e-4, atol=1e-8)

    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.degree:g}")
    def test_G_inverse(self, k, rng):
        x, v = rng.standard_normal(4), rng.standard_normal(4)
        assert_allclose(apply_G_inverse(k, x, derivative_gram(k, x) @ v), v, rtol=1e-10, atol=1e-12)

    def test_gaussian_derivative_gram_is_scaled_identity(self, rng):
        k = KernelSpec("gaussian", sigma=2.0)
        assert_allclose(derivative_gram(k, rng.standard_normal(3)), 0.25 * np.eye(3), rtol=1e-14)

    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.degree:g}")
    def test_batched_gram(self, k, rng):
        A, B = 0.5 * rng.standard_normal((3, 4)), 0.5 * rng.standard_normal((2, 4))
        G = gram(k, A, B)
        assert G.shape == (3, 2)
        assert G[2, 1] == pytest.approx(eval_kernel(k, A[2], B[1]), rel=1e-12)

    @pytest.mark.parametrize("k", [
        KernelSpec("linear", alpha=0.5),
        KernelSpec("polynomial", alpha=1.0, degree=3.0),
        KernelSpec("gaussian", sigma=1.5),
    ], ids=lambda k: k.family)
    def test_symmetric_and_positive_semidefinite(self, k, rng):
        points = rng.standard_normal((10, 4))
        for x, y in zip(points[:5], points[5:]):
            assert eval_kernel(k, x, y) == pytest.approx(eval_kernel(k, y, x), rel=1e-14)
        G = gram(k, points, points)
        assert_allclose(G, G.T, rtol=1e-12, atol=1e-12)
        assert np.linalg.eigvalsh(0.5 * (G + G.T)).min() >= -1e-10

    @pytest.mark.parametrize("kwargs", [
        {"family": "laplacian"},
        {"family": "linear", "alpha": -1.0},
        {"family": "polynomial", "alpha": 0.0, "degree": 2.0},
        {"family": "polynomial", "alpha": 1.0, "degree": 1.0},
        {"family": "gaussian", "sigma": 0.0},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            KernelSpec(**kwargs)


class TestKernelBalance:
    def test_linear_kernel_reproduces_cobras(self, toy_factors, rng):
        X, Y = toy_factors
        proj = cobras_balance(X, Y, 2)
        fm = kernel_balance_from_snapshots(KernelSpec("linear"), X, Y, 2)
        assert_allclose(fm.sigma_r, proj.sigma, rtol=1e-8)
        states = rng.uniform(0.0, 1.0, size=(3, 5))
        assert_allclose(nonlinear_features(fm, states), linear_features(proj, states), rtol=1e-8, atol=1e-10)

    def test_gaussian_matches_an_explicit_fourier_lift(self, rng):
        n, s_x, s_g, D = 2, 10, 6, 100_000
        k = KernelSpec("gaussian", sigma=1.0)
        states = rng.uniform(-1.0, 1.0, size=(n, s_x))
        points = rng.uniform(-1.0, 1.0, size=(n, s_g))
        grads = rng.standard_normal((n, s_g))
        fm = kernel_balance(k, states, (points, grads), s_g)

        # random Fourier features of the same kernel, shifted so the origin maps to zero
        omega = rng.standard_normal((D, n)) / k.sigma
        phase = rng.uniform(0.0, 2.0 * np.pi, size=D)

        def lift(x):
            return np.sqrt(2.0 / D) * (np.cos(omega @ x + phase[:, None]) - np.cos(phase)[:, None])

        lifted_grads = []
        for p, g in zip(points.T, grads.T):
            J = -np.sqrt(2.0 / D) * np.sin(omega @ p + phase)[:, None] * omega
            lifted_grads.append(J @ np.linalg.solve(J.T @ J, g))
        X = SnapshotMatrix(data=lift(states) / np.sqrt(s_x), kind="state", samples=s_x)
        Y = SnapshotMatrix(data=np.column_stack(lifted_grads) / np.sqrt(s_g), kind="gradient", samples=s_g)

        M_kernel = (fm.U_r * fm.sigma_r) @ fm.V_r.T
        assert np.linalg.norm(Y.data.T @ X.data - M_kernel) <= 3e-2 * np.linalg.norm(M_kernel)
        proj = cobras_balance(X, Y, 2)
        assert_allclose(proj.sigma, fm.sigma_r[:2], rtol=0, atol=3e-2 * fm.sigma_r[0])

        x = rng.uniform(-1.0, 1.0, size=(n, 5))
        explicit = fm.U_r @ fm.U_r.T @ (Y.data.T @ lift(x))
        implicit = fm.U_r @ (np.sqrt(fm.sigma_r)[:, None] * nonlinear_features(fm, x))
        assert np.linalg.norm(explicit - implicit) <= 3e-2 * np.linalg.norm(implicit)

    def test_pairs_may_be_a_list(self, rng):
        states = rng.standard_normal((3, 6))
        points, grads = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        k = KernelSpec("polynomial", alpha=1.0, degree=2.0)
        a = kernel_balance(k, states, (points, grads), 2)
        b = kernel_balance(k, states, list(zip(points.T, grads.T)), 2)
        assert_allclose(a.sigma_r, b.sigma_r)

    def test_training_features_shortcut(self, gaussian_map):
        assert_allclose(gaussian_map.training_features(), nonlinear_features(gaussian_map, gaussian_map.state_samples),
                        rtol=1e-9, atol=1e-12)

    def test_origin_maps_to_zero(self, gaussian_map):
        assert_allclose(gaussian_map.features(np.zeros(4)), 0.0, atol=1e-14)

    def test_single_state_and_columns_agree(self, gaussian_map, rng):
        X = rng.standard_normal((4, 3))
        assert_allclose(gaussian_map.features(X)[:, 2], gaussian_map.features(X[:, 2]))

    @pytest.mark.parametrize("k", KERNELS, ids=lambda k: f"{k.family}-{k.degree:g}")
    def test_feature_derivative_matches_finite_differences(self, k, rng):
        states = 0.5 * rng.standard_normal((4, 10))
        fm = kernel_balance(k, states, (0.5 * rng.standard_normal((4, 8)), rng.standard_normal((4, 8))), 3)
        x, v = 0.5 * rng.standard_normal(4), rng.standard_normal(4)
        assert_allclose(feature_derivative(fm, x, v), _fd(fm.features, x, v), rtol=1e-6, atol=1e-9)

    def test_snapshots_need_base_states(self, rng):
        X = SnapshotMatrix(data=rng.standard_normal((3, 4)), kind="state", samples=4)
        Y = SnapshotMatrix(data=rng.standard_normal((3, 4)), kind="gradient", samples=4)
        with pytest.raises(ValueError):
            kernel_balance_from_snapshots(KernelSpec("linear"), X, Y, 1)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            kernel_balance(KernelSpec("linear"), rng.standard_normal((3, 4)),
                           (rng.standard_normal((2, 4)), rng.standard_normal((2, 4))), 1)


class TestDiagnostics:
    def test_clean_report(self, rng, caplog):
        samples = rng.standard_normal((3, 10))
        with caplog.at_level(logging.WARNING, logger="cobras.kernelspace"):
            report = kernel_diagnostics(KernelSpec("gaussian", sigma=1.0), samples, rng)
        assert report["min_injectivity_gap"] > 0
        assert report["max_G_condition"] == pytest.approx(1.0)
        assert caplog.text == ""

    def test_conditioning_warning(self, rng, caplog):
        samples = 10.0 * rng.standard_normal((3, 5))
        with caplog.at_level(logging.WARNING, logger="cobras.kernelspace"):
            report = kernel_diagnostics(KernelSpec("polynomial", alpha=1.0, degree=3.0), samples, rng,
                                        max_condition=1.5)
        assert report["max_G_condition"] > 1.5
        assert "badly conditioned" in caplog.text

    def test_single_sample(self, rng):
        report = kernel_diagnostics(KernelSpec("linear"), np.ones((2, 1)), rng)
        assert report["min_injectivity_gap"] is None
        assert report["max_G_condition"] == pytest.approx(1.0)


class TestKpca:
    def test_linear_kernel_matches_pod(self, rng):
        raw = rng.standard_normal((5, 30)) * np.array([4.0, 2.0, 1.0, 0.5, 0.2])[:, None]
        fm = fit_kpca(KernelSpec("linear"), raw, 3)
        basis = pod_basis(SnapshotMatrix(data=raw / np.sqrt(30), kind="state", samples=30), 3)
        x = rng.standard_normal((5, 4))
        assert_allclose(np.abs(fm.features(x)), np.abs(basis.modes.T @ x), rtol=1e-8, atol=1e-10)
        assert_allclose(fm.eigenvalues, basis.singular_values ** 2, rtol=1e-10)

    def test_training_feature_covariance_is_diagonal(self, rng):
        raw = rng.uniform(-1.0, 1.0, size=(3, 25))
        fm = fit_kpca(KernelSpec("gaussian", sigma=1.0), raw, 4)
        z = fm.features(raw)
        assert_allclose(z @ z.T / raw.shape[1], np.diag(fm.eigenvalues), rtol=1e-8, atol=1e-10 * fm.eigenvalues[0])

    def test_one_shot_helper(self, rng):
        raw = rng.standard_normal((3, 8))
        k = KernelSpec("polynomial", alpha=1.0, degree=2.0)
        x = rng.standard_normal(3)
        assert_allclose(kpca_features(k, raw, 2, x), fit_kpca(k, raw, 2).features(x))

    def test_rank_truncation(self, rng, caplog):
        raw = np.outer(rng.standard_normal(3), rng.standard_normal(6))
        with caplog.at_level(logging.WARNING, logger="cobras.kernelspace"):
            fm = fit_kpca(KernelSpec("linear"), raw, 3)
        assert fm.r == 1
        assert "truncating" in caplog.text

    def test_invalid_r(self, rng):
        with pytest.raises(ValueError):
            fit_kpca(KernelSpec("linear"), rng.standard_normal((3, 4)), 5)
