import numpy as np
import pytest
from numpy.testing import assert_allclose

from cobras.balance import BalancedProjection, PodBasis, cobras_balance, pod_basis
from cobras.errors import RankDeficiencyError
from cobras.fom import Trajectory, linearize, lti_system, simulate, toy_impulse_state
from cobras.kernelspace import KernelSpec, kernel_balance_from_snapshots
from cobras.rom import (KrrGrid, LinearFeatureMap, build_galerkin_rom, cross_validate_krr, fit_krr,
                        learn_feature_rom, linear_coordinates, normalized_error, simulate_many, simulate_rom,
                        simulate_rom_many)
from cobras.sampling import (GradientSampleSpec, SnapshotMatrix, adjoint_gradient_sequence, build_state_matrix,
                             concat_snapshots, sample_gradients_long)


def _smooth_data(rng, count=60):
    Z = rng.uniform(-1.0, 1.0, size=(2, count))
    return Z, np.vstack([np.sin(2.0 * Z[0]) + Z[1] ** 2, np.cos(Z[0] * Z[1])])


@pytest.fixture
def lti_trajectories(small_lti, rng):
    sys = small_lti[0]
    return [simulate(sys, rng.standard_normal(3), rng.standard_normal((1, 25)), label=f"train-{i}")
            for i in range(4)]


class TestGalerkin:
    def test_lti_rom_is_the_projected_system(self, small_lti, rng):
        sys, A, B, C = small_lti
        X = SnapshotMatrix(data=rng.standard_normal((3, 6)), kind="state", samples=6)
        Y = SnapshotMatrix(data=rng.standard_normal((3, 6)), kind="gradient", samples=6)
        proj = cobras_balance(X, Y, 2)
        rom = build_galerkin_rom(proj, sys)
        u = rng.standard_normal((1, 12))
        x0 = rng.standard_normal(3)
        result = simulate_rom(rom, u, x0=x0)

        Ar, Br, Cr = proj.psi.T @ A @ proj.phi, proj.psi.T @ B, C @ proj.phi
        z = proj.psi.T @ x0
        for k in range(13):
            assert_allclose(result.reduced_states[:, k], z, rtol=1e-10, atol=1e-12)
            assert_allclose(result.outputs[:, k], Cr @ z, rtol=1e-10, atol=1e-12)
            if k < 12:
                z = Ar @ z + Br @ u[:, k]
        assert not result.diverged

    def test_full_pod_basis_reproduces_the_toy(self, toy, toy_ode, toy_impulses):
        basis = pod_basis(build_state_matrix(toy_impulses), 3)
        rom = build_galerkin_rom(basis, toy_ode)
        x0 = toy_impulse_state(0.8)
        u = 0.1 * np.sin(np.arange(20.0)).reshape(1, 20)
        truth = simulate(toy, x0, u)
        result = simulate_rom(rom, u, x0=x0)
        assert_allclose(result.states, truth.states, rtol=1e-9, atol=1e-12)
        assert_allclose(result.outputs, truth.outputs(toy), rtol=1e-9, atol=1e-12)
        assert rom.method == "pod"

    def test_blow_up_is_recorded(self):
        sys = lti_system(np.array([[3.0]]), np.zeros((1, 1)), np.ones((1, 1)))
        rom = build_galerkin_rom(PodBasis(modes=np.ones((1, 1)), singular_values=np.ones(1)), sys)
        result = simulate_rom(rom, np.zeros((1, 20)), x0=np.ones(1))
        assert result.blowup_step == 13
        assert np.all(np.isfinite(result.states[:, :13]))
        assert np.all(np.isnan(result.states[:, 13:]))

    def test_non_biorthogonal_pair_is_corrected(self, small_lti, rng):
        sys = small_lti[0]
        phi = np.linalg.qr(rng.standard_normal((3, 2)))[0]
        rom = build_galerkin_rom(BalancedProjection(phi=phi, psi=2.0 * phi, sigma=np.ones(2)), sys)
        assert_allclose(rom.psi.T @ rom.phi, np.eye(2), atol=1e-12)

    def test_singular_pair(self, small_lti):
        phi = np.array([[1.0], [0.0], [0.0]])
        psi = np.array([[0.0], [1.0], [0.0]])
        with pytest.raises(RankDeficiencyError):
            build_galerkin_rom(BalancedProjection(phi=phi, psi=psi, sigma=np.ones(1)), small_lti[0])

    def test_dimension_mismatch(self, toy_ode):
        with pytest.raises(ValueError):
            build_galerkin_rom(PodBasis(modes=np.eye(4)[:, :2], singular_values=np.ones(2)), toy_ode)

    def test_needs_exactly_one_initial_condition(self, small_lti):
        rom = build_galerkin_rom(PodBasis(modes=np.eye(3), singular_values=np.ones(3)), small_lti[0])
        with pytest.raises(ValueError):
            simulate_rom_many(rom, np.zeros((1, 3)))
        with pytest.raises(ValueError):
            simulate_rom_many(rom, np.zeros((1, 3)), x0s=np.ones((3, 1)), z0s=np.ones((3, 1)))


class TestBatchSimulation:
    def test_columns_match_single_runs(self, toy, rng):
        x0s = rng.uniform(0.0, 1.0, size=(3, 4))
        inputs = rng.uniform(-0.2, 0.2, size=(4, 1, 8))
        states, blowup = simulate_many(toy, x0s, inputs)
        assert blowup == [None] * 4
        for j in range(4):
            assert_allclose(states[j], simulate(toy, x0s[:, j], inputs[j]).states, rtol=1e-12)

    def test_per_column_inputs_must_match(self, toy):
        with pytest.raises(ValueError):
            simulate_many(toy, np.ones((3, 2)), np.zeros((3, 1, 5)))


class TestKernelRidge:
    def test_predictions_have_column_layout(self, rng):
        Z, targets = _smooth_data(rng)
        model = fit_krr(Z, targets, rbf_gamma=0.5, ridge_alpha=1e-6)
        assert model.predict(Z[:, :5]).shape == (2, 5)
        assert model.predict(Z[:, 0]).shape == (2, 1)

    def test_training_error_grows_with_regularization(self, rng):
        Z, targets = _smooth_data(rng)
        errors = [np.mean((fit_krr(Z, targets, 0.5, alpha).predict(Z) - targets) ** 2)
                  for alpha in (1e-8, 1e-4, 1e-2, 1.0)]
        assert errors == sorted(errors)

    def test_single_grid_point(self, rng):
        Z, targets = _smooth_data(rng)
        alpha, gamma, scores = cross_validate_krr(Z, targets, [1e-3], [0.5])
        assert (alpha, gamma) == (1e-3, 0.5)
        assert list(scores) == [(1e-3, 0.5)]

    def test_light_regularization_wins_on_clean_data(self, rng):
        Z, targets = _smooth_data(rng)
        alpha, gamma, _ = cross_validate_krr(Z, targets, [1e-8, 1.0], [0.5])
        assert alpha == 1e-8

    def test_ties_go_to_the_largest_parameters(self, rng):
        Z = rng.standard_normal((2, 12))
        alpha, gamma, scores = cross_validate_krr(Z, np.zeros((1, 12)), [1e-4, 1e-2], [0.1, 1.0], folds=3)
        assert set(scores.values()) == {0.0}
        assert (alpha, gamma) == (1e-2, 1.0)

    def test_leave_one_out(self, rng):
        Z, targets = _smooth_data(rng, count=10)
        alpha, gamma, _ = cross_validate_krr(Z, targets, [1e-6, 1e-3], [0.5], folds=10)
        assert alpha in (1e-6, 1e-3)

    def test_group_folds_are_deterministic(self, rng):
        Z, targets = _smooth_data(rng)
        groups = np.repeat(np.arange(6), 10)
        a = cross_validate_krr(Z, targets, [1e-6, 1e-3], [0.1, 1.0], folds=3, seed=2, groups=groups)
        b = cross_validate_krr(Z, targets, [1e-6, 1e-3], [0.1, 1.0], folds=3, seed=2, groups=groups)
        assert a == b

    def test_too_few_samples_for_the_folds(self, rng):
        Z, targets = _smooth_data(rng, count=4)
        with pytest.raises(ValueError):
            cross_validate_krr(Z, targets, [1e-3], [0.5], folds=5)

    def test_invalid_training_data(self, rng):
        Z, targets = _smooth_data(rng, count=6)
        with pytest.raises(ValueError):
            fit_krr(Z, targets[:, :5], 0.5, 1e-3)
        Z[0, 0] = np.nan
        with pytest.raises(ValueError):
            fit_krr(Z, targets, 0.5, 1e-3)
        with pytest.raises(ValueError):
            fit_krr(np.ones((1, 3)), np.ones((1, 3)), 0.0, 1e-3)


class TestLearnedRom:
    def test_identity_features_learn_linear_dynamics(self, small_lti, lti_trajectories):
        identity = LinearFeatureMap(phi=np.eye(3), psi=np.eye(3), method="identity")
        rom = learn_feature_rom(identity, lti_trajectories, identity,
                                KrrGrid(alpha_grid=(1e-10,), gamma_grid=(0.1,), folds=4), base=small_lti[0])
        traj = lti_trajectories[0]
        one_step = rom.dynamics.predict(np.vstack([traj.states[:, :-1], traj.inputs]))
        assert np.linalg.norm(one_step - traj.states[:, 1:]) < 1e-3 * np.linalg.norm(traj.states[:, 1:])
        assert_allclose(rom.reconstruct(traj.states), traj.states, rtol=0, atol=1e-3 * np.abs(traj.states).max())
        assert rom.meta["dynamics"] == {"alpha": 1e-10, "gamma": 0.1, "cv_mse": rom.meta["dynamics"]["cv_mse"]}

    def test_rollout_follows_a_training_trajectory(self, small_lti, lti_trajectories):
        identity = LinearFeatureMap(phi=np.eye(3), psi=np.eye(3), method="identity")
        rom = learn_feature_rom(identity, lti_trajectories, identity,
                                KrrGrid(alpha_grid=(1e-10,), gamma_grid=(0.1,), folds=4), base=small_lti[0])
        traj = lti_trajectories[1]
        result = simulate_rom(rom, traj.inputs[:, :6], x0=traj.states[:, 0])
        assert not result.diverged
        error = normalized_error(result.states, traj.states[:, :7], kind="state")
        assert np.max(error) < 5e-2

    def test_toy_kernel_features_end_to_end(self, toy, toy_impulses):
        X = build_state_matrix(toy_impulses)
        Y = concat_snapshots([sample_gradients_long(toy, t, GradientSampleSpec(L=4, s_g=30, seed=i))
                              for i, t in enumerate(toy_impulses)])
        fm = kernel_balance_from_snapshots(KernelSpec("gaussian", sigma=2.0), X, Y, 2)
        basis = linear_coordinates(pod_basis(X, 3), 3)
        grid = KrrGrid(alpha_grid=(1e-6, 1e-3), gamma_grid=(0.1, 1.0), folds=3)
        rom = learn_feature_rom(fm, toy_impulses, basis, grid, base=toy, method="kcobras")
        assert (rom.r, rom.R) == (2, 3)
        assert rom.meta["dt"] == 0.5
        result = simulate_rom(rom, np.zeros((1, 10)), x0=toy_impulse_state(0.75))
        assert result.reduced_states.shape == (2, 11)
        assert result.states.shape == (3, 11)
        assert result.outputs.shape == (1, 11)
        assert np.all(np.isfinite(result.outputs))

    def test_reduced_system_has_no_adjoint(self, small_lti, lti_trajectories):
        identity = LinearFeatureMap(phi=np.eye(3), psi=np.eye(3), method="identity")
        rom = learn_feature_rom(identity, lti_trajectories, identity,
                                KrrGrid(alpha_grid=(1e-10,), gamma_grid=(0.1,), folds=4), base=small_lti[0])
        reduced = rom.reduced
        assert reduced.adjoint_step is None and reduced.adjoint_output is None
        with pytest.raises(ValueError, match="no adjoint"):
            linearize(reduced)
        with pytest.raises(ValueError, match="no adjoint"):
            adjoint_gradient_sequence(reduced, lti_trajectories[0], 5, np.ones(3), 2)

    def test_sampling_intervals_must_agree(self, lti_trajectories):
        other = Trajectory(states=lti_trajectories[0].states, inputs=lti_trajectories[0].inputs, dt=0.5)
        identity = LinearFeatureMap(phi=np.eye(3), psi=np.eye(3))
        with pytest.raises(ValueError):
            learn_feature_rom(identity, [lti_trajectories[1], other], identity)

    def test_linear_basis_below_feature_dimension(self, lti_trajectories):
        with pytest.raises(ValueError):
            learn_feature_rom(LinearFeatureMap(phi=np.eye(3), psi=np.eye(3)), lti_trajectories,
                              LinearFeatureMap(phi=np.eye(3)[:, :2], psi=np.eye(3)[:, :2]))

    def test_linear_coordinates_range(self, toy_impulses):
        basis = pod_basis(build_state_matrix(toy_impulses), 2)
        assert linear_coordinates(basis, 1).method == "pod"
        with pytest.raises(ValueError):
            linear_coordinates(basis, 3)


class TestNormalizedError:
    def test_values(self):
        assert_allclose(normalized_error([[1.0, 3.0]], [[1.0, 1.0]]), [0.0, 4.0])

    def test_test_set_average(self):
        true = np.ones((2, 1, 3))
        true[1] *= 3.0
        predicted = true.copy()
        predicted[0, 0, 2] = 2.0
        error = normalized_error(predicted, true)
        assert error.shape == (2, 3)
        assert error[0, 2] == pytest.approx(1.0 / 5.0)

    def test_nan_propagates(self):
        error = normalized_error([[1.0, np.nan]], [[1.0, 1.0]])
        assert error[0] == 0.0 and np.isnan(error[1])

    def test_invalid(self):
        with pytest.raises(ValueError):
            normalized_error([[1.0]], [[0.0]])
        with pytest.raises(ValueError):
            normalized_error([[1.0, 2.0]], [[1.0]])
        with pytest.raises(ValueError):
            normalized_error([[1.0]], [[1.0]], kind="energy")
