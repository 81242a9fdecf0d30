import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg

from cobras.errors import NumericalBlowUp
from cobras.fom import (OdeSystem, Trajectory, as_inputs, chain_impulse_state, linear_ode_system, linearize,
                        lti_system, nonnormal_chain, rk4_adjoint_step, rk4_step, simulate, toy_impulse_state,
                        toy_output, toy_vector_field)
from cobras.sampling import adjoint_gradient_sequence


def _fd_gradient(sys, x0, eta, tau, eps=1e-6):
    """Central differences of eta . y(tau) with respect to x(0) along a zero input."""
    def functional(x):
        traj = simulate(sys, x, np.zeros((sys.q0, tau)))
        return float(eta @ sys.output(traj.states[:, -1], np.zeros(sys.q0)))

    grad = np.empty(sys.n)
    for i in range(sys.n):
        e = np.zeros(sys.n)
        e[i] = eps
        grad[i] = (functional(x0 + e) - functional(x0 - e)) / (2.0 * eps)
    return grad


class TestToyModel:
    def test_vector_field_values(self):
        assert_allclose(toy_vector_field(np.zeros(3), 0.0), [0.0, 0.0, 0.0])
        assert_allclose(toy_vector_field(np.ones(3), 0.0), [19.0, 18.0, -5.0])
        assert_allclose(toy_vector_field(np.zeros(3), np.array([2.0])), [2.0, 2.0, 2.0])

    def test_output_is_the_state_sum(self):
        assert_allclose(toy_output(np.ones(3), 0.0), [3.0])
        assert_allclose(toy_output(np.zeros(3), 0.0), [0.0])

    def test_impulse_state(self):
        assert_allclose(toy_impulse_state(0.3), [0.3, 0.3, 0.3])


class TestRk4Step:
    def test_zero_field_leaves_the_state(self):
        ode = linear_ode_system(np.zeros((2, 2)), np.zeros((2, 1)), np.eye(2))
        assert_allclose(rk4_step(ode, np.array([1.5, -2.0]), np.zeros(1)), [1.5, -2.0])

    def test_adjoint_is_linear(self, toy_ode, rng):
        x, u = rng.uniform(0.0, 1.0, size=3), rng.uniform(-1.0, 1.0, size=1)
        v, w = rng.standard_normal(3), rng.standard_normal(3)
        combined = rk4_adjoint_step(toy_ode, x, u, 2.0 * v - 3.0 * w)
        separate = 2.0 * rk4_adjoint_step(toy_ode, x, u, v) - 3.0 * rk4_adjoint_step(toy_ode, x, u, w)
        assert_allclose(combined, separate, rtol=1e-12, atol=1e-12 * np.abs(separate).max())
        assert_allclose(rk4_adjoint_step(toy_ode, x, u, np.zeros(3)), 0.0)

    def test_adjoint_of_a_linear_field_is_the_transposed_transition(self, rng):
        A = 0.5 * rng.standard_normal((3, 3)) - np.eye(3)
        ode = linear_ode_system(A, np.zeros((3, 1)), np.eye(3), dt=0.5, substeps=10)
        Phi = np.column_stack([rk4_step(ode, e, np.zeros(1)) for e in np.eye(3)])
        v = rng.standard_normal(3)
        assert_allclose(rk4_adjoint_step(ode, np.zeros(3), np.zeros(1), v), Phi.T @ v, rtol=1e-12, atol=1e-13)


class TestRk4Discretization:
    def test_free_response_matches_matrix_exponential(self, rng):
        A = 0.5 * rng.standard_normal((4, 4)) - np.eye(4)
        sys = linear_ode_system(A, rng.standard_normal((4, 1)), np.eye(4), dt=0.5, substeps=50).discretize()
        x0 = rng.standard_normal(4)
        assert_allclose(sys.step(x0, np.zeros(1)), linalg.expm(0.5 * A) @ x0, rtol=1e-7, atol=1e-10)

    def test_held_input_matches_augmented_exponential(self, rng):
        A = 0.5 * rng.standard_normal((3, 3)) - np.eye(3)
        B = rng.standard_normal((3, 2))
        sys = linear_ode_system(A, B, np.eye(3), dt=0.5, substeps=50).discretize()
        augmented = np.zeros((5, 5))
        augmented[:3, :3], augmented[:3, 3:] = A, B
        E = linalg.expm(0.5 * augmented)
        x0, u = rng.standard_normal(3), rng.standard_normal(2)
        assert_allclose(sys.step(x0, u), E[:3, :3] @ x0 + E[:3, 3:] @ u, rtol=1e-7, atol=1e-10)

    def test_scalar_decay(self):
        sys = linear_ode_system([[-5.0]], [[0.0]], [[1.0]], dt=0.5, substeps=50).discretize()
        assert sys.step(np.ones(1), np.zeros(1))[0] == pytest.approx(np.exp(-2.5), rel=1e-6)

    def test_fourth_order_convergence(self, rng):
        A = rng.standard_normal((3, 3))
        A /= np.linalg.norm(A, 2)
        x0 = rng.standard_normal(3)
        exact = linalg.expm(0.5 * A) @ x0
        errors = [
            np.linalg.norm(linear_ode_system(A, np.zeros((3, 1)), np.eye(3), dt=0.5, substeps=m)
                           .discretize().step(x0, np.zeros(1)) - exact)
            for m in (5, 10)
        ]
        assert 12.0 <= errors[0] / errors[1] <= 20.0

    def test_origin_is_an_equilibrium_of_the_toy(self, toy):
        traj = simulate(toy, np.zeros(3), np.zeros((1, 20)))
        assert np.all(traj.states == 0.0)

    def test_batched_step_matches_columns(self, toy, rng):
        X = rng.uniform(0.0, 1.0, size=(3, 4))
        batched = toy.step(X, np.zeros(1))
        for j in range(4):
            assert_allclose(batched[:, j], toy.step(X[:, j], np.zeros(1)), rtol=1e-14)

    def test_substeps_must_be_positive(self):
        with pytest.raises(ValueError):
            OdeSystem(n=1, q0=1, m0=1, vector_field=None, jacobian_product=None, output=None,
                      adjoint_output=None, substeps=0)


class TestAdjointExactness:
    def test_toy_gradients_match_finite_differences(self, toy, rng):
        for _ in range(100):
            x0 = rng.uniform(0.0, 1.0, size=3)
            eta = rng.standard_normal(1)
            tau = int(rng.integers(0, 6))
            traj = simulate(toy, x0, np.zeros((1, tau)))
            g = adjoint_gradient_sequence(toy, traj, tau, eta, tau)[tau]
            fd = _fd_gradient(toy, x0, eta, tau)
            assert np.linalg.norm(g - fd) < 1e-5 * np.linalg.norm(fd)

    @pytest.mark.parametrize("n, q0, m0", [(4, 1, 2), (6, 2, 3)])
    def test_lti_gradients_match_matrix_powers_and_differences(self, rng, stable_matrix, n, q0, m0):
        A = stable_matrix(rng, n)
        C = rng.standard_normal((m0, n))
        sys = lti_system(A, rng.standard_normal((n, q0)), C)
        for _ in range(100):
            x0 = rng.standard_normal(n)
            eta = rng.standard_normal(m0)
            tau = int(rng.integers(0, 8))
            traj = simulate(sys, x0, np.zeros((q0, tau)))
            g = adjoint_gradient_sequence(sys, traj, tau, eta, tau)[tau]
            assert_allclose(g, np.linalg.matrix_power(A.T, tau) @ C.T @ eta, rtol=1e-10, atol=1e-12)
            fd = _fd_gradient(sys, x0, eta, tau)
            assert np.linalg.norm(g - fd) < 1e-5 * max(np.linalg.norm(fd), 1e-12)

    def test_toy_step_adjoint_pairs_with_directional_differences(self, toy, rng):
        eps = 1e-6
        for _ in range(20):
            x, u = rng.uniform(0.0, 1.0, size=3), rng.uniform(-1.0, 1.0, size=1)
            v, w = rng.standard_normal(3), rng.standard_normal(3)
            fd = v @ (toy.step(x + eps * w, u) - toy.step(x - eps * w, u)) / (2.0 * eps)
            assert w @ toy.adjoint_step(x, u, v) == pytest.approx(fd, rel=1e-5)

    def test_cubic_chain_adjoint_matches_finite_differences(self, rng):
        sys = nonnormal_chain(n=8, epsilon=0.1, dt=0.5, substeps=5).discretize()
        x0 = 0.5 * rng.standard_normal(8)
        u = np.array([0.3])
        v = rng.standard_normal(8)
        eps = 1e-6
        fd = np.array([
            v @ (sys.step(x0 + eps * e, u) - sys.step(x0 - eps * e, u)) / (2.0 * eps) for e in np.eye(8)
        ])
        assert_allclose(sys.adjoint_step(x0, u, v), fd, rtol=1e-6, atol=1e-9)


class TestSimulate:
    def test_shapes_and_times(self, toy):
        traj = simulate(toy, toy_impulse_state(1.0), np.zeros((1, 10)), t0=2, label="impulse")
        assert traj.states.shape == (3, 11)
        assert traj.T == 10
        assert_allclose(traj.times, 0.5 * np.arange(2, 13))
        assert traj.outputs(toy).shape == (1, 11)

    def test_no_steps_gives_a_single_state(self, toy):
        traj = simulate(toy, toy_impulse_state(1.0), np.zeros((1, 0)))
        assert traj.states.shape == (3, 1)
        assert_allclose(traj.states[:, 0], 1.0)

    def test_blow_up_reports_the_step(self):
        sys = lti_system(np.array([[1e200]]), np.zeros((1, 1)), np.ones((1, 1)))
        with np.errstate(over="ignore"), pytest.raises(NumericalBlowUp) as info:
            simulate(sys, np.array([1e200]), np.zeros((1, 3)))
        assert info.value.step == 0

    def test_one_dimensional_inputs_need_a_single_channel(self):
        assert as_inputs([1.0, 2.0], 1).shape == (1, 2)
        with pytest.raises(ValueError):
            as_inputs([1.0, 2.0], 2)


class TestTrajectory:
    def test_window_keeps_absolute_time(self, toy):
        traj = simulate(toy, toy_impulse_state(0.5), 0.1 * np.arange(5.0).reshape(1, 5))
        sub = traj.window(2, 3)
        assert sub.t0 == 2
        assert_allclose(sub.states, traj.states[:, 2:5])
        assert_allclose(sub.inputs, traj.inputs[:, 2:4])

    def test_final_sample_has_zero_input(self, toy):
        traj = simulate(toy, toy_impulse_state(0.5), np.ones((1, 4)))
        assert_allclose(traj.input_at(4), [0.0])
        assert_allclose(traj.input_at(3), [1.0])

    def test_window_outside_raises(self):
        traj = Trajectory(states=np.zeros((2, 4)), inputs=np.zeros((1, 3)))
        with pytest.raises(ValueError):
            traj.window(2, 3)


class TestLinearize:
    def test_lti_is_reproduced(self, small_lti, rng):
        sys, A, B, C = small_lti
        lin = linearize(sys)
        for _ in range(5):
            x, u = rng.standard_normal(3), rng.standard_normal(1)
            assert_allclose(lin.step(x, u), A @ x + B @ u, rtol=1e-7, atol=1e-9)
            assert_allclose(lin.output(x, u), C @ x, rtol=1e-12)

    def test_toy_about_the_origin(self, toy):
        lin = linearize(toy)
        expected = linalg.expm(0.5 * np.diag([-1.0, -2.0, -5.0]))
        for i, e in enumerate(np.eye(3)):
            assert_allclose(lin.step(e, np.zeros(1)), expected[:, i], atol=1e-6)


class TestNonnormalChain:
    def test_transient_growth_of_a_stable_chain(self):
        lin = linearize(nonnormal_chain(n=20).discretize())
        A = np.column_stack([lin.step(e, np.zeros(1)) for e in np.eye(20)])
        norms = [np.linalg.norm(np.linalg.matrix_power(A, k), 2) for k in (4, 8, 16)]
        assert max(norms) > 1.0
        assert np.linalg.norm(np.linalg.matrix_power(A, 200), 2) < 1e-6

    def test_input_enters_upstream(self):
        assert_allclose(chain_impulse_state(5, 2.0), [2.0, 0.0, 0.0, 0.0, 0.0])
        sys = nonnormal_chain(n=5).discretize()
        x1 = sys.step(np.zeros(5), np.ones(1))
        assert x1[0] > 0
        assert abs(x1[-1]) < 1e-3

    def test_needs_two_states(self):
        with pytest.raises(ValueError):
            nonnormal_chain(n=1)
