import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from pod2c.dynamics import (LinearSystemSpec, NoiseSpec, cartpole_energy, make_builtin,
                            Trajectory, noise_streams, rollout)

finite = st.floats(-2.0, 2.0, allow_nan=False)


def test_builtin_dimensions():
    cp = make_builtin("cartpole")
    assert (cp.n_x, cp.n_u, cp.n_z) == (4, 1, 2)
    di = make_builtin("double-integrator", {"dt": 0.1})
    assert (di.n_x, di.n_u, di.n_z) == (2, 1, 1)
    pend = make_builtin("pendulum")
    assert (pend.n_x, pend.n_u) == (2, 1)
    sw = make_builtin("nlink-swimmer", {"n_links": 4})
    assert sw.n_u == 3 and sw.n_x == 6


def test_unknown_system_rejected():
    with pytest.raises(ValueError, match="unknown system"):
        make_builtin("acrobot")


@pytest.mark.parametrize("name,key", [("cartpole", "pole_mass"), ("cartpole", "half_length"),
                                      ("cartpole", "dt"), ("pendulum", "mass"),
                                      ("double-integrator", "dt")])
@given(value=st.floats(-10, 0))
def test_nonphysical_parameters_rejected(name, key, value):
    with pytest.raises(ValueError):
        make_builtin(name, {key: value})


def test_unknown_parameter_rejected():
    with pytest.raises(ValueError):
        make_builtin("cartpole", {"pole_lenght": 1.0})


def test_linear_ltv_requires_matrices():
    with pytest.raises(ValueError):
        make_builtin("linear-ltv", {"A": np.eye(2)})


@given(seed=st.integers(0, 2**31 - 1))
def test_linear_ltv_steps_follow_recursion(seed):
    rng = np.random.default_rng(seed)
    T, n_x, n_u, n_z = 10, 3, 2, 2
    A, B, C = (rng.standard_normal((T, n_x, n_x)), rng.standard_normal((T, n_x, n_u)),
               rng.standard_normal((T, n_z, n_x)))
    sys = make_builtin("linear-ltv", {"A": A, "B": B, "C": C, "T": T})
    x = rng.standard_normal(n_x)
    for t in range(T):
        u = rng.standard_normal(n_u)
        assert np.array_equal(sys.step(x, u, t), x @ A[t].T + u @ B[t].T)
        x = A[t] @ x + B[t] @ u


def test_linear_spec_dimension_checks():
    with pytest.raises(ValueError):
        LinearSystemSpec(np.eye(2), np.ones((3, 1)), np.ones((1, 2)))
    with pytest.raises(ValueError):
        LinearSystemSpec(np.zeros((5, 2, 2)), np.zeros((4, 2, 1)), np.ones((1, 2)))


def test_rollout_at_rest_stays_put():
    sys = make_builtin("double-integrator")
    states, outputs = rollout(sys, sys.x0, np.zeros((7, 1)))
    assert np.all(states == sys.x0) and np.all(outputs == 0)


def test_rollout_constant_control_hand_iteration():
    sys = make_builtin("double-integrator", {"dt": 0.1})
    states, outputs = rollout(sys, [0.0, 0.0], np.ones((3, 1)))
    np.testing.assert_allclose(states[:, 0], [0, 0, 0.01, 0.03], atol=1e-15)
    np.testing.assert_allclose(outputs[:, 0], [0, 0, 0.01, 0.03], atol=1e-15)


def test_rollout_dimension_mismatch():
    sys = make_builtin("cartpole")
    with pytest.raises(ValueError):
        rollout(sys, sys.x0, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        rollout(sys, sys.x0, np.zeros((0, 1)))


@given(seed=st.integers(0, 10**6), episode=st.integers(0, 500))
def test_rollout_deterministic_with_noise(seed, episode):
    sys = make_builtin("cartpole")
    u = np.sin(np.arange(20))[:, None]
    noise = NoiseSpec(0.1, 0.05, seed)
    a = rollout(sys, sys.x0, u, noise, episode)
    b = rollout(sys, sys.x0, u, noise, episode)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_zero_noise_equals_nominal():
    sys = make_builtin("cartpole")
    u = np.cos(np.arange(15))[:, None]
    nominal = rollout(sys, sys.x0, u)
    noisy = rollout(sys, sys.x0, u, NoiseSpec(0.0, 0.0, 3))
    assert np.array_equal(nominal[0], noisy[0]) and np.array_equal(nominal[1], noisy[1])


def test_process_stream_independent_of_measurement_level():
    w1, _ = noise_streams(5, 2)
    w2, _ = noise_streams(5, 2)
    assert np.array_equal(w1.standard_normal(10), w2.standard_normal(10))
    sys = make_builtin("cartpole")
    u = np.zeros((10, 1))
    lo = rollout(sys, sys.x0, u, NoiseSpec(0.1, 0.01, 4), 1)
    hi = rollout(sys, sys.x0, u, NoiseSpec(0.1, 0.5, 4), 1)
    assert np.array_equal(lo[0], hi[0])


def test_noise_reference_scaling():
    noise = NoiseSpec(0.1, 0.2, 0).with_reference(np.array([[1.0], [-4.0]]),
                                                  np.array([[0.5, 2.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(noise.process_sigma(1), [0.4])
    np.testing.assert_allclose(noise.measurement_sigma(2), [0.2, 0.4])
    with pytest.raises(ValueError):
        NoiseSpec(-0.1, 0.0)


@given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 100))
def test_linear_rollout_matches_matrix_recursion(seed, T):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    A *= 0.95 / np.max(np.abs(np.linalg.eigvals(A)))
    B, C = rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
    sys = make_builtin("linear-ltv", {"A": A, "B": B, "C": C})
    u = rng.standard_normal((T, 2))
    x0 = rng.standard_normal(3)
    states, outputs = rollout(sys, x0, u)
    x = x0.copy()
    for t in range(T):
        np.testing.assert_allclose(outputs[t], C @ x, rtol=1e-10, atol=1e-12)
        x = A @ x + B @ u[t]
    np.testing.assert_allclose(states[-1], x, rtol=1e-10, atol=1e-12)


def test_cartpole_energy_conserved():
    sys = make_builtin("cartpole")
    x = np.array([0.0, 2.0, 0.3, -1.0])
    e0 = cartpole_energy(x, sys.params)
    for t in range(1000):
        x = sys.step(x, np.zeros(1), t)
    drift = abs(cartpole_energy(x, sys.params) - e0) / abs(e0)
    assert drift <= 1e-4


@given(x=hnp.arrays(float, (5, 4), elements=finite), u=hnp.arrays(float, (5, 1), elements=finite))
def test_batched_step_matches_single(x, u):
    sys = make_builtin("cartpole")
    batch = sys.step(x, u)
    for i in range(5):
        assert np.array_equal(batch[i], sys.step(x[i], u[i]))
    assert np.array_equal(sys.output(x)[2], sys.output(x[2]))


def test_swimmer_outputs_and_motion():
    sys = make_builtin("nlink-swimmer", {"n_links": 3})
    u = np.tile([[1.0, -1.0]], (10, 1))
    states, outputs = rollout(sys, sys.x0, u)
    assert outputs.shape == (11, sys.n_z)
    assert np.all(np.isfinite(states))
    np.testing.assert_allclose(states[-1, 3:], 1.0 * np.array([1.0, -1.0]), atol=1e-12)


def test_linearize_recovers_linear_system():
    from pod2c.dynamics import linearize

    rng = np.random.default_rng(7)
    A, B, C = rng.standard_normal((3, 3)), rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
    sys = make_builtin("linear-ltv", {"A": A, "B": B, "C": C, "x0": rng.standard_normal(3)})
    u = rng.standard_normal((5, 2))
    states, outputs = rollout(sys, sys.x0, u)
    lin = linearize(sys, Trajectory(states, outputs, u))
    np.testing.assert_allclose(lin.linear.A, np.broadcast_to(A, (5, 3, 3)), atol=1e-8)
    np.testing.assert_allclose(lin.linear.B, np.broadcast_to(B, (5, 3, 2)), atol=1e-8)
    np.testing.assert_allclose(lin.linear.C, np.broadcast_to(C, (6, 2, 3)), atol=1e-8)
    assert not np.any(lin.x0)


def test_linearize_matches_small_deviations():
    from pod2c.dynamics import linearize

    sys = make_builtin("cartpole")
    rng = np.random.default_rng(0)
    u = rng.standard_normal((10, 1))
    states, outputs = rollout(sys, sys.x0, u)
    lin = linearize(sys, Trajectory(states, outputs, u))
    du = 1e-5 * rng.standard_normal((10, 1))
    _, z_pert = rollout(sys, sys.x0, u + du)
    _, dz_lin = rollout(lin, lin.x0, du)
    # second-order remainder of a 1e-5 perturbation
    assert np.abs(z_pert - outputs - dz_lin).max() < 1e-8


def test_output_sequence_may_cover_terminal_time():
    A = np.tile(np.eye(2), (4, 1, 1))
    B = np.ones((4, 2, 1))
    C = np.arange(10.0).reshape(5, 1, 2)
    spec = LinearSystemSpec(A, B, C)
    assert spec.horizon == 4
    np.testing.assert_array_equal(spec.C_at(4), C[4])
    with pytest.raises(ValueError, match="entries for a horizon"):
        LinearSystemSpec(A, B, np.ones((7, 1, 2)))
    short = LinearSystemSpec(A, B, C[:4])
    np.testing.assert_array_equal(short.C_at(4), C[3])
