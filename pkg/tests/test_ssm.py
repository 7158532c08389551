import numpy as np
import pytest

from fedgc.ssm import (BlockSpec, BlockSystem, non_iid_diagnostics, simulate,
                       steady_state_covariance)

SPEC_2 = BlockSpec(dims=(1, 1), obs_dims=(1, 1))


def scalar_system(a=0.5, c=1.0, q=0.0, r=0.0):
    spec = BlockSpec(dims=(1,), obs_dims=(1,))
    return BlockSystem(spec=spec, A=[[a]], C=[[c]], q_proc=q, r_meas=r)


def test_block_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec(dims=(), obs_dims=())
    with pytest.raises(ValueError):
        BlockSpec(dims=(1, 0), obs_dims=(1, 1))
    with pytest.raises(ValueError):
        BlockSpec(dims=(1, 1), obs_dims=(1,))


def test_block_system_rejects_off_diagonal_c():
    with pytest.raises(ValueError):
        BlockSystem(spec=SPEC_2, A=np.eye(2) * 0.5,
                    C=[[1.0, 0.5], [0.0, 1.0]], q_proc=0.0, r_meas=0.0)


def test_simulate_geometric_decay():
    traj = simulate(scalar_system(), T=3, seed=0, initial_state=[1.0])
    assert np.allclose(traj.states[:, 0], [1.0, 0.5, 0.25, 0.125])
    assert np.allclose(traj.measurements, traj.states)


def test_simulate_zero_matrix_collapses():
    traj = simulate(scalar_system(a=0.0), T=4, seed=0, initial_state=[3.7])
    assert traj.states[0, 0] == 3.7
    assert np.all(traj.states[1:] == 0.0)


def test_simulate_deterministic_given_seed():
    sys_ = scalar_system(q=1.0, r=0.5)
    a = simulate(sys_, T=50, seed=42, initial_state=[0.0])
    b = simulate(sys_, T=50, seed=42, initial_state=[0.0])
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.measurements, b.measurements)


def test_simulate_rejects_bad_initial_state():
    with pytest.raises(ValueError):
        simulate(scalar_system(), T=2, seed=0, initial_state=[1.0, 2.0])


def test_lyapunov_scalar_closed_form():
    # q / (1 - a^2) = 1 / 0.75
    cov = steady_state_covariance(np.array([[0.5]]), 1.0)
    assert cov.sigma[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_lyapunov_zero_matrix():
    cov = steady_state_covariance(np.zeros((3, 3)), 2.5)
    assert np.allclose(cov.sigma, 2.5 * np.eye(3))


def test_lyapunov_matches_fixed_point_iteration():
    a = np.array([[0.5, 0.2], [0.1, 0.3]])
    cov = steady_state_covariance(a, 1.0)
    sigma = np.zeros((2, 2))
    for _ in range(10_000):
        nxt = a @ sigma @ a.T + np.eye(2)
        if np.max(np.abs(nxt - sigma)) < 1e-12:
            sigma = nxt
            break
        sigma = nxt
    assert np.max(np.abs(cov.sigma - sigma)) < 1e-10


def test_lyapunov_residual_invariant():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a = rng.standard_normal((3, 3))
        a *= 0.8 / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-12)
        cov = steady_state_covariance(a, 0.7)
        residual = np.linalg.norm(cov.sigma - a @ cov.sigma @ a.T - 0.7 * np.eye(3))
        assert residual / np.linalg.norm(cov.sigma) < 1e-9


def test_lyapunov_rejects_unstable():
    with pytest.raises(ValueError, match="unstable"):
        steady_state_covariance(np.array([[1.1]]), 1.0)


def test_simulate_monte_carlo_matches_lyapunov():
    spec = SPEC_2
    a = np.array([[0.5, 0.2], [0.1, 0.3]])
    system = BlockSystem(spec=spec, A=a, C=np.eye(2), q_proc=1.0, r_meas=0.0)
    traj = simulate(system, T=200_000, seed=123, initial_state=[0.0, 0.0])
    burn = 1000
    states = traj.states[burn:]
    empirical = states.T @ states / states.shape[0]
    cov = steady_state_covariance(a, 1.0, spec=spec)
    assert np.all(np.abs(empirical - cov.sigma) <= 0.05 * np.abs(cov.sigma))


def test_non_iid_decoupled_identical_independent():
    cov = steady_state_covariance(np.diag([0.5, 0.5]), 1.0, spec=SPEC_2)
    report = non_iid_diagnostics(cov, SPEC_2)
    assert report["identical"] and report["independent"]


def test_non_iid_coupled_dependent():
    cov = steady_state_covariance(np.array([[0.5, 0.2], [0.1, 0.3]]), 1.0, spec=SPEC_2)
    report = non_iid_diagnostics(cov, SPEC_2)
    assert not report["independent"]
    assert report["cross_norm"] > 1e-3


def test_non_iid_different_diagonals_not_identical():
    cov = steady_state_covariance(np.diag([0.9, 0.1]), 1.0, spec=SPEC_2)
    report = non_iid_diagnostics(cov, SPEC_2)
    assert not report["identical"]
    # q/(1-0.81) vs q/(1-0.01)
    assert report["variance_gap"] == pytest.approx(1 / 0.19 - 1 / 0.99, rel=1e-9)
    assert report["independent"]
