import numpy as np
import pytest

from fedgc.client import ClientModel, run_client_filter, steady_state_gain
from fedgc.oracle import (CentralizedOracle, granger_error_bound, oracle_gap,
                          run_oracle_filter)
from fedgc.client import FilterTrajectory
from fedgc.ssm import BlockSpec, BlockSystem, simulate

SPEC_2 = BlockSpec(dims=(1, 1), obs_dims=(1, 1))


def make_oracle(A, K, spec=SPEC_2, C=None):
    n = spec.state_dim
    return CentralizedOracle(spec=spec, A=A, C=C if C is not None else np.eye(n), K=K)


class TestOracleStep:
    def test_zero_gain_pure_prediction(self):
        oracle = make_oracle(A=[[0.5, 0.2], [0.1, 0.4]], K=np.zeros((2, 2)),
                             C=np.eye(2))
        oracle.h_hat = np.array([1.0, 2.0])
        for _ in range(3):
            h_pred, _, h_hat = oracle.step([0.0, 0.0])
            assert np.array_equal(h_hat, h_pred)

    def test_scalar_same_arithmetic_as_client(self):
        spec = BlockSpec(dims=(1,), obs_dims=(1,))
        oracle = make_oracle(A=[[0.5]], K=[[0.5]], spec=spec, C=[[1.0]])
        oracle.h_hat = np.array([2.0])
        h_pred, r, h_hat = oracle.step([3.0])
        assert (h_pred[0], r[0], h_hat[0]) == (1.0, 2.0, 2.0)

    def test_block_diagonal_equals_independent_clients(self):
        rng = np.random.default_rng(0)
        spec = BlockSpec(dims=(2, 1), obs_dims=(2, 1))
        a1 = rng.standard_normal((2, 2)) * 0.4
        a2 = np.array([[0.6]])
        A = np.zeros((3, 3))
        A[:2, :2], A[2:, 2:] = a1, a2
        k1 = rng.standard_normal((2, 2)) * 0.2
        k2 = np.array([[0.3]])
        K = np.zeros((3, 3))
        K[:2, :2], K[2:, 2:] = k1, k2

        measurements = rng.standard_normal((21, 3))
        oracle = make_oracle(A=A, K=K, spec=spec, C=np.eye(3))
        joint = run_oracle_filter(oracle, measurements)

        c1 = run_client_filter(ClientModel(client_id=0, A=a1, C=np.eye(2), K=k1),
                               measurements[:, :2])
        c2 = run_client_filter(ClientModel(client_id=1, A=a2, C=np.eye(1), K=k2),
                               measurements[:, 2:])
        stacked = np.hstack([c1.estimated, c2.estimated])
        assert np.max(np.abs(joint.estimated - stacked)) < 1e-12

    def test_dimension_mismatch(self):
        oracle = make_oracle(A=np.eye(2) * 0.5, K=np.zeros((2, 2)), C=np.eye(2))
        with pytest.raises(ValueError):
            oracle.step([1.0])


def test_convergent_oracle_residuals_decay_geometrically():
    spec = SPEC_2
    A = np.array([[0.5, 0.2], [0.1, 0.4]])
    system = BlockSystem(spec=spec, A=A, C=np.eye(2), q_proc=0.0, r_meas=0.0)
    K = steady_state_gain(A, np.eye(2), 1.0, 0.5)
    oracle = make_oracle(A=A, K=K, C=np.eye(2))
    assert oracle.is_convergent()
    rho = np.max(np.abs(np.linalg.eigvals(A - A @ K @ np.eye(2))))

    traj = simulate(system, T=60, seed=0, initial_state=[2.0, -1.0])
    filt = run_oracle_filter(oracle, traj.measurements)
    norms = np.linalg.norm(filt.residuals, axis=1)
    for t in range(20, 59):
        if norms[t] > 1e-13:
            assert norms[t + 1] / norms[t] <= rho + 0.05


class TestOracleGap:
    def make_trajs(self, rng, T=40):
        oracle_traj = FilterTrajectory(
            predicted=rng.standard_normal((T + 1, 2)),
            estimated=rng.standard_normal((T + 1, 2)),
            residuals=np.zeros((T + 1, 2)))
        aug_pred = [oracle_traj.predicted[:, :1].copy(),
                    oracle_traj.predicted[:, 1:].copy()]
        client_est = [oracle_traj.estimated[:, :1].copy(),
                      oracle_traj.estimated[:, 1:].copy()]
        return oracle_traj, aug_pred, client_est

    def test_identical_trajectories_zero_gaps(self):
        rng = np.random.default_rng(1)
        oracle_traj, aug_pred, client_est = self.make_trajs(rng)
        report = oracle_gap(oracle_traj, SPEC_2, aug_pred, client_est, window=10)
        assert report["state_gap_norms"] == [0.0, 0.0]
        assert report["delta_max"] == [0.0, 0.0]

    def test_constant_offset(self):
        rng = np.random.default_rng(2)
        oracle_traj, aug_pred, client_est = self.make_trajs(rng)
        aug_pred = [p + 0.7 for p in aug_pred]
        client_est = [e - 0.2 for e in client_est]
        report = oracle_gap(oracle_traj, SPEC_2, aug_pred, client_est, window=10)
        for m in range(2):
            assert report["state_gap_means"][m][0] == pytest.approx(0.7)
            assert report["delta_max"][m] == pytest.approx(0.2)

    def test_window_longer_than_trajectory_rejected(self):
        rng = np.random.default_rng(3)
        oracle_traj, aug_pred, client_est = self.make_trajs(rng, T=5)
        with pytest.raises(ValueError, match="window"):
            oracle_gap(oracle_traj, SPEC_2, aug_pred, client_est, window=100)


class TestGrangerErrorBound:
    def test_exact_recovery_lhs_zero(self):
        rng = np.random.default_rng(4)
        A = np.array([[0.5, 0.2], [0.1, 0.4]])
        traj = FilterTrajectory(predicted=rng.standard_normal((21, 2)),
                                estimated=rng.standard_normal((21, 2)),
                                residuals=np.zeros((21, 2)))
        a_hat = {(0, 1): A[:1, 1:].copy(), (1, 0): A[1:, :1].copy()}
        report = granger_error_bound(a_hat, A, SPEC_2, [0.1, 0.1], traj, window=10)
        for entry in report["per_client"]:
            assert entry["lhs"] == 0.0
            assert entry["holds"]
        assert report["holds"]

    def test_zero_oracle_states_corollary_not_applicable(self):
        A = np.array([[0.5, 0.2], [0.1, 0.4]])
        traj = FilterTrajectory(predicted=np.zeros((21, 2)),
                                estimated=np.zeros((21, 2)),
                                residuals=np.zeros((21, 2)))
        a_hat = {(0, 1): np.array([[0.0]]), (1, 0): np.array([[0.0]])}
        report = granger_error_bound(a_hat, A, SPEC_2, [0.1, 0.1], traj, window=10)
        for entry in report["per_client"]:
            assert entry["lhs"] == 0.0
            assert not entry["corollary"]["applicable"]

    def test_rhs_matches_hand_computation(self):
        A = np.array([[0.5, 0.2], [0.1, 0.4]])
        rng = np.random.default_rng(5)
        traj = FilterTrajectory(predicted=rng.standard_normal((21, 2)),
                                estimated=rng.standard_normal((21, 2)),
                                residuals=np.zeros((21, 2)))
        a_hat = {(0, 1): np.array([[0.3]]), (1, 0): np.array([[0.05]])}
        deltas = [0.2, 0.3]
        report = granger_error_bound(a_hat, A, SPEC_2, deltas, traj, window=10)
        # rhs_0 = |A_00| * delta_0 + |A_hat_01| * delta_1
        assert report["per_client"][0]["rhs"] == pytest.approx(0.5 * 0.2 + 0.3 * 0.3)
        assert report["per_client"][1]["rhs"] == pytest.approx(0.4 * 0.3 + 0.05 * 0.2)
