import numpy as np
import pytest

from fedgc.server import ServerModel
from fedgc.ssm import BlockSpec

SPEC_2 = BlockSpec(dims=(1, 1), obs_dims=(1, 1))


def scalar_server(a11=0.5, a22=0.3, gamma=0.1):
    return ServerModel(spec=SPEC_2, A_diag=([[a11]], [[a22]]), gamma=gamma)


def random_server(rng, n_clients=3, max_dim=2):
    dims = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(n_clients))
    spec = BlockSpec(dims=dims, obs_dims=dims)
    diag = tuple(rng.standard_normal((d, d)) * 0.5 for d in dims)
    server = ServerModel(spec=spec, A_diag=diag, gamma=float(rng.uniform(0.01, 0.2)))
    for pair in server.A_hat:
        server.A_hat[pair] = rng.standard_normal(server.A_hat[pair].shape) * 0.3
    return spec, server


class TestPredict:
    def test_zero_cross_blocks_pure_diagonal(self):
        server = scalar_server()
        pred = server.predict([[1.0], [2.0]])
        assert np.allclose(pred, [0.5, 0.6])

    def test_two_scalar_clients(self):
        server = scalar_server(a11=0.5)
        server.A_hat[(0, 1)] = np.array([[0.2]])
        pred = server.predict([[1.0], [2.0]])
        assert pred[0] == pytest.approx(0.9)

    def test_matches_full_matrix_product(self):
        rng = np.random.default_rng(0)
        spec, server = random_server(rng)
        states = [rng.standard_normal(d) for d in spec.dims]
        full = np.zeros((spec.state_dim, spec.state_dim))
        for m in range(spec.n_clients):
            full[spec.state_slice(m), spec.state_slice(m)] = server.A_diag[m]
            for n in range(spec.n_clients):
                if n != m:
                    full[spec.state_slice(m), spec.state_slice(n)] = server.A_hat[(m, n)]
        expected = full @ np.concatenate(states)
        assert np.allclose(server.predict(states), expected, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            scalar_server().predict([[1.0, 2.0], [3.0]])


class TestLabels:
    def test_identity_diagonals_pass_through(self):
        spec = BlockSpec(dims=(2, 1), obs_dims=(2, 1))
        server = ServerModel(spec=spec, A_diag=(np.eye(2), np.eye(1)), gamma=0.1)
        labels = server.labels([[1.0, 2.0], [3.0]])
        assert np.allclose(labels, [1.0, 2.0, 3.0])

    def test_scalar_label(self):
        server = scalar_server(a11=0.5)
        assert server.labels([[4.0], [0.0]])[0] == 2.0

    def test_matches_block_diagonal_product(self):
        rng = np.random.default_rng(1)
        spec, server = random_server(rng)
        states = [rng.standard_normal(d) for d in spec.dims]
        expected = np.concatenate([server.A_diag[m] @ states[m]
                                   for m in range(spec.n_clients)])
        assert np.allclose(server.labels(states), expected, atol=1e-12)


class TestLoss:
    def test_equal_vectors_zero(self):
        assert ServerModel.loss(np.ones(3), np.ones(3)) == 0.0

    def test_unit_differences(self):
        assert ServerModel.loss(np.array([1.0, 1.0]), np.zeros(2)) == 2.0

    def test_matches_norm(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 5))
        assert ServerModel.loss(a, b) == pytest.approx(np.linalg.norm(a - b) ** 2)


class TestGradA:
    def test_label_equals_prediction_zero_gradient(self):
        server = scalar_server()
        states = [[1.0], [2.0]]
        rnd = server.make_round(1, states, states)
        assert server.grad_A(rnd, 0, 1)[0, 0] == 0.0

    def test_zero_source_state_zero_gradient(self):
        server = scalar_server()
        server.A_hat[(0, 1)] = np.array([[0.4]])
        rnd = server.make_round(1, [[1.0], [0.0]], [[1.5], [0.5]])
        assert server.grad_A(rnd, 0, 1)[0, 0] == 0.0

    def test_diagonal_rejected(self):
        server = scalar_server()
        rnd = server.make_round(1, [[1.0], [2.0]], [[1.0], [2.0]])
        with pytest.raises(ValueError, match="diagonal blocks are known"):
            server.grad_A(rnd, 0, 0)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(3)
        step = 1e-6
        for _ in range(100):
            n_clients = int(rng.integers(2, 4))
            spec, server = random_server(rng, n_clients=n_clients, max_dim=3)
            h_c = [rng.standard_normal(d) for d in spec.dims]
            h_a = [rng.standard_normal(d) for d in spec.dims]
            m = int(rng.integers(0, n_clients))
            n = int(rng.integers(0, n_clients))
            if n == m:
                n = (m + 1) % n_clients
            rnd = server.make_round(1, h_c, h_a)
            analytic = server.grad_A(rnd, m, n)
            numeric = np.zeros_like(analytic)
            for i in range(numeric.shape[0]):
                for j in range(numeric.shape[1]):
                    for sign in (1.0, -1.0):
                        saved = server.A_hat[(m, n)].copy()
                        server.A_hat[(m, n)][i, j] += sign * step
                        numeric[i, j] += sign * server.make_round(1, h_c, h_a).loss / (2 * step)
                        server.A_hat[(m, n)] = saved
            scale = max(np.max(np.abs(analytic)), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale < 1e-5


class TestGradState:
    def test_matching_states_zero(self):
        server = scalar_server()
        states = [[1.0], [2.0]]
        rnd = server.make_round(1, states, states)
        assert server.grad_state(rnd, 0)[0] == 0.0

    def test_scalar_hand_value(self):
        # 2 * A^T * (A * (h_a - h_c) - sum) with A=1, diff=0.5, sum=0.1
        spec = BlockSpec(dims=(1, 1), obs_dims=(1, 1))
        server = ServerModel(spec=spec, A_diag=([[1.0]], [[1.0]]), gamma=0.1)
        server.A_hat[(0, 1)] = np.array([[0.1]])
        rnd = server.make_round(1, [[0.0], [1.0]], [[0.5], [1.0]])
        assert server.grad_state(rnd, 0)[0] == pytest.approx(0.8)

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(4)
        step = 1e-6
        for _ in range(100):
            spec, server = random_server(rng, n_clients=2, max_dim=3)
            h_c = [rng.standard_normal(d) for d in spec.dims]
            h_a = [rng.standard_normal(d) for d in spec.dims]
            m = int(rng.integers(0, 2))
            rnd = server.make_round(1, h_c, h_a)
            analytic = server.grad_state(rnd, m)
            numeric = np.zeros_like(analytic)
            for i in range(numeric.size):
                for sign in (1.0, -1.0):
                    bumped = [h.copy() for h in h_a]
                    bumped[m][i] += sign * step
                    numeric[i] += sign * server.make_round(1, h_c, bumped).loss / (2 * step)
            scale = max(np.max(np.abs(analytic)), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale < 1e-5


class TestUpdate:
    def test_zero_gamma_no_change(self):
        server = scalar_server(gamma=0.0)
        server.A_hat[(0, 1)] = np.array([[0.3]])
        server.apply_update({(0, 1): np.array([[5.0]])})
        assert server.A_hat[(0, 1)][0, 0] == 0.3

    def test_zero_gradients_no_change(self):
        server = scalar_server(gamma=0.5)
        before = {p: b.copy() for p, b in server.A_hat.items()}
        server.apply_update({p: np.zeros_like(b) for p, b in before.items()})
        for pair in before:
            assert np.array_equal(server.A_hat[pair], before[pair])

    def test_one_step_matches_substituted_form(self):
        # scalar two-client step equals the fully substituted update rule
        rng = np.random.default_rng(5)
        for _ in range(25):
            a11, a22 = rng.standard_normal(2) * 0.6
            theta0, theta1 = rng.standard_normal(2) * 0.4
            y0, y1 = rng.standard_normal(2)
            u0, u1 = rng.standard_normal(2)
            gamma = float(rng.uniform(0.01, 0.3))
            a01, a10 = rng.standard_normal(2) * 0.3

            spec = BlockSpec(dims=(1, 1), obs_dims=(1, 1))
            server = ServerModel(spec=spec, A_diag=([[a11]], [[a22]]), gamma=gamma)
            server.A_hat[(0, 1)] = np.array([[a01]])
            server.A_hat[(1, 0)] = np.array([[a10]])
            h_c = [[u0], [u1]]
            h_a = [[u0 + theta0 * y0], [u1 + theta1 * y1]]
            rnd = server.make_round(1, h_c, h_a)
            server.apply_update(server.all_grads(rnd))

            expected_01 = a01 + 2 * gamma * (a11 * theta0 * y0 - a01 * u1) * u1
            expected_10 = a10 + 2 * gamma * (a22 * theta1 * y1 - a10 * u0) * u0
            assert server.A_hat[(0, 1)][0, 0] == pytest.approx(expected_01, abs=1e-12)
            assert server.A_hat[(1, 0)][0, 0] == pytest.approx(expected_10, abs=1e-12)

    def test_diagonal_blocks_bit_identical_after_updates(self):
        rng = np.random.default_rng(6)
        spec, server = random_server(rng)
        before = [b.copy() for b in server.A_diag]
        h_c = [rng.standard_normal(d) for d in spec.dims]
        h_a = [rng.standard_normal(d) for d in spec.dims]
        for _ in range(10):
            rnd = server.make_round(1, h_c, h_a)
            server.apply_update(server.all_grads(rnd))
        for kept, orig in zip(server.A_diag, before):
            assert kept.tobytes() == orig.tobytes()

    def test_update_rejects_diagonal_pair(self):
        server = scalar_server()
        with pytest.raises(ValueError):
            server.apply_update({(0, 0): np.array([[1.0]])})


def test_label_prediction_symmetry_zero_loss():
    # theta = 0 for all clients (h_a == h_c) and zero cross blocks: loss 0
    rng = np.random.default_rng(7)
    spec, server = random_server(rng)
    for pair in server.A_hat:
        server.A_hat[pair] = np.zeros_like(server.A_hat[pair])
    for _ in range(5):
        states = [rng.standard_normal(d) for d in spec.dims]
        rnd = server.make_round(1, states, states)
        assert rnd.loss == 0.0
