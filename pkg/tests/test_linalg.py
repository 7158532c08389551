import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgc.linalg import kron, operator_norm, spectral_radius, unvec, vec


def test_vec_column_stacking_order():
    assert np.array_equal(vec([[1, 2], [3, 4]]), [1.0, 3.0, 2.0, 4.0])


def test_vec_single_entry():
    assert np.array_equal(vec([[7]]), [7.0])


def test_vec_unvec_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows, cols = rng.integers(1, 6, size=2)
        z = rng.standard_normal((rows, cols))
        assert np.array_equal(unvec(vec(z), rows, cols), z)


def test_unvec_rejects_bad_length():
    with pytest.raises(ValueError):
        unvec(np.zeros(5), 2, 3)


def test_kron_identity():
    assert np.array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))


def test_kron_vec_identity_random_triples():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        p, q, r, s = rng.integers(1, 5, size=4)
        x = rng.standard_normal((p, q))
        y = rng.standard_normal((q, r))
        z = rng.standard_normal((r, s))
        err = np.max(np.abs(vec(x @ y @ z) - kron(z.T, x) @ vec(y)))
        worst = max(worst, err)
    assert worst < 1e-12


def test_kron_vec_identity_scalars():
    x, y, z = np.array([[2.0]]), np.array([[3.0]]), np.array([[4.0]])
    assert vec(x @ y @ z)[0] == 24.0
    assert (kron(z.T, x) @ vec(y))[0] == 24.0


def test_spectral_radius_nilpotent():
    assert spectral_radius([[0, 1], [0, 0]]) == 0.0


def test_spectral_radius_diagonal():
    assert spectral_radius(np.diag([2.0, 0.5])) == pytest.approx(2.0, rel=1e-10)


def test_spectral_radius_rotation_pair():
    # eigenvalues are +/- 0.9i by the characteristic polynomial
    assert spectral_radius([[0, -0.9], [0.9, 0]]) == pytest.approx(0.9, rel=1e-10)


def test_spectral_radius_rejects_nonsquare():
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-5, max_value=5, allow_nan=False),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_spectral_radius_scales_linearly(c, seed):
    a = np.random.default_rng(seed).standard_normal((4, 4))
    base = spectral_radius(a)
    assert spectral_radius(c * a) == pytest.approx(abs(c) * base, rel=1e-10, abs=1e-12)


def test_spectral_radius_power_iteration_path():
    # side > 512 forces the iterative estimator
    rng = np.random.default_rng(3)
    diag = rng.uniform(0.1, 0.9, size=600)
    diag[17] = 1.7
    assert spectral_radius(np.diag(diag)) == pytest.approx(1.7, rel=1e-8)


def test_operator_norm_matches_numpy():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 6))
    assert operator_norm(a) == pytest.approx(np.linalg.norm(a, 2), rel=1e-12)
