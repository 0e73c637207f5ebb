import numpy as np
import pytest

from kflora import dense_ekf, engine
from kflora.datastream import synthetic_linear


class ReferenceRLS:
    """Textbook recursive least squares (lambda = 1), written independently
    of the filter modules: K = P a / (1 + a^T P a), P <- P - K a^T P."""

    def __init__(self, n, p0):
        self.w = np.zeros(n)
        self.p = p0 * np.eye(n)

    def update(self, a, y):
        pa = self.p @ a
        k = pa / (1.0 + a @ pa)
        self.w = self.w + k * (y - a @ self.w)
        self.p = self.p - np.outer(k, pa)
        self.p = (self.p + self.p.T) / 2.0


class TestDenseUpdate:
    def test_scalar_textbook_values(self):
        theta, p, k = dense_ekf.dense_update(np.zeros(1), np.eye(1), np.ones((1, 1)),
                                             np.array([2.0]), np.eye(1))
        np.testing.assert_allclose(k, [[0.5]], rtol=1e-14)
        np.testing.assert_allclose(theta, [1.0], rtol=1e-14)
        np.testing.assert_allclose(p, [[0.5]], rtol=1e-14)

    def test_zero_jacobian_changes_nothing(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        p0 = a @ a.T + np.eye(4)
        theta0 = rng.normal(size=4)
        theta, p, _ = dense_ekf.dense_update(theta0, p0, np.zeros((2, 4)),
                                             np.ones(2), np.eye(2))
        np.testing.assert_array_equal(theta, theta0)
        np.testing.assert_allclose(p, p0, rtol=1e-15)

    def test_matches_rls_on_linear_stream(self):
        # m=1 regression with fixed R=1 is exactly lambda=1 RLS
        model = engine.build_model(engine.parse_layers("dense:1"), (6,),
                                   parameterization="full",
                                   base_weights=[(np.zeros((1, 6)), np.zeros(1))])
        state = dense_ekf.init_dense_state(model.initial_theta(), 1,
                                           np.full(model.n_trainable, 10.0))
        state.r = np.eye(1)
        rls = ReferenceRLS(model.n_trainable, 10.0)
        for sample in synthetic_linear(6, 1, 0.05, seed=1, count=100):
            state, _, _ = dense_ekf.dense_step(state, model, sample.x, sample.y,
                                               r_method="fixed", beta=0.95)
            rls.update(np.concatenate([sample.x, [1.0]]), float(sample.y[0]))
        np.testing.assert_allclose(state.theta, rls.w, rtol=1e-8)

    def test_symmetry_and_trace_monotone(self):
        model = engine.build_model(engine.parse_layers("dense:4 tanh dense:3 softmax"),
                                   (5,), seed=2, parameterization="full")
        state = dense_ekf.init_dense_state(model.initial_theta(), 3,
                                           np.full(model.n_trainable, 0.2))
        rng = np.random.default_rng(3)
        prev_trace = np.trace(state.p)
        for _ in range(10):
            x = rng.uniform(0, 1, 5)
            y = np.eye(3)[rng.integers(0, 3)]
            state, _, _ = dense_ekf.dense_step(state, model, x, y)
            np.testing.assert_allclose(state.p, state.p.T, atol=1e-14)
            tr = np.trace(state.p)
            assert tr <= prev_trace + 1e-12
            prev_trace = tr

    def test_cap_enforced(self):
        with pytest.raises(ValueError):
            dense_ekf.init_dense_state(np.zeros(dense_ekf.DENSE_CAP + 1), 2,
                                       np.ones(dense_ekf.DENSE_CAP + 1))


class TestOffDiagonalMass:
    def test_diagonal_is_zero(self):
        assert dense_ekf.off_diagonal_mass(np.diag([1.0, 2.0, 3.0])) == 0.0

    def test_all_ones_two_by_two(self):
        got = dense_ekf.off_diagonal_mass(np.ones((2, 2)))
        np.testing.assert_allclose(got, np.sqrt(2) / 2, rtol=1e-12)

    def test_zero_matrix(self):
        assert dense_ekf.off_diagonal_mass(np.zeros((3, 3))) == 0.0

    def test_requires_square(self):
        with pytest.raises(ValueError):
            dense_ekf.off_diagonal_mass(np.ones((2, 3)))


class TestRandomSpd:
    def test_trace_and_definiteness(self):
        rng = np.random.default_rng(4)
        p = dense_ekf.random_spd(40, trace=8.0, rng=rng)
        np.testing.assert_allclose(np.trace(p), 8.0, rtol=1e-12)
        assert np.linalg.eigvalsh(p).min() > 0
