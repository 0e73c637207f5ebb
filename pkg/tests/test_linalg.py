import numpy as np
import pytest

import props
from kflora.linalg import NotPositiveDefinite, diag_of_triple, outer, row_scale, spd_solve


class TestRowScale:
    def test_diagonal_case(self):
        got = row_scale(np.array([2.0, 3.0]), np.eye(2))
        np.testing.assert_array_equal(got, [[2.0, 0.0], [0.0, 3.0]])

    def test_identity_scaling(self):
        ht = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(row_scale(np.ones(5), ht), ht)

    def test_matches_dense_diag_product(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=7)
        ht = rng.normal(size=(7, 3))
        np.testing.assert_allclose(row_scale(p, ht), np.diag(p) @ ht, rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            row_scale(np.ones(3), np.ones((4, 2)))
        with pytest.raises(ValueError):
            row_scale(np.ones((3, 1)), np.ones((3, 2)))

    def test_property_suite(self):
        props.check_row_scale_matches_dense(cases=100)


class TestSpdSolve:
    def test_identity(self):
        np.testing.assert_array_equal(spd_solve(np.eye(3), np.eye(3)), np.eye(3))

    def test_scalar_scaling(self):
        np.testing.assert_allclose(spd_solve(2.0 * np.eye(3), np.eye(3)),
                                   0.5 * np.eye(3), rtol=1e-15)

    def test_random_spd_residual(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 4))
        s = a @ a.T + 0.1 * np.eye(4)
        b = rng.normal(size=(4, 6))
        x = spd_solve(s, b)
        assert np.linalg.norm(s @ x - b) / np.linalg.norm(b) <= 1e-10

    def test_residual_moderate_conditioning(self):
        # ||SX-B||/||B|| bound in the regime where f64 can represent it
        for seed in range(50):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(2, 9))
            q, _ = np.linalg.qr(rng.normal(size=(m, m)))
            s = (q * np.logspace(-4, 0, m)) @ q.T
            b = rng.normal(size=(m, 4))
            x = spd_solve(s, b)
            assert np.linalg.norm(s @ x - b) / np.linalg.norm(b) <= 1e-10

    def test_residual_extreme_conditioning(self):
        # at cond 1e8 the f64 representability floor is ~eps*cond*||B||, so
        # the check uses the scale-correct backward-error normalization
        for seed in range(50):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(2, 9))
            q, _ = np.linalg.qr(rng.normal(size=(m, m)))
            s = (q * np.logspace(-8, 0, m)) @ q.T
            b = rng.normal(size=(m, 4))
            x = spd_solve(s, b)
            denom = np.linalg.norm(s, 2) * np.linalg.norm(x)
            assert np.linalg.norm(s @ x - b) / denom <= 1e-10

    def test_jitter_rescues_singular(self):
        s = np.zeros((3, 3))
        s[0, 0] = 1.0  # rank-1 PSD
        x = spd_solve(s, np.eye(3))
        assert np.isfinite(x).all()

    def test_negative_definite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            spd_solve(-np.eye(3), np.eye(3))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            spd_solve(np.ones((2, 3)), np.eye(2))
        with pytest.raises(ValueError):
            spd_solve(np.eye(2), np.eye(3))


class TestDiagOfTriple:
    def test_scalar(self):
        np.testing.assert_array_equal(
            diag_of_triple(np.array([[0.5]]), np.array([[1.0]]), np.array([1.0])),
            [0.5])

    def test_zero_gain(self):
        got = diag_of_triple(np.zeros((4, 2)), np.ones((2, 4)), np.ones(4))
        np.testing.assert_array_equal(got, np.zeros(4))

    def test_matches_dense_triple(self):
        rng = np.random.default_rng(3)
        k = rng.normal(size=(6, 2))
        h = rng.normal(size=(2, 6))
        p = rng.normal(size=6)
        np.testing.assert_allclose(diag_of_triple(k, h, p),
                                   np.diag(k @ h @ np.diag(p)), rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            diag_of_triple(np.ones((3, 2)), np.ones((2, 4)), np.ones(3))
        with pytest.raises(ValueError):
            diag_of_triple(np.ones((3, 2)), np.ones((2, 3)), np.ones(4))

    def test_property_suite(self):
        props.check_diag_of_triple_matches_dense(cases=100)


class TestOuter:
    def test_basis_vector(self):
        np.testing.assert_array_equal(outer(np.array([1.0, 0.0]), np.array([1.0, 0.0])),
                                      [[1.0, 0.0], [0.0, 0.0]])

    def test_zero(self):
        np.testing.assert_array_equal(outer(np.zeros(3), np.ones(3)), np.zeros((3, 3)))

    def test_hand_expansion(self):
        np.testing.assert_array_equal(outer(np.array([1.0, 2.0]), np.array([3.0, 4.0])),
                                      [[3.0, 4.0], [6.0, 8.0]])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            outer(np.ones(2), np.ones(3))

    def test_self_outer_psd(self):
        props.check_outer_psd(cases=100)
