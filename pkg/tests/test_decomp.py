import numpy as np
import pytest

from hybridprec.decomp import RankDeficiencyError, geometric_mean_sigma, gmd, svd


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rank_ns_truncation(m, ns):
    """Independent oracle: best rank-ns approximation straight from numpy's SVD."""
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return (u[:, :ns] * s[:ns]) @ vh[:ns]


class TestSvd:
    def test_identity_spectrum(self):
        np.testing.assert_allclose(svd(np.eye(3)).sigma, [1.0, 1.0, 1.0], atol=1e-14)

    def test_diagonal_sorted_descending(self):
        np.testing.assert_allclose(svd(np.diag([3.0, 4.0])).sigma, [4.0, 3.0], atol=1e-14)

    def test_reconstruction(self):
        m = random_complex(np.random.default_rng(0), (8, 4))
        f = svd(m)
        assert np.linalg.norm(f.reconstruct() - m) / np.linalg.norm(m) < 1e-10

    def test_semi_unitary_factors(self):
        f = svd(random_complex(np.random.default_rng(1), (6, 9)))
        k = f.sigma.size
        assert np.linalg.norm(f.u.conj().T @ f.u - np.eye(k)) < 1e-10
        assert np.linalg.norm(f.v.conj().T @ f.v - np.eye(k)) < 1e-10

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            svd(np.array([[1.0, np.nan], [0.0, 1.0]]))


class TestGeometricMeanSigma:
    def test_two_values(self):
        assert geometric_mean_sigma(np.array([4.0, 1.0]), 2) == pytest.approx(2.0)

    def test_equal_values(self):
        assert geometric_mean_sigma(np.array([5.0, 5.0, 5.0]), 3) == pytest.approx(5.0)

    def test_no_underflow_with_tiny_trailing_value(self):
        # log-domain evaluation; the tiny third value is outside the top-2 window
        assert geometric_mean_sigma(np.array([9.0, 4.0, 1e-300]), 2) == pytest.approx(6.0)

    def test_extreme_products_stay_finite(self):
        sigma = np.full(100, 1e-200)
        assert geometric_mean_sigma(sigma, 100) == pytest.approx(1e-200)

    def test_nonpositive_rejected(self):
        with pytest.raises(RankDeficiencyError):
            geometric_mean_sigma(np.array([1.0, 0.0]), 2)


class TestGmd:
    def test_two_by_two_diagonal(self):
        f = gmd(np.diag([4.0, 1.0]).astype(complex), 2)
        np.testing.assert_allclose(np.diag(f.q1), [2.0, 2.0], atol=1e-12)

    def test_semi_unitary_input_gives_identity(self):
        q, _ = np.linalg.qr(random_complex(np.random.default_rng(3), (5, 5)))
        f = gmd(q, 5)
        np.testing.assert_allclose(f.q1, np.eye(5), atol=1e-10)

    def test_rectangular_semi_unitary_input(self):
        # all singular values are 1, so the triangular core is the identity
        q, _ = np.linalg.qr(random_complex(np.random.default_rng(9), (7, 4)))
        f = gmd(q, 4)
        np.testing.assert_allclose(f.q1, np.eye(4), atol=1e-10)
        assert f.sigma_bar == pytest.approx(1.0, rel=1e-12)

    def test_reconstructs_rank_ns_truncation(self):
        m = random_complex(np.random.default_rng(4), (6, 6))
        f = gmd(m, 4)
        target = rank_ns_truncation(m, 4)
        assert np.linalg.norm(f.reconstruct() - target) / np.linalg.norm(target) < 1e-8

    def test_rank_deficiency_raises(self):
        rng = np.random.default_rng(5)
        rank1 = np.outer(random_complex(rng, 4), random_complex(rng, 4))
        with pytest.raises(RankDeficiencyError):
            gmd(rank1, 2)

    def test_invariants_on_random_ensemble(self):
        rng = np.random.default_rng(6)
        for _ in range(60):
            nr = int(rng.integers(2, 20))
            nt = int(rng.integers(2, 20))
            ns = int(rng.integers(1, min(nr, nt) + 1))
            m = random_complex(rng, (nr, nt))
            f = gmd(m, ns)
            eye = np.eye(ns)
            assert np.linalg.norm(f.w1.conj().T @ f.w1 - eye) <= 1e-10
            assert np.linalg.norm(f.r1.conj().T @ f.r1 - eye) <= 1e-10
            # strictly upper triangular below the diagonal
            assert np.max(np.abs(np.tril(f.q1, -1))) <= 1e-12 if ns > 1 else True
            diag = np.diag(f.q1)
            assert np.max(np.abs(diag.imag)) <= 1e-12
            assert np.all(diag.real > 0)
            assert np.max(np.abs(diag.real - f.sigma_bar)) <= 1e-8 * f.sigma_bar
            target = rank_ns_truncation(m, ns)
            assert np.linalg.norm(f.reconstruct() - target) <= 1e-8 * np.linalg.norm(target)

    def test_determinant_preserved_on_full_selection(self):
        rng = np.random.default_rng(7)
        m = random_complex(rng, (5, 5))
        f = gmd(m, 5)
        sigma = np.linalg.svd(m, compute_uv=False)
        assert np.prod(np.diag(f.q1).real) == pytest.approx(np.prod(sigma), rel=1e-8)

    def test_invariant_under_unitary_factors(self):
        rng = np.random.default_rng(8)
        m = random_complex(rng, (6, 5))
        ul, _ = np.linalg.qr(random_complex(rng, (6, 6)))
        ur, _ = np.linalg.qr(random_complex(rng, (5, 5)))
        f0 = gmd(m, 3)
        f1 = gmd(ul @ m @ ur, 3)
        # the equal-diagonal triangular core depends only on the spectrum
        np.testing.assert_allclose(f1.q1, f0.q1, atol=1e-8)
        assert f1.sigma_bar == pytest.approx(f0.sigma_bar, rel=1e-10)

    def test_ns_out_of_range(self):
        with pytest.raises(ValueError):
            gmd(np.eye(3), 4)
