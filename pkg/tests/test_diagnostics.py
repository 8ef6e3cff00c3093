import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from near_ortho.diagnostics import (angle_summary, gram_spectrum, jacobi_eigenvalues, matrix_csv,
                                    pairwise_cosine_matrix, summarize)
from near_ortho.errors import NumericError
from near_ortho.ortho import KernelBank, almost_right_loss


def upper_mean(m):
    iu = np.triu_indices(len(m), 1)
    return m[iu].mean()


class TestCosineMatrix:
    def test_identical_kernels(self):
        np.testing.assert_allclose(pairwise_cosine_matrix(np.ones((4, 6))), np.ones((4, 4)), atol=1e-8)

    def test_orthogonal_basis(self):
        np.testing.assert_allclose(pairwise_cosine_matrix(np.eye(5)), np.eye(5), atol=1e-8)

    def test_three_vector_bank(self):
        e1, e2 = np.eye(2)
        bank = np.stack([e1, e2, (e1 + e2) / math.sqrt(2)])
        assert upper_mean(pairwise_cosine_matrix(bank)) == pytest.approx(0.47140452079103173, abs=1e-6)
        assert upper_mean(pairwise_cosine_matrix(bank)) == pytest.approx(almost_right_loss(bank), abs=1e-12)

    def test_upper_mean_is_loss(self, rng):
        for _ in range(100):
            a = rng.normal(size=(int(rng.integers(2, 17)), int(rng.integers(2, 65))))
            assert abs(upper_mean(pairwise_cosine_matrix(a)) - almost_right_loss(a)) < 1e-12

    def test_structure(self, rng):
        c = pairwise_cosine_matrix(rng.normal(size=(9, 11)))
        np.testing.assert_allclose(np.diag(c), 1.0, atol=1e-7)
        np.testing.assert_array_equal(c, c.T)
        assert np.abs(c).max() <= 1.0


class TestAngleSummary:
    def test_identity(self):
        s = angle_summary(np.eye(6))
        assert s.min_angle_deg == s.max_angle_deg == 90.0
        assert s.frac_near_orthogonal == 1.0
        assert s.mean_abs_cos == 0.0

    def test_all_ones(self):
        s = angle_summary(np.ones((5, 5)))
        assert s.max_angle_deg == 0.0
        assert s.frac_near_orthogonal == 0.0
        assert s.mean_signed_cos == 1.0

    def test_clamps_rounding(self):
        c = np.array([[1.0, 1.0 + 1e-15], [1.0 + 1e-15, 1.0]])
        assert angle_summary(c).max_angle_deg == 0.0

    def test_fraction_matches_enumeration(self, rng):
        for tau in (5.0, 10.0, 20.0):
            a = rng.normal(size=(12, 6))
            c = pairwise_cosine_matrix(a)
            hits = pairs = 0
            for i in range(12):
                for j in range(i + 1, 12):
                    cos = max(-1.0, min(1.0, float(c[i, j])))
                    angle = math.degrees(math.acos(cos))
                    hits += 90 - tau <= angle <= 90 + tau
                    pairs += 1
            assert angle_summary(c, tau).frac_near_orthogonal == pytest.approx(hits / pairs, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_positive_rescaling_invariant(self, seed):
        g = np.random.default_rng(seed)
        a = g.normal(size=(7, 9))
        s1 = angle_summary(pairwise_cosine_matrix(a))
        s2 = angle_summary(pairwise_cosine_matrix(a * g.uniform(0.2, 5.0, size=(7, 1))))
        assert s1.min_angle_deg == pytest.approx(s2.min_angle_deg, abs=1e-5)
        assert s1.max_angle_deg == pytest.approx(s2.max_angle_deg, abs=1e-5)
        assert s1.mean_abs_cos == pytest.approx(s2.mean_abs_cos, abs=1e-7)


class TestGramSpectrum:
    def test_orthonormal(self):
        np.testing.assert_allclose(gram_spectrum(np.eye(4, 9)), np.ones(4), atol=1e-12)

    def test_duplicated_row(self):
        np.testing.assert_allclose(gram_spectrum(np.array([[1.0, 2.0], [1.0, 2.0]])), [2.0, 0.0], atol=1e-12)

    def test_characteristic_polynomial_oracle(self, rng):
        a = rng.normal(size=(6, 25))
        n = a / np.linalg.norm(a, axis=1, keepdims=True)
        roots = np.sort(np.roots(np.poly(n @ n.T)).real)[::-1]
        np.testing.assert_allclose(gram_spectrum(a), roots, atol=1e-8)

    def test_against_lapack(self, rng):
        for k in (2, 7, 16, 40):
            a = rng.normal(size=(k, 30))
            n = a / np.linalg.norm(a, axis=1, keepdims=True)
            np.testing.assert_allclose(gram_spectrum(a), np.linalg.eigvalsh(n @ n.T)[::-1], atol=1e-10)

    def test_trace_and_sign(self, rng):
        for _ in range(20):
            a = rng.normal(size=(int(rng.integers(2, 20)), 25))
            ev = gram_spectrum(a)
            assert abs(ev.sum() - len(a)) < 1e-8
            assert ev.min() > -1e-10
            assert np.all(np.diff(ev) <= 0)

    def test_row_permutation_and_sign_flips(self, rng):
        a = rng.normal(size=(10, 12))
        b = a[rng.permutation(10)] * rng.choice([-1.0, 1.0], size=(10, 1))
        np.testing.assert_allclose(gram_spectrum(a), gram_spectrum(b), atol=1e-12)

    def test_nonconvergence_reported(self, rng):
        m = rng.normal(size=(8, 8))
        with pytest.raises(NumericError):
            jacobi_eigenvalues(m + m.T, max_sweeps=1)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            gram_spectrum(np.eye(129, 130))


def test_summary_export(rng):
    s = summarize(KernelBank(rng.normal(size=(5, 25))))
    assert sum(s.gram_eigenvalues) == pytest.approx(5.0, abs=1e-8)
    d = s.to_dict()
    assert "cosine_matrix" not in d and len(d["gram_eigenvalues"]) == 5
    text = matrix_csv(s.cosine_matrix)
    rows = [line.split(",") for line in text.strip().split("\n")]
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)
    parsed = np.array([[float(v) for v in r] for r in rows])
    np.testing.assert_allclose(parsed, s.cosine_matrix, rtol=1e-8, atol=1e-9)
