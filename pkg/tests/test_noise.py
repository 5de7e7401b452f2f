"""Transition matrix builders and the label corruption sampler."""

import numpy as np
import pytest
from scipy import stats

from srea.noise import (
    CorruptionResult,
    TransitionMatrix,
    build,
    build_asymmetric,
    build_flip,
    build_symmetric,
    corrupt,
)
from srea.tensor import Rng


class TestBuilders:
    def test_symmetric_example(self):
        tm = build_symmetric(3, 0.3)
        np.testing.assert_allclose(np.diag(tm.rows), 0.7)
        off = tm.rows[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, 0.15)

    def test_symmetric_high_ratio(self):
        tm = build_symmetric(5, 0.6)
        np.testing.assert_allclose(np.diag(tm.rows), 0.4)
        np.testing.assert_allclose(tm.rows[0, 1], 0.15)

    def test_asymmetric_example(self):
        tm = build_asymmetric(3, 0.2)
        expected = np.array([[0.8, 0.2, 0.0], [0.0, 0.8, 0.2], [0.2, 0.0, 0.8]])
        np.testing.assert_allclose(tm.rows, expected)

    def test_asymmetric_two_classes_is_swap(self):
        tm = build_asymmetric(2, 0.4)
        np.testing.assert_allclose(tm.rows, [[0.6, 0.4], [0.4, 0.6]])

    def test_flip_example(self):
        tm = build_flip(3, 0.2)
        expected = np.array([[1.0, 0.0, 0.0], [0.2, 0.8, 0.0], [0.2, 0.0, 0.8]])
        np.testing.assert_allclose(tm.rows, expected)

    def test_flip_total_degradation(self):
        tm = build_flip(4, 1.0)
        assert (tm.rows[1:, 0] == 1.0).all()
        assert (np.diag(tm.rows)[1:] == 0.0).all()

    @pytest.mark.parametrize("builder", [build_symmetric, build_asymmetric, build_flip])
    def test_zero_ratio_is_identity(self, builder):
        for k in (2, 5, 11):
            np.testing.assert_array_equal(builder(k, 0.0).rows, np.eye(k))

    @pytest.mark.parametrize("builder", [build_symmetric, build_asymmetric, build_flip])
    def test_row_stochastic_over_grid(self, builder):
        for k in range(2, 21):
            for eps in np.arange(0.0, 0.91, 0.1):
                rows = builder(k, float(eps)).rows
                assert np.abs(rows.sum(axis=1) - 1.0).max() <= 1e-12
                assert rows.min() >= 0.0 and rows.max() <= 1.0

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            build_symmetric(1, 0.1)
        with pytest.raises(ValueError):
            build_symmetric(3, 1.5)
        with pytest.raises(ValueError):
            build("bogus", 3, 0.1)

    def test_constructor_rejects_nonstochastic(self):
        with pytest.raises(ValueError):
            TransitionMatrix(2, np.array([[0.5, 0.4], [0.0, 1.0]]), "broken", 0.1)


class TestCorrupt:
    def test_identity_changes_nothing(self):
        labels = np.arange(100) % 4
        res = corrupt(labels, build_symmetric(4, 0.0), Rng(0).stream("noise"))
        np.testing.assert_array_equal(res.noisy_labels, labels)
        assert not res.flipped_mask.any()

    def test_empirical_rate_within_clt_bound(self):
        eps, n, k = 0.45, 100_000, 5
        labels = np.arange(n) % k
        res = corrupt(labels, build_symmetric(k, eps), Rng(1).stream("noise"))
        rate = res.flipped_mask.mean()
        bound = 3 * np.sqrt(eps * (1 - eps) / n)
        assert abs(rate - eps) <= bound

    def test_flip_never_touches_class_zero(self):
        labels = np.arange(50_000) % 5
        res = corrupt(labels, build_flip(5, 0.3), Rng(2).stream("noise"))
        zero = labels == 0
        assert not res.flipped_mask[zero].any()
        assert res.flipped_mask[~zero].any()

    def test_reproducible_same_seed(self):
        labels = np.arange(3000) % 3
        tm = build_asymmetric(3, 0.25)
        a = corrupt(labels, tm, Rng(7).stream("noise"))
        b = corrupt(labels, tm, Rng(7).stream("noise"))
        np.testing.assert_array_equal(a.noisy_labels, b.noisy_labels)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            corrupt(np.array([0, 5]), build_symmetric(3, 0.1), Rng(0).stream("noise"))

    def test_oracle_is_sealed_and_scores(self):
        labels = np.arange(2000) % 4
        res = corrupt(labels, build_symmetric(4, 0.3), Rng(3).stream("noise"))
        clean = res.oracle.reveal()
        with pytest.raises(ValueError):
            clean[0] = 99  # read-only
        assert res.oracle.accuracy(labels) == 1.0
        assert res.oracle.accuracy(res.noisy_labels) == pytest.approx(
            1.0 - res.flipped_mask.mean())
        assert res.oracle.restored_fraction(labels, res.flipped_mask) == 1.0

    @pytest.mark.parametrize("kind,eps", [("symmetric", 0.45), ("asymmetric", 0.3), ("flip", 0.3)])
    def test_chi_square_goodness_of_fit(self, kind, eps):
        n, k = 100_000, 5
        labels = np.arange(n) % k
        tm = build(kind, k, eps)
        res = corrupt(labels, tm, Rng(11).stream("noise"))
        chi2 = 0.0
        dof = 0
        for j in range(k):
            sel = labels == j
            observed = np.bincount(res.noisy_labels[sel], minlength=k).astype(float)
            expected = tm.rows[j] * sel.sum()
            support = expected > 0
            chi2 += (((observed - expected) ** 2)[support] / expected[support]).sum()
            dof += int(support.sum()) - 1
            assert observed[~support].sum() == 0  # zero-probability cells stay empty
        assert chi2 <= stats.chi2.ppf(0.99, dof)
