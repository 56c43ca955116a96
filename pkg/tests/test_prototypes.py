import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from protonesy.prototypes import (
    LABELLED,
    ZERO_SHOT,
    CentroidBank,
    MissingCentroidError,
    center_of_belief,
    chi2_quantile,
    compute_centroids,
    distance_softmax,
    head_backward,
    init_unlabelled_centroids,
    softmax_neg,
    zero_shot_scale,
)


def bank_from(rows, statuses=None):
    rows = np.asarray(rows, dtype=float)
    bank = CentroidBank.empty([rows.shape[0]], [rows.shape[1]])
    for c, r in enumerate(rows):
        bank.set_centroid(0, c, r, (statuses or [LABELLED] * len(rows))[c])
    return bank


def bisect_chi2(m, p):
    # oracle: plain bisection on scipy's regularized lower incomplete gamma
    lo, hi = 0.0, 10.0 * m + 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.gammainc(m / 2.0, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestCentroids:
    def test_singleton(self):
        np.testing.assert_array_equal(compute_centroids({3: [[1.5, -2.0]]})[3], [1.5, -2.0])

    def test_midpoint(self):
        np.testing.assert_allclose(compute_centroids({0: [[0, 0], [2, 2]]})[0], [1, 1])

    def test_componentwise_mean(self):
        np.testing.assert_allclose(compute_centroids({0: [[1, 0], [0, 1], [2, 2]]})[0], [1, 1])

    def test_empty_support(self):
        with pytest.raises(ValueError):
            compute_centroids({0: np.zeros((0, 2))})

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_centroids({0: [[1, 0]], 1: [[1, 0, 0]]})


class TestDistanceSoftmax:
    def test_equidistant_is_uniform(self):
        bank = bank_from([[1, 0], [0, 1], [-1, 0], [0, -1]])
        np.testing.assert_allclose(distance_softmax([0, 0], bank, 0), 0.25, atol=1e-15)

    def test_reference_distances(self):
        y = softmax_neg(np.array([2.0, 3.0, 4.0]))
        np.testing.assert_allclose(y, [0.6652, 0.2447, 0.0900], atol=1e-4)
        e = np.exp([-2.0, -3.0, -4.0])
        np.testing.assert_allclose(y, e / e.sum(), rtol=1e-14)

    def test_on_centroid(self):
        bank = bank_from([[0, 0], [math.sqrt(20), 0], [0, 5]])
        assert distance_softmax([0, 0], bank, 0)[0] > 0.999

    def test_missing_centroid(self):
        bank = CentroidBank.empty([3], [2])
        bank.set_centroid(0, 0, [0, 0])
        with pytest.raises(MissingCentroidError):
            distance_softmax([0, 0], bank, 0)

    def test_far_embeddings_do_not_overflow(self):
        bank = bank_from([[0.0], [1.0]])
        y = distance_softmax([1e6], bank, 0)
        assert np.all(np.isfinite(y))
        assert y[1] == pytest.approx(1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_normalised_and_shift_invariant(self, d2, shift):
        d2 = np.array(d2)
        y = softmax_neg(d2)
        assert abs(y.sum() - 1) < 1e-9
        np.testing.assert_allclose(softmax_neg(d2 + shift), y, atol=1e-9)


class TestCenterOfBelief:
    def test_one_hot(self):
        bank = bank_from([[1, 2], [3, 4]])
        np.testing.assert_array_equal(center_of_belief(bank, 0, [0, 1]), [3, 4])

    def test_midpoint(self):
        np.testing.assert_allclose(center_of_belief(bank_from([[0, 0], [2, 2]]), 0, [0.5, 0.5]), [1, 1])

    def test_basis(self):
        y = [0.6652, 0.2447, 0.0900]
        np.testing.assert_allclose(center_of_belief(bank_from(np.eye(3)), 0, y), y)


def fd(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestHeadBackward:
    def test_zero_upstream(self):
        bank = bank_from(np.random.default_rng(0).standard_normal((3, 4)))
        gz, gc = head_backward(np.ones(4), bank, 0, np.zeros(3))
        np.testing.assert_array_equal(gz, 0)
        np.testing.assert_array_equal(gc, 0)

    def test_uniform_constant_upstream_cancels(self):
        bank = bank_from([[1, 0], [0, 1], [-1, 0], [0, -1]])
        gz, _ = head_backward([0, 0], bank, 0, np.full(4, 3.7))
        np.testing.assert_allclose(gz, 0, atol=1e-15)

    def test_closed_form_and_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            h, m = int(rng.integers(2, 7)), int(rng.integers(1, 9))
            bank = bank_from(0.8 * rng.standard_normal((h, m)))
            z = 0.8 * rng.standard_normal(m)
            w = rng.standard_normal(h)

            def loss(zz, cc=None):
                b = bank if cc is None else bank_from(cc)
                return float(w @ np.log(distance_softmax(zz, b, 0)))

            y = distance_softmax(z, bank, 0)
            g = w / y
            gz, gc = head_backward(z, bank, 0, g)
            cents = bank.centroids[0]
            closed = 2 * sum(g[c] * y[c] * (cents[c] - y @ cents) for c in range(h))
            np.testing.assert_allclose(gz, closed, rtol=1e-12, atol=1e-13)
            num_z = fd(loss, z)
            num_c = fd(lambda cc: loss(z, cc), cents)
            assert np.linalg.norm(gz - num_z) <= 1e-6 * max(np.linalg.norm(num_z), 1e-4)
            assert np.linalg.norm(gc - num_c) <= 1e-6 * max(np.linalg.norm(num_c), 1e-4)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        bank = bank_from(rng.standard_normal((4, 3)))
        zs, gs = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
        gz, gc = head_backward(zs, bank, 0, gs)
        for i in range(5):
            a, b = head_backward(zs[i], bank, 0, gs[i])
            np.testing.assert_allclose(gz[i], a, rtol=1e-13)
            np.testing.assert_allclose(gc[i], b, rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            head_backward(np.zeros(2), bank_from(np.eye(3)), 0, np.zeros(3))


class TestChi2Quantile:
    @pytest.mark.parametrize("m,p,expected", [(1, 0.99, 6.635), (2, 0.5, 1.3863), (10, 0.99, 23.209)])
    def test_reference_values(self, m, p, expected):
        q = chi2_quantile(m, p)
        assert abs(q - expected) < 1e-3
        assert abs(q - bisect_chi2(m, p)) < 1e-6

    def test_two_dof_closed_form(self):
        for p in (0.1, 0.5, 0.9, 0.999):
            assert chi2_quantile(2, p) == pytest.approx(-2 * math.log(1 - p), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 4096), st.floats(1e-6, 1 - 1e-6))
    def test_matches_scipy(self, m, p):
        ref = stats.chi2.ppf(p, m)
        assert chi2_quantile(m, p) == pytest.approx(ref, abs=1e-6, rel=1e-9)

    @pytest.mark.parametrize("m", [1, 2, 7, 64, 1000])
    def test_increasing_in_p(self, m):
        qs = [chi2_quantile(m, p) for p in np.linspace(0.01, 0.99, 50)]
        assert np.all(np.diff(qs) > 0)

    @pytest.mark.parametrize("m,p", [(0, 0.5), (4097, 0.5), (3, 0.0), (3, 1.0), (2.5, 0.5)])
    def test_invalid(self, m, p):
        with pytest.raises(ValueError):
            chi2_quantile(m, p)


class TestZeroShot:
    def test_symmetric_pair(self):
        bank = CentroidBank.empty([3], [2])
        bank.set_centroid(0, 0, [-1, 0])
        bank.set_centroid(0, 1, [1, 0])
        mu, std = zero_shot_scale(bank, 0, 0.9)
        np.testing.assert_array_equal(mu, [0, 0])
        assert std == pytest.approx(math.sqrt(1 / stats.chi2.ppf(0.9, 2)), rel=1e-9)
        out = init_unlabelled_centroids(bank, 0, 0.9, rng_seed=4)
        assert out.status[0] == [LABELLED, LABELLED, ZERO_SHOT]
        assert bank.status[0][2] != ZERO_SHOT  # input untouched

    def test_deterministic(self):
        bank = CentroidBank.empty([5], [3])
        bank.set_centroid(0, 0, [1, 2, 3])
        bank.set_centroid(0, 3, [0, -1, 2])
        a = init_unlabelled_centroids(bank, 0, rng_seed=9)
        b = init_unlabelled_centroids(bank, 0, rng_seed=9)
        np.testing.assert_array_equal(a.centroids[0], b.centroids[0])

    def test_needs_two_labelled(self):
        bank = CentroidBank.empty([3], [2])
        bank.set_centroid(0, 0, [1, 1])
        with pytest.raises(ValueError):
            init_unlabelled_centroids(bank, 0)

    @pytest.mark.parametrize("p", [0.2, 0.5, 0.9, 0.99])
    @pytest.mark.parametrize("m", [2, 16, 64])
    def test_containment(self, p, m):
        # 3 sigma per case: about 3% family-wise false alarms over 12 cases, so seeds are fixed
        n = 20000
        rng = np.random.default_rng([m, round(p * 100)])
        bank = CentroidBank.empty([n + 3], [m])
        for c in range(3):
            bank.set_centroid(0, c, rng.standard_normal(m))
        out = init_unlabelled_centroids(bank, 0, p, rng_seed=[m, round(p * 100), 1])
        labelled = out.centroids[0][:3]
        mu = labelled.mean(axis=0)
        radius2 = np.max(np.sum((labelled - mu) ** 2, axis=1))
        inside = np.mean(np.sum((out.centroids[0][3:] - mu) ** 2, axis=1) <= radius2)
        band = 3 * math.sqrt(p * (1 - p) / n)
        assert abs(inside - p) <= band
