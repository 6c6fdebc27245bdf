import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdc.gaussian import (CategoricalPosterior, DegenerateDensityError, GaussianDensity,
                          cholesky_logdet, kl_categorical, kl_gaussian, log_bayes_factor,
                          neg_entropy, posterior_over_models, prob_from_nats)

finite = st.floats(-50, 50, allow_nan=False)


def random_spd(rng, d, scale=1.0):
    a = rng.normal(size=(d, d))
    return scale * (a @ a.T / d + 0.5 * np.eye(d))


class TestGaussianDensity:
    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            GaussianDensity([0.0, 1.0], np.eye(3))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianDensity([0, 0], [[1, 0.5], [0, 1]])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="semi-definite"):
            GaussianDensity([0, 0], [[1, 2], [2, 1]])

    def test_allows_fixed_dimensions(self):
        g = GaussianDensity([0, 3], [[1, 0], [0, 0]])
        assert g.free_mask().tolist() == [True, False]
        assert g.subset([1]).mean[0] == 3


class TestNegEntropy:
    def test_unit_1d(self):
        assert neg_entropy(GaussianDensity([0], [[1]])) == pytest.approx(-1.418939, abs=1e-6)

    def test_identity_2d(self):
        assert neg_entropy(GaussianDensity(np.zeros(2), np.eye(2))) == pytest.approx(-2.837877, abs=1e-6)

    @pytest.mark.parametrize("c", [1e-3, 0.37, 2.5, 40.0])
    def test_scaled_identity_matches_determinant(self, c):
        cov = c * np.eye(3)
        direct = -0.5 * np.log(np.linalg.det(2 * np.pi * np.e * cov))
        assert neg_entropy(GaussianDensity(np.zeros(3), cov)) == pytest.approx(direct, rel=1e-12)

    def test_halving_covariance_adds_half_d_ln2(self, rng):
        cov = random_spd(rng, 5)
        a = neg_entropy(GaussianDensity(np.zeros(5), cov))
        b = neg_entropy(GaussianDensity(np.zeros(5), cov / 2))
        assert b - a == pytest.approx(2.5 * np.log(2), abs=1e-12)

    def test_jitter_rescues_near_singular(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        _, ld = cholesky_logdet(cov)
        assert np.isfinite(ld)

    def test_singular_raises(self):
        with pytest.raises(DegenerateDensityError):
            neg_entropy(GaussianDensity([0, 0], np.zeros((2, 2))))

    def test_large_dimension_stable(self, rng):
        cov = random_spd(rng, 50, scale=1e-3)
        _, ld = cholesky_logdet(cov)
        assert ld == pytest.approx(np.linalg.slogdet(cov)[1], rel=1e-10)


class TestKlGaussian:
    def test_identical_is_zero(self, rng):
        g = GaussianDensity(rng.normal(size=4), random_spd(rng, 4))
        assert abs(kl_gaussian(g, g)) < 1e-12

    def test_unit_shift(self):
        assert kl_gaussian(GaussianDensity([1], [[1]]), GaussianDensity([0], [[1]])) == pytest.approx(0.5)

    def test_monte_carlo(self):
        rng = np.random.default_rng(7)
        q = GaussianDensity(rng.normal(size=3), random_spd(rng, 3, 0.5))
        p = GaussianDensity(rng.normal(size=3), random_spd(rng, 3, 1.5))
        x = rng.multivariate_normal(q.mean, q.covariance, size=1_000_000)

        def logpdf(g, x):
            c = np.linalg.cholesky(g.covariance)
            z = np.linalg.solve(c, (x - g.mean).T)
            return -0.5 * (z * z).sum(0) - np.log(np.diag(c)).sum() - 1.5 * np.log(2 * np.pi)

        diff = logpdf(q, x) - logpdf(p, x)
        se = diff.std() / np.sqrt(diff.size)
        assert abs(kl_gaussian(q, p) - diff.mean()) < 3 * se

    def test_drops_fixed_prior_dimensions(self):
        p = GaussianDensity([0, 0], [[1, 0], [0, 0]])
        q = GaussianDensity([1, 0], [[1, 0], [0, 0]])
        assert kl_gaussian(q, p) == pytest.approx(0.5)

    def test_support_mismatch_raises(self):
        p = GaussianDensity([0, 0], [[1, 0], [0, 0]])
        q = GaussianDensity([0, 1], [[1, 0], [0, 1]])
        with pytest.raises(DegenerateDensityError):
            kl_gaussian(q, p)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            kl_gaussian(GaussianDensity([0], [[1]]), GaussianDensity([0, 0], np.eye(2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_non_negative(self, d, seed):
        r = np.random.default_rng(seed)
        q = GaussianDensity(r.normal(size=d), random_spd(r, d))
        p = GaussianDensity(r.normal(size=d), random_spd(r, d))
        assert kl_gaussian(q, p) >= -1e-9

    @pytest.mark.parametrize("s", [1e4, 1e6])
    def test_flat_prior_entropy_identity(self, s, rng):
        # with a very broad shared prior, complexity differences reduce to
        # negative-entropy differences for posteriors with a common mean
        mean = rng.normal(size=3)
        q1 = GaussianDensity(mean, random_spd(rng, 3))
        q2 = GaussianDensity(mean, random_spd(rng, 3, 0.3))
        p = GaussianDensity(np.zeros(3), s * np.eye(3))
        lhs = kl_gaussian(q1, p) - kl_gaussian(q2, p)
        rhs = neg_entropy(q1) - neg_entropy(q2)
        assert abs(lhs - rhs) < 10.0 / s


class TestKlCategorical:
    def test_one_hot_ten(self):
        p = np.zeros(10)
        p[3] = 1
        assert kl_categorical(p) == pytest.approx(2.302585, abs=1e-6)

    def test_uniform_ten(self):
        assert abs(kl_categorical(np.full(10, 0.1))) < 1e-12

    def test_two_of_ten(self):
        p = np.zeros(10)
        p[:2] = 0.5
        assert kl_categorical(p) == pytest.approx(1.609438, abs=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            CategoricalPosterior([0.5, 0.6])
        with pytest.raises(ValueError):
            CategoricalPosterior([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12).filter(lambda v: sum(v) > 0))
    def test_bounds(self, w):
        p = np.asarray(w) / sum(w)
        p = p / p.sum()
        v = kl_categorical(p)
        assert -1e-12 <= v <= np.log(len(w)) + 1e-12


class TestModelProbabilities:
    def test_log_bayes_factor(self):
        assert log_bayes_factor(3.0, 0.0) == 3.0
        assert log_bayes_factor(1.7, 1.7) == 0.0

    @pytest.mark.parametrize("nats,expected", [
        (1.64, 0.8375), (3.69, 0.9756), (2.65, 0.9341), (0.69, 0.666), (0.99, 0.729),
        (0.17, 0.542), (0.0, 0.5),
    ])
    def test_prob_from_nats(self, nats, expected):
        assert prob_from_nats(nats) == pytest.approx(expected, abs=5e-4)

    def test_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            assert prob_from_nats(1000.0) == 1.0
            assert prob_from_nats(-1000.0) == 0.0

    @given(finite, finite)
    def test_logistic_equals_two_model_softmax(self, f1, f2):
        p = posterior_over_models([f1, f2]).probabilities[0]
        assert prob_from_nats(log_bayes_factor(f1, f2)) == pytest.approx(p, abs=1e-12)

    @given(finite)
    def test_antisymmetric(self, d):
        assert prob_from_nats(d) + prob_from_nats(-d) == pytest.approx(1.0, abs=1e-12)

    def test_softmax_examples(self):
        np.testing.assert_allclose(posterior_over_models([2.0, 2.0]).probabilities, [0.5, 0.5])
        np.testing.assert_allclose(posterior_over_models([1.64, 0]).probabilities,
                                   [0.8375, 0.1625], atol=5e-4)
        np.testing.assert_allclose(posterior_over_models([0.17, 0]).probabilities,
                                   [0.5424, 0.4576], atol=5e-4)

    @given(st.lists(finite, min_size=1, max_size=10), st.floats(-1e3, 1e3))
    def test_softmax_shift_invariant(self, f, c):
        a = posterior_over_models(f).probabilities
        b = posterior_over_models(np.asarray(f) + c).probabilities
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            posterior_over_models([])
        with pytest.raises(ValueError):
            posterior_over_models([0.0, np.inf])
