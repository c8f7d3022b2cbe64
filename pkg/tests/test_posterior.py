import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mtlscvae.errors import DataError, NumericalError, ShapeError
from mtlscvae.posterior import (PosteriorConfig, abs_error_map, classify, confidence_band,
                                draw_latents, sample_posterior_x, sample_posterior_y, summarize)

from conftest import random_params, toy_network


@pytest.fixture
def trained(rng):
    net = toy_network(r=4, n_wells=3)
    return net, random_params(net, rng, dtype=np.float64)


class TestSummarize:
    def test_two_point_case(self):
        s = summarize([[0.0, 0.0], [2.0, 2.0]], full_cov=True)
        np.testing.assert_array_equal(s.mean, [1.0, 1.0])
        np.testing.assert_array_equal(s.cov, [[2.0, 2.0], [2.0, 2.0]])
        np.testing.assert_array_equal(s.std, [np.sqrt(2.0), np.sqrt(2.0)])

    def test_repeated_sample(self, rng):
        x = rng.standard_normal((3, 4))
        s = summarize(np.repeat(x[None], 5, axis=0))
        assert np.all(s.std == 0)
        np.testing.assert_allclose(s.mean, x, rtol=1e-15)

    def test_std_is_sqrt_diag(self, rng):
        s = summarize(rng.standard_normal((30, 6)), full_cov=True)
        np.testing.assert_array_equal(s.std, np.sqrt(np.diag(s.cov)))

    def test_diagonal_matches_full(self, rng):
        samples = rng.standard_normal((20, 3, 2))
        a = summarize(samples)
        b = summarize(samples, full_cov=True)
        assert a.cov is None
        np.testing.assert_allclose(a.std, b.std, rtol=1e-12)
        np.testing.assert_allclose(b.cov, np.cov(samples.reshape(20, -1), rowvar=False),
                                   rtol=1e-12)

    def test_single_sample_mean_only(self):
        s = summarize([[1.0, 2.0]])
        assert s.std is None and s.cov is None
        with pytest.raises(DataError):
            confidence_band(s)

    def test_empty(self):
        with pytest.raises(DataError):
            summarize(np.zeros((0, 3)))

    def test_keep_samples(self, rng):
        x = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(summarize(x, keep_samples=True).samples, x)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 5)),
                      elements=st.floats(-100, 100)), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, samples, rnd):
        order = list(range(samples.shape[0]))
        rnd.shuffle(order)
        a = summarize(samples, full_cov=True)
        b = summarize(samples[order], full_cov=True)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.cov, b.cov, rtol=1e-9, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 40), st.just(4)),
                      elements=st.floats(0.001, 1.0)))
    def test_class_covariance_psd(self, raw):
        probs = raw / raw.sum(axis=1, keepdims=True)
        s = summarize(probs, full_cov=True)
        np.testing.assert_allclose(s.cov, s.cov.T, rtol=0, atol=0)
        assert np.linalg.eigvalsh(s.cov).min() >= -1e-8
        assert abs(s.mean.sum() - 1.0) <= 1e-6

    def test_confidence_band(self):
        lo, hi = confidence_band(summarize([[0.0], [2.0]]), k=2.0)
        np.testing.assert_allclose(lo, [1 - 2 * np.sqrt(2)])
        np.testing.assert_allclose(hi, [1 + 2 * np.sqrt(2)])


class TestClassify:
    def test_examples(self):
        assert classify([0.1, 0.2, 0.3, 0.4]) == 4
        assert classify([0.5, 0.5]) == 1
        assert classify([0.2, 0.4, 0.4]) == 2
        assert classify([0.25, 0.25, 0.25, 0.25]) == 1

    def test_batched(self):
        np.testing.assert_array_equal(classify([[0.7, 0.3], [0.3, 0.7], [0.5, 0.5]]), [1, 2, 1])

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2 - 1e-3], [0.3, 0.3]])
    def test_off_simplex(self, bad):
        with pytest.raises(DataError):
            classify(bad)

    def test_tolerance(self):
        assert classify([0.50004, 0.5]) == 1


class TestAbsError:
    def test_identical(self, rng):
        x = rng.standard_normal((4, 4))
        assert np.all(abs_error_map(x, x) == 0)

    def test_zero_truth(self, rng):
        x = rng.standard_normal((4, 4))
        np.testing.assert_array_equal(abs_error_map(np.zeros_like(x), x), np.abs(x))

    def test_elementwise(self, rng):
        a, b = rng.standard_normal((2, 3, 5))
        ref = np.array([[abs(a[i, j] - b[i, j]) for j in range(5)] for i in range(3)])
        np.testing.assert_array_equal(abs_error_map(a, b), ref)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            abs_error_map(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSampling:
    def test_shapes_and_default(self, trained, rng):
        net, params = trained
        m = rng.standard_normal(3)
        assert PosteriorConfig().n_mc == 100
        assert sample_posterior_x(net, params, m).shape == (100, 8, 8)
        ys = sample_posterior_y(net, params, m, PosteriorConfig(n_mc=7))
        assert ys.shape == (7, 4)
        np.testing.assert_allclose(ys.sum(axis=1), 1.0, atol=1e-6)
        batch = sample_posterior_x(net, params, rng.standard_normal((2, 3)), PosteriorConfig(n_mc=5))
        assert batch.shape == (2, 5, 8, 8)

    def test_bit_reproducible(self, trained, rng):
        net, params = trained
        m = rng.standard_normal(3)
        cfg = PosteriorConfig(n_mc=20, seed=4)
        for fn in (sample_posterior_x, sample_posterior_y):
            assert fn(net, params, m, cfg).tobytes() == fn(net, params, m, cfg).tobytes()
        other = sample_posterior_y(net, params, m, PosteriorConfig(n_mc=20, seed=5))
        assert not np.array_equal(other, sample_posterior_y(net, params, m, cfg))

    def test_chunking_invariant(self, trained, rng):
        net, params = trained
        m = rng.standard_normal((3, 3))
        a = sample_posterior_y(net, params, m, PosteriorConfig(n_mc=10, seed=1, chunk=4))
        b = sample_posterior_y(net, params, m, PosteriorConfig(n_mc=10, seed=1))
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_mean_on_simplex(self, trained, rng):
        net, params = trained
        for n_mc in (2, 17, 300):
            ys = sample_posterior_y(net, params, rng.standard_normal(3), PosteriorConfig(n_mc=n_mc))
            assert abs(summarize(ys).mean.sum() - 1.0) <= 1e-6

    def test_decoder_ignoring_z(self, trained, rng):
        net, params = trained
        for name in ("dec_x.dense.W", "dec_y.hidden1.W"):
            params.values[name][:2] = 0.0
        m = rng.standard_normal(3)
        xs = sample_posterior_x(net, params, m, PosteriorConfig(n_mc=6))
        ys = sample_posterior_y(net, params, m, PosteriorConfig(n_mc=6))
        assert np.all(xs == xs[0]) and np.all(ys == ys[0])

    def test_zero_decoder_uniform(self, trained, rng):
        net, params = trained
        for v in params.values.values():
            v[...] = 0
        ys = sample_posterior_y(net, params, rng.standard_normal(3), PosteriorConfig(n_mc=4))
        np.testing.assert_allclose(ys, 0.25, rtol=1e-15)

    def test_nan_parameters_rejected(self, trained, rng):
        net, params = trained
        params.values["dec_x.out.b"][0] = np.nan
        with pytest.raises(NumericalError):
            sample_posterior_x(net, params, rng.standard_normal(3))

    def test_wrong_measurement_count(self, trained, rng):
        net, params = trained
        with pytest.raises(ShapeError):
            sample_posterior_x(net, params, rng.standard_normal(4))

    def test_prior_draws(self):
        z = draw_latents(PosteriorConfig(n_mc=50_000, seed=3), 1, 2)[0]
        assert np.all(np.abs(z.mean(axis=0)) < 4 / np.sqrt(50_000))
        assert np.all(np.abs(z.std(axis=0) - 1) < 0.02)

    def test_mc_convergence(self, trained, rng):
        net, params = trained
        m = rng.standard_normal(3)
        big = sample_posterior_x(net, params, m, PosteriorConfig(n_mc=100_000, seed=1))
        small = sample_posterior_x(net, params, m, PosteriorConfig(n_mc=10_000, seed=2))
        cells = rng.choice(64, size=10, replace=False)
        big = big.reshape(100_000, -1)[:, cells]
        small = small.reshape(10_000, -1)[:, cells]
        stderr = np.sqrt(small.var(axis=0, ddof=1) / 10_000 + big.var(axis=0, ddof=1) / 100_000)
        assert np.all(np.abs(small.mean(axis=0) - big.mean(axis=0)) <= 3 * stderr)
