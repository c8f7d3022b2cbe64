import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mtlscvae import nn
from mtlscvae.errors import NumericalError, ShapeError
from mtlscvae.scvae import (Architecture, HyperParams, LatentPosterior, SCVAENetwork,
                            elbo_loss, evaluate_loss, fit_network, kl_closed_form,
                            reparameterize)

from conftest import random_params, toy_batch, toy_network


def zero_params(net):
    store = net.init_params(np.random.default_rng(0), np.float64)
    for v in store.values.values():
        v[...] = 0.0
    return store


class TestShapes:
    def test_default_latent_size(self, rng):
        net = SCVAENetwork(Architecture((16, 16), 4, 5))
        store = net.init_params(rng, np.float64)
        x, y, m = toy_batch(rng, net, n=2)
        post, _ = net.encode(store, x, y)
        assert post.mu.shape == (2, 2) and post.log_var.shape == (2, 2)
        x_hat, _ = net.decode_x(store, post.mu, m)
        assert x_hat.shape == x.shape
        assert net.decode_y(store, post.mu, m).shape == (2, 4)

    def test_full_scale_wiring(self):
        net = SCVAENetwork(Architecture((160, 160), 4, 5))
        assert net.encoder.output_shape == (16,)
        assert net.decoder_x.layers[0].units == 102400
        assert net.label_embed.output_shape == (160, 160, 1)

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ShapeError):
            SCVAENetwork(Architecture((10, 12), 2, 2))

    def test_check_params(self, rng):
        a = toy_network()
        b = toy_network(n_wells=3)
        with pytest.raises(ShapeError):
            a.check_params(b.init_params(rng))


class TestZeroNetwork:
    def test_encoder_gives_standard_normal(self, rng):
        net = toy_network()
        x, y, _ = toy_batch(rng, net)
        post, _ = net.encode(zero_params(net), x, y)
        assert np.all(post.mu == 0) and np.all(post.log_var == 0)

    def test_decoder_x_zero_field(self, rng):
        net = toy_network()
        _, _, m = toy_batch(rng, net)
        x_hat, _ = net.decode_x(zero_params(net), rng.standard_normal((3, 2)), m)
        assert np.all(x_hat == 0)

    def test_decoder_y_uniform(self, rng):
        net = toy_network(r=4)
        _, _, m = toy_batch(rng, net)
        p = net.decode_y(zero_params(net), rng.standard_normal((3, 2)), m)
        np.testing.assert_allclose(p, 0.25, rtol=1e-15)

    def test_decoder_y_on_simplex(self, rng):
        net = toy_network(r=4)
        store = random_params(net, rng, scale=2.0)
        p = net.decode_y(store, rng.standard_normal((50, 2)), rng.standard_normal((50, 2)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestReparameterize:
    def test_zero_eps(self, rng):
        mu = rng.standard_normal(2)
        np.testing.assert_array_equal(reparameterize(mu, rng.standard_normal(2), np.zeros(2)), mu)

    def test_hand_value(self):
        z = reparameterize(np.zeros(2), np.full(2, 2 * math.log(2)), np.array([1.0, -1.0]))
        np.testing.assert_allclose(z, [2.0, -2.0], rtol=1e-15)

    def test_mc_mean(self, rng):
        mu, lv = np.array([0.7, -1.2]), np.array([0.3, -0.8])
        z = reparameterize(mu, lv, rng.standard_normal((100_000, 2)))
        stderr = np.exp(0.5 * lv) / math.sqrt(100_000)
        assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * stderr)

    def test_sigma_property(self):
        assert LatentPosterior(np.zeros(1), np.array([2.0])).sigma[0] == pytest.approx(math.e)


class TestKL:
    def test_prior(self):
        assert kl_closed_form(np.zeros(2), np.zeros(2)) == 0.0

    def test_hand_value(self):
        assert kl_closed_form(np.ones(2), np.zeros(2)) == pytest.approx(1.0)

    def test_monte_carlo(self, rng):
        mu, lv = np.array([0.5, -1.0]), np.array([0.4, -0.6])
        z = reparameterize(mu, lv, rng.standard_normal((400_000, 2)))
        var = np.exp(lv)
        log_q = -0.5 * np.sum((z - mu) ** 2 / var + lv + np.log(2 * np.pi), axis=1)
        log_p = -0.5 * np.sum(z ** 2 + np.log(2 * np.pi), axis=1)
        assert np.mean(log_q - log_p) == pytest.approx(kl_closed_form(mu, lv), rel=0.02)

    # entries are 0 or large enough that squares do not underflow
    entries = st.one_of(st.just(0.0), st.floats(1e-6, 5), st.floats(-5, -1e-6))

    @given(hnp.arrays(np.float64, (3,), elements=entries),
           hnp.arrays(np.float64, (3,), elements=entries))
    def test_non_negative(self, mu, lv):
        kl = kl_closed_form(mu, lv)
        assert kl >= 0
        if kl == 0:
            assert np.all(mu == 0) and np.all(lv == 0)

    def test_batched(self, rng):
        mu, lv = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(kl_closed_form(mu, lv),
                                   [kl_closed_form(a, b) for a, b in zip(mu, lv)])


class TestElbo:
    def test_additivity(self, rng):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net)
        hyper = HyperParams(alpha=0.7, beta=2.5, mc_samples=3)
        out = elbo_loss(net, store, x, y, m, hyper, rng.standard_normal((3, 3, 2)),
                        compute_grad=False)
        assert out.total == pytest.approx(out.recon_term + 0.7 * out.class_term
                                          + 2.5 * out.kl_term, abs=1e-9)

    def test_perfect_fit_stub(self, rng, monkeypatch):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net)
        n = x.shape[0]
        monkeypatch.setattr(net, "encode", lambda s, xx, yy: (
            LatentPosterior(np.zeros((n, 2)), np.zeros((n, 2))), None))
        monkeypatch.setattr(net, "decode_x", lambda s, z, mm: (np.tile(x, (z.shape[0] // n, 1, 1)),
                                                               None))
        monkeypatch.setattr(net, "decode_y_logits", lambda s, z, mm: (
            np.tile(np.where(y > 0, 0.0, -1e4), (z.shape[0] // n, 1)), None))
        out = elbo_loss(net, store, x, y, m, HyperParams(), rng.standard_normal((1, n, 2)),
                        compute_grad=False)
        assert (out.recon_term, out.class_term, out.kl_term) == (0.0, 0.0, 0.0)

    def test_batch_equals_instance_average(self, rng):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net, n=5)
        hyper = HyperParams(mc_samples=2, alpha=1.3, beta=0.6)
        eps = rng.standard_normal((2, 5, 2))
        batch = elbo_loss(net, store, x, y, m, hyper, eps, compute_grad=False)
        singles = [elbo_loss(net, store, x[i:i + 1], y[i:i + 1], m[i:i + 1], hyper,
                             eps[:, i:i + 1], compute_grad=False) for i in range(5)]
        for attr in ("total", "recon_term", "class_term", "kl_term"):
            ref = np.mean([getattr(s, attr) for s in singles])
            assert getattr(batch, attr) == pytest.approx(ref, rel=1e-6)

    def test_independent_recomputation(self, rng):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net, n=2)
        eps = rng.standard_normal((1, 2, 2))
        out = elbo_loss(net, store, x, y, m, HyperParams(), eps, compute_grad=False)
        post, _ = net.encode(store, x, y)
        z = post.mu + np.exp(post.log_var / 2) * eps[0]
        x_hat, _ = net.decode_x(store, z, m)
        p = net.decode_y(store, z, m)
        recon = np.mean(0.5 * np.sum((x - x_hat) ** 2, axis=(1, 2)))
        cls = np.mean(-np.sum(y * np.log(p), axis=1))
        kl = np.mean(0.5 * np.sum(np.exp(post.log_var) + post.mu ** 2 - 1 - post.log_var, axis=1))
        assert out.recon_term == pytest.approx(recon, rel=1e-10)
        assert out.class_term == pytest.approx(cls, rel=1e-10)
        assert out.kl_term == pytest.approx(kl, rel=1e-10)

    @pytest.mark.parametrize("alpha,beta,draws", [(1.0, 1.0, 1), (0.5, 2.0, 3)])
    def test_gradient_check(self, rng, alpha, beta, draws):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net, n=3)
        hyper = HyperParams(alpha=alpha, beta=beta, mc_samples=draws)
        eps = rng.standard_normal((draws, 3, 2))

        def closure():
            store.zero_grad()
            return elbo_loss(net, store, x, y, m, hyper, eps).total

        report = nn.grad_check(closure, store, tolerance=1e-3, rng=rng)
        assert report.passed, {k: report[k] for k in report.failed}

    def test_objective_scale_multiplies_gradients_only(self, rng):
        net = toy_network()
        x, y, m = toy_batch(rng, net)
        eps = rng.standard_normal((1, 3, 2))
        grads = []
        totals = []
        for scale in (1.0, 4.0):
            store = random_params(net, np.random.default_rng(3))
            totals.append(elbo_loss(net, store, x, y, m, HyperParams(objective_scale=scale),
                                    eps).total)
            grads.append(store.grads)
        assert totals[0] == totals[1]
        for k in grads[0]:
            np.testing.assert_allclose(grads[1][k], 4.0 * grads[0][k], rtol=1e-10, atol=1e-14)

    def test_alpha_zero_leaves_class_decoder_untouched(self, rng):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net)
        elbo_loss(net, store, x, y, m, HyperParams(alpha=0.0), rng.standard_normal((1, 3, 2)))
        dec_y = [k for k in store if k.startswith("dec_y.")]
        assert dec_y and all(not store.grads[k].any() for k in dec_y)
        assert store.grads["dec_x.dense.W"].any()

    def test_non_finite_loss(self, rng):
        net = toy_network()
        store = random_params(net, rng)
        x, y, m = toy_batch(rng, net)
        x[0, 0, 0] = np.inf
        with pytest.raises(NumericalError, match="batch 4.*recon"):
            elbo_loss(net, store, x, y, m, HyperParams(), rng.standard_normal((1, 3, 2)),
                      batch_index=4)

    def test_empty_batch(self, rng):
        net = toy_network()
        with pytest.raises(ValueError):
            elbo_loss(net, random_params(net, rng), np.zeros((0, 8, 8)), np.zeros((0, 2)),
                      np.zeros((0, 2)), HyperParams(), np.zeros((1, 0, 2)))


def toy_data(rng, net, n):
    x, y, m = toy_batch(rng, net, n)
    return x.astype(np.float32), y.astype(np.float32), m.astype(np.float32)


class TestTraining:
    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            HyperParams(batch_size=64).validate(10)
        with pytest.raises(ValueError):
            HyperParams(beta=0.0).validate()
        with pytest.raises(ValueError):
            HyperParams(alpha=-1.0).validate()
        assert HyperParams(batch_size=10).validate(10)

    def test_stalled_optimizer_stops_after_two_epochs(self, rng):
        net = toy_network()
        hyper = HyperParams(patience=1, max_epochs=10, learning_rate=0.0, batch_size=4)
        params = net.init_params(rng)
        res = fit_network(net, params, toy_data(rng, net, 12), toy_data(rng, net, 5), hyper)
        assert len(res.history) == 2
        assert res.best_epoch == 1

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            net = toy_network()
            hyper = HyperParams(batch_size=4, max_epochs=6, seed=11)
            res = fit_network(net, net.init_params(np.random.default_rng(1)),
                              toy_data(rng, net, 12), toy_data(rng, net, 5), hyper)
            runs.append(res)
        assert runs[0].history == runs[1].history
        for k in runs[0].params:
            assert runs[0].params[k].tobytes() == runs[1].params[k].tobytes()

    def test_restores_best_not_last(self, rng):
        net = toy_network()
        train = toy_data(rng, net, 16)
        val = toy_data(rng, net, 6)
        hyper = HyperParams(batch_size=4, max_epochs=25, patience=25, learning_rate=0.05, seed=2)
        res = fit_network(net, net.init_params(np.random.default_rng(0)), train, val, hyper)
        totals = [row["val_total"] for row in res.history]
        assert res.best_epoch == int(np.argmin(totals)) + 1
        val_eps = __import__("mtlscvae._random", fromlist=["substream"]).substream(
            2, "val").standard_normal((1, 6, 2)).astype(np.float32)
        again = evaluate_loss(net, res.params, val, hyper, val_eps)
        assert again.total == pytest.approx(min(totals), rel=1e-5)

    def test_history_columns(self, rng):
        net = toy_network()
        hyper = HyperParams(batch_size=4, max_epochs=2)
        res = fit_network(net, net.init_params(rng), toy_data(rng, net, 8), toy_data(rng, net, 4),
                          hyper)
        assert list(res.history[0]) == ["epoch", "train_total", "train_recon", "train_class",
                                        "train_kl", "val_total", "val_recon", "val_class",
                                        "val_kl"]

    def test_divergence_keeps_last_good(self, rng):
        net = toy_network()
        train = toy_data(rng, net, 8)
        train[0][3, 0, 0] = np.nan
        hyper = HyperParams(batch_size=8, max_epochs=3)
        with pytest.raises(NumericalError) as info:
            fit_network(net, net.init_params(rng), train, toy_data(rng, net, 4), hyper)
        assert info.value.best_params is not None
        assert info.value.best_params.all_finite()
