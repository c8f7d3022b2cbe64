import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtlscvae.errors import DataError
from mtlscvae.estimator import MTLSCVAE

WELLS = ((1, 1), (6, 5))


def toy_fields(rng, n=40):
    y = rng.integers(1, 3, size=n)
    base = np.zeros((n, 8, 8), dtype=np.float32)
    base[:, 2:6, 2:6] = y[:, None, None] * 0.5
    return base + 0.05 * rng.standard_normal(base.shape).astype(np.float32), y


def small(**kw):
    params = dict(wells=WELLS, n_classes=2, conv_filters=(2, 3), dense_units=4,
                  class_units=(8, 6, 4), batch_size=8, max_epochs=4, patience=10, n_mc=5,
                  random_state=3)
    params.update(kw)
    return MTLSCVAE(**params)


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    X, y = toy_fields(rng)
    return small().fit(X, y), X, y


def test_get_params_and_clone():
    est = small(alpha=0.5)
    params = est.get_params()
    assert params["alpha"] == 0.5 and params["wells"] == WELLS
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "params_")


def test_defaults():
    est = MTLSCVAE()
    assert (est.latent_dim, est.batch_size, est.patience, est.n_mc) == (2, 128, 200, 100)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 2)))


def test_fit_attributes(fitted):
    est, X, _ = fitted
    assert est.classes_.tolist() == [1, 2]
    assert est.grid_shape_ == (8, 8) and est.n_wells_ == 2
    assert len(est.history_) == 4
    assert 1 <= est.best_epoch_ <= 4


def test_predictions(fitted):
    est, X, _ = fitted
    M = X[:, [1, 6], [1, 5]]
    proba = est.predict_proba(M)
    assert proba.shape == (40, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert set(est.predict(M)) <= {1, 2}
    assert est.reconstruct(M[:3]).shape == (3, 8, 8)
    post = est.predict_posterior(M[:3], n_mc=4)
    assert post["y_samples"].shape == (3, 4, 2)
    assert np.all(post["x_std"] >= 0)


def test_predict_posterior_chunk_invariant(fitted):
    est, X, _ = fitted
    M = X[:7, [1, 6], [1, 5]]
    a = est.predict_posterior(M, chunk=2)
    b = est.predict_posterior(M, chunk=64)
    np.testing.assert_allclose(a["y_mean"], b["y_mean"], rtol=1e-6)
    np.testing.assert_allclose(a["x_mean"], b["x_mean"], rtol=1e-5, atol=1e-7)


def test_single_measurement_posterior(fitted):
    est, X, _ = fitted
    sx, sy = est.posterior(X[0, [1, 6], [1, 5]])
    assert sx.mean.shape == (8, 8) and sy.cov.shape == (2, 2)
    assert sy.samples.shape == (5, 2)


def test_encode(fitted):
    est, X, y = fitted
    mu, log_var = est.encode(X[:4], y[:4])
    assert mu.shape == (4, 2) and log_var.shape == (4, 2)


def test_save_load(fitted, tmp_path):
    est, X, _ = fitted
    est.save(tmp_path, extra_meta={"tag": "t"})
    back = MTLSCVAE.load(tmp_path)
    assert back.get_params() == est.get_params()
    assert back.meta_["tag"] == "t"
    M = X[:5, [1, 6], [1, 5]]
    np.testing.assert_array_equal(back.predict_proba(M), est.predict_proba(M))


def test_explicit_validation_and_determinism():
    rng = np.random.default_rng(1)
    X, y = toy_fields(rng, 30)
    Xv, yv = toy_fields(rng, 10)
    a = small(max_epochs=3).fit(X, y, X_val=Xv, y_val=yv)
    b = small(max_epochs=3).fit(X, y, X_val=Xv, y_val=yv)
    assert a.history_ == b.history_


def test_mc_seed_does_not_touch_training():
    rng = np.random.default_rng(2)
    X, y = toy_fields(rng, 30)
    a = small(max_epochs=2, mc_seed=1).fit(X, y)
    b = small(max_epochs=2, mc_seed=99).fit(X, y)
    assert a.history_ == b.history_
    M = X[:4, [1, 6], [1, 5]]
    assert not np.array_equal(a.predict_proba(M), b.predict_proba(M))


def test_input_validation():
    rng = np.random.default_rng(3)
    X, y = toy_fields(rng, 20)
    with pytest.raises(DataError):
        small().fit(X, y[:-1])
    with pytest.raises(DataError):
        small().fit(X, y + 5)
    with pytest.raises(DataError):
        small(wells=None).fit(X, y)
    with pytest.raises(DataError):
        small(wells=((0, 0), (9, 9))).fit(X, y)
    with pytest.raises(ValueError):
        small().fit(X[:, :, :, None, None], y)
