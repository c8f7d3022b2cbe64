"""scikit-learn style front end for the multi-task SCVAE.

``fit`` takes incremental fields and their 1-based leak-rate classes (the
encoder needs both); all prediction methods take only well measurements,
since that is all a monitoring operator observes.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._random import substream
from ._validation import check_fields, check_labels, check_measurements, check_wells
from .errors import DataError
from .pipeline import sample_wells
from .posterior import (PosteriorConfig, draw_latents, sample_posterior_x,
                        sample_posterior_y, summarize)
from .scvae import Architecture, HyperParams, SCVAENetwork, fit_network

logger = logging.getLogger(__name__)


class MTLSCVAE(ClassifierMixin, BaseEstimator):
    """Multi-task semi-conditional VAE for field reconstruction and rate classification.

    Parameters mirror :class:`~mtlscvae.scvae.HyperParams` plus the layer
    widths. ``wells`` is only needed when ``fit`` is called without explicit
    measurements. Early stopping uses ``X_val``/``y_val`` if given to
    ``fit``, otherwise a seeded ``validation_fraction`` hold-out.
    """

    def __init__(self, wells=None, n_classes=None, latent_dim=2, alpha=1.0, beta=1.0,
                 mc_samples=1, batch_size=128, patience=200, max_epochs=2000,
                 learning_rate=1e-3, beta_1=0.9, beta_2=0.999, epsilon=1e-7,
                 objective_scale=1.0, conv_filters=(32, 64), dense_units=16,
                 class_units=(128, 64, 32), validation_fraction=0.2, n_mc=100,
                 mc_seed=None, random_state=0):
        self.wells = wells
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.alpha = alpha
        self.beta = beta
        self.mc_samples = mc_samples
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.objective_scale = objective_scale
        self.conv_filters = conv_filters
        self.dense_units = dense_units
        self.class_units = class_units
        self.validation_fraction = validation_fraction
        self.n_mc = n_mc
        self.mc_seed = mc_seed
        self.random_state = random_state

    # -- fitting --------------------------------------------------------------

    def _hyper(self):
        return HyperParams(
            latent_dim=self.latent_dim, alpha=self.alpha, beta=self.beta,
            mc_samples=self.mc_samples, batch_size=self.batch_size, patience=self.patience,
            max_epochs=self.max_epochs, seed=int(self.random_state or 0),
            learning_rate=self.learning_rate, beta_1=self.beta_1, beta_2=self.beta_2,
            epsilon=self.epsilon, objective_scale=self.objective_scale)

    def _measure(self, X, M):
        if M is not None:
            return check_measurements(M)
        if self.wells is None:
            raise DataError("pass M explicitly or set wells")
        return sample_wells(X, self.wells).astype(np.float32)

    def fit(self, X, y, M=None, X_val=None, y_val=None, M_val=None, callback=None):
        X = check_fields(X)
        M = self._measure(X, M)
        r = self.n_classes or int(np.max(y))
        y = check_labels(y, r)
        if not (X.shape[0] == y.shape[0] == M.shape[0]):
            raise DataError("X, y and M must have the same number of rows")
        if self.wells is not None:
            check_wells(self.wells, X.shape[1:])
        eye = np.eye(r, dtype=np.float32)

        if X_val is None:
            n = X.shape[0]
            n_val = max(1, int(np.ceil(self.validation_fraction * n)))
            order = substream(int(self.random_state or 0), "split").permutation(n)
            val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            X_val, y_val, M_val = X[val_idx], y[val_idx], M[val_idx]
            X, y, M = X[tr_idx], y[tr_idx], M[tr_idx]
        else:
            X_val = check_fields(X_val)
            M_val = self._measure(X_val, M_val)
            y_val = check_labels(y_val, r)

        hyper = self._hyper()
        arch = Architecture(grid_shape=tuple(X.shape[1:]), n_classes=r, n_wells=M.shape[1],
                            latent_dim=self.latent_dim, conv_filters=tuple(self.conv_filters),
                            dense_units=self.dense_units, class_units=tuple(self.class_units))
        self.network_ = SCVAENetwork(arch)
        params = self.network_.init_params(substream(hyper.seed, "init"), np.float32)
        result = fit_network(self.network_, params, (X, eye[y - 1], M),
                             (X_val, eye[y_val - 1], M_val), hyper, callback=callback)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.optimizer_ = result.optimizer
        self.classes_ = np.arange(1, r + 1)
        self.n_wells_ = M.shape[1]
        self.grid_shape_ = tuple(X.shape[1:])
        return self

    # -- inference ------------------------------------------------------------

    def _config(self, n_mc=None, seed=None):
        if seed is None:
            seed = self.mc_seed if self.mc_seed is not None else self.random_state
        return PosteriorConfig(n_mc=n_mc or self.n_mc, seed=int(seed or 0))

    def predict_posterior(self, M, n_mc=None, seed=None, chunk=64):
        """MC posterior predictive summaries for each row of ``M``.

        Returns a dict with ``x_mean``/``x_std`` ``[n, h, w]``,
        ``y_samples`` ``[n, n_mc, r]`` and ``y_mean``/``y_std`` ``[n, r]``.
        Latent draws are made once for all rows, so results do not depend on
        ``chunk``.
        """
        check_is_fitted(self, "params_")
        M = check_measurements(M, self.n_wells_)
        cfg = self._config(n_mc, seed)
        n = M.shape[0]
        z = draw_latents(cfg, n, self.network_.arch.latent_dim)
        x_mean = np.empty((n,) + self.grid_shape_)
        x_std = np.empty_like(x_mean)
        y_samples = np.empty((n, cfg.n_mc, len(self.classes_)))
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            xs = sample_posterior_x(self.network_, self.params_, M[sl], cfg, z=z[sl])
            y_samples[sl] = sample_posterior_y(self.network_, self.params_, M[sl], cfg, z=z[sl])
            for j in range(xs.shape[0]):
                summ = summarize(xs[j])
                x_mean[s + j] = summ.mean
                x_std[s + j] = summ.std if summ.std is not None else 0.0
        y_mean = y_samples.mean(axis=1)
        y_std = y_samples.std(axis=1, ddof=1) if cfg.n_mc > 1 else np.zeros_like(y_mean)
        return {"x_mean": x_mean, "x_std": x_std, "y_samples": y_samples,
                "y_mean": y_mean, "y_std": y_std}

    def sample(self, m, n_mc=None, seed=None):
        """Raw posterior draws ``(x_samples [n_mc, h, w], y_samples [n_mc, r])`` for one ``m``."""
        check_is_fitted(self, "params_")
        m = check_measurements(m, self.n_wells_)[0]
        cfg = self._config(n_mc, seed)
        return (sample_posterior_x(self.network_, self.params_, m, cfg),
                sample_posterior_y(self.network_, self.params_, m, cfg))

    def posterior(self, m, n_mc=None, seed=None):
        """``(PosteriorSummary for x, PosteriorSummary for y)`` for one measurement vector."""
        xs, ys = self.sample(m, n_mc, seed)
        sx = summarize(xs, keep_samples=True)
        sy = summarize(ys, full_cov=True, keep_samples=True)
        return sx, sy

    def reconstruct(self, M, n_mc=None, seed=None):
        return self.predict_posterior(M, n_mc, seed)["x_mean"]

    def predict_proba(self, M, n_mc=None, seed=None):
        return self.predict_posterior(M, n_mc, seed)["y_mean"]

    def predict(self, M):
        proba = self.predict_proba(M)
        return self.classes_[np.argmax(proba, axis=1)]

    def encode(self, X, y, M=None):
        """Latent posterior means and log-variances ``(mu, log_var)`` for training-style inputs."""
        check_is_fitted(self, "params_")
        X = check_fields(X)
        y = check_labels(y, len(self.classes_))
        post, _ = self.network_.encode(self.params_, X, np.eye(len(self.classes_),
                                                             dtype=np.float32)[y - 1])
        return post.mu, post.log_var

    # -- persistence ----------------------------------------------------------

    def save(self, directory, extra_meta=None):
        check_is_fitted(self, "params_")
        params = self.get_params()
        for key in ("conv_filters", "class_units"):
            params[key] = list(params[key])
        if params["wells"] is not None:
            params["wells"] = [list(w) for w in params["wells"]]
        meta = {"estimator": params, "architecture": self.network_.arch.to_dict(),
                "best_epoch": self.best_epoch_, "classes": self.classes_.tolist()}
        meta.update(extra_meta or {})
        nn.save_checkpoint(directory, self.params_, meta, optimizer=self.optimizer_)

    @classmethod
    def load(cls, directory):
        params, meta = nn.load_checkpoint(directory)
        kwargs = dict(meta["estimator"])
        for key in ("conv_filters", "class_units"):
            kwargs[key] = tuple(kwargs[key])
        if kwargs.get("wells") is not None:
            kwargs["wells"] = tuple(tuple(w) for w in kwargs["wells"])
        est = cls(**kwargs)
        est.network_ = SCVAENetwork(Architecture.from_dict(meta["architecture"]))
        est.network_.check_params(params)
        est.params_ = params
        est.classes_ = np.asarray(meta["classes"])
        est.best_epoch_ = meta.get("best_epoch", 0)
        est.history_ = []
        est.optimizer_ = None
        est.n_wells_ = est.network_.arch.n_wells
        est.grid_shape_ = tuple(est.network_.arch.grid_shape)
        est.meta_ = meta
        return est
