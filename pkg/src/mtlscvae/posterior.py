"""Monte-Carlo posterior predictive inference from well measurements alone.

At inference time neither the field nor the label is known, so the encoder
cannot be used. Latent draws come from the prior ``N(0, I)`` and are
decoded together with the measurements.
"""

from dataclasses import dataclass

import numpy as np

from ._random import substream
from ._validation import on_simplex
from .errors import DataError, NumericalError, ShapeError


@dataclass
class PosteriorConfig:
    n_mc: int = 100
    seed: int = 0
    store_full_cov: bool = False
    chunk: int = 2048

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    std: np.ndarray = None
    cov: np.ndarray = None
    samples: np.ndarray = None


def draw_latents(cfg, n_instances, latent_dim):
    """Prior draws ``[n_instances, n_mc, latent_dim]`` from the ``mc`` substream."""
    rng = substream(cfg.seed, "mc")
    return rng.standard_normal((n_instances, cfg.n_mc, latent_dim))


def _prepare(net, params, m):
    if not params.all_finite():
        raise NumericalError("parameters contain non-finite values")
    m = np.asarray(m, dtype=params.dtype)
    single = m.ndim == 1
    m = np.atleast_2d(m)
    if m.shape[1] != net.arch.n_wells:
        raise ShapeError(f"expected {net.arch.n_wells} measurements, got {m.shape[1]}")
    return m, single


def _decode_all(decode, net, params, m, cfg, z=None):
    m, single = _prepare(net, params, m)
    n = m.shape[0]
    if z is None:
        z = draw_latents(cfg, n, net.arch.latent_dim)
    z = z.astype(params.dtype).reshape(n * cfg.n_mc, -1)
    m_rep = np.repeat(m, cfg.n_mc, axis=0)
    outs = [decode(params, z[s:s + cfg.chunk], m_rep[s:s + cfg.chunk])
            for s in range(0, z.shape[0], cfg.chunk)]
    out = np.concatenate(outs).reshape((n, cfg.n_mc) + outs[0].shape[1:])
    return out[0] if single else out


def sample_posterior_x(net, params, m, cfg=None, z=None):
    """Draw ``n_mc`` fields from p(x | m): ``[n_mc, h, w]`` (or ``[n, n_mc, h, w]`` for a batch)."""
    cfg = cfg or PosteriorConfig()
    return _decode_all(lambda p, zz, mm: net.decode_x(p, zz, mm)[0], net, params, m, cfg, z)


def sample_posterior_y(net, params, m, cfg=None, z=None):
    """Draw ``n_mc`` class-probability vectors from p(y | m)."""
    cfg = cfg or PosteriorConfig()
    return _decode_all(lambda p, zz, mm: net.decode_y(p, zz, mm), net, params, m, cfg, z)


def summarize(samples, full_cov=False, keep_samples=False):
    """Sample mean, ``1/(n-1)`` covariance (diagonal unless ``full_cov``) and std.

    ``samples`` is ``[n_mc, ...]``. With a single sample only the mean is
    defined and ``std``/``cov`` are ``None``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 0 or samples.shape[0] == 0:
        raise DataError("summarize needs at least one sample")
    n = samples.shape[0]
    # Shift by the first draw: exact for repeated samples and better conditioned.
    shifted = samples - samples[0]
    offset = shifted.mean(axis=0)
    mean = samples[0] + offset
    summary = PosteriorSummary(mean=mean, samples=samples if keep_samples else None)
    if n < 2:
        return summary
    dev = (shifted - offset).reshape(n, -1)
    if full_cov:
        cov = dev.T @ dev / (n - 1)
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
        summary.cov = cov
    else:
        var = np.einsum("ij,ij->j", dev, dev) / (n - 1)
    summary.std = np.sqrt(var).reshape(mean.shape)
    return summary


def classify(y_mean, tol=1e-4):
    """1-based index of the most probable class; ties go to the lowest index."""
    y_mean = np.asarray(y_mean, dtype=float)
    if not on_simplex(y_mean, tol):
        raise DataError("classify expects a probability vector")
    return np.argmax(y_mean, axis=-1) + 1


def abs_error_map(x_true, x_mean):
    x_true = np.asarray(x_true)
    x_mean = np.asarray(x_mean)
    if x_true.shape != x_mean.shape:
        raise ShapeError(f"shape mismatch {x_true.shape} vs {x_mean.shape}")
    return np.abs(x_true - x_mean)


def confidence_band(summary, k=2.0):
    """Pointwise ``mean - k*std`` and ``mean + k*std``."""
    if summary.std is None:
        raise DataError("confidence band needs at least two samples")
    return summary.mean - k * summary.std, summary.mean + k * summary.std
