"""Multi-task semi-conditional VAE: one shared encoder, two decoders.

The encoder sees the full incremental field ``x`` and the one-hot label
``y``; both decoders see only the latent draw ``z`` concatenated with the
well measurements ``m``. Training minimizes the negative multi-task ELBO

    1/2 ||x - x_hat||^2  +  alpha * CE(y, y_hat)  +  beta * KL(q(z|x,y) || N(0, I))

averaged over the minibatch, with ``L`` reparameterized latent draws per
instance.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from ._random import substream
from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class HyperParams:
    latent_dim: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    mc_samples: int = 1
    batch_size: int = 128
    patience: int = 200
    max_epochs: int = 2000
    seed: int = 0
    learning_rate: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-7
    # Multiplies gradients only; set to the training-set size K to recover
    # the K/R minibatch factor instead of the batch mean.
    objective_scale: float = 1.0

    def validate(self, n_train=None):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.learning_rate < 0 or self.objective_scale <= 0:
            raise ValueError("learning_rate must be >= 0 and objective_scale > 0")
        if n_train is not None and self.batch_size > n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds training-set size {n_train}")
        return self


@dataclass
class LatentPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var)


@dataclass
class LossBreakdown:
    total: float
    recon_term: float
    class_term: float
    kl_term: float

    def as_dict(self, prefix=""):
        return {f"{prefix}total": self.total, f"{prefix}recon": self.recon_term,
                f"{prefix}class": self.class_term, f"{prefix}kl": self.kl_term}


def kl_closed_form(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu)
    log_var = np.asarray(log_var)
    # expm1 keeps exp(lv) - 1 - lv >= 0 for tiny lv.
    return 0.5 * np.sum(np.expm1(log_var) - log_var + mu * mu, axis=-1)


def reparameterize(mu, log_var, eps):
    return mu + np.exp(0.5 * np.asarray(log_var)) * eps


@dataclass
class Architecture:
    grid_shape: tuple
    n_classes: int
    n_wells: int
    latent_dim: int = 2
    conv_filters: tuple = (32, 64)
    dense_units: int = 16
    class_units: tuple = (128, 64, 32)

    def to_dict(self):
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        d["conv_filters"] = list(self.conv_filters)
        d["class_units"] = list(self.class_units)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("grid_shape", "conv_filters", "class_units"):
            d[key] = tuple(d[key])
        return cls(**d)


class SCVAENetwork:
    """Static layer graph of the encoder and both decoders.

    All shape wiring is validated in the constructor; an inconsistent grid or
    layer size raises :class:`ShapeError` before any numerics run.
    """

    def __init__(self, arch):
        self.arch = arch
        h, w = arch.grid_shape
        if h % 4 or w % 4:
            raise ShapeError(f"grid {h}x{w} must be divisible by 4 for two stride-2 stages")
        r, n_wells, j = arch.n_classes, arch.n_wells, arch.latent_dim
        f1, f2 = arch.conv_filters

        self.label_embed = nn.Sequential(
            [nn.Dense("enc.label", h * w), nn.ReLU(), nn.Reshape("enc.label_grid", (h, w, 1))],
            (r,))
        self.encoder = nn.Sequential(
            [nn.Conv2D("enc.conv1", f1), nn.ReLU(),
             nn.Conv2D("enc.conv2", f2), nn.ReLU(),
             nn.Flatten(),
             nn.Dense("enc.hidden", arch.dense_units), nn.ReLU()],
            (h, w, 2))
        self.mu_head = nn.Sequential([nn.Dense("enc.mu", j)], (arch.dense_units,))
        self.log_var_head = nn.Sequential([nn.Dense("enc.log_var", j)], (arch.dense_units,))
        self.decoder_x = nn.Sequential(
            [nn.Dense("dec_x.dense", (h // 4) * (w // 4) * f2),
             nn.Reshape("dec_x.grid", (h // 4, w // 4, f2)),
             nn.Conv2DTranspose("dec_x.tconv1", f2), nn.ReLU(),
             nn.Conv2DTranspose("dec_x.tconv2", f1), nn.ReLU(),
             nn.Conv2DTranspose("dec_x.out", 1, size=1)],
            (j + n_wells,))
        layers = []
        for i, units in enumerate(arch.class_units):
            layers += [nn.Dense(f"dec_y.hidden{i + 1}", units), nn.ReLU()]
        layers.append(nn.Dense("dec_y.logits", r))
        self.decoder_y = nn.Sequential(layers, (j + n_wells,))
        if self.decoder_x.output_shape != (h, w, 1):
            raise ShapeError(f"reconstruction decoder yields {self.decoder_x.output_shape}")

    @property
    def parts(self):
        return (self.label_embed, self.encoder, self.mu_head, self.log_var_head,
                self.decoder_x, self.decoder_y)

    def init_params(self, rng, dtype=np.float32):
        store = nn.ParamStore(dtype)
        for part in self.parts:
            part.init_params(store, rng)
        return store

    def check_params(self, store):
        expected = {}
        for part in self.parts:
            for name, shape, _, _ in part.param_specs():
                expected[name] = tuple(shape)
        if store.shapes() != expected:
            raise ShapeError("parameter store does not match the network layout")

    # -- encoder --------------------------------------------------------------

    def encode(self, store, x, y):
        """Return ``(LatentPosterior, cache)`` for fields ``x [n,h,w]`` and labels ``y [n,r]``."""
        emb, c_emb = self.label_embed.forward(store, y)
        inp = np.concatenate([x[..., None], emb], axis=-1)
        hidden, c_enc = self.encoder.forward(store, inp)
        mu, c_mu = self.mu_head.forward(store, hidden)
        log_var, c_lv = self.log_var_head.forward(store, hidden)
        return LatentPosterior(mu, log_var), (c_emb, c_enc, c_mu, c_lv)

    def encode_backward(self, store, cache, d_mu, d_log_var):
        c_emb, c_enc, c_mu, c_lv = cache
        d_hidden = self.mu_head.backward(store, c_mu, d_mu)
        d_hidden = d_hidden + self.log_var_head.backward(store, c_lv, d_log_var)
        d_inp = self.encoder.backward(store, c_enc, d_hidden)
        self.label_embed.backward(store, c_emb, d_inp[..., 1:2])

    # -- decoders -------------------------------------------------------------

    def decode_x(self, store, z, m):
        out, cache = self.decoder_x.forward(store, np.concatenate([z, m], axis=-1))
        return out[..., 0], cache

    def decode_x_backward(self, store, cache, d_out):
        d_in = self.decoder_x.backward(store, cache, d_out[..., None])
        return d_in[:, :self.arch.latent_dim]

    def decode_y_logits(self, store, z, m):
        return self.decoder_y.forward(store, np.concatenate([z, m], axis=-1))

    def decode_y(self, store, z, m):
        logits, _ = self.decode_y_logits(store, z, m)
        return nn.softmax(logits)

    def decode_y_backward(self, store, cache, d_logits):
        d_in = self.decoder_y.backward(store, cache, d_logits)
        return d_in[:, :self.arch.latent_dim]


def elbo_loss(net, store, x, y, m, hyper, eps, compute_grad=True, batch_index=None):
    """Negative multi-task ELBO for one minibatch.

    ``eps`` holds ``L`` standard-normal draws per instance, shape
    ``[L, n, latent_dim]``. When ``compute_grad`` is true the gradients of the
    returned total (times ``hyper.objective_scale``) are accumulated into
    ``store.grads``.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    n_draws = eps.shape[0]
    post, enc_cache = net.encode(store, x, y)
    mu, log_var = post.mu, post.log_var
    sigma = np.exp(0.5 * log_var)
    z = (mu[None] + sigma[None] * eps).reshape(n_draws * n, -1)
    m_rep = np.tile(m, (n_draws, 1))
    x_hat, cx = net.decode_x(store, z, m_rep)
    logits, cy = net.decode_y_logits(store, z, m_rep)

    resid = x_hat.reshape(n_draws, n, *x.shape[1:]) - x[None]
    recon_i = 0.5 * np.sum(resid.reshape(n_draws, n, -1) ** 2, axis=-1).mean(axis=0)
    logp = nn.log_softmax(logits).reshape(n_draws, n, -1)
    class_i = -np.sum(y[None] * logp, axis=-1).mean(axis=0)
    kl_i = kl_closed_form(mu, log_var)

    recon, cls, kl = float(recon_i.mean()), float(class_i.mean()), float(kl_i.mean())
    total = recon + hyper.alpha * cls + hyper.beta * kl
    if not math.isfinite(total):
        bad = [k for k, v in (("recon", recon), ("class", cls), ("kl", kl)) if not math.isfinite(v)]
        where = "" if batch_index is None else f" in batch {batch_index}"
        raise NumericalError(f"non-finite loss{where}: term(s) {', '.join(bad)}")
    breakdown = LossBreakdown(total, recon, cls, kl)
    if not compute_grad:
        return breakdown

    scale = hyper.objective_scale / (n * n_draws)
    d_xhat = (resid * scale).reshape(x_hat.shape).astype(x_hat.dtype, copy=False)
    probs = np.exp(logp).reshape(logits.shape)
    d_logits = (hyper.alpha * scale) * (probs - np.tile(y, (n_draws, 1)))
    d_z = net.decode_x_backward(store, cx, d_xhat) + net.decode_y_backward(store, cy, d_logits)
    d_z = d_z.reshape(n_draws, n, -1)
    kl_scale = hyper.beta * hyper.objective_scale / n
    d_mu = d_z.sum(axis=0) + kl_scale * mu
    d_log_var = (d_z * eps).sum(axis=0) * (0.5 * sigma) + kl_scale * 0.5 * (np.exp(log_var) - 1.0)
    net.encode_backward(store, enc_cache, d_mu, d_log_var)
    return breakdown


def _average(parts):
    weights = np.array([w for w, _ in parts], dtype=float)
    weights /= weights.sum()
    fields = ("total", "recon_term", "class_term", "kl_term")
    return LossBreakdown(*(float(sum(wt * getattr(b, f) for wt, (_, b) in zip(weights, parts)))
                           for f in fields))


def evaluate_loss(net, store, data, hyper, eps, batch_size=512):
    """Loss over a whole data set in fixed order with pre-drawn ``eps``."""
    x, y, m = data
    parts = []
    for start in range(0, x.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        b = elbo_loss(net, store, x[sl], y[sl], m[sl], hyper, eps[:, sl], compute_grad=False)
        parts.append((x[sl].shape[0], b))
    return _average(parts)


@dataclass
class TrainResult:
    params: nn.ParamStore
    history: list = field(default_factory=list)
    best_epoch: int = 0
    optimizer: object = None


def fit_network(net, params, train_data, val_data, hyper, callback=None):
    """Minibatch ADAM training with early stopping on the validation total.

    ``train_data`` and ``val_data`` are ``(x, y_onehot, m)`` array triples.
    Returns a :class:`TrainResult` holding the best-validation parameters.
    """
    x_tr, y_tr, m_tr = train_data
    n_train = x_tr.shape[0]
    n_val = val_data[0].shape[0]
    if n_train == 0 or n_val == 0:
        raise ValueError("training and validation sets must be non-empty")
    hyper.validate(n_train)
    dtype = params.dtype
    rng_train = substream(hyper.seed, "train")
    val_eps = substream(hyper.seed, "val").standard_normal(
        (hyper.mc_samples, n_val, hyper.latent_dim)).astype(dtype)

    opt = nn.Adam(params, lr=hyper.learning_rate, beta_1=hyper.beta_1,
                  beta_2=hyper.beta_2, epsilon=hyper.epsilon)
    best = params.copy()
    best_loss = math.inf
    best_epoch = 0
    history = []
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng_train.permutation(n_train)
        parts = []
        for b, start in enumerate(range(0, n_train, hyper.batch_size)):
            idx = np.sort(order[start:start + hyper.batch_size])
            eps = rng_train.standard_normal((hyper.mc_samples, idx.size, hyper.latent_dim)).astype(dtype)
            params.zero_grad()
            try:
                loss = elbo_loss(net, params, x_tr[idx], y_tr[idx], m_tr[idx], hyper, eps,
                                 batch_index=b)
                opt.step(params)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}", best_params=best) from exc
            parts.append((idx.size, loss))
        train_loss = _average(parts)
        val_loss = evaluate_loss(net, params, val_data, hyper, val_eps)
        if not math.isfinite(val_loss.total):
            raise NumericalError(f"epoch {epoch}: non-finite validation loss", best_params=best)
        row = {"epoch": epoch, **train_loss.as_dict("train_"), **val_loss.as_dict("val_")}
        history.append(row)
        if val_loss.total < best_loss:
            best_loss = val_loss.total
            best_epoch = epoch
            best.assign(params)
        logger.info("epoch %d train %.5g val %.5g (best %.5g @ %d)",
                    epoch, train_loss.total, val_loss.total, best_loss, best_epoch)
        if callback is not None:
            callback(row)
        if epoch - best_epoch >= hyper.patience:
            break
    return TrainResult(best, history, best_epoch, opt)


def instances_to_arrays(instances, dtype=np.float32):
    """Stack a list of Instances into ``(x, y, m)`` arrays."""
    if not instances:
        raise ValueError("no instances")
    x = np.stack([inst.x for inst in instances]).astype(dtype)
    y = np.stack([inst.y for inst in instances]).astype(dtype)
    m = np.stack([inst.m for inst in instances]).astype(dtype)
    return x, y, m


def train(split, hyper, wells_count=None, arch_kwargs=None, dtype=np.float32):
    """Train a fresh network on ``split.train`` with early stopping on ``split.val``.

    Returns ``(params, history, network)``.
    """
    tr = instances_to_arrays(split.train, dtype)
    va = instances_to_arrays(split.val, dtype)
    arch = Architecture(grid_shape=tr[0].shape[1:], n_classes=tr[1].shape[1],
                        n_wells=wells_count or tr[2].shape[1], latent_dim=hyper.latent_dim,
                        **(arch_kwargs or {}))
    net = SCVAENetwork(arch)
    params = net.init_params(substream(hyper.seed, "init"), dtype)
    result = fit_network(net, params, tr, va, hyper)
    return result.params, result.history, net
