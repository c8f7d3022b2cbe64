"""Minimal differentiable layers, parameter storage and the ADAM optimizer.

Everything here works on NHWC numpy arrays. Convolutions only support
non-overlapping patches (kernel size equal to stride), which is all the
network architecture needs; this turns each convolution into one reshape
and one matrix product.

Layers are stateless descriptions: ``forward`` returns ``(output, cache)``
and ``backward`` consumes that cache, so several forward passes over the
same read-only :class:`ParamStore` may run side by side.
"""

import json
import math
import os
import tempfile

import numpy as np

from .errors import DataError, NumericalError, ShapeError

CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# Functional ops
# ----------------------------------------------------------------------------

def dense(x, weights, bias):
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weights {weights.shape} "
            f"and bias {bias.shape}")
    return x @ weights + bias


def dense_backward(x, weights, upstream):
    """Return ``(d_input, d_weights, d_bias)`` for ``dense``."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = upstream.reshape(-1, upstream.shape[-1])
    return upstream @ weights.T, x2.T @ g2, g2.sum(axis=0)


def _to_patches(x, k):
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by kernel size {k}")
    p = x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(n * (h // k) * (w // k), k * k * c)


def _from_patches(p, n, h, w, k, c):
    if k == 1:
        return p.reshape(n, h, w, c)
    x = p.reshape(n, h // k, w // k, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def conv2d(x, kernels, bias):
    """Strided convolution with kernel size == stride (no padding).

    ``kernels`` has shape ``[k, k, c_in, c_out]``; the output is
    ``[n, h/k, w/k, c_out]``.
    """
    k, k2, c_in, c_out = kernels.shape
    if k != k2 or x.ndim != 4 or x.shape[-1] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    n, h, w, _ = x.shape
    out = _to_patches(x, k) @ kernels.reshape(k * k * c_in, c_out) + bias
    return out.reshape(n, h // k, w // k, c_out)


def conv2d_backward(x, kernels, upstream):
    k, _, c_in, c_out = kernels.shape
    n, h, w, _ = x.shape
    g = upstream.reshape(-1, c_out)
    kmat = kernels.reshape(k * k * c_in, c_out)
    d_x = _from_patches(g @ kmat.T, n, h, w, k, c_in)
    d_k = (_to_patches(x, k).T @ g).reshape(kernels.shape)
    return d_x, d_k, g.sum(axis=0)


def conv2d_transpose(x, kernels, bias):
    """Transposed convolution, the adjoint of :func:`conv2d` (up to bias).

    ``kernels`` has shape ``[k, k, c_out, c_in]``, i.e. the same array used by
    ``conv2d`` mapping ``c_out -> c_in``. The output is ``[n, k*h, k*w, c_out]``.
    """
    k, k2, c_out, c_in = kernels.shape
    if k != k2 or x.ndim != 4 or x.shape[-1] != c_in:
        raise ShapeError(
            f"conv2d_transpose: input {x.shape} incompatible with kernels {kernels.shape}")
    n, h, w, _ = x.shape
    p = x.reshape(-1, c_in) @ kernels.reshape(k * k * c_out, c_in).T
    return _from_patches(p, n, h * k, w * k, k, c_out) + bias


def conv2d_transpose_backward(x, kernels, upstream):
    k, _, c_out, c_in = kernels.shape
    kmat = kernels.reshape(k * k * c_out, c_in)
    gp = _to_patches(upstream, k)
    d_x = (gp @ kmat).reshape(x.shape)
    d_k = (gp.T @ x.reshape(-1, c_in)).reshape(kernels.shape)
    return d_x, d_k, upstream.reshape(-1, c_out).sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return np.where(x > 0, upstream, 0)


def softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_backward(out, upstream):
    """Vector-Jacobian product of softmax given its output ``out``."""
    return out * (upstream - (upstream * out).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------------

class ParamStore:
    """Ordered named parameter arrays with gradient buffers of the same shape."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values = {}
        self.grads = {}

    def add(self, name, value):
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def accumulate(self, name, grad):
        self.grads[name] += grad

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def shapes(self):
        return {k: tuple(v.shape) for k, v in self.values.items()}

    def copy(self):
        new = ParamStore(self.dtype)
        for k, v in self.values.items():
            new.add(k, v)
        return new

    def astype(self, dtype):
        new = ParamStore(dtype)
        for k, v in self.values.items():
            new.add(k, v)
        return new

    def assign(self, other):
        """Copy values from ``other`` (same names and shapes) in place."""
        if other.shapes() != self.shapes():
            raise ShapeError("cannot assign parameters with different layout")
        for k in self.values:
            self.values[k][...] = other.values[k]

    def all_finite(self):
        return all(np.isfinite(v).all() for v in self.values.values())

    def n_params(self):
        return sum(v.size for v in self.values.values())


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------

class Layer:
    """Base layer. Shapes exclude the leading batch axis."""

    name = ""

    def param_specs(self):
        """Return ``[(param_name, shape, fan_in, fan_out)]``."""
        return []

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def init_params(self, store, rng):
        for pname, shape, fan_in, fan_out in self.param_specs():
            if pname.endswith(".b"):
                store.add(pname, np.zeros(shape))
            else:
                store.add(pname, glorot_uniform(rng, shape, fan_in, fan_out))

    def forward(self, store, x):
        raise NotImplementedError

    def backward(self, store, cache, upstream):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name, units):
        self.name = name
        self.units = units
        self.d_in = None

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(f"{self.name}: dense expects flat input, got {input_shape}")
        self.d_in = input_shape[0]
        return (self.units,)

    def param_specs(self):
        return [(f"{self.name}.W", (self.d_in, self.units), self.d_in, self.units),
                (f"{self.name}.b", (self.units,), self.d_in, self.units)]

    def forward(self, store, x):
        return dense(x, store[f"{self.name}.W"], store[f"{self.name}.b"]), x

    def backward(self, store, cache, upstream):
        d_x, d_w, d_b = dense_backward(cache, store[f"{self.name}.W"], upstream)
        store.accumulate(f"{self.name}.W", d_w)
        store.accumulate(f"{self.name}.b", d_b)
        return d_x


class Conv2D(Layer):
    def __init__(self, name, filters, size=2):
        self.name = name
        self.filters = filters
        self.size = size
        self.c_in = None

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.name}: conv expects (h, w, c) input, got {input_shape}")
        h, w, c = input_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} not divisible by {self.size}")
        self.c_in = c
        return (h // self.size, w // self.size, self.filters)

    def param_specs(self):
        k = self.size
        return [(f"{self.name}.K", (k, k, self.c_in, self.filters),
                 k * k * self.c_in, k * k * self.filters),
                (f"{self.name}.b", (self.filters,), 0, 0)]

    def forward(self, store, x):
        return conv2d(x, store[f"{self.name}.K"], store[f"{self.name}.b"]), x

    def backward(self, store, cache, upstream):
        d_x, d_k, d_b = conv2d_backward(cache, store[f"{self.name}.K"], upstream)
        store.accumulate(f"{self.name}.K", d_k)
        store.accumulate(f"{self.name}.b", d_b)
        return d_x


class Conv2DTranspose(Layer):
    def __init__(self, name, filters, size=2):
        self.name = name
        self.filters = filters
        self.size = size
        self.c_in = None

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.name}: conv expects (h, w, c) input, got {input_shape}")
        h, w, c = input_shape
        self.c_in = c
        return (h * self.size, w * self.size, self.filters)

    def param_specs(self):
        k = self.size
        return [(f"{self.name}.K", (k, k, self.filters, self.c_in),
                 k * k * self.c_in, k * k * self.filters),
                (f"{self.name}.b", (self.filters,), 0, 0)]

    def forward(self, store, x):
        return conv2d_transpose(x, store[f"{self.name}.K"], store[f"{self.name}.b"]), x

    def backward(self, store, cache, upstream):
        d_x, d_k, d_b = conv2d_transpose_backward(cache, store[f"{self.name}.K"], upstream)
        store.accumulate(f"{self.name}.K", d_k)
        store.accumulate(f"{self.name}.b", d_b)
        return d_x


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name

    def forward(self, store, x):
        return relu(x), x

    def backward(self, store, cache, upstream):
        return relu_backward(cache, upstream)


class Softmax(Layer):
    def __init__(self, name="softmax"):
        self.name = name

    def forward(self, store, x):
        out = softmax(x)
        return out, out

    def backward(self, store, cache, upstream):
        return softmax_backward(cache, upstream)


class Reshape(Layer):
    def __init__(self, name, shape):
        self.name = name
        self.shape = tuple(shape)

    def output_shape(self, input_shape):
        if math.prod(input_shape) != math.prod(self.shape):
            raise ShapeError(f"{self.name}: cannot reshape {input_shape} to {self.shape}")
        return self.shape

    def forward(self, store, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, store, cache, upstream):
        return upstream.reshape(cache)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)

    def forward(self, store, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, store, cache, upstream):
        return upstream.reshape(cache)


class Sequential:
    """A chain of layers whose shapes are resolved at construction time."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    def param_specs(self):
        return [spec for layer in self.layers for spec in layer.param_specs()]

    def init_params(self, store, rng):
        for layer in self.layers:
            layer.init_params(store, rng)

    def forward(self, store, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input (n, {self.input_shape}), got {x.shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(store, x)
            caches.append(cache)
        return x, caches

    def backward(self, store, caches, upstream):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            upstream = layer.backward(store, cache, upstream)
        return upstream


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------

class Adam:
    """ADAM with bias correction. Gradients are read, never cleared."""

    def __init__(self, params, lr=1e-3, beta_1=0.9, beta_2=0.999, epsilon=1e-7):
        self.lr = lr
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}

    def step(self, params):
        for name, g in params.grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta_1, self.beta_2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, value in params.values.items():
            g = params.grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)).astype(value.dtype)


def adam_step(params, state):
    """Apply one ADAM update to ``params`` in place; returns ``(params, state)``."""
    state.step(params)
    return params, state


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------

class GradCheckReport(dict):
    """Mapping of parameter name to max relative error, plus the tolerance."""

    def __init__(self, errors, tolerance):
        super().__init__(errors)
        self.tolerance = tolerance

    @property
    def failed(self):
        return [k for k, e in self.items() if not e < self.tolerance]

    @property
    def passed(self):
        return not self.failed

    @property
    def max_error(self):
        return max(self.values()) if self else 0.0


def relative_error(analytic, numeric, floor=1e-7):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_and_grad, params, tolerance=1e-4, step=1e-5, max_entries=25, rng=None):
    """Compare analytic gradients with central finite differences.

    ``loss_and_grad()`` must zero ``params.grads``, fill them, and return the
    scalar loss. At most ``max_entries`` randomly chosen entries are probed
    per parameter. Use a float64 store; float32 differences are meaningless
    at this step size.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    loss_and_grad()
    analytic = {k: g.copy() for k, g in params.grads.items()}
    errors = {}
    for name, value in params.values.items():
        flat = value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_and_grad()
            flat[i] = orig - step
            down = loss_and_grad()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric))
        errors[name] = worst
    loss_and_grad()
    return GradCheckReport(errors, tolerance)


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def _atomic_write(path, data, mode="wb"):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(arrays):
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype="<f4").reshape(-1) for a in arrays]).tobytes()


def save_checkpoint(directory, params, meta=None, optimizer=None):
    """Write ``model.json`` and ``model.f32`` (and ``adam.f32`` if given)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32",
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in params.values.items()],
        "meta": meta or {},
    }
    if optimizer is not None:
        manifest["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "beta_1": optimizer.beta_1,
                            "beta_2": optimizer.beta_2, "epsilon": optimizer.epsilon}
        _atomic_write(os.path.join(directory, "adam.f32"),
                      _pack([optimizer.m[k] for k in params] + [optimizer.v[k] for k in params]))
    _atomic_write(os.path.join(directory, "model.f32"), _pack(params.values.values()))
    _atomic_write(os.path.join(directory, "model.json"),
                  json.dumps(manifest, indent=2, sort_keys=True), mode="w")


def _read_manifest(directory):
    path = os.path.join(directory, "model.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no checkpoint manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed checkpoint manifest {path}: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(directory, dtype=np.float32, with_optimizer=False):
    """Return ``(params, meta)`` or ``(params, meta, adam)``."""
    manifest = _read_manifest(directory)
    payload = np.fromfile(os.path.join(directory, "model.f32"), dtype="<f4")
    total = sum(math.prod(layer["shape"]) for layer in manifest["layers"])
    if payload.size != total:
        raise DataError(f"{directory}: model.f32 holds {payload.size} values, manifest expects {total}")
    params = ParamStore(dtype)
    offset = 0
    for layer in manifest["layers"]:
        size = math.prod(layer["shape"])
        params.add(layer["name"], payload[offset:offset + size].reshape(layer["shape"]))
        offset += size
    meta = manifest.get("meta", {})
    if not with_optimizer:
        return params, meta
    adam = None
    if "adam" in manifest:
        cfg = manifest["adam"]
        adam = Adam(params, lr=cfg["lr"], beta_1=cfg["beta_1"], beta_2=cfg["beta_2"],
                    epsilon=cfg["epsilon"])
        adam.t = cfg["t"]
        moments = np.fromfile(os.path.join(directory, "adam.f32"), dtype="<f4")
        if moments.size != 2 * total:
            raise DataError(f"{directory}: adam.f32 size mismatch")
        offset = 0
        for bank in (adam.m, adam.v):
            for name in params:
                size = params[name].size
                bank[name][...] = moments[offset:offset + size].reshape(params[name].shape)
                offset += size
    return params, meta, adam
