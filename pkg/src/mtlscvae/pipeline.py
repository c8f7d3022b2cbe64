"""Turn raw pressure series into ``(x, y, m)`` training instances and persist them.

Steps, in order: optional every-third-point downsampling, single-step
differencing, one-hot class labels, well gathering, removal of snapshots
with any ``|x| > threshold`` psi, and a seeded test-first random split.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._random import substream
from ._validation import check_fields, check_wells
from .errors import DataError
from .leaksim import PressureSeries, ScenarioSpec

DATASET_VERSION = 1
SERIES_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")

# Downsampled-grid coordinates used in the reference study.
SITE_WELLS = ((117, 58), (97, 97), (107, 87), (87, 50), (58, 83))
SITE_LEAK_CELLS = ((103, 70), (96, 90), (125, 102), (109, 82))


@dataclass
class Instance:
    x: np.ndarray
    y: np.ndarray
    m: np.ndarray
    scenario_id: int = 0
    step: int = 0

    @property
    def label(self):
        """1-based class index."""
        return int(np.argmax(self.y)) + 1


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = (0.64, 0.16, 0.20)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def counts(self):
        return {name: len(self[name]) for name in SPLIT_NAMES}


# ----------------------------------------------------------------------------
# Transformations
# ----------------------------------------------------------------------------

def downsample(field, step=3, trim_cols=2):
    """Keep every ``step``-th point in both directions, then drop the last ``trim_cols`` columns.

    A 486 x 478 (x by y) grid, held as a ``[478, 486]`` row-major array,
    becomes ``[160, 162]`` and then ``[160, 160]``.
    """
    field = np.asarray(field)
    if field.ndim < 2:
        raise DataError("downsample expects a 2D field (or a stack of them)")
    h, w = field.shape[-2:]
    out_w = math.ceil(w / step) - trim_cols
    if h < step or out_w < 1:
        raise DataError(f"field {h}x{w} too small to downsample")
    return field[..., ::step, ::step][..., :out_w]


def incremental(series):
    """Single-step differences ``p[t+1] - p[t]`` of a pressure series."""
    frames = series.fields if isinstance(series, PressureSeries) else np.asarray(series)
    if frames.shape[0] < 2:
        raise DataError("need at least two frames to difference")
    return np.diff(frames, axis=0)


def filter_extremes(instances, threshold=5.0):
    """Drop instances whose field has any cell with ``|x| > threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return [inst for inst in instances if np.abs(inst.x).max(initial=0.0) <= threshold]


def one_hot(class_index, r):
    if not 1 <= class_index <= r:
        raise DataError(f"class index {class_index} outside [1, {r}]")
    out = np.zeros(r)
    out[class_index - 1] = 1.0
    return out


def sample_wells(x, wells):
    """Gather ``x`` at the well cells; equivalent to ``C @ vec(x)``.

    Works on a single ``[h, w]`` field or a stack ``[..., h, w]``.
    """
    x = np.asarray(x)
    coords = check_wells(wells, x.shape[-2:])
    rows = [r for r, _ in coords]
    cols = [c for _, c in coords]
    return x[..., rows, cols]


def split(instances, fractions=(0.64, 0.16, 0.20), seed=0):
    """Test-first seeded random split.

    The test set takes ``ceil(f_test * n)`` instances; validation then takes
    ``ceil(f_val / (f_train + f_val))`` of the remainder. Instances keep
    their original relative order inside each split.
    """
    f_tr, f_va, f_te = (float(f) for f in fractions)
    if min(f_tr, f_va, f_te) <= 0 or abs(f_tr + f_va + f_te - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} must be positive and sum to 1")
    n = len(instances)
    order = substream(seed, "split").permutation(n)
    n_test = min(n, math.ceil(f_te * n - 1e-9))
    rest = n - n_test
    n_val = min(rest, math.ceil(f_va / (f_tr + f_va) * rest - 1e-9))
    test_idx = np.sort(order[:n_test])
    val_idx = np.sort(order[n_test:n_test + n_val])
    train_idx = np.sort(order[n_test + n_val:])
    return DatasetSplit(
        train=[instances[i] for i in train_idx],
        val=[instances[i] for i in val_idx],
        test=[instances[i] for i in test_idx],
        fractions=(f_tr, f_va, f_te), seed=seed)


def make_instances(series_list, wells, n_classes, threshold=5.0, downsample_grid=False):
    """Full preprocessing from raw pressure series to filtered instances."""
    instances = []
    for sid, series in enumerate(series_list):
        frames = series.fields
        if downsample_grid:
            frames = downsample(frames)
        y = one_hot(series.spec.rate_class, n_classes)
        deltas = incremental(frames)
        meas = sample_wells(deltas, wells)
        for t in range(deltas.shape[0]):
            instances.append(Instance(deltas[t].astype(np.float32), y.astype(np.float32),
                                      meas[t].astype(np.float32), scenario_id=sid, step=t))
    return filter_extremes(instances, threshold)


class Downsampler(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`downsample` for ``[n, H, W]`` stacks."""

    def __init__(self, step=3, trim_cols=2):
        self.step = step
        self.trim_cols = trim_cols

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return downsample(np.asarray(X), self.step, self.trim_cols)


class WellSampler(TransformerMixin, BaseEstimator):
    """Map ``[n, h, w]`` fields to ``[n, M]`` well measurements."""

    def __init__(self, wells=SITE_WELLS):
        self.wells = wells

    def fit(self, X, y=None):
        X = check_fields(X, dtype=None)
        self.wells_ = check_wells(self.wells, X.shape[1:])
        self.n_features_out_ = len(self.wells_)
        return self

    def transform(self, X):
        X = check_fields(X, dtype=None)
        return sample_wells(X, self.wells)


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------

def _atomic_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj):
    _atomic_bytes(path, json.dumps(obj, indent=2, sort_keys=True).encode("utf-8"))


def _read_manifest(directory, kind_version):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing manifest: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise DataError(f"malformed manifest {path}: not an object")
    if manifest.get("format_version") != kind_version:
        raise DataError(f"{path}: unknown format_version {manifest.get('format_version')!r}")
    return manifest


def _read_payload(path, dtype, expected):
    try:
        data = np.fromfile(path, dtype=dtype)
    except FileNotFoundError:
        raise DataError(f"missing payload {path}") from None
    if data.size != expected:
        raise DataError(f"{path}: holds {data.size} values, manifest implies {expected}")
    return data


def write_dataset(split_, directory, wells, n_classes, class_rates=None, extra=None):
    """Persist a DatasetSplit as ``manifest.json`` plus raw little-endian payloads."""
    os.makedirs(directory, exist_ok=True)
    wells = check_wells(wells)
    grid = None
    for name in SPLIT_NAMES:
        for inst in split_[name]:
            grid = inst.x.shape
            break
        if grid is not None:
            break
    grid = grid or tuple(split_.meta.get("grid", (0, 0)))
    for name in SPLIT_NAMES:
        items = split_[name]
        x = np.array([i.x for i in items], dtype="<f4").reshape(len(items), *grid)
        m = np.array([i.m for i in items], dtype="<f4").reshape(len(items), len(wells))
        y = np.array([i.label - 1 for i in items], dtype="u1")
        idx = np.array([(i.scenario_id, i.step) for i in items], dtype="<i4").reshape(len(items), 2)
        if x.size and not np.array_equal(m, sample_wells(x, wells)):
            raise DataError(f"{name}: stored measurements differ from the well gather of x")
        for suffix, arr in (("x.f32", x), ("m.f32", m), ("y.u8", y), ("idx.i32", idx)):
            _atomic_bytes(os.path.join(directory, f"{name}.{suffix}"), arr.tobytes())
    manifest = {
        "format_version": DATASET_VERSION,
        "grid_h": int(grid[0]), "grid_w": int(grid[1]),
        "n_classes": int(n_classes),
        "wells": [list(w) for w in wells],
        "splits": split_.counts(),
        "dtype": "float32",
        "class_rates": list(class_rates) if class_rates is not None else None,
        "fractions": list(split_.fractions),
        "seed": split_.seed,
        "scenarios": split_.meta.get("scenarios", []),
    }
    manifest.update(extra or {})
    _write_json(os.path.join(directory, "manifest.json"), manifest)


def read_manifest(directory):
    return _read_manifest(directory, DATASET_VERSION)


def read_split_arrays(directory, name, manifest=None):
    """Load one split as ``(x, labels_1based, m, idx)`` arrays without building Instances."""
    manifest = manifest or read_manifest(directory)
    try:
        count = int(manifest["splits"][name])
        h, w = int(manifest["grid_h"]), int(manifest["grid_w"])
        n_wells = len(manifest["wells"])
        if manifest["dtype"] != "float32":
            raise DataError(f"unsupported dtype {manifest['dtype']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed dataset manifest in {directory}: {exc}") from None
    base = os.path.join(directory, name)
    x = _read_payload(base + ".x.f32", "<f4", count * h * w).reshape(count, h, w)
    m = _read_payload(base + ".m.f32", "<f4", count * n_wells).reshape(count, n_wells)
    y = _read_payload(base + ".y.u8", "u1", count).astype(np.int64) + 1
    idx_path = base + ".idx.i32"
    if os.path.exists(idx_path):
        idx = _read_payload(idx_path, "<i4", 2 * count).reshape(count, 2)
    else:
        idx = np.zeros((count, 2), dtype=np.int32)
    if y.size and y.max() > manifest["n_classes"]:
        raise DataError(f"{base}.y.u8: class index exceeds n_classes")
    return x.astype(np.float32), y, m.astype(np.float32), idx


def read_dataset(directory):
    manifest = read_manifest(directory)
    r = int(manifest["n_classes"])
    eye = np.eye(r, dtype=np.float32)
    parts = {}
    for name in SPLIT_NAMES:
        x, y, m, idx = read_split_arrays(directory, name, manifest)
        parts[name] = [Instance(x[i], eye[y[i] - 1], m[i], int(idx[i, 0]), int(idx[i, 1]))
                       for i in range(x.shape[0])]
    meta = {k: manifest[k] for k in ("wells", "n_classes", "class_rates", "scenarios")}
    meta["grid"] = (manifest["grid_h"], manifest["grid_w"])
    return DatasetSplit(parts["train"], parts["val"], parts["test"],
                        tuple(manifest.get("fractions", (0.64, 0.16, 0.20))),
                        manifest.get("seed", 0), meta)


def write_series(series_list, directory, extra=None):
    """Write simulator output: ``manifest.json`` plus one ``scenario_XXX.p.f64`` per series."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    grid = None
    for k, series in enumerate(series_list):
        fname = f"scenario_{k:03d}.p.f64"
        frames = np.asarray(series.fields, dtype="<f8")
        grid = frames.shape[1:]
        _atomic_bytes(os.path.join(directory, fname), frames.tobytes())
        entries.append({"id": k, "file": fname, "spec": series.spec.to_dict()})
    manifest = {"format_version": SERIES_VERSION, "kind": "pressure_series",
                "grid_h": int(grid[0]) if grid else 0, "grid_w": int(grid[1]) if grid else 0,
                "dtype": "float64", "scenarios": entries}
    manifest.update(extra or {})
    _write_json(os.path.join(directory, "manifest.json"), manifest)


def read_series(directory):
    """Return ``(series_list, manifest)`` written by :func:`write_series`."""
    manifest = _read_manifest(directory, SERIES_VERSION)
    if manifest.get("kind") != "pressure_series":
        raise DataError(f"{directory} does not hold simulator output")
    h, w = manifest["grid_h"], manifest["grid_w"]
    out = []
    for entry in manifest["scenarios"]:
        spec = ScenarioSpec.from_dict(entry["spec"])
        data = _read_payload(os.path.join(directory, entry["file"]), "<f8", spec.n_steps * h * w)
        out.append(PressureSeries(spec, data.reshape(spec.n_steps, h, w)))
    return out, manifest
