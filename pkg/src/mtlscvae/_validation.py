"""Input checks shared by the estimator, pipeline and CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DataError


def check_fields(X, dtype=np.float32, name="X"):
    """Return a finite ``[n, h, w]`` array of incremental fields."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, input_name=name)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DataError(f"{name} must have shape (n, h, w), got {X.shape}")
    return X


def check_measurements(M, n_wells=None, dtype=np.float32):
    M = check_array(M, dtype=dtype, ensure_2d=False, input_name="M")
    if M.ndim == 1:
        M = M[None]
    if n_wells is not None and M.shape[1] != n_wells:
        raise DataError(f"expected {n_wells} well measurements per row, got {M.shape[1]}")
    return M


def check_wells(wells, grid_shape=None):
    """Return wells as a tuple of ``(row, col)`` int pairs, validating bounds and uniqueness."""
    coords = tuple((int(r), int(c)) for r, c in wells)
    if not coords:
        raise DataError("at least one well is required")
    if len(set(coords)) != len(coords):
        raise DataError(f"duplicate well coordinates in {coords}")
    if grid_shape is not None:
        h, w = grid_shape
        for r, c in coords:
            if not (0 <= r < h and 0 <= c < w):
                raise DataError(f"well ({r}, {c}) outside the {h}x{w} grid")
    return coords


def check_labels(y, n_classes):
    """Return 1-based integer labels as an int array."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise DataError("labels must be one-dimensional")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataError("labels must be integers")
        y = y.astype(int)
    if y.size and (y.min() < 1 or y.max() > n_classes):
        raise DataError(f"labels must lie in [1, {n_classes}]")
    return y


def on_simplex(p, tol=1e-4):
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= -tol) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol))
