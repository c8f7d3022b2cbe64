"""Reconstruction and classification metrics.

ROC curves carry Monte-Carlo uncertainty: each posterior draw yields its
own one-vs-rest curve, and curves are aggregated as mean +- std of the true
positive rate on a fixed false-positive-rate grid.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_labels, on_simplex
from .errors import DataError

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 201)
DEFAULT_FPR_GRID = np.linspace(0.0, 1.0, 201)


def relative_l2(predictions, truths, return_excluded=False):
    """Mean of ``||x_hat - x|| / ||x||`` over instances with a non-zero truth.

    All-zero truth fields are skipped; pass ``return_excluded=True`` to also
    get their indices.
    """
    if len(predictions) != len(truths):
        raise DataError(f"{len(predictions)} predictions for {len(truths)} truths")
    ratios = []
    excluded = []
    for i, (pred, true) in enumerate(zip(predictions, truths)):
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise DataError(f"instance {i}: shape {pred.shape} vs {true.shape}")
        denom = np.linalg.norm(true.ravel())
        if denom == 0:
            excluded.append(i)
            continue
        ratios.append(np.linalg.norm((pred - true).ravel()) / denom)
    value = float(np.mean(ratios)) if ratios else float("nan")
    return (value, excluded) if return_excluded else value


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


def confusion(true_labels, predicted_labels, r):
    """Counts with rows = true class, columns = predicted class (1-based labels)."""
    t = check_labels(true_labels, r)
    p = check_labels(predicted_labels, r)
    if t.shape != p.shape:
        raise DataError("true and predicted label arrays differ in length")
    counts = np.zeros((r, r), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    return ConfusionMatrix(counts)


@dataclass
class RocCurve:
    class_index: int
    fpr: np.ndarray
    tpr_mean: np.ndarray
    tpr_std: np.ndarray
    auc: float
    defined: bool = True
    sweep: list = field(default_factory=list, repr=False)  # per-draw (fpr, tpr) arrays

    def to_rows(self):
        return [(float(f), float(t), float(s))
                for f, t, s in zip(self.fpr, self.tpr_mean, self.tpr_std)]


def roc_points(scores, positives, thresholds):
    """``(fpr, tpr)`` for predicting positive when ``score >= threshold``."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    thresholds = np.asarray(thresholds, dtype=float)
    n_pos = positives.sum()
    n_neg = positives.size - n_pos
    pos = np.sort(scores[positives])
    neg = np.sort(scores[~positives])
    tp = n_pos - np.searchsorted(pos, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    return fp / n_neg, tp / n_pos


def _interp_curve(fpr, tpr, grid):
    """Evaluate a ROC path on ``grid``.

    A repeated FPR is a vertical jump: the curve takes the top of the jump at
    that FPR and leaves from the bottom of the next one, so straight segments
    never cut corners.
    """
    order = np.lexsort((tpr, fpr))
    fpr, tpr = fpr[order], tpr[order]
    ufpr, start = np.unique(fpr, return_index=True)
    lo = tpr[start]
    hi = np.maximum.reduceat(tpr, start)
    a = np.clip(np.searchsorted(ufpr, grid, side="right") - 1, 0, ufpr.size - 1)
    b = np.minimum(a + 1, ufpr.size - 1)
    span = ufpr[b] - ufpr[a]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span > 0, (grid - ufpr[a]) / span, 0.0)
    out = hi[a] + frac * (lo[b] - hi[a])
    return np.where(grid == ufpr[a], hi[a], out)


def roc_ovr(score_samples, true_labels, thresholds=None, fpr_grid=None, keep_sweep=False):
    """One-vs-rest ROC per class with MC bands.

    ``score_samples`` is ``[n_instances, n_mc, r]`` (a ``[n, r]`` array is
    treated as a single draw). A class missing from ``true_labels`` (or with
    no negatives) yields a curve with ``defined=False`` and ``auc=nan``.
    """
    s = np.asarray(score_samples, dtype=float)
    if s.ndim == 2:
        s = s[:, None, :]
    n, n_mc, r = s.shape
    if not on_simplex(s, 1e-4):
        raise DataError("scores must be probability vectors")
    labels = check_labels(true_labels, r)
    if labels.size != n:
        raise DataError("one label per instance required")
    thr = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=float)
    thr = np.append(np.sort(thr), np.inf)
    grid = DEFAULT_FPR_GRID if fpr_grid is None else np.asarray(fpr_grid, dtype=float)
    curves = []
    for k in range(1, r + 1):
        positives = labels == k
        if positives.all() or not positives.any():
            nan = np.full_like(grid, np.nan)
            curves.append(RocCurve(k, grid, nan, nan.copy(), float("nan"), defined=False))
            continue
        tprs = np.empty((n_mc, grid.size))
        sweep = []
        for d in range(n_mc):
            fpr, tpr = roc_points(s[:, d, k - 1], positives, thr)
            tprs[d] = _interp_curve(fpr, tpr, grid)
            if keep_sweep:
                sweep.append((fpr, tpr))
        mean = tprs.mean(axis=0)
        std = tprs.std(axis=0, ddof=1) if n_mc > 1 else np.zeros_like(mean)
        curves.append(RocCurve(k, grid, mean, std, float(_trapezoid(mean, grid)), True, sweep))
    return curves


def macro_roc(curves):
    """Average the defined per-class curves into one headline curve."""
    defined = [c for c in curves if c.defined]
    if not defined:
        grid = curves[0].fpr if curves else DEFAULT_FPR_GRID
        nan = np.full_like(grid, np.nan)
        return RocCurve(0, grid, nan, nan.copy(), float("nan"), defined=False)
    grid = defined[0].fpr
    mean = np.mean([c.tpr_mean for c in defined], axis=0)
    std = np.mean([c.tpr_std for c in defined], axis=0)
    return RocCurve(0, grid, mean, std, float(_trapezoid(mean, grid)))
