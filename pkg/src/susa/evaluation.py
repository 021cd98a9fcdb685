"""Confusion-matrix metrics and representational dissimilarity."""
import logging

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DISSIMILARITY_SUBSAMPLE = 10_000


def confusion(truth, pred, classes=None):
    """``C x C`` counts (rows truth, columns prediction) over pixels with truth > 0.

    Class ids are ``1..C``; row/column ``c - 1`` holds class ``c``.
    """
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    labeled = truth > 0
    t = truth[labeled].astype(np.int64)
    p = pred[labeled].astype(np.int64)
    if classes is None:
        classes = int(max(t.max(initial=0), p.max(initial=0)))
    if t.size and (t.max() > classes or p.min() < 1 or p.max() > classes):
        raise ValueError(f"labels outside 1..{classes} at labeled pixels")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def metrics(cm):
    """Overall accuracy, average (per-class) accuracy and Cohen's kappa.

    Classes with no truth samples are left out of AA. When chance agreement
    is 1 the kappa is undefined; it is reported as 0 with ``degenerate`` set.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix (no labeled pixels)")
    oa = np.trace(cm) / total
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    present = rows > 0
    aa = float(np.mean(np.diag(cm)[present] / rows[present]))
    pe = float(np.dot(rows, cols) / total ** 2)
    degenerate = pe >= 1.0
    kappa = 0.0 if degenerate else (oa - pe) / (1.0 - pe)
    return {"OA": float(oa), "AA": aa, "kappa": float(kappa), "degenerate": bool(degenerate)}


def metrics_from_labels(truth, pred, classes=None):
    return metrics(confusion(truth, pred, classes))


def _centered_ranks(data):
    ranks = np.apply_along_axis(rankdata, 0, data).astype(np.float64)
    ranks -= ranks.mean(axis=0)
    sumsq = (ranks ** 2).sum(axis=0)
    return ranks, sumsq, sumsq == 0


def spearman_matrix(x, y):
    """Spearman correlation between every column of ``x`` and every column of ``y``.

    Ties get average ranks; pairs involving a constant column are set to 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need (pixels, features) arrays with equal pixel counts: {x.shape}, {y.shape}")
    rx, sx, cx = _centered_ranks(x)
    ry, sy, cy = _centered_ranks(y)
    if cx.any() or cy.any():
        log.warning("constant feature(s) found; their rank correlations are set to 0")
    denom = np.sqrt(np.outer(sx, sy))
    denom[denom == 0] = 1.0
    r = np.clip((rx.T @ ry) / denom, -1.0, 1.0)
    r[cx, :] = 0.0
    r[:, cy] = 0.0
    return r


def _flatten(features):
    values = getattr(features, "values", features)
    values = np.asarray(values)
    return values.reshape(-1, values.shape[-1])


def dissimilarity(x, y, subsample=None, seed=0):
    """``1 - mean_i max_j r[i, j]`` over Spearman correlations of X and Y features.

    ``subsample`` draws that many pixels (fixed ``seed``) before ranking.
    """
    fx, fy = _flatten(x), _flatten(y)
    if fx.shape[0] != fy.shape[0]:
        raise ValueError(f"pixel counts differ: {fx.shape[0]} vs {fy.shape[0]}")
    if subsample is not None and fx.shape[0] > subsample:
        rows = np.sort(np.random.default_rng(seed).choice(fx.shape[0], subsample, replace=False))
        fx, fy = fx[rows], fy[rows]
    r = spearman_matrix(fx, fy)
    return float(1.0 - np.mean(r.max(axis=1)))


def format_metrics(m):
    """One ``key:value`` line per metric."""
    return "".join(f"{k}:{m[k]!r}\n" for k in ("OA", "AA", "kappa", "degenerate"))
