"""Detection, grading and proliferation-score evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import DegenerateInput, DegenerateMarginals


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 30.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class MatchResult:
    precision: float
    recall: float
    f1: float
    tp: int
    n_pred: int
    n_truth: int
    pairs: tuple  # (pred index, truth index)


def _prf(tp, n_pred, n_truth):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_truth if n_truth else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def match_f1(pred, truth, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Maximum-cardinality one-to-one matching within ``cfg.radius``.

    Among maximum matchings the one with the smallest total distance is
    returned.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    pairs = ()
    if len(pred) and len(truth):
        dist = cdist(pred, truth)
        ok = dist <= cfg.radius
        # Each allowed pair costs < 1 / (n + 1) in total, so cardinality always wins.
        scale = (min(len(pred), len(truth)) + 1) * cfg.radius
        cost = np.where(ok, dist / scale, 1.0)
        rows, cols = linear_sum_assignment(cost)
        keep = ok[rows, cols]
        pairs = tuple(zip(rows[keep].tolist(), cols[keep].tolist()))
    p, r, f = _prf(len(pairs), len(pred), len(truth))
    return MatchResult(p, r, f, len(pairs), len(pred), len(truth), pairs)


def kappa_quadratic(a, b, categories=(1, 2, 3)) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ValueError("grade lists must have equal non-zero length")
    k = len(categories)
    index = {c: i for i, c in enumerate(categories)}
    obs = np.zeros((k, k))
    for x, y in zip(a.tolist(), b.tolist()):
        obs[index[x], index[y]] += 1
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / obs.sum()
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    denom = float((w * expected).sum())
    if denom == 0.0:
        raise DegenerateMarginals("expected disagreement is zero")
    return 1.0 - float((w * obs).sum()) / denom


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DegenerateInput("need two equal-length lists of at least 2 values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("constant input has no rank correlation")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def default_grid() -> np.ndarray:
    return np.round(np.arange(800, 1001) / 1000.0, 3)


@dataclass(frozen=True)
class SweepResult:
    best_delta: float
    best_score: float
    curve: list  # rows of (delta, precision, recall, f1)


def sweep_threshold(slides, cfg: MatchConfig = MatchConfig(), grid=None) -> SweepResult:
    """Pooled detection F1 over thresholds.

    ``slides`` is a list of (detections, truth) where detections rows are
    (x, y, probability). Counts are pooled over slides before computing
    precision/recall. Ties in F1 go to the largest threshold.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    curve = []
    for delta in grid.tolist():
        tp = n_pred = n_truth = 0
        for det, truth in slides:
            det = np.asarray(det, dtype=np.float64).reshape(-1, 3)
            keep = det[det[:, 2] >= delta, :2]
            res = match_f1(keep, truth, cfg)
            tp += res.tp
            n_pred += res.n_pred
            n_truth += res.n_truth
        curve.append((delta, *_prf(tp, n_pred, n_truth)))
    return _best(curve)


def sweep_scores(score_fn, grid) -> SweepResult:
    """Generic sweep: ``score_fn(delta)`` -> score; ties go to the largest delta."""
    curve = [(float(d), float("nan"), float("nan"), float(score_fn(d))) for d in np.asarray(grid).tolist()]
    if not curve:
        raise ValueError("threshold grid is empty")
    return _best(curve)


def _best(curve) -> SweepResult:
    best = max(range(len(curve)), key=lambda i: (curve[i][3], curve[i][0]))
    return SweepResult(curve[best][0], curve[best][3], curve)


def curve_span(curve, lo: float = 0.85, hi: float = 0.99) -> float:
    """max - min F1 over thresholds within [lo, hi]."""
    vals = [f for d, _, _, f in curve if lo - 1e-9 <= d <= hi + 1e-9]
    return float(max(vals) - min(vals)) if vals else 0.0


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["delta", "precision", "recall", "f1"])
        for row in curve:
            wr.writerow([f"{row[0]:.3f}"] + [f"{v:.6f}" for v in row[1:]])
