"""Mitosis candidate detection and labeling.

Coordinates are full-resolution pixels, x = column, y = row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import LengthMismatch
from .stain import DEFAULT_STAINS, StainMatrix, rgb_to_hed, to_reflectance


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNLABELED = "unlabeled"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class Candidate:
    x: int
    y: int
    intensity: float
    label: Label = Label.UNLABELED


@dataclass(frozen=True)
class DetectorParams:
    d: float = 100.0
    t: float = 0.6

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0.0 < self.t < 1.0:
            raise ValueError("t must lie in (0, 1)")


def mean_intensity(img) -> np.ndarray:
    return to_reflectance(img).mean(axis=2)


def disk_offsets(d: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel offsets strictly inside a disk of diameter ``d``."""
    r = d / 2.0
    ri = int(np.ceil(r))
    yy, xx = np.mgrid[-ri : ri + 1, -ri : ri + 1]
    keep = yy * yy + xx * xx < r * r
    return yy[keep], xx[keep]


def detect_candidates(img, params: DetectorParams = DetectorParams()) -> list[Candidate]:
    """Iterative detection/suppression of dark disks on the mean-RGB image.

    Pixels are visited in ascending (intensity, y, x) order; each unsuppressed
    pixel with intensity <= t becomes a candidate and suppresses the open disk
    of diameter d around it.
    """
    inten = mean_intensity(img)
    h, w = inten.shape
    ys, xs = np.nonzero(inten <= params.t)
    if len(ys) == 0:
        return []
    order = np.lexsort((xs, ys, inten[ys, xs]))
    ys, xs = ys[order], xs[order]
    r = int(np.ceil(params.d / 2.0))
    dy, dx = disk_offsets(params.d)
    stamp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    stamp[dy + r, dx + r] = True
    # Padded so stamps never need clipping.
    suppressed = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    out = []
    for y, x in zip(ys.tolist(), xs.tolist()):
        if suppressed[y + r, x + r]:
            continue
        out.append(Candidate(x, y, float(inten[y, x])))
        suppressed[y : y + 2 * r + 1, x : x + 2 * r + 1] |= stamp
    return out


def label_candidates(cands, reference, d: float = 100.0) -> list[Candidate]:
    """Positive iff some reference point lies within Euclidean distance <= d."""
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    if len(cands) == 0:
        return []
    if len(ref) == 0:
        return [replace(c, label=Label.NEGATIVE) for c in cands]
    pts = np.array([(c.x, c.y) for c in cands], dtype=np.float64)
    dist, _ = cKDTree(ref).query(pts)
    return [replace(c, label=Label.POSITIVE if dd <= d else Label.NEGATIVE)
            for c, dd in zip(cands, dist)]


def phh3_candidates(img, m: StainMatrix = DEFAULT_STAINS, dab_thresh: float = 0.15,
                    min_size: int = 4) -> list[Candidate]:
    """Centroids of 8-connected DAB-positive components."""
    p = to_reflectance(img)
    dab = rgb_to_hed(p, m)[..., 2]
    lab, n = ndimage.label(dab > dab_thresh, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(np.ones_like(dab), lab, idx)
    cents = ndimage.center_of_mass(np.ones_like(dab), lab, idx)
    inten = p.mean(axis=2)
    out = []
    for size, (cy, cx) in zip(sizes, cents):
        if size < min_size:
            continue
        x, y = int(round(cx)), int(round(cy))
        out.append(Candidate(x, y, float(inten[y, x])))
    return out


@dataclass(frozen=True)
class ObserverAnnotations:
    labels: np.ndarray  # (observers, candidates), 1 = mitosis
    quorum: int = 3

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels))


def majority_vote(a: ObserverAnnotations) -> list[Label]:
    votes = a.labels
    if votes.ndim != 2:
        raise LengthMismatch("observer label lists must have equal lengths")
    if votes.shape[0] < a.quorum:
        raise ValueError(f"need at least {a.quorum} observers, got {votes.shape[0]}")
    pos = votes.astype(bool).sum(axis=0)
    neg = votes.shape[0] - pos
    return [Label.POSITIVE if p >= a.quorum else Label.NEGATIVE if n >= a.quorum else Label.DISCARDED
            for p, n in zip(pos.tolist(), neg.tolist())]


def observer_annotations(lists, quorum: int = 3) -> ObserverAnnotations:
    lengths = {len(l) for l in lists}
    if len(lengths) > 1:
        raise LengthMismatch(f"observer label lists differ in length: {sorted(lengths)}")
    return ObserverAnnotations(np.array(lists, dtype=np.int64).reshape(len(lists), -1), quorum)


def write_candidates(path, cands) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "intensity", "label"])
        for c in cands:
            wr.writerow([c.x, c.y, f"{c.intensity:.6f}", c.label.value])


def read_candidates(path) -> list[Candidate]:
    with open(path, newline="") as fh:
        return [Candidate(int(r["x"]), int(r["y"]), float(r["intensity"]), Label(r["label"]))
                for r in csv.DictReader(fh)]


def write_points(path, pts, header=("x", "y")) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in np.asarray(pts).reshape(-1, len(header)):
            wr.writerow([f"{v:.6g}" for v in row])


def read_points(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [(float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def extract_patches(img, points, size: int = 128) -> np.ndarray:
    """Square patches centered at (x, y) points, reflect-padded at borders.

    The point lands on index ``size // 2`` of each patch.
    """
    a = np.asarray(img)
    half = size // 2
    padded = np.pad(a, ((half, half), (half, half), (0, 0)), mode="reflect")
    pts = np.rint(np.asarray(points, dtype=np.float64).reshape(-1, 2)).astype(int)
    out = np.empty((len(pts), size, size, a.shape[2]), dtype=a.dtype)
    for i, (x, y) in enumerate(pts):
        x = min(max(x, 0), a.shape[1] - 1)
        y = min(max(y, 0), a.shape[0] - 1)
        out[i] = padded[y : y + size, x : x + size]
    return out
