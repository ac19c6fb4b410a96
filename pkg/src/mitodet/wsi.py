"""Whole-slide dense inference, detection post-processing, hotspot and grading."""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.signal import fftconvolve

from .errors import BadThresholds, NoTissue, TileGeometryError
from .nn import prepare_input
from .stain import to_reflectance

BASE_MPP = 0.25
PMAP_MAGIC = b"PMAP"


# ---------------------------------------------------------------- slide I/O


@dataclass(frozen=True)
class SlideManifest:
    width: int
    height: int
    tile_size: int
    rows: int
    cols: int
    mpp: float = BASE_MPP


def tile_name(r: int, c: int) -> str:
    return f"tile_r{r:04d}_c{c:04d}.png"


def write_slide(directory, img, tile_size: int = 512, mpp: float = BASE_MPP) -> SlideManifest:
    """Store an (H, W, 3) uint8 image as a grid of PNG tiles plus manifest.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img)
    h, w = img.shape[:2]
    rows, cols = math.ceil(h / tile_size), math.ceil(w / tile_size)
    for r in range(rows):
        for c in range(cols):
            tile = img[r * tile_size : (r + 1) * tile_size, c * tile_size : (c + 1) * tile_size]
            Image.fromarray(np.ascontiguousarray(tile)).save(d / tile_name(r, c), optimize=False)
    man = SlideManifest(w, h, tile_size, rows, cols, mpp)
    (d / "manifest.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in man.__dict__.items()))
    return man


def read_manifest(directory) -> SlideManifest:
    vals = {}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, _, v = (s.strip() for s in line.partition("="))
            vals[k] = v
    return SlideManifest(int(vals["width"]), int(vals["height"]), int(vals["tile_size"]),
                         int(vals["rows"]), int(vals["cols"]), float(vals.get("mpp", BASE_MPP)))


def read_slide(directory):
    """(uint8 image, manifest) for a tiled slide directory."""
    man = read_manifest(directory)
    img = np.zeros((man.height, man.width, 3), dtype=np.uint8)
    ts = man.tile_size
    for r in range(man.rows):
        for c in range(man.cols):
            tile = np.asarray(Image.open(Path(directory) / tile_name(r, c)).convert("RGB"))
            img[r * ts : r * ts + tile.shape[0], c * ts : c * ts + tile.shape[1]] = tile
    return img, man


# ---------------------------------------------------------------- tissue


@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray  # bool, downsampled
    scale: int        # full-resolution pixels per mask pixel

    def at(self, x, y) -> np.ndarray:
        xi = np.clip((np.asarray(x) // self.scale).astype(int), 0, self.mask.shape[1] - 1)
        yi = np.clip((np.asarray(y) // self.scale).astype(int), 0, self.mask.shape[0] - 1)
        return self.mask[yi, xi]


def tissue_mask_array(img, od_threshold: float = 0.05) -> np.ndarray:
    """Full-resolution mask: mean optical density at or above the threshold."""
    p = to_reflectance(img)
    od = -np.log(np.clip(p, 1e-6, 1.0)).mean(axis=2)
    return od >= od_threshold


def tissue_mask(img, scale: int = 16, od_threshold: float = 0.05) -> TissueMask:
    """Block-averaged OD threshold at 1/scale resolution."""
    p = to_reflectance(img)
    od = -np.log(np.clip(p, 1e-6, 1.0)).mean(axis=2)
    h, w = od.shape
    hh, ww = math.ceil(h / scale), math.ceil(w / scale)
    padded = np.pad(od, ((0, hh * scale - h), (0, ww * scale - w)), mode="edge")
    blocks = padded.reshape(hh, scale, ww, scale).mean(axis=(1, 3))
    return TissueMask(blocks >= od_threshold, scale)


# ---------------------------------------------------------------- dense map


@dataclass
class ProbabilityMap:
    values: np.ndarray   # (gh, gw) float32 mitosis probability
    stride: int = 4
    origin: int = 50     # full-res coordinate of grid cell (0, 0)
    mpp: float = BASE_MPP

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def to_full(self, rows, cols):
        """Grid (row, col) -> full-res (x, y)."""
        return (self.origin + self.stride * np.asarray(cols, dtype=np.float64),
                self.origin + self.stride * np.asarray(rows, dtype=np.float64))


def _model_stride_and_field(model):
    from .nn import layer_shapes

    spec = model.spec
    stride = 1
    for ls in spec.layers:
        if ls.kind == "conv":
            stride *= ls.stride
        elif ls.kind in ("maxpool", "dense"):
            raise TileGeometryError("dense inference needs a fully convolutional model")
    return stride, spec.input_size


def dense_probability_map(img, model, mask: TissueMask | None = None, tile_cells: int = 128,
                          workers: int = 1) -> ProbabilityMap:
    """Slide the model over the whole image, tile by tile.

    Each output tile of tile_cells x tile_cells grid cells reads an input
    window of (tile_cells - 1) * stride + field pixels, i.e. a
    field - stride pixel halo, so seams reproduce per-patch evaluation.
    Tiles without tissue are skipped; off-tissue cells are set to 0.
    """
    from .mining import model_forward

    stride, field = _model_stride_and_field(model)
    a = np.asarray(img)
    h, w = a.shape[:2]
    if h < field or w < field:
        raise TileGeometryError(f"slide {w}x{h} smaller than the receptive field {field}")
    if tile_cells < 1:
        raise TileGeometryError("tile_cells must be >= 1")
    gh = (h - field) // stride + 1
    gw = (w - field) // stride + 1
    origin = field // 2
    values = np.zeros((gh, gw), dtype=np.float32)
    cell_ok = np.ones((gh, gw), dtype=bool)
    if mask is not None:
        rr, cc = np.indices((gh, gw))
        cell_ok = mask.at(origin + stride * cc, origin + stride * rr)
    jobs = []
    for r0 in range(0, gh, tile_cells):
        for c0 in range(0, gw, tile_cells):
            r1, c1 = min(gh, r0 + tile_cells), min(gw, c0 + tile_cells)
            if cell_ok[r0:r1, c0:c1].any():
                jobs.append((r0, r1, c0, c1))

    def run(job):
        r0, r1, c0, c1 = job
        y0, x0 = r0 * stride, c0 * stride
        win = a[y0 : y0 + (r1 - r0 - 1) * stride + field, x0 : x0 + (c1 - c0 - 1) * stride + field]
        out = model_forward(model, prepare_input(win)[None])[0, :, :, 1]
        if out.shape != (r1 - r0, c1 - c0):
            raise TileGeometryError(f"tile produced {out.shape}, expected {(r1 - r0, c1 - c0)}")
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (r0, r1, c0, c1), out in zip(jobs, results):
        values[r0:r1, c0:c1] = out
    values[~cell_ok] = 0.0
    return ProbabilityMap(values, stride, origin)


def write_pmap(path, pm: ProbabilityMap) -> None:
    with open(path, "wb") as fh:
        fh.write(PMAP_MAGIC + struct.pack("<III", pm.width, pm.height, pm.stride))
        fh.write(np.ascontiguousarray(pm.values, dtype="<f4").tobytes())


def read_pmap(path, origin: int = 50) -> ProbabilityMap:
    data = Path(path).read_bytes()
    if data[:4] != PMAP_MAGIC:
        raise ValueError("not a probability map file")
    w, h, stride = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * w * h:
        raise ValueError("probability map file is truncated")
    vals = np.frombuffer(data[16:], dtype="<f4").reshape(h, w).astype(np.float32)
    return ProbabilityMap(vals, stride, origin)


def write_pmap_preview(path, pm: ProbabilityMap) -> None:
    Image.fromarray(np.clip(np.rint(pm.values * 255), 0, 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------- detections


def postprocess(pm: ProbabilityMap, d: float = 100.0, floor: float = 0.8) -> np.ndarray:
    """Detections (x, y, probability) from a probability map.

    Cells >= floor are grouped into 8-connected components; each component
    yields its centroid with the component's maximum probability. Detections
    are accepted greedily by descending probability (ties: smaller x, then y)
    and any detection closer than d to an accepted one is dropped.
    """
    binary = pm.values >= floor
    lab, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros((0, 3))
    idx = np.arange(1, n + 1)
    cents = np.array(ndimage.center_of_mass(np.ones_like(pm.values), lab, idx)).reshape(-1, 2)
    probs = ndimage.maximum(pm.values, lab, idx)
    xs, ys = pm.to_full(cents[:, 0], cents[:, 1])
    dets = np.column_stack([xs, ys, np.asarray(probs, dtype=np.float64)])
    return suppress(dets, d)


def suppress(dets, d: float) -> np.ndarray:
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 3)
    order = np.lexsort((dets[:, 1], dets[:, 0], -dets[:, 2]))
    kept = []
    for i in order:
        x, y = dets[i, 0], dets[i, 1]
        if all((x - dets[j, 0]) ** 2 + (y - dets[j, 1]) ** 2 >= d * d for j in kept):
            kept.append(i)
    return dets[kept]


def apply_threshold(dets, delta: float) -> np.ndarray:
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 3)
    return dets[dets[:, 2] >= delta]


def write_detections(path, dets) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "probability"])
        for x, y, p in np.asarray(dets).reshape(-1, 3):
            wr.writerow([f"{x:.2f}", f"{y:.2f}", f"{p:.6f}"])


def read_detections(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [(float(r["x"]), float(r["y"]), float(r["probability"])) for r in csv.DictReader(fh)]
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------- hotspot & grading


def hotspot_radius_px(area_mm2: float = 2.0, mpp: float = BASE_MPP) -> float:
    return math.sqrt(area_mm2 / math.pi) * 1000.0 / mpp


def _disk(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx <= radius * radius).astype(np.float64)


def hotspot(dets, mask: TissueMask, area_mm2: float = 2.0, mpp: float = BASE_MPP,
            stride: int = 200, min_tissue: float = 0.05):
    """(count, (x, y)) of the hotspot circle.

    Circles are centered on a grid of ``stride`` pixels; positions whose
    circle is less than ``min_tissue`` tissue are ignored. The reported count
    is the nearest-rank 95th percentile of the per-position counts; the
    center is the position holding that count (ties: smallest y, then x).
    """
    radius = hotspot_radius_px(area_mm2, mpp)
    h, w = mask.mask.shape[0] * mask.scale, mask.mask.shape[1] * mask.scale
    gy, gx = np.mgrid[0:h:stride, 0:w:stride]
    gx, gy = gx.ravel().astype(np.float64), gy.ravel().astype(np.float64)
    kern = _disk(radius / mask.scale)
    cover = fftconvolve(mask.mask.astype(np.float64), kern, mode="same") / kern.sum()
    frac = cover[np.clip((gy // mask.scale).astype(int), 0, mask.mask.shape[0] - 1),
                 np.clip((gx // mask.scale).astype(int), 0, mask.mask.shape[1] - 1)]
    ok = frac >= min_tissue
    if not ok.any():
        raise NoTissue("no hotspot position overlaps tissue")
    gx, gy = gx[ok], gy[ok]
    d = np.asarray(dets, dtype=np.float64).reshape(-1, 3)
    if len(d):
        d2 = (gx[:, None] - d[None, :, 0]) ** 2 + (gy[:, None] - d[None, :, 1]) ** 2
        counts = (d2 <= radius * radius).sum(axis=1)
    else:
        counts = np.zeros(len(gx), dtype=int)
    ranked = np.sort(counts)
    value = int(ranked[math.ceil(0.95 * len(ranked)) - 1])
    hits = np.flatnonzero(counts == value)
    best = min(hits, key=lambda i: (gy[i], gx[i]))
    return value, (float(gx[best]), float(gy[best]))


def grade(count: int, theta1: int = 6, theta2: int = 20) -> int:
    if theta1 >= theta2:
        raise BadThresholds(f"need theta1 < theta2, got {theta1}, {theta2}")
    if count < 0:
        raise ValueError("count must be >= 0")
    if count <= theta1:
        return 1
    if count > theta2:
        return 3
    return 2


def proliferation_score(count: int) -> int:
    return int(count)


@dataclass(frozen=True)
class SlideSummary:
    hotspot_count: int
    hotspot_center: tuple
    grade: int
    proliferation_score: int
    delta: float
    theta1: int = 6
    theta2: int = 20

    def to_text(self) -> str:
        return (f"count = {self.hotspot_count}\n"
                f"center = {self.hotspot_center[0]:.0f} {self.hotspot_center[1]:.0f}\n"
                f"grade = {self.grade}\n"
                f"score = {self.proliferation_score}\n"
                f"delta = {self.delta}\n"
                f"theta1 = {self.theta1}\n"
                f"theta2 = {self.theta2}\n")


def summarize(dets, mask: TissueMask, delta: float, theta1: int = 6, theta2: int = 20,
              **hotspot_kw) -> SlideSummary:
    count, center = hotspot(apply_threshold(dets, delta), mask, **hotspot_kw)
    return SlideSummary(count, center, grade(count, theta1, theta2), proliferation_score(count),
                        delta, theta1, theta2)
