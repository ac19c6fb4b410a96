"""Synthetic H&E / pseudo-PHH3 slides with planted mitotic figures.

A scene is a set of objects on a smooth tissue background, described in
stain-concentration space and rendered to RGB with ``hed_to_rgb``:

* mitoses: clumpy, elongated, very high hematoxylin with a pale halo
* dark nuclei: larger round/oval nuclei of moderate darkness (negatives)
* mimics: small round very dark nuclei with pink cytoplasm (hard negatives)
* pale nuclei: light nuclei everywhere (never candidates)
* PHH3 artifacts: DAB-positive specks, smears and stained mimics

The PHH3 render of the same scene keeps the hematoxylin counterstain,
drops eosin, paints mitoses (and artifacts) with DAB, and is warped by a
global shift plus a continuous per-region jitter field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigInfeasible
from .stain import DEFAULT_STAINS, hed_to_rgb, to_uint8


@dataclass(frozen=True)
class SynthConfig:
    width: int = 2000
    height: int = 2000
    n_mitoses: int = 25
    n_dark_nuclei: int = 220
    n_mimics: int = 40
    n_pale_nuclei: int = 900
    n_phh3_artifacts: int = 20
    mitosis_diameter: tuple[float, float] = (8.0, 20.0)
    mitosis_eccentricity: tuple[float, float] = (1.0, 3.0)
    mitosis_h: tuple[float, float] = (1.5, 2.2)
    tissue_fraction: float = 0.8
    stain_sigma: float = 0.05
    noise_std: float = 0.01
    shift: tuple[int, int] = (0, 0)
    jitter: float = 0.0
    jitter_spacing: int = 1024
    margin: int = 80
    min_mitosis_distance: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter < 0 or self.jitter >= 512:
            raise ConfigInfeasible("jitter must lie in [0, 512)")
        if min(self.width, self.height) <= 2 * self.margin:
            raise ConfigInfeasible("slide too small for its margin")
        lo, hi = self.mitosis_diameter
        if not 0 < lo <= hi:
            raise ConfigInfeasible("bad mitosis diameter range")


@dataclass
class SceneObject:
    kind: str
    x: float
    y: float
    angle: float
    a: float          # semi-axis along angle
    b: float          # perpendicular semi-axis
    amp: float
    extra: dict = field(default_factory=dict)


@dataclass
class Scene:
    cfg: SynthConfig
    pad: int
    tissue: np.ndarray        # (H + 2 pad, W + 2 pad) in [0, 1]
    h_bg: np.ndarray
    e_bg: np.ndarray
    objects: list
    stain_alpha: np.ndarray
    stain_beta: np.ndarray

    @property
    def mitoses(self) -> np.ndarray:
        pts = [(o.x, o.y) for o in self.objects if o.kind == "mitosis"]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)


@dataclass
class SynthSlide:
    image: np.ndarray          # uint8 (H, W, 3)
    mitoses: np.ndarray        # (n, 2) x, y
    tissue: np.ndarray         # bool (H, W)
    scene: Scene


@dataclass
class SynthPair:
    he: SynthSlide
    phh3: np.ndarray           # uint8 (H, W, 3)
    mitoses_phh3: np.ndarray   # (n, 2) mitosis positions in the PHH3 frame
    artifacts_phh3: np.ndarray  # (m, 2) artifact positions in the PHH3 frame
    shift: tuple[int, int]
    displacement: np.ndarray   # (H, W, 2) total displacement (dx, dy) at each PHH3 pixel


def _smooth_noise(rng, shape, sigma, coarse=4):
    """Unit-variance smooth noise, built at 1/coarse resolution and upsampled."""
    sh = (math.ceil(shape[0] / coarse) + 2, math.ceil(shape[1] / coarse) + 2)
    n = ndimage.gaussian_filter(rng.standard_normal(sh), sigma / coarse, mode="wrap")
    n = ndimage.zoom(n, coarse, order=1)[: shape[0], : shape[1]]
    return (n - n.mean()) / (n.std() + 1e-12)


def _place(rng, n, tissue, pad, cfg, avoid=None, min_dist=0.0, own_dist=0.0, attempts=200):
    """Rejection-sample n points inside tissue, away from ``avoid`` and each other."""
    tree = cKDTree(avoid) if avoid is not None and len(avoid) else None
    pts = np.empty((n, 2))
    k = 0
    for _ in range(n * attempts):
        if k == n:
            break
        x = rng.uniform(cfg.margin, cfg.width - cfg.margin)
        y = rng.uniform(cfg.margin, cfg.height - cfg.margin)
        if tissue[int(y) + pad, int(x) + pad] < 0.9:
            continue
        if tree is not None and tree.query((x, y))[0] < min_dist:
            continue
        if own_dist > 0 and k and np.min((pts[:k, 0] - x) ** 2 + (pts[:k, 1] - y) ** 2) <= own_dist ** 2:
            continue
        pts[k] = (x, y)
        k += 1
    return pts[:k]


def build_scene(cfg: SynthConfig) -> Scene:
    rng = np.random.default_rng(cfg.seed)
    pad = int(max(abs(cfg.shift[0]), abs(cfg.shift[1])) + cfg.jitter + 4)
    shape = (cfg.height + 2 * pad, cfg.width + 2 * pad)
    tf = _smooth_noise(rng, shape, max(shape) / 6.0, coarse=16)
    core = tf[pad : pad + cfg.height, pad : pad + cfg.width]
    thr = np.quantile(core, 1.0 - cfg.tissue_fraction)
    tissue = 1.0 / (1.0 + np.exp(-(tf - thr) / 0.08))
    h_bg = tissue * np.clip(0.5 + 0.08 * _smooth_noise(rng, shape, 24) + 0.03 * _smooth_noise(rng, shape, 1.5, 1), 0.02, None)
    e_bg = tissue * np.clip(0.75 + 0.22 * _smooth_noise(rng, shape, 40) + 0.04 * _smooth_noise(rng, shape, 1.5, 1), 0.02, None)

    if cfg.n_mitoses:
        mit = _place(rng, cfg.n_mitoses, tissue, pad, cfg, own_dist=cfg.min_mitosis_distance)
        if len(mit) < cfg.n_mitoses:
            raise ConfigInfeasible(f"placed {len(mit)} of {cfg.n_mitoses} mitoses")
    else:
        mit = np.zeros((0, 2))
    objects = []
    for x, y in mit:
        diam = rng.uniform(*cfg.mitosis_diameter)
        ecc = rng.uniform(*cfg.mitosis_eccentricity)
        a = diam / 2.0
        n_sat = int(rng.integers(4, 9))
        t = rng.uniform(-1, 1, n_sat)
        sats = np.column_stack([t * a, rng.normal(0, a / ecc / 2.0, n_sat), rng.uniform(0.55, 0.95, n_sat)])
        objects.append(SceneObject("mitosis", x, y, rng.uniform(0, math.pi), a, a / ecc,
                                   rng.uniform(*cfg.mitosis_h), {"sats": sats, "dab": rng.uniform(1.0, 1.6)}))
    mimics = _place(rng, cfg.n_mimics, tissue, pad, cfg, avoid=mit, min_dist=60, own_dist=12)
    for x, y in mimics:
        r = rng.uniform(3.5, 6.0)
        objects.append(SceneObject("mimic", x, y, 0.0, r, r * rng.uniform(0.85, 1.0),
                                   rng.uniform(1.3, 2.0), {"rim": rng.uniform(0.3, 0.6)}))
    dark = _place(rng, cfg.n_dark_nuclei, tissue, pad, cfg, avoid=mit, min_dist=55, own_dist=20)
    for x, y in dark:
        r = rng.uniform(7.0, 12.0)
        objects.append(SceneObject("nucleus", x, y, rng.uniform(0, math.pi), r, r / rng.uniform(1.0, 1.5),
                                   rng.uniform(0.65, 1.05), {"speckle": rng.integers(0, 2**31)}))
    pale = _place(rng, cfg.n_pale_nuclei, tissue, pad, cfg, avoid=mit, min_dist=18, own_dist=14)
    for x, y in pale:
        r = rng.uniform(6.0, 11.0)
        objects.append(SceneObject("pale", x, y, rng.uniform(0, math.pi), r, r / rng.uniform(1.0, 1.5),
                                   rng.uniform(0.3, 0.6), {"speckle": rng.integers(0, 2**31)}))
    art = _place(rng, cfg.n_phh3_artifacts, tissue, pad, cfg, avoid=mit, min_dist=60, own_dist=30)
    for x, y in art:
        kind = ("speck", "smear", "stained")[int(rng.integers(3))]
        r = {"speck": rng.uniform(1.5, 3.0), "smear": rng.uniform(15.0, 30.0), "stained": rng.uniform(3.5, 6.0)}[kind]
        amp = {"speck": rng.uniform(0.5, 1.0), "smear": rng.uniform(0.25, 0.45), "stained": rng.uniform(0.6, 1.2)}[kind]
        objects.append(SceneObject("artifact", x, y, rng.uniform(0, math.pi), r, r / rng.uniform(1.0, 2.0),
                                   amp, {"style": kind}))
    sig = cfg.stain_sigma
    alpha = rng.uniform(1 - sig, 1 + sig, 3)
    beta = rng.uniform(-sig, sig, 3)
    return Scene(cfg, pad, tissue, h_bg, e_bg, objects, alpha, beta)


def _ellipse_radius(yy, xx, o: SceneObject):
    c, s = math.cos(o.angle), math.sin(o.angle)
    u = xx * c + yy * s
    v = -xx * s + yy * c
    return np.sqrt((u / o.a) ** 2 + (v / o.b) ** 2), u, v


def _window(o: SceneObject, reach: float, shape, pad):
    x0 = max(int(o.x + pad - reach), 0)
    x1 = min(int(o.x + pad + reach) + 2, shape[1])
    y0 = max(int(o.y + pad - reach), 0)
    y1 = min(int(o.y + pad + reach) + 2, shape[0])
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    return (slice(y0, y1), slice(x0, x1)), yy - (o.y + pad), xx - (o.x + pad)


def _flat_top(r, edge=0.18):
    return 1.0 / (1.0 + np.exp((r - 1.0) / edge))


def _mitosis_profile(o, yy, xx):
    c, s = math.cos(o.angle), math.sin(o.angle)
    r, u, v = _ellipse_radius(yy, xx, o)
    prof = np.exp(-0.5 * (r * 1.6) ** 2)
    for su, sv, w in o.extra["sats"]:
        px, py = su * c - sv * s, su * s + sv * c
        prof = np.maximum(prof, w * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * 1.6 ** 2)))
    return prof


def _speckle(o, yy, xx):
    srng = np.random.default_rng(int(o.extra["speckle"]))
    tex = ndimage.gaussian_filter(srng.standard_normal(yy.shape), 1.2)
    return 1.0 + 1.2 * tex


def render_he(scene: Scene) -> np.ndarray:
    """H&E reflectance of the padded canvas."""
    shape = scene.tissue.shape
    conc = np.zeros(shape + (3,))
    conc[..., 0] = scene.h_bg
    conc[..., 1] = scene.e_bg
    pad = scene.pad
    for o in scene.objects:
        if o.kind == "artifact":
            continue
        if o.kind == "mitosis":
            win, yy, xx = _window(o, 2.2 * o.a + 8, shape, pad)
            conc[win + (0,)] += o.amp * _mitosis_profile(o, yy, xx)
            halo = np.exp(-(xx ** 2 + yy ** 2) / (2 * (1.3 * o.a + 4) ** 2))
            conc[win + (1,)] *= 1.0 - 0.6 * halo
        elif o.kind == "mimic":
            win, yy, xx = _window(o, 4 * o.a + 4, shape, pad)
            r, _, _ = _ellipse_radius(yy, xx, o)
            conc[win + (0,)] += o.amp * _flat_top(r, 0.12)
            conc[win + (1,)] += o.extra["rim"] * np.exp(-0.5 * (r / 2.2) ** 2)
        else:
            win, yy, xx = _window(o, 1.6 * o.a + 3, shape, pad)
            r, _, _ = _ellipse_radius(yy, xx, o)
            conc[win + (0,)] += o.amp * _flat_top(r) * np.clip(_speckle(o, yy, xx), 0.6, 1.25)
    conc = conc * scene.stain_alpha + scene.stain_beta * scene.tissue[..., None]
    return hed_to_rgb(conc, DEFAULT_STAINS)


def render_phh3(scene: Scene) -> np.ndarray:
    """PHH3 reflectance of the padded canvas (hematoxylin counterstain + DAB)."""
    shape = scene.tissue.shape
    conc = np.zeros(shape + (3,))
    conc[..., 0] = 0.8 * scene.h_bg
    conc[..., 1] = 0.05 * scene.e_bg
    pad = scene.pad
    for o in scene.objects:
        if o.kind == "mitosis":
            win, yy, xx = _window(o, 2.2 * o.a + 8, shape, pad)
            prof = _mitosis_profile(o, yy, xx)
            conc[win + (0,)] += 0.3 * prof
            conc[win + (2,)] += o.extra["dab"] * prof
        elif o.kind == "artifact":
            win, yy, xx = _window(o, 3 * o.a + 4, shape, pad)
            r, _, _ = _ellipse_radius(yy, xx, o)
            prof = np.exp(-0.5 * r ** 2) if o.extra["style"] != "stained" else _flat_top(r, 0.12)
            conc[win + (2,)] += o.amp * prof
        else:
            reach = 4 * o.a + 4 if o.kind == "mimic" else 1.6 * o.a + 3
            win, yy, xx = _window(o, reach, shape, pad)
            r, _, _ = _ellipse_radius(yy, xx, o)
            conc[win + (0,)] += 0.7 * o.amp * _flat_top(r, 0.12 if o.kind == "mimic" else 0.18)
    return hed_to_rgb(conc, DEFAULT_STAINS)


def _finish(refl, rng, std) -> np.ndarray:
    if std > 0:
        refl = np.clip(refl + rng.normal(0.0, std, refl.shape), 0.0, 1.0)
    return to_uint8(refl)


def generate_slide(cfg: SynthConfig) -> SynthSlide:
    scene = build_scene(cfg)
    pad = scene.pad
    refl = render_he(scene)[pad : pad + cfg.height, pad : pad + cfg.width]
    img = _finish(refl, np.random.default_rng([cfg.seed, 1]), cfg.noise_std)
    mit = scene.mitoses
    if len(mit):
        centers = refl[np.rint(mit[:, 1]).astype(int), np.rint(mit[:, 0]).astype(int)].mean(axis=1)
        if np.any(centers >= 0.6):
            raise ConfigInfeasible("a planted mitosis is not darker than 0.6 at its center")
    tissue = scene.tissue[pad : pad + cfg.height, pad : pad + cfg.width] >= 0.5
    return SynthSlide(img, mit, tissue, scene)


def jitter_field(cfg: SynthConfig, rng) -> np.ndarray:
    """Per-region (dx, dy) offsets in [-jitter, jitter] at region nodes, bilinear in between."""
    s = cfg.jitter_spacing
    ny, nx = math.ceil(cfg.height / s) + 1, math.ceil(cfg.width / s) + 1
    nodes = rng.uniform(-cfg.jitter, cfg.jitter, (2, ny, nx))
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    out = np.empty((cfg.height, cfg.width, 2))
    for k in range(2):
        out[..., k] = ndimage.map_coordinates(nodes[k], [yy / s, xx / s], order=1, mode="nearest")
    return out


def generate_pair(cfg: SynthConfig) -> SynthPair:
    """H&E slide plus its restained PHH3 counterpart.

    PHH3 pixel p shows the scene at p - D(p), with D = shift + jitter(p).
    """
    he = generate_slide(cfg)
    scene = he.scene
    pad = scene.pad
    canvas = render_phh3(scene)
    jrng = np.random.default_rng([cfg.seed, 2])
    disp = np.zeros((cfg.height, cfg.width, 2))
    if cfg.jitter > 0:
        disp += jitter_field(cfg, jrng)
    disp[..., 0] += cfg.shift[0]
    disp[..., 1] += cfg.shift[1]
    if np.any(disp):
        yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
        src_y = yy - disp[..., 1] + pad
        src_x = xx - disp[..., 0] + pad
        warped = np.empty((cfg.height, cfg.width, 3))
        for ch in range(3):
            warped[..., ch] = ndimage.map_coordinates(canvas[..., ch], [src_y, src_x], order=1, mode="nearest")
    else:
        warped = canvas[pad : pad + cfg.height, pad : pad + cfg.width]
    img = _finish(warped, np.random.default_rng([cfg.seed, 3]), cfg.noise_std)
    arts = np.array([(o.x, o.y) for o in scene.objects if o.kind == "artifact"]).reshape(-1, 2)
    return SynthPair(he, img, _to_phh3_frame(he.mitoses, disp), _to_phh3_frame(arts, disp),
                     tuple(cfg.shift), disp)


def _to_phh3_frame(pts, disp) -> np.ndarray:
    """Solve q = p + D(q) by fixed-point iteration (D is slowly varying)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = pts.copy()
    h, w = disp.shape[:2]
    for _ in range(8):
        xi = np.clip(np.rint(q[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(q[:, 1]).astype(int), 0, h - 1)
        q = pts + disp[yi, xi]
    return q


def simulate_observers(truth_labels, n_observers: int = 4, error_rate: float = 0.1, seed: int = 0):
    """Independent noisy binary annotations of the same candidates."""
    rng = np.random.default_rng(seed)
    t = np.asarray(truth_labels, dtype=np.int64)
    flips = rng.random((n_observers, len(t))) < error_rate
    return np.where(flips, 1 - t, t)
