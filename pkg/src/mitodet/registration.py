"""Translation-only registration of restained slide pairs.

A shift ``v = (dx, dy)`` between images A and B means content at A[y, x]
appears at B[y + dy, x + dx]. Mapping a B coordinate back to A subtracts v.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateTile, InsufficientTissue
from .stain import to_reflectance


@dataclass(frozen=True)
class ShiftVector:
    dx: int
    dy: int

    def __neg__(self):
        return ShiftVector(-self.dx, -self.dy)

    def __add__(self, other):
        return ShiftVector(self.dx + other.dx, self.dy + other.dy)


@dataclass(frozen=True)
class RegistrationConfig:
    n_tiles: int = 10
    tile_size: int = 1024
    local_tile: int = 256
    max_shift: int = 512
    downsample: int = 4
    min_tissue: float = 0.5
    max_attempts: int = 2000
    local_highpass: float = 16.0  # Gaussian sigma removed from local tiles; 0 disables
    global_highpass: float = 16.0  # same for global tiles, in full-resolution pixels

    def __post_init__(self):
        if self.n_tiles < 1:
            raise ValueError("n_tiles must be >= 1")


def _gray(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 3:
        a = to_reflectance(a) @ np.array([0.299, 0.587, 0.114])
    return a.astype(np.float64, copy=False)


def correlation_map(a, b) -> np.ndarray:
    """Circular cross-correlation of mean-subtracted luminance, zero-shift at [0, 0].

    Constant tiles yield an all-zero map.
    """
    ga, gb = _gray(a), _gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"tile shapes differ: {ga.shape} vs {gb.shape}")
    ga = ga - ga.mean()
    gb = gb - gb.mean()
    return np.fft.irfft2(np.conj(np.fft.rfft2(ga)) * np.fft.rfft2(gb), s=ga.shape)


def _is_constant(a) -> bool:
    g = _gray(a)
    return float(g.max() - g.min()) == 0.0


def signed_offsets(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.where(idx > n // 2, idx - n, idx)


def peak_shift(cmap, max_shift: int | None = None) -> ShiftVector:
    """Argmax of a correlation map; ties go to the smallest shift norm, then (dy, dx)."""
    h, w = cmap.shape
    sy = signed_offsets(h)[:, None]
    sx = signed_offsets(w)[None, :]
    vals = cmap
    if max_shift is not None:
        vals = np.where((np.abs(sy) <= max_shift) & (np.abs(sx) <= max_shift), cmap, -np.inf)
    best = vals.max()
    ys, xs = np.nonzero(vals == best)
    cand = sorted(zip((sy[ys, 0] ** 2 + sx[0, xs] ** 2).tolist(), sy[ys, 0].tolist(), sx[0, xs].tolist()))
    _, dy, dx = cand[0]
    return ShiftVector(int(dx), int(dy))


def subpixel_offset(cmap, shift: ShiftVector) -> tuple[float, float]:
    """Parabolic refinement of an integer peak along each axis, each in [-0.5, 0.5]."""
    h, w = cmap.shape
    y, x = shift.dy % h, shift.dx % w

    def vertex(lo, mid, hi):
        den = lo - 2.0 * mid + hi
        return 0.0 if den >= 0 else float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))

    ox = vertex(cmap[y, (x - 1) % w], cmap[y, x], cmap[y, (x + 1) % w])
    oy = vertex(cmap[(y - 1) % h, x], cmap[y, x], cmap[(y + 1) % h, x])
    return ox, oy


def cross_correlate_shift(a, b, max_shift: int | None = None):
    """Shift of b relative to a and the correlation map it was read from."""
    if np.shape(a)[:2] != np.shape(b)[:2]:
        raise ValueError("tiles must have equal dimensions")
    if _is_constant(a) or _is_constant(b):
        raise DegenerateTile("cannot correlate a constant tile")
    cmap = correlation_map(a, b)
    return peak_shift(cmap, max_shift), cmap


def tissue_fraction_map(tissue, tile: int) -> np.ndarray:
    """Fraction of tissue in the tile x tile window whose top-left is each pixel."""
    t = np.asarray(tissue, dtype=np.float64)
    ii = np.pad(t.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    h, w = t.shape
    if h < tile or w < tile:
        return np.zeros((0, 0))
    s = ii[tile:, tile:] - ii[:-tile, tile:] - ii[tile:, :-tile] + ii[:-tile, :-tile]
    return s / float(tile * tile)


def sample_tile_positions(tissue, tile: int, n: int, rng: np.random.Generator,
                          min_tissue: float = 0.5, max_attempts: int = 2000):
    """n random top-left corners (y, x) whose tile has at least ``min_tissue`` coverage."""
    frac = tissue_fraction_map(tissue, tile)
    if frac.size == 0:
        raise InsufficientTissue("slide smaller than the registration tile")
    out = []
    for _ in range(max_attempts):
        y = int(rng.integers(frac.shape[0]))
        x = int(rng.integers(frac.shape[1]))
        if frac[y, x] >= min_tissue:
            out.append((y, x))
            if len(out) == n:
                return out
    raise InsufficientTissue(f"found only {len(out)} of {n} tissue tiles")


def _downsample(img, f: int) -> np.ndarray:
    g = _gray(img)
    if f <= 1:
        return g
    h, w = (g.shape[0] // f) * f, (g.shape[1] // f) * f
    return g[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def highpass(tile, sigma: float) -> np.ndarray:
    """Tile minus its Gaussian blur; sigma 0 returns the tile unchanged."""
    if sigma <= 0:
        return tile
    return tile - ndimage.gaussian_filter(tile, sigma, mode="reflect")


def averaged_shift(a, b, positions, tile: int, max_shift=None, workers: int = 1, sigma: float = 0.0):
    """Mean correlation map over tile pairs taken at identical positions."""
    def one(pos):
        y, x = pos
        return correlation_map(highpass(a[y : y + tile, x : x + tile], sigma),
                               highpass(b[y : y + tile, x : x + tile], sigma))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        maps = list(pool.map(one, positions))
    mean = np.zeros((tile, tile))
    for cm in maps:
        mean += cm
    mean /= len(maps)
    return peak_shift(mean, max_shift), mean, [peak_shift(cm, max_shift) for cm in maps]


@dataclass
class GlobalRegistration:
    shift: ShiftVector
    coarse: ShiftVector
    trials: list = field(default_factory=list)
    positions: list = field(default_factory=list)


def global_register(slide_a, slide_b, cfg: RegistrationConfig = RegistrationConfig(),
                    rng: np.random.Generator | None = None, tissue=None, positions=None,
                    workers: int = 1) -> GlobalRegistration:
    """Global shift from averaged tile cross-correlation.

    A coarse pass runs on ``cfg.downsample``-reduced luminance; a full
    resolution pass at the same positions, with B offset by the coarse
    estimate, recovers the exact integer shift. Tiles are high-pass filtered
    so stain-specific low-frequency content does not flatten the peak.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ga, gb = _gray(slide_a), _gray(slide_b)
    if ga.shape != gb.shape:
        raise ValueError("slides must share dimensions")
    f = max(1, cfg.downsample)
    tile = min(cfg.tile_size, ga.shape[0], ga.shape[1])
    if positions is None:
        if tissue is None:
            from .wsi import tissue_mask_array

            tissue = tissue_mask_array(slide_a)
        positions = sample_tile_positions(tissue, tile, cfg.n_tiles, rng, cfg.min_tissue, cfg.max_attempts)
    ctile = tile // f
    coarse = ShiftVector(0, 0)
    if f > 1:
        da, db = _downsample(ga, f), _downsample(gb, f)
        cpos = [(min(y // f, da.shape[0] - ctile), min(x // f, da.shape[1] - ctile)) for y, x in positions]
        cs, _, _ = averaged_shift(da, db, cpos, ctile, math.ceil(cfg.max_shift / f), workers,
                                  cfg.global_highpass / f)
        coarse = ShiftVector(cs.dx * f, cs.dy * f)
    # Fine pass: compare A tiles with B tiles displaced by the coarse shift.
    gb_shift = _translate(gb, -coarse.dx, -coarse.dy)
    fine, _, trials = averaged_shift(ga, gb_shift, positions, tile, 2 * f, workers, cfg.global_highpass)
    total = coarse + fine
    return GlobalRegistration(total, coarse, [coarse + t for t in trials], list(positions))


def _translate(img, dx: int, dy: int) -> np.ndarray:
    """out[y, x] = img[y - dy, x - dx]; reflected at the borders."""
    if dx == 0 and dy == 0:
        return img
    h, w = img.shape
    pad = max(abs(dx), abs(dy))
    p = np.pad(img, pad, mode="reflect")
    return p[pad - dy : pad - dy + h, pad - dx : pad - dx + w]


@dataclass
class LocalResult:
    x: float
    y: float
    local: ShiftVector
    fallback: bool
    subpixel: tuple = (0.0, 0.0)


def _window(img, cy: int, cx: int, size: int):
    h, w = img.shape[:2]
    y0 = min(max(cy - size // 2, 0), max(h - size, 0))
    x0 = min(max(cx - size // 2, 0), max(w - size, 0))
    return img[y0 : y0 + size, x0 : x0 + size], y0, x0


def local_register(point, slide_a, slide_b, global_shift: ShiftVector,
                   cfg: RegistrationConfig = RegistrationConfig()) -> LocalResult:
    """Refine a B-frame point already mapped to A by the global shift.

    ``point`` is (x, y) in A coordinates (B coordinate minus global shift).
    The tile of A centered there is correlated with the tile of B centered
    at point + global shift; the residual shift r is subtracted so the
    returned coordinate is where the object sits in A. The integer residual
    is refined by a parabolic fit around the correlation peak. Tiles are
    high-pass filtered first so tissue-edge ramps do not dominate. Windows are
    clamped at image borders; constant tiles fall back to the global estimate.
    """
    x, y = point
    ga, gb = _gray(slide_a), _gray(slide_b)
    size = min(cfg.local_tile, ga.shape[0], ga.shape[1])
    cx, cy = int(round(x)), int(round(y))
    ta, y0, x0 = _window(ga, cy, cx, size)
    by, bx = y0 + global_shift.dy, x0 + global_shift.dx
    if not (0 <= by <= gb.shape[0] - size and 0 <= bx <= gb.shape[1] - size):
        shifted = _translate(gb, -global_shift.dx, -global_shift.dy)
        tb = shifted[y0 : y0 + size, x0 : x0 + size]
    else:
        tb = gb[by : by + size, bx : bx + size]
    ta, tb = highpass(ta, cfg.local_highpass), highpass(tb, cfg.local_highpass)
    try:
        r, cmap = cross_correlate_shift(ta, tb, max_shift=size // 4)
    except DegenerateTile:
        return LocalResult(float(x), float(y), ShiftVector(0, 0), True)
    ox, oy = subpixel_offset(cmap, r)
    return LocalResult(float(x - r.dx - ox), float(y - r.dy - oy), -r, False, (-ox, -oy))


def registration_report(g: GlobalRegistration, residuals=None) -> str:
    lines = [f"global_shift = {g.shift.dx} {g.shift.dy}",
             f"coarse_shift = {g.coarse.dx} {g.coarse.dy}",
             f"n_trials = {len(g.trials)}"]
    for i, (t, pos) in enumerate(zip(g.trials, g.positions)):
        lines.append(f"trial_{i} = {t.dx} {t.dy} at {pos[1]} {pos[0]}")
    if residuals is not None:
        res = np.asarray(residuals, dtype=np.float64)
        for i, r in enumerate(res):
            lines.append(f"candidate_{i}_residual = {r:.3f}")
        if len(res):
            lines.append(f"residual_within_1px = {np.mean(res <= 1.0):.4f}")
    return "\n".join(lines) + "\n"
