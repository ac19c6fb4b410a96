"""Patch augmentation: geometry, stain, enhancement and artifact transforms.

Families are addressed by letter, matching how experiments are named:

    R  rotation / mirroring (dihedral group)     C  HED stain perturbation
    S  zoom                                       H  brightness/contrast/color
    E  elastic deformation                        B  Gaussian blur
    T  translation (random crop offset)           G  additive Gaussian noise
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import BadDimensions, InvalidIndex
from .stain import StainAugmentParams, stain_augment, to_reflectance

ALL_FAMILIES = frozenset("RSECHBGT")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    zoom_range: tuple[float, float] = (0.75, 1.25)
    elastic_alpha: float = 100.0
    elastic_sigma: float = 10.0
    color_factor_range: tuple[float, float] = (0.75, 1.5)
    contrast_factor_range: tuple[float, float] = (0.75, 1.5)
    brightness_factor_range: tuple[float, float] = (0.75, 1.25)
    blur_sigma_range: tuple[float, float] = (0.0, 2.0)
    noise_std_range: tuple[float, float] = (0.0, 0.1)
    stain_params: StainAugmentParams = field(default_factory=StainAugmentParams)
    crop_size: int = 100
    input_size: int = 128
    enabled_families: frozenset = ALL_FAMILIES

    def __post_init__(self):
        object.__setattr__(self, "enabled_families", frozenset(self.enabled_families))
        unknown = self.enabled_families - ALL_FAMILIES
        if unknown:
            raise ValueError(f"unknown augmentation families {sorted(unknown)}")
        for name in ("zoom_range", "color_factor_range", "contrast_factor_range",
                     "brightness_factor_range", "blur_sigma_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered")
        if self.crop_size > self.input_size:
            raise ValueError("crop_size must not exceed input_size")

    def with_families(self, families: str) -> "AugmentConfig":
        from dataclasses import replace

        return replace(self, enabled_families=frozenset(families))


def dihedral(p, k: int) -> np.ndarray:
    """k-th element of the square's symmetry group: k % 4 clockwise quarter
    turns, followed by a horizontal mirror when k >= 4."""
    if not 0 <= k <= 7:
        raise InvalidIndex(f"dihedral index must be in [0, 7], got {k}")
    out = np.rot90(p, k=-(k % 4), axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _mirror(c, n: int):
    """Reflect coordinates about the first and last pixel centers."""
    if n == 1:
        return np.zeros_like(c)
    period = 2 * (n - 1)
    c = np.abs(c) % period
    return np.where(c > n - 1, period - c, c)


def _remap(p, rows, cols):
    """Bilinear sampling of every channel at (rows, cols), reflect border."""
    h, w, ch = p.shape
    if h < 2 or w < 2:
        raise BadDimensions("resampling needs at least 2x2 pixels")
    r = _mirror(np.asarray(rows, dtype=np.float64), h)
    c = _mirror(np.asarray(cols, dtype=np.float64), w)
    r0 = np.minimum(r.astype(np.intp), h - 2)
    c0 = np.minimum(c.astype(np.intp), w - 2)
    fr = (r - r0).reshape(-1, 1)
    fc = (c - c0).reshape(-1, 1)
    idx = (r0 * w + c0).ravel()
    flat = p.reshape(-1, ch)
    a, b = flat.take(idx, axis=0), flat.take(idx + 1, axis=0)
    lo, hi = flat.take(idx + w, axis=0), flat.take(idx + w + 1, axis=0)
    top = a + (b - a) * fc
    bot = lo + (hi - lo) * fc
    return (top + (bot - top) * fr).reshape(np.shape(rows) + (ch,))


def scale(p, factor: float) -> np.ndarray:
    """Zoom about the patch center keeping the original size."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    p = to_reflectance(p)
    if factor == 1.0:
        return p.copy()
    h, w = p.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.clip(_remap(p, cy + (rows - cy) / factor, cx + (cols - cx) / factor), 0.0, 1.0)


def elastic(p, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Random smooth displacement field (uniform noise, Gaussian smoothed, scaled)."""
    if alpha < 0 or sigma <= 0:
        raise ValueError("need alpha >= 0 and sigma > 0")
    p = to_reflectance(p)
    h, w = p.shape[:2]
    field = rng.uniform(-1, 1, (2, h, w))
    if alpha == 0:
        return p.copy()
    # The field is i.i.d. noise, so smoothing it in the frequency domain (periodic
    # border) is statistically equivalent to a spatial filter and much cheaper.
    spec = ndimage.fourier_gaussian(np.fft.rfft2(field), (0, sigma, sigma), n=w)
    dy, dx = np.fft.irfft2(spec, s=(h, w)) * alpha
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.clip(_remap(p, rows + dy, cols + dx), 0.0, 1.0)


def luminance(p) -> np.ndarray:
    return to_reflectance(p) @ LUMA


def enhance(p, brightness: float = 1.0, contrast: float = 1.0, color: float = 1.0) -> np.ndarray:
    """Color saturation, then contrast about the mean luminance, then brightness."""
    if min(brightness, contrast, color) < 0:
        raise ValueError("enhancement factors must be non-negative")
    p = to_reflectance(p)
    gray = luminance(p)[..., None]
    out = gray + color * (p - gray)
    mean_gray = float(luminance(out).mean())
    out = mean_gray + contrast * (out - mean_gray)
    out = brightness * out
    return np.clip(out, 0.0, 1.0)


def blur(p, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    p = to_reflectance(p)
    if sigma == 0:
        return p.copy()
    return np.clip(ndimage.gaussian_filter(p, (sigma, sigma, 0), mode="mirror"), 0.0, 1.0)


def noise(p, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be >= 0")
    p = to_reflectance(p)
    if std == 0:
        return p.copy()
    return np.clip(p + rng.normal(0.0, std, p.shape), 0.0, 1.0)


def augment_patch(p, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled families in a fixed order and crop to ``cfg.crop_size``."""
    p = to_reflectance(p)
    if p.shape[:2] != (cfg.input_size, cfg.input_size):
        raise BadDimensions(f"expected {cfg.input_size}x{cfg.input_size} patch, got {p.shape[:2]}")
    fam = cfg.enabled_families
    if "R" in fam:
        p = dihedral(p, int(rng.integers(8)))
    if "S" in fam:
        p = scale(p, rng.uniform(*cfg.zoom_range))
    if "E" in fam:
        p = elastic(p, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    if "C" in fam:
        p = stain_augment(p, cfg.stain_params, rng)
    if "H" in fam:
        color = rng.uniform(*cfg.color_factor_range)
        contrast = rng.uniform(*cfg.contrast_factor_range)
        brightness = rng.uniform(*cfg.brightness_factor_range)
        p = enhance(p, brightness, contrast, color)
    if "B" in fam:
        p = blur(p, rng.uniform(*cfg.blur_sigma_range))
    if "G" in fam:
        p = noise(p, rng.uniform(*cfg.noise_std_range), rng)
    slack = cfg.input_size - cfg.crop_size
    if "T" in fam:
        oy, ox = (int(v) for v in rng.integers(0, slack + 1, size=2))
    else:
        oy = ox = slack // 2
    return np.ascontiguousarray(p[oy : oy + cfg.crop_size, ox : ox + cfg.crop_size])
