"""Optical-density color math for H&E(+DAB) stained images.

Patches are float arrays of shape (H, W, 3) holding reflectance in [0, 1]
(pixel value = transmitted / incident light). HED patches have the same
shape and hold per-stain concentrations (hematoxylin, eosin, DAB).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularMatrix

DEFAULT_EPS = 1e-6

# Ruifrok & Johnston OD vectors, one row per stain (R, G, B absorption).
RUIFROK_HED = (
    (0.65, 0.70, 0.29),
    (0.07, 0.99, 0.11),
    (0.27, 0.57, 0.78),
)


@dataclass(frozen=True)
class StainMatrix:
    """Row-normalized OD basis with its cached inverse."""

    matrix: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[1]

    @property
    def dab(self) -> np.ndarray:
        return self.matrix[2]


def normalize_stain_matrix(raw) -> StainMatrix:
    m = np.asarray(raw, dtype=np.float64)
    if m.shape != (3, 3):
        raise SingularMatrix(f"stain matrix must be 3x3, got {m.shape}")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise SingularMatrix("stain matrix has a zero row")
    m = m / norms[:, None]
    if abs(np.linalg.det(m)) < 1e-9:
        raise SingularMatrix("normalized stain matrix is singular")
    m.setflags(write=False)
    inv = np.linalg.inv(m)
    inv.setflags(write=False)
    return StainMatrix(m, inv)


DEFAULT_STAINS = normalize_stain_matrix(RUIFROK_HED)


def to_reflectance(img) -> np.ndarray:
    """Map 8-bit pixels to [0, 1]; float input is passed through as float64."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    return a.astype(np.float64, copy=False)


def to_uint8(p) -> np.ndarray:
    return np.clip(np.rint(np.asarray(p) * 255.0), 0, 255).astype(np.uint8)


def rgb_to_hed(p, m: StainMatrix = DEFAULT_STAINS, eps: float = DEFAULT_EPS) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = to_reflectance(p)
    return -np.log(p + eps) @ m.inverse


def hed_to_rgb(s, m: StainMatrix = DEFAULT_STAINS, eps: float = DEFAULT_EPS) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.clip(np.exp(-(s @ m.matrix)) - eps, 0.0, 1.0)


@dataclass(frozen=True)
class StainAugmentParams:
    sigma: float = 0.05
    channels: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 0.5:
            raise ValueError(f"sigma must lie in [0, 0.5], got {self.sigma}")

    @property
    def alpha_range(self) -> tuple[float, float]:
        return (1.0 - self.sigma, 1.0 + self.sigma)

    @property
    def beta_range(self) -> tuple[float, float]:
        return (-self.sigma, self.sigma)


def draw_stain_factors(params: StainAugmentParams, rng: np.random.Generator):
    """Per-channel (alpha, beta); disabled channels get the identity pair."""
    alpha = rng.uniform(*params.alpha_range, size=3)
    beta = rng.uniform(*params.beta_range, size=3)
    off = ~np.asarray(params.channels, dtype=bool)
    alpha[off] = 1.0
    beta[off] = 0.0
    return alpha, beta


def stain_augment(p, params: StainAugmentParams, rng: np.random.Generator,
                  m: StainMatrix = DEFAULT_STAINS, eps: float = DEFAULT_EPS) -> np.ndarray:
    alpha, beta = draw_stain_factors(params, rng)
    s = rgb_to_hed(p, m, eps)
    return hed_to_rgb(s * alpha + beta, m, eps)
