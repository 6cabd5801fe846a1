"""Stochastic intensity and geometry augmentations for the second view.

All functions accept a ``Volume`` or a bare [C, D, H, W] array and return
the same kind. Intensities are on the [0, 255] scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Volume


@dataclass
class AugmentConfig:
    gamma_lo: float = 0.7
    gamma_hi: float = 1.5
    max_rotation_degrees: float = 10.0
    max_translation_voxels: float = 4.0
    max_scale_delta: float = 0.1
    noise_sigma_lo: float = 0.0
    noise_sigma_hi: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma_lo <= self.gamma_hi:
            raise ValueError(f"gamma range must satisfy 0 < lo <= hi, got [{self.gamma_lo}, {self.gamma_hi}]")
        if not 0 <= self.noise_sigma_lo <= self.noise_sigma_hi:
            raise ValueError("noise sigma range must satisfy 0 <= lo <= hi")
        for name in ("max_rotation_degrees", "max_translation_voxels", "max_scale_delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_scale_delta >= 1:
            raise ValueError("max_scale_delta must be < 1")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class AffineParams:
    rotation_degrees: tuple[float, float, float] = (0.0, 0.0, 0.0)  # about the D, H, W axes
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # voxels along D, H, W
    scale: float = 1.0


def _unwrap(v):
    return (v.voxels, v) if isinstance(v, Volume) else (np.asarray(v), None)


def _wrap(arr, like):
    return like.with_voxels(arr) if like is not None else arr


def gamma_correct(v, gamma: float):
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    x, like = _unwrap(v)
    if gamma == 1.0:
        return _wrap(x.copy(), like)
    out = 255.0 * np.power(np.clip(x, 0.0, 255.0) / 255.0, gamma)
    return _wrap(out.astype(x.dtype), like)


def rotation_matrix(degrees) -> np.ndarray:
    """Rotation about the D ("z"), then H ("y"), then W ("x") axis.

    Coordinates are (d, h, w) index order; the result is ``R_w @ R_h @ R_d``.
    Entries within 1e-12 of an integer are snapped so quarter turns are exact.
    """
    az, ay, ax = np.deg2rad(np.asarray(degrees, dtype=np.float64))

    def rot(i, j, a):
        m = np.eye(3)
        c, s = np.cos(a), np.sin(a)
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
        return m

    # rotation about D mixes (h, w); about H mixes (d, w); about W mixes (d, h)
    r = rot(0, 1, ax) @ rot(0, 2, ay) @ rot(1, 2, az)
    snapped = np.round(r)
    close = np.abs(r - snapped) < 1e-12
    r[close] = snapped[close]
    return r


def affine_transform(v, params: AffineParams):
    """Rotate, scale and translate about the volume centre.

    Output voxel ``p`` samples the input at ``c + R^T (p - c - t) / s`` with
    trilinear interpolation; samples outside the input read as 0.
    """
    x, like = _unwrap(v)
    dims = np.array(x.shape[1:], dtype=np.float64)
    center = (dims - 1.0) / 2.0
    R = rotation_matrix(params.rotation_degrees)
    t = np.asarray(params.translation, dtype=np.float64)
    if np.array_equal(R, np.eye(3)) and params.scale == 1.0 and not t.any():
        return _wrap(x.copy(), like)
    grid = np.indices(x.shape[1:], dtype=np.float64).reshape(3, -1)
    src = center[:, None] + (R.T @ (grid - center[:, None] - t[:, None])) / params.scale
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        out[c] = ndimage.map_coordinates(x[c], src, order=1, mode="constant", cval=0.0).reshape(x.shape[1:])
    return _wrap(out, like)


def gaussian_noise(v, sigma: float, seed):
    """Add i.i.d. N(0, sigma^2) noise, then clamp to [0, 255]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x, like = _unwrap(v)
    if sigma == 0:
        return _wrap(x.copy(), like)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.clip(x + sigma * rng.standard_normal(x.shape), 0.0, 255.0)
    return _wrap(out.astype(x.dtype), like)


def sample_view_params(cfg: AugmentConfig, rng: np.random.Generator) -> tuple[float, AffineParams, float]:
    gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi)
    rot = rng.uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees, size=3)
    trans = rng.uniform(-cfg.max_translation_voxels, cfg.max_translation_voxels, size=3)
    scale = 1.0 + rng.uniform(-cfg.max_scale_delta, cfg.max_scale_delta)
    sigma = rng.uniform(cfg.noise_sigma_lo, cfg.noise_sigma_hi)
    return float(gamma), AffineParams(tuple(rot), tuple(trans), float(scale)), float(sigma)


def random_view(v, cfg: AugmentConfig, rng: np.random.Generator):
    """Gamma, then affine, then noise, with parameters drawn uniformly from ``cfg``."""
    gamma, affine, sigma = sample_view_params(cfg, rng)
    out = gamma_correct(v, gamma)
    out = affine_transform(out, affine)
    return gaussian_noise(out, sigma, rng)
