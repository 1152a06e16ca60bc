"""Latent hierarchy construction and conditioning-noise control.

Level 1 is the flattened image; level l >= 2 is the flattened patch
encoding at ``patch_scale(l, L)``.  Upper latents reach lower levels only
through Gaussian-corrupted copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import NestedConfig
from .encoder import EncoderModel, encode_level, patch_scale


@dataclass
class LatentHierarchy:
    L: int
    z: dict  # level -> 1-D array
    sigma: dict  # level (2..L) -> float

    @property
    def dims(self) -> list[int]:
        return [len(self.z[l]) for l in range(1, self.L + 1)]


def level_dims(L: int, d: int, image_size: int, shape_schedule: str = "linear") -> dict[int, int]:
    dims = {1: image_size * image_size}
    for l in range(2, L + 1):
        M = patch_scale(l, L, shape_schedule)
        dims[l] = M * M * (d // M)
    return dims


def cond_dim(dims: dict, l: int, L: int) -> int:
    return sum(dims[m] for m in range(l + 1, L + 1))


def build_latents(enc: EncoderModel, images, cfg: NestedConfig) -> dict[int, np.ndarray]:
    """Batched hierarchy: level -> (N, dim_l) array."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    N = len(images)
    if enc.shape_schedule != cfg.shape_schedule or enc.d != cfg.d:
        raise ValueError("encoder does not match the config's shape schedule / d")
    out = {1: images.reshape(N, -1).copy()}
    for l in range(2, cfg.L + 1):
        out[l] = encode_level(enc, images, l, cfg.L).reshape(N, -1)
    return out


def build_hierarchy(enc: EncoderModel, image, cfg: NestedConfig) -> LatentHierarchy:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("build_hierarchy takes a single H x W image")
    latents = build_latents(enc, image, cfg)
    z = {l: latents[l][0] for l in latents}
    sigma = {l: cfg.sigma_of(l) for l in range(2, cfg.L + 1)}
    return LatentHierarchy(L=cfg.L, z=z, sigma=sigma)


def inject_noise(z_l, sigma_l: float, rng) -> np.ndarray:
    if sigma_l < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_l}")
    z_l = np.asarray(z_l, dtype=np.float64)
    return z_l + sigma_l * rng.standard_normal(z_l.shape)


def capacity_kl(z_l, sigma_l: float) -> float:
    """KL( N(z, sigma^2 I) || N(0, I) ) in nats."""
    if sigma_l <= 0:
        raise ValueError("capacity is unbounded for sigma = 0")
    z_l = np.asarray(z_l, dtype=np.float64).ravel()
    s2 = sigma_l * sigma_l
    return float(0.5 * np.sum(s2 + z_l * z_l - 1.0 - math.log(s2)))


def generation_noise_scale(sigma_l: float, t: int, T: int, gamma: float) -> float:
    """Std of the conditioning noise at sampling step t: sigma * (t/T)^(gamma/2)."""
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0:
        return float(sigma_l)
    if math.isinf(gamma):
        return float(sigma_l) if t == T else 0.0
    return float(sigma_l * (t / T) ** (gamma / 2))
