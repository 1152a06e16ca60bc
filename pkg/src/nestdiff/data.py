"""Procedural shape/texture images and their on-disk layout.

A dataset directory holds ``manifest.json``, ``images.f32`` (raw
little-endian float32, N x H x W) and ``labels.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "cross", "triangle")
TEXTURES = ("flat", "stripes", "speckle")

BACKGROUND = -1.0


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W, values in [-1, 1]
    global_labels: np.ndarray
    texture_labels: np.ndarray
    split: str = "train"
    global_names: tuple = SHAPES
    texture_names: tuple = TEXTURES

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"images must be N x H x H, got {self.images.shape}")
        self.global_labels = np.asarray(self.global_labels, dtype=np.int64)
        self.texture_labels = np.asarray(self.texture_labels, dtype=np.int64)
        n = len(self.images)
        if len(self.global_labels) != n or len(self.texture_labels) != n:
            raise ValueError("label arrays must match image count")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx],
            self.global_labels[idx],
            self.texture_labels[idx],
            split=self.split,
            global_names=self.global_names,
            texture_names=self.texture_names,
        )


@dataclass
class DatasetSpec:
    n_images: int = 4096
    size: int = 32
    shapes: tuple = SHAPES
    textures: tuple = TEXTURES
    # silhouette radius as a fraction of the image size
    radius_range: tuple = (0.28, 0.42)
    # centre offset in pixels
    shift_range: tuple = (-3.0, 3.0)
    intensity_range: tuple = (0.3, 0.9)
    seed: int = 0
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if self.size < 8:
            raise ValueError("image size must be at least 8")
        if len(self.shapes) < 2 or len(self.textures) < 2:
            raise ValueError("need at least two shape classes and two texture classes")
        unknown = set(self.shapes) - set(SHAPES) | set(self.textures) - set(TEXTURES)
        if unknown:
            raise ValueError(f"unknown classes: {sorted(unknown)}")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ValueError("radius_range must lie in (0, 0.5)")


def _silhouette(shape: str, yy, xx, r: float, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    if shape == "disk":
        return xx**2 + yy**2 <= r**2
    if shape == "square":
        h = r / np.sqrt(2) * 1.15
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if shape == "cross":
        w = r * 0.35
        return ((np.abs(u) <= r) & (np.abs(v) <= w)) | ((np.abs(v) <= r) & (np.abs(u) <= w))
    if shape == "triangle":
        # equilateral, circumradius r
        inside = np.ones_like(xx, dtype=bool)
        for k in range(3):
            th = angle + np.pi / 2 + 2 * np.pi * k / 3
            nx, ny = np.cos(th), np.sin(th)
            inside &= xx * nx + yy * ny <= r / 2
        return inside
    raise ValueError(shape)


def _texture(texture: str, yy, xx, rng, level: float) -> np.ndarray:
    if texture == "flat":
        return np.full(xx.shape, level)
    if texture == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        return np.where(wave > 0, level, -level * 0.5)
    if texture == "speckle":
        return np.clip(level + 0.6 * rng.standard_normal(xx.shape), -1.0, 1.0)
    raise ValueError(texture)


def render_image(spec: DatasetSpec, shape: str, texture: str, rng) -> np.ndarray:
    n = spec.size
    r = rng.uniform(*spec.radius_range) * n
    cx = (n - 1) / 2 + rng.uniform(*spec.shift_range)
    cy = (n - 1) / 2 + rng.uniform(*spec.shift_range)
    angle = rng.uniform(-0.3, 0.3)
    level = rng.uniform(*spec.intensity_range)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mask = _silhouette(shape, yy - cy, xx - cx, r, angle)
    fill = _texture(texture, yy, xx, rng, level)
    return np.where(mask, fill, BACKGROUND)


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    g = rng.integers(0, len(spec.shapes), size=spec.n_images)
    tx = rng.integers(0, len(spec.textures), size=spec.n_images)
    images = np.empty((spec.n_images, spec.size, spec.size))
    for i in range(spec.n_images):
        images[i] = render_image(spec, spec.shapes[g[i]], spec.textures[tx[i]], rng)
    return Dataset(
        images,
        g,
        tx,
        split=spec.split,
        global_names=tuple(spec.shapes),
        texture_names=tuple(spec.textures),
    )


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(data: Dataset, out_dir, seed: int | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, h, w = data.images.shape
    manifest = {
        "format": "nestdiff-dataset",
        "version": 1,
        "n_images": n,
        "height": h,
        "width": w,
        "dtype": "<f4",
        "split": data.split,
        "global_labels": list(data.global_names),
        "texture_labels": list(data.texture_names),
        "seed": seed,
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    _atomic_write(out / "images.f32", data.images.astype("<f4").tobytes())
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["index", "global", "texture"])
    for i in range(n):
        wr.writerow([i, int(data.global_labels[i]), int(data.texture_labels[i])])
    _atomic_write(out / "labels.csv", buf.getvalue().encode())
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    n, h, w = manifest["n_images"], manifest["height"], manifest["width"]
    raw = np.fromfile(path / "images.f32", dtype="<f4")
    if raw.size != n * h * w:
        raise ValueError(f"{path}: expected {n * h * w} pixels, found {raw.size}")
    g = np.empty(n, dtype=np.int64)
    tx = np.empty(n, dtype=np.int64)
    with open(path / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise ValueError(f"{path}: labels.csv has {len(rows)} rows, expected {n}")
    for row in rows:
        i = int(row["index"])
        g[i] = int(row["global"])
        tx[i] = int(row["texture"])
    return Dataset(
        raw.reshape(n, h, w).astype(np.float64),
        g,
        tx,
        split=manifest.get("split", "train"),
        global_names=tuple(manifest["global_labels"]),
        texture_names=tuple(manifest["texture_labels"]),
    )


def gen_dataset(spec: DatasetSpec, out_dir) -> Dataset:
    data = generate(spec)
    save_dataset(data, out_dir, seed=spec.seed)
    return data
