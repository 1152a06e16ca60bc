"""Frozen patch-PCA encoder.

Each patch scale M (M x M non-overlapping patches per image) owns a
centered-SVD projection pooled over every patch position.  Coefficients
are divided by one scalar per scale so that a patch feature vector has
unit expected squared norm on the fitting data, the way pre-trained
embeddings are usually L2-normalised.  Channel order (and hence the
variance ordering) is untouched by that scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

MIN_PATCH = 4
MAX_FIT_PATCHES = 60_000


def patch_scale(l: int, L: int, shape_schedule: str = "linear") -> int:
    """Patches per side used for level ``l`` of an ``L``-level hierarchy."""
    if not 2 <= l <= L:
        raise ValueError(f"level {l} has no encoder latent (valid: 2..{L})")
    if shape_schedule == "linear":
        return L - l + 1
    if shape_schedule == "dyadic":
        return 2 ** (L - l)
    raise ValueError(f"unknown shape schedule {shape_schedule!r}")


def level_scales(L: int, shape_schedule: str = "linear") -> list[int]:
    return [patch_scale(l, L, shape_schedule) for l in range(2, L + 1)]


def patchify(image, M: int) -> list[np.ndarray]:
    image = np.asarray(image)
    H, W = image.shape
    if M < 1 or H % M or W % M:
        raise ValueError(f"image {H}x{W} not divisible into {M}x{M} patches")
    ph, pw = H // M, W // M
    return [image[i * ph : (i + 1) * ph, j * pw : (j + 1) * pw] for i in range(M) for j in range(M)]


def unpatchify(patches, M: int) -> np.ndarray:
    if len(patches) != M * M:
        raise ValueError(f"expected {M * M} patches, got {len(patches)}")
    rows = [np.concatenate(patches[i * M : (i + 1) * M], axis=1) for i in range(M)]
    return np.concatenate(rows, axis=0)


def _patch_matrix(images: np.ndarray, M: int) -> np.ndarray:
    """(N, H, W) -> (N, M*M, patch_pixels), patches row-major."""
    N, H, W = images.shape
    if H % M or W % M:
        raise ValueError(f"image {H}x{W} not divisible into {M}x{M} patches")
    ph, pw = H // M, W // M
    x = images.reshape(N, M, ph, M, pw).transpose(0, 1, 3, 2, 4)
    return x.reshape(N, M * M, ph * pw)


@dataclass(frozen=True)
class ScaleProjection:
    mean: np.ndarray  # (patch_pixels,)
    basis: np.ndarray  # (k, patch_pixels), orthonormal rows
    scale: float

    @property
    def channels(self) -> int:
        return self.basis.shape[0]

    def project(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.mean) @ self.basis.T / self.scale

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return self.mean + (coeffs * self.scale) @ self.basis


@dataclass(frozen=True)
class EncoderModel:
    image_size: int
    d: int
    projections: dict = field(repr=False)  # M -> ScaleProjection
    fit_seed: int = 0
    kind: str = "pca"
    shape_schedule: str = "linear"

    @property
    def patch_scales(self) -> list[int]:
        return sorted(self.projections)

    def projection(self, M: int) -> ScaleProjection:
        try:
            return self.projections[M]
        except KeyError:
            raise ValueError(f"encoder has no projection for {M}x{M} patches") from None

    def encode_scale(self, images, M: int) -> np.ndarray:
        """Encode a batch (N, H, W) or one image at scale M -> (..., M*M, channels)."""
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 2
        if single:
            images = images[None]
        if images.shape[1:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {images.shape[1:]}")
        out = self.projection(M).project(_patch_matrix(images, M))
        return out[0] if single else out

    def features(self, images) -> np.ndarray:
        """Whole-image features (scale 1), used for toy-FD and KNN."""
        out = self.encode_scale(images, 1)
        return out[..., 0, :]


def _sign_fix(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(len(basis)), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def _fit_scale(patches: np.ndarray, k: int, kind: str, rng) -> ScaleProjection:
    n, p = patches.shape
    if k > p:
        raise ValueError(f"cannot keep {k} channels from {p}-pixel patches")
    if n < k:
        raise ValueError(f"insufficient samples: {n} patches for {k} channels")
    if len(patches) > MAX_FIT_PATCHES:
        patches = patches[np.sort(rng.choice(len(patches), MAX_FIT_PATCHES, replace=False))]
    mean = patches.mean(axis=0)
    X = patches - mean
    if not np.any(X):
        raise ValueError("degenerate data: zero variance across patches")
    if kind == "pca":
        _, _, vt = np.linalg.svd(X, full_matrices=False)
        basis = vt[:k]
    elif kind == "random":
        q, _ = np.linalg.qr(rng.standard_normal((p, k)))
        basis = q.T
    else:
        raise ValueError(f"unknown encoder kind {kind!r}")
    basis = _sign_fix(basis)
    coeffs = X @ basis.T
    energy = np.mean(np.sum(coeffs**2, axis=1))
    if energy <= 0:
        raise ValueError("degenerate data: retained directions carry no variance")
    return ScaleProjection(mean=mean, basis=basis, scale=float(np.sqrt(energy)))


def fit_encoder(
    data: Dataset | np.ndarray,
    L: int,
    d: int = 32,
    seed: int = 0,
    kind: str = "pca",
    shape_schedule: str = "linear",
) -> EncoderModel:
    """Fit one projection per patch scale used by an ``L``-level hierarchy.

    Scale 1 is always fitted, even for ``L <= 2``, because whole-image
    features drive evaluation.  ``kind="random"`` swaps the principal
    directions for a random orthonormal basis of the same size (the
    scrambled control encoder).
    """
    images = data.images if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError("expected an (N, H, W) image stack")
    N, H, W = images.shape
    if L < 1:
        raise ValueError("L must be >= 1")
    scales = sorted(set(level_scales(L, shape_schedule)) | {1})
    for M in scales:
        if d % M:
            raise ValueError(f"d={d} not divisible by patch scale {M}")
        if H % M:
            raise ValueError(f"image size {H} not divisible by patch scale {M}")
        if H // M < MIN_PATCH:
            raise ValueError(f"patches of {H // M}px at scale {M} are below the {MIN_PATCH}px minimum")
    if N < d:
        raise ValueError(f"insufficient samples: N={N} < d={d}")
    projections = {}
    for M in scales:
        # one stream per scale: a scale fits identically whatever else is fitted
        rng = np.random.default_rng([seed, M])
        patches = _patch_matrix(images, M).reshape(N * M * M, -1)
        projections[M] = _fit_scale(patches, d // M, kind, rng)
    return EncoderModel(
        image_size=H, d=d, projections=projections, fit_seed=seed, kind=kind, shape_schedule=shape_schedule
    )


def encode_level(enc: EncoderModel, image, l: int, L: int) -> np.ndarray:
    """Latent for level ``l`` as a (patches, channels) matrix; batches gain a leading axis."""
    M = patch_scale(l, L, enc.shape_schedule)
    return enc.encode_scale(image, M)


def _ranked_neighbors(features: np.ndarray, queries: np.ndarray, K: int, exclude_self: bool, chunk: int = 32):
    """Indices/distances of the K nearest rows of ``features`` for each query index.

    Exact distances from explicit differences; ties go to the smaller index.
    """
    F = np.asarray(features, dtype=np.float64)
    idx_out = np.empty((len(queries), K), dtype=np.int64)
    dist_out = np.empty((len(queries), K))
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        diff = F[None, :, :] - F[q][:, None, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        if exclude_self:
            d2[np.arange(len(q)), q] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :K]
        idx_out[start : start + len(q)] = order
        dist_out[start : start + len(q)] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx_out, dist_out


def knn_accuracy(features, labels, K: int = 20) -> tuple[float, float]:
    """Leave-one-out KNN top-1 / top-5 accuracy.

    Votes are neighbour counts; equal counts go to the smaller class id.
    Top-5 counts a hit when the true label is among the five most-voted
    classes that received at least one vote.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    N = len(features)
    if K >= N:
        raise ValueError(f"K={K} must be smaller than N={N}")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    nbrs, _ = _ranked_neighbors(features, np.arange(N), K, exclude_self=True)
    C = len(classes)
    votes = np.zeros((N, C), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(N), K), y[nbrs].ravel()), 1)
    # stable sort on -votes keeps smaller class ids first among ties
    ranking = np.argsort(-votes, axis=1, kind="stable")
    top1 = np.mean(ranking[:, 0] == y)
    top5_cls = ranking[:, :5]
    voted = np.take_along_axis(votes, top5_cls, axis=1) > 0
    top5 = np.mean(np.any((top5_cls == y[:, None]) & voted, axis=1))
    return float(top1), float(top5)
