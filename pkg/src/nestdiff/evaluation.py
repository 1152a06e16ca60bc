"""Desk-scale metrics: toy Frechet distance, KNN feature quality,
resampling distances and multiply-add accounting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import NestedConfig
from .data import Dataset
from .denoiser import count_macs
from .encoder import EncoderModel, knn_accuracy
from .hierarchy import build_latents, capacity_kl, cond_dim, level_dims
from .sampler import images_of, resample_from_level, sample_hierarchy
from .trainer import ModelBundle

COV_REG = 1e-6
MAX_FD_DIM = 64


def _sym_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must share a dimension, got {a.shape} and {b.shape}")
    D = a.shape[1]
    if D > MAX_FD_DIM:
        raise ValueError(f"feature dim {D} exceeds {MAX_FD_DIM}")
    if len(a) <= D or len(b) <= D:
        raise ValueError(f"need more than {D} samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    reg = COV_REG * np.eye(D)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + reg
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + reg
    # tr((A B)^1/2) = tr((A^1/2 B A^1/2)^1/2), the latter symmetric PSD
    ra = _sym_sqrt(cov_a)
    inner = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0, None)))
    diff = mu_a - mu_b
    fd = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(fd, 0.0))


@dataclass
class FlopsReport:
    per_level: dict
    total: int
    baseline: int

    @property
    def ratio(self) -> float:
        return self.total / self.baseline


def _layer_macs(widths) -> int:
    return sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def count_flops_config(cfg: NestedConfig) -> FlopsReport:
    """Multiply-adds per denoising step for every level, from shapes alone."""
    dims = level_dims(cfg.L, cfg.d, cfg.image_size, cfg.shape_schedule)
    per = {}
    for l in range(1, cfg.L + 1):
        width_in = dims[l] + cfg.time_dim + cond_dim(dims, l, cfg.L)
        per[l] = _layer_macs([width_in, *cfg.hidden, dims[l]])
    base = _layer_macs([dims[1] + cfg.time_dim, *cfg.hidden, dims[1]])
    return FlopsReport(per, sum(per.values()), base)


def count_flops(bundle: ModelBundle) -> FlopsReport:
    bundle.check_complete()
    per = {l: count_macs(net) for l, net in sorted(bundle.nets.items())}
    c = bundle.config
    base = _layer_macs([c.image_size**2 + c.time_dim, *c.hidden, c.image_size**2])
    return FlopsReport(per, sum(per.values()), base)


@dataclass
class MetricsRecord:
    run_id: str
    toy_fd: float
    knn_top1: float
    knn_top5: float
    flops: dict
    flops_ratio: float
    capacity_kl: dict
    resample_distance: dict
    config: dict
    extra: dict = field(default_factory=dict)

    def validate(self):
        vals = [self.toy_fd, self.knn_top1, self.knn_top5, self.flops_ratio]
        vals += list(self.capacity_kl.values()) + list(self.resample_distance.values())
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("metrics must be finite")
        if any(v <= 0 for v in self.flops.values()):
            raise ValueError("flop counts must be positive")

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("flops", "capacity_kl", "resample_distance"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsRecord":
        d = json.loads(text)
        for key in ("flops", "capacity_kl", "resample_distance"):
            d[key] = {int(k): v for k, v in d[key].items()}
        return cls(**d)

    def summary_row(self) -> dict:
        return {
            "run_id": self.run_id,
            "L": self.config.get("L"),
            "toy_fd": self.toy_fd,
            "knn_top1": self.knn_top1,
            "knn_top5": self.knn_top5,
            "flops_ratio": self.flops_ratio,
            "resample_distance": ";".join(f"{v:.6g}" for _, v in sorted(self.resample_distance.items())),
        }


def resampling_distances(bundle: ModelBundle, sources, rng, features_of=None, **kw) -> dict[int, float]:
    """Mean top-level feature distance between sources and their level-k resamples, k = 1..L."""
    enc = bundle.encoder
    features_of = features_of or enc.features
    src_feat = features_of(sources)
    out = {}
    for k in range(1, bundle.L + 1):
        traces = resample_from_level(bundle, sources, k, rng, **kw)
        feat = features_of(images_of(traces))
        out[k] = float(np.mean(np.linalg.norm(feat - src_feat, axis=1)))
    return out


def eval_run(
    bundle: ModelBundle,
    data: Dataset,
    n_samples: int,
    rng,
    run_id: str = "run",
    feature_encoder: EncoderModel | None = None,
    n_sources: int = 64,
    knn_k: int = 20,
    gamma=None,
    cfg_weights=None,
    samples=None,
) -> tuple[MetricsRecord, dict]:
    """Generate, measure and return (record, artefacts for plotting)."""
    enc = feature_encoder or bundle.encoder
    D = enc.projection(1).channels
    if n_samples < D + 1:
        raise ValueError(f"toy-FD needs at least {D + 1} samples")
    if samples is None:
        samples = sample_hierarchy(bundle, n_samples, rng, gamma=gamma, cfg_weights=cfg_weights)
    gen_images = images_of(samples)
    fd = frechet_distance(enc.features(gen_images), enc.features(data.images))
    k = min(knn_k, len(data) - 1)
    top1, top5 = knn_accuracy(enc.features(data.images), data.global_labels, k)
    flops = count_flops(bundle)
    # sigma = 0 has unbounded capacity and is left out
    cap = {}
    if bundle.L > 1:
        lat = build_latents(bundle.encoder, data.images, bundle.config)
        for l in range(2, bundle.L + 1):
            s = bundle.config.sigma_of(l)
            if s > 0:
                cap[l] = float(np.mean([capacity_kl(z, s) for z in lat[l]]))
    sources = data.images[: min(n_sources, len(data))]
    resample = resampling_distances(bundle, sources, rng, features_of=enc.features, gamma=gamma,
                                    cfg_weights=cfg_weights)
    record = MetricsRecord(
        run_id=run_id,
        toy_fd=fd,
        knn_top1=top1,
        knn_top5=top5,
        flops=flops.per_level,
        flops_ratio=flops.ratio,
        capacity_kl=cap,
        resample_distance=resample,
        config=bundle.config.resolved(),
    )
    record.validate()
    return record, {"samples": gen_images, "sources": sources}


def write_record(record: MetricsRecord, runs_dir, summary_csv=None) -> Path:
    out = Path(runs_dir) / record.run_id
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    path.write_text(record.to_json())
    if summary_csv is not None:
        summary_csv = Path(summary_csv)
        row = record.summary_row()
        new = not summary_csv.exists()
        with open(summary_csv, "a", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            if new:
                wr.writeheader()
            wr.writerow(row)
    return path
