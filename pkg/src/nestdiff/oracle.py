"""Brute-force optimal denoiser over a finite set of latents.

For noisy ``z_t`` the Bayes-optimal clean estimate is a softmax-weighted
mean of the dataset latents, with one Gaussian kernel on the diffusion
noise and one per upper level on the conditioning corruption.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .encoder import _ranked_neighbors
from .schedule import NoiseSchedule

MATCH_TOL = 1e-9


@dataclass
class OracleIndex:
    latents: dict  # level -> (N, dim)
    sigma: dict  # level -> conditioning noise std (levels above the bottom)
    schedule: NoiseSchedule

    def __post_init__(self):
        self.latents = {l: np.atleast_2d(np.asarray(z, dtype=np.float64)) for l, z in self.latents.items()}
        counts = {len(z) for z in self.latents.values()}
        if len(counts) != 1:
            raise ValueError("every level must hold the same items")

    @property
    def L(self) -> int:
        return max(self.latents)

    @property
    def n_items(self) -> int:
        return len(next(iter(self.latents.values())))

    def split_condition(self, l: int, cond) -> dict | None:
        """Accept a dict level->vector or a concatenation ordered top level first."""
        if cond is None:
            return None
        if isinstance(cond, dict):
            return {m: np.asarray(v, dtype=np.float64) for m, v in cond.items()}
        cond = np.asarray(cond, dtype=np.float64)
        out, pos = {}, 0
        for m in range(self.L, l, -1):
            w = self.latents[m].shape[1]
            out[m] = cond[pos : pos + w]
            pos += w
        if pos != len(cond):
            raise ValueError(f"condition length {len(cond)} != expected {pos}")
        return out


def log_weights(idx: OracleIndex, l: int, z_t, t: int, cond=None) -> np.ndarray:
    """Unnormalised log posterior weight of every item (``-inf`` for excluded items)."""
    s = idx.schedule
    if not 1 <= t <= s.T:
        raise ValueError(f"t={t} outside 1..{s.T}")
    Z = idx.latents[l]
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != (Z.shape[1],):
        raise ValueError(f"expected latent of dim {Z.shape[1]}")
    a, b = s.alpha[t], s.beta[t]
    diff = z_t[None, :] - a * Z
    logw = -np.einsum("nd,nd->n", diff, diff) / (2.0 * b * b)
    conds = idx.split_condition(l, cond)
    if conds:
        for m, c in conds.items():
            if m <= l:
                raise ValueError(f"condition level {m} is not above level {l}")
            dm = c[None, :] - idx.latents[m]
            d2 = np.einsum("nd,nd->n", dm, dm)
            sig = idx.sigma[m]
            if sig == 0:
                match = np.sqrt(d2) <= MATCH_TOL
                if not match.any():
                    raise ValueError(f"no item matches the level-{m} condition exactly")
                logw = np.where(match, logw, -np.inf)
            else:
                logw = logw - d2 / (2.0 * sig * sig)
    return logw


def oracle_denoiser(idx: OracleIndex, l: int, z_t, t: int, cond=None, stabilize: bool = True) -> np.ndarray:
    logw = log_weights(idx, l, z_t, t, cond)
    Z = idx.latents[l]
    if stabilize:
        w = np.exp(logw - logsumexp(logw))
    else:
        w = np.exp(logw)
        w = w / w.sum()
    return w @ Z


def oracle_eps(idx: OracleIndex, l: int, z_t, t: int, cond=None) -> np.ndarray:
    s = idx.schedule
    d = oracle_denoiser(idx, l, z_t, t, cond)
    return (np.asarray(z_t, dtype=np.float64) - s.alpha[t] * d) / s.beta[t]


def neighbor_report(idx: OracleIndex, l: int, query: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """K nearest items to item ``query`` in level-l space (the query itself included)."""
    Z = idx.latents[l]
    if K >= len(Z):
        raise ValueError(f"K={K} must be smaller than N={len(Z)}")
    nbrs, dist = _ranked_neighbors(Z, np.array([query]), K, exclude_self=False)
    return nbrs[0], dist[0]


def label_agreement(features, labels, K: int = 20) -> float:
    """Mean fraction of each item's K nearest other items sharing its label."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if K >= len(features):
        raise ValueError(f"K={K} must be smaller than N={len(features)}")
    nbrs, _ = _ranked_neighbors(features, np.arange(len(features)), K, exclude_self=True)
    return float(np.mean(labels[nbrs] == labels[:, None]))


def write_neighbor_csv(path, idx: OracleIndex, l: int, queries, K: int):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["query", "rank", "item", "distance"])
        for q in queries:
            items, dist = neighbor_report(idx, l, int(q), K)
            for r, (i, dd) in enumerate(zip(items, dist)):
                wr.writerow([int(q), r, int(i), f"{dd:.10g}"])
