"""Top-down ancestral sampling through the level chain.

Every trajectory owns one seed per level.  Within a level the seed's
stream yields, in order: the fixed condition-noise draw (if the level is
conditional), the starting z_T, and one noise vector per step t > 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import default_gamma
from .denoiser import cfg_combine, predict_noise
from .hierarchy import build_latents, generation_noise_scale
from .schedule import posterior_params
from .trainer import ModelBundle

PIXEL_RANGE = (-1.0, 1.0)
_SEED_HIGH = 2**63 - 1


@dataclass
class SampleTrace:
    L: int
    z: dict  # level -> 1-D latent
    seeds: dict = field(default_factory=dict)  # level -> int, for sampled levels
    cond_noise: dict = field(default_factory=dict)  # level -> fixed standard-normal draw for its condition
    weights: dict = field(default_factory=dict)  # level -> guidance weight used
    gamma: float = float("inf")
    inherited: tuple = ()
    image_size: int | None = None

    @property
    def image(self) -> np.ndarray:
        n = self.image_size or int(round(np.sqrt(len(self.z[1]))))
        return self.z[1].reshape(n, n)

    def fed_condition(self, l: int, t: int, T: int, sigma_vec: np.ndarray) -> np.ndarray | None:
        """The corrupted condition the level-l net saw at step t."""
        if l == self.L:
            return None
        base = np.concatenate([self.z[m] for m in range(self.L, l, -1)])
        scale = _scale_vector(sigma_vec, t, T, self.gamma)
        return base + scale * self.cond_noise[l]


def _scale_vector(sigma_vec, t, T, gamma):
    # sigma_vec is piecewise constant per upper level
    uniq, inv = np.unique(sigma_vec, return_inverse=True)
    vals = np.array([generation_noise_scale(float(s), t, T, gamma) for s in uniq])
    return vals[inv]


class _Streams:
    """Either one generator for the whole batch or one per row."""

    def __init__(self, rng, B: int):
        self.per_row = not isinstance(rng, np.random.Generator)
        if self.per_row and len(rng) != B:
            raise ValueError(f"need {B} generators, got {len(rng)}")
        self.rng = rng
        self.B = B

    def normal(self, d: int) -> np.ndarray:
        if self.per_row:
            return np.stack([g.standard_normal(d) for g in self.rng]) if self.B else np.zeros((0, d))
        return self.rng.standard_normal((self.B, d))


def sample_level(net, schedule, cond, w: float, gamma: float, sigma_vec, rng, n: int | None = None, clip=None):
    """Ancestral sampling of one level; returns (z0 batch, condition-noise draw).

    ``cond`` is a (B, c) batch of clean upper latents or None.  It is fed
    as ``cond + generation_noise_scale(t) * xi`` with ``xi`` drawn once per
    trajectory.  ``rng`` is a Generator or a sequence of per-row Generators.
    """
    T = schedule.T
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if cond.shape[1] != net.c_dim:
            raise ValueError(f"condition dim {cond.shape[1]} != net condition dim {net.c_dim}")
        B = len(cond)
    else:
        B = n if n is not None else (1 if isinstance(rng, np.random.Generator) else len(rng))
    if net.c_dim == 0:
        cond = None
    streams = _Streams(rng, B)
    xi = None
    if cond is not None:
        sigma_vec = np.asarray(sigma_vec, dtype=np.float64)
        if sigma_vec.shape != (net.c_dim,):
            raise ValueError("sigma_vec must give one std per condition coordinate")
        xi = streams.normal(net.c_dim)
    z = streams.normal(net.d_in)
    for t in range(T, 0, -1):
        if cond is None:
            eps = predict_noise(net, z, t, None, T)
        else:
            cond_t = cond + _scale_vector(sigma_vec, t, T, gamma) * xi
            eps = predict_noise(net, z, t, cond_t, T)
            if w != 0:
                eps = cfg_combine(eps, predict_noise(net, z, t, None, T), w)
        x0 = (z - schedule.beta[t] * eps) / schedule.alpha[t]
        if clip is not None:
            x0 = np.clip(x0, *clip)
        mean, var = posterior_params(schedule, x0, z, t)
        if t > 1:
            z = mean + np.sqrt(var) * streams.normal(net.d_in)
        else:
            z = mean
    return z, xi


def _resolve(bundle: ModelBundle, gamma, cfg_weights):
    weights = bundle.config.cfg_weights if cfg_weights is None else cfg_weights
    if np.isscalar(weights):
        weights = [float(weights)] * bundle.L
    weights = list(weights)
    if len(weights) != bundle.L:
        raise ValueError(f"need {bundle.L} guidance weights, got {len(weights)}")
    if gamma is None:
        gamma = bundle.config.gamma if bundle.config.gamma is not None else default_gamma(weights)
    return float(gamma), [float(w) for w in weights]


def _run_levels(bundle, traces, levels, gamma, weights, clip_pixels=True):
    """Sample ``levels`` (descending) for a batch of traces, using their stored seeds."""
    s = bundle.schedule
    L = bundle.L
    for l in levels:
        net = bundle.nets[l]
        rngs = [np.random.default_rng(tr.seeds[l]) for tr in traces]
        cond = None
        if l < L:
            cond = np.stack([np.concatenate([tr.z[m] for m in range(L, l, -1)]) for tr in traces])
        clip = PIXEL_RANGE if (l == 1 and clip_pixels) else None
        z, xi = sample_level(net, s, cond, weights[l - 1], gamma, bundle.sigma_vector(l), rngs, n=len(traces),
                             clip=clip)
        for j, tr in enumerate(traces):
            tr.z[l] = z[j].copy()
            tr.weights[l] = weights[l - 1]
            if xi is not None:
                tr.cond_noise[l] = xi[j].copy()
    return traces


def sample_hierarchy(bundle: ModelBundle, n: int, rng, gamma=None, cfg_weights=None) -> list[SampleTrace]:
    """Sample n images top-down; level l uses ``cfg_weights[l - 1]``."""
    bundle.check_complete()
    gamma, weights = _resolve(bundle, gamma, cfg_weights)
    seeds = rng.integers(0, _SEED_HIGH, size=(n, bundle.L))
    traces = [
        SampleTrace(L=bundle.L, z={}, seeds={l: int(seeds[j, l - 1]) for l in range(1, bundle.L + 1)},
                    gamma=gamma, image_size=bundle.config.image_size)
        for j in range(n)
    ]
    return _run_levels(bundle, traces, range(bundle.L, 0, -1), gamma, weights)


def _source_traces(bundle: ModelBundle, source) -> tuple[list[SampleTrace], bool]:
    if isinstance(source, SampleTrace):
        return [source], True
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], SampleTrace):
        return list(source), False
    images = np.asarray(source, dtype=np.float64)
    single = images.ndim == 2
    latents = build_latents(bundle.encoder, images, bundle.config)
    n = len(latents[1])
    traces = [
        SampleTrace(L=bundle.L, z={l: latents[l][j].copy() for l in latents}, image_size=bundle.config.image_size)
        for j in range(n)
    ]
    return traces, single


def resample_from_level(bundle: ModelBundle, source, k: int, rng, gamma=None, cfg_weights=None):
    """Keep latents above level k from ``source`` and resample levels k..1.

    ``source`` is an image, an image stack, a SampleTrace or a list of
    traces; images are encoded to ground-truth latents first.  ``k=0``
    resamples nothing and returns the source latents unchanged.
    """
    bundle.check_complete()
    if not 0 <= k <= bundle.L:
        raise ValueError(f"k={k} outside 0..{bundle.L}")
    gamma, weights = _resolve(bundle, gamma, cfg_weights)
    srcs, single = _source_traces(bundle, source)
    out = []
    for src in srcs:
        tr = SampleTrace(
            L=bundle.L,
            z={l: src.z[l].copy() for l in range(k + 1, bundle.L + 1)},
            seeds={l: src.seeds[l] for l in range(k + 1, bundle.L + 1) if l in src.seeds},
            cond_noise={l: v.copy() for l, v in src.cond_noise.items() if l > k},
            weights={l: v for l, v in src.weights.items() if l > k},
            gamma=gamma,
            inherited=tuple(range(k + 1, bundle.L + 1)),
            image_size=bundle.config.image_size,
        )
        if k == 0:
            tr.z[1] = src.z[1].copy()
            tr.seeds = dict(src.seeds)
            tr.cond_noise = {l: v.copy() for l, v in src.cond_noise.items()}
            tr.weights = dict(src.weights)
            tr.gamma = src.gamma
        out.append(tr)
    if k > 0:
        seeds = rng.integers(0, _SEED_HIGH, size=(len(out), k))
        for j, tr in enumerate(out):
            tr.seeds.update({l: int(seeds[j, l - 1]) for l in range(1, k + 1)})
        _run_levels(bundle, out, range(k, 0, -1), gamma, weights)
    return out[0] if single else out


def replay(bundle: ModelBundle, traces, k: int) -> list[SampleTrace]:
    """Re-run levels k..1 of stored traces with their own seeds."""
    traces = [traces] if isinstance(traces, SampleTrace) else list(traces)
    gamma = traces[0].gamma
    weights = [traces[0].weights.get(l, 0.0) for l in range(1, bundle.L + 1)]
    fresh = [
        SampleTrace(L=tr.L, z={l: tr.z[l].copy() for l in range(k + 1, tr.L + 1)}, seeds=dict(tr.seeds),
                    cond_noise={l: v.copy() for l, v in tr.cond_noise.items() if l > k},
                    weights=dict(tr.weights), gamma=tr.gamma, inherited=tr.inherited, image_size=tr.image_size)
        for tr in traces
    ]
    return _run_levels(bundle, fresh, range(k, 0, -1), gamma, weights)


def images_of(traces) -> np.ndarray:
    return np.stack([tr.image for tr in traces])
