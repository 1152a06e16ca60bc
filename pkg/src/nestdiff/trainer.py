"""Training of the nested chain of per-level denoisers."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import NestedConfig
from .data import Dataset
from .denoiser import (Adam, DenoiserNet, WeightAverage, fit_linear_prior, init_denoiser, loss_and_grads,
                       predict_noise)
from .encoder import EncoderModel, fit_encoder
from .hierarchy import build_latents, cond_dim, inject_noise, level_dims
from .schedule import NoiseSchedule, make_schedule, posterior_coefficients

log = logging.getLogger(__name__)


@dataclass
class ModelBundle:
    config: NestedConfig
    encoder: EncoderModel
    nets: dict  # level -> DenoiserNet
    schedule: NoiseSchedule
    # rows of (step, level, loss)
    metrics: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.config.L

    @property
    def dims(self) -> dict[int, int]:
        c = self.config
        return level_dims(c.L, c.d, c.image_size, c.shape_schedule)

    def cond_dim(self, l: int) -> int:
        return cond_dim(self.dims, l, self.L)

    def sigma_vector(self, l: int) -> np.ndarray:
        """Per-coordinate training noise std for the condition of level l."""
        dims = self.dims
        parts = [np.full(dims[m], self.config.sigma_of(m)) for m in range(self.L, l, -1)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def check_complete(self):
        missing = [l for l in range(1, self.L + 1) if l not in self.nets]
        if missing:
            raise ValueError(f"bundle is missing nets for levels {missing}")
        dims = self.dims
        for l, net in self.nets.items():
            if net.d_in != dims[l] or net.c_dim != self.cond_dim(l):
                raise ValueError(f"net for level {l} does not match the hierarchy shape law")


def init_rng(seed: int, l: int):
    return np.random.default_rng([seed, l, 0])


def train_rng(seed: int, l: int):
    return np.random.default_rng([seed, l, 1])


def data_scale(z) -> float:
    """Overall standard deviation of a latent set, used to scale condition inputs."""
    s = float(np.std(z))
    if not s > 0:
        raise ValueError("latents have zero spread")
    return s


def new_bundle(cfg: NestedConfig, encoder: EncoderModel, latents: dict | None = None) -> ModelBundle:
    """Fresh nets for every level; preconditioned configs need the training latents."""
    schedule = make_schedule(cfg.schedule, cfg.T)
    bundle = ModelBundle(cfg, encoder, {}, schedule)
    if cfg.precondition and latents is None:
        raise ValueError("preconditioned nets need latents to fit their priors")
    for l in range(1, cfg.L + 1):
        prior, cscale = None, 1.0
        if cfg.precondition:
            cond = stack_conditions(latents, l, cfg.L)
            prior = fit_linear_prior(latents[l], cond, bundle.sigma_vector(l))
            if cond is not None:
                cscale = 1.0 / data_scale(cond)
        bundle.nets[l] = init_denoiser(
            l, bundle.dims[l], bundle.cond_dim(l), init_rng(cfg.seed, l), cfg.time_dim, cfg.hidden,
            schedule=schedule, prior=prior, cond_scale=cscale,
        )
    return bundle


def stack_conditions(latents: dict, l: int, L: int, idx=None) -> np.ndarray | None:
    """Concatenate upper latents for level l, top level first."""
    if l == L:
        return None
    parts = [latents[m] if idx is None else latents[m][idx] for m in range(L, l, -1)]
    return np.concatenate(parts, axis=-1)


def train_level(
    bundle: ModelBundle,
    l: int,
    data: Dataset,
    rng,
    latents: dict | None = None,
    steps: int | None = None,
    on_step=None,
) -> tuple[DenoiserNet, list[float]]:
    """Minibatch Adam on the level-l noise-prediction loss.

    Upper latents are ground-truth encodings of the same images, each
    corrupted with fresh ``inject_noise`` draws every step.  Per step the
    rng yields: batch indices, condition noise (top level first), then
    the draws inside ``loss_and_grads``.
    """
    cfg = bundle.config
    if bundle.encoder is None:
        raise ValueError("encoder must be fitted before training")
    if not 1 <= l <= cfg.L:
        raise ValueError(f"level {l} out of range 1..{cfg.L}")
    if latents is None:
        if len(data) == 0:
            raise ValueError("empty dataset")
        latents = build_latents(bundle.encoder, data.images, cfg)
    N = len(latents[1])
    if N == 0:
        raise ValueError("empty dataset")
    steps = cfg.steps_of(l) if steps is None else steps
    net = bundle.nets[l]
    opt = Adam(net.params, lr=cfg.lr)
    avg = WeightAverage(net.params, cfg.ema_decay) if cfg.ema_decay is not None else None
    B = cfg.batch_size
    losses = []
    for step in range(steps):
        idx = rng.integers(0, N, size=B)
        cond = None
        if l < cfg.L:
            cond = np.concatenate(
                [inject_noise(latents[m][idx], cfg.sigma_of(m), rng) for m in range(cfg.L, l, -1)], axis=1
            )
        loss, grads = loss_and_grads(net, (latents[l][idx], cond), bundle.schedule, rng, cfg.null_drop_prob)
        opt.step(net.params, grads)
        if avg is not None:
            avg.update(net.params)
        losses.append(loss)
        if on_step is not None:
            on_step(step, l, loss)
    if avg is not None:
        avg.copy_to(net.params)
    return net, losses


def _load_donor(reuse):
    if isinstance(reuse, ModelBundle):
        return reuse
    from .checkpoint import load_bundle

    return load_bundle(reuse)


def _adopt_donor(cfg: NestedConfig, donor: ModelBundle) -> NestedConfig:
    dc = donor.config
    if dc.L != cfg.L - 1:
        raise ValueError(f"reuse needs an {cfg.L - 1}-level donor, got L={dc.L}")
    for key in ("d", "T", "schedule", "hidden", "time_dim", "image_size", "shape_schedule", "precondition"):
        if getattr(dc, key) != getattr(cfg, key):
            raise ValueError(f"reuse shape mismatch: {key} differs ({getattr(dc, key)} vs {getattr(cfg, key)})")
    # donor level m becomes level m + 1; keep its noise levels
    sigma = list(cfg.sigma)
    for m in range(2, dc.L + 1):
        sigma[m + 1 - 2] = dc.sigma_of(m)
    return cfg.with_(sigma=sigma)


def train_nested(
    cfg: NestedConfig,
    data: Dataset,
    reuse=None,
    encoder: EncoderModel | None = None,
    threads: int = 1,
    on_step=None,
) -> ModelBundle:
    """Train every level (or only levels 1-2 when reusing an (L-1)-level bundle)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.size != cfg.image_size:
        raise ValueError(f"config image_size {cfg.image_size} != data size {data.size}")
    donor = _load_donor(reuse) if reuse is not None else None
    if donor is not None:
        cfg = _adopt_donor(cfg, donor)
    if encoder is None:
        encoder = fit_encoder(data, cfg.L, cfg.d, seed=cfg.seed, shape_schedule=cfg.shape_schedule)
    latents = build_latents(encoder, data.images, cfg)
    bundle = new_bundle(cfg, encoder, latents)
    to_train = list(range(1, cfg.L + 1))
    if donor is not None:
        for M in donor.encoder.patch_scales:
            a, b = donor.encoder.projection(M), encoder.projection(M)
            if a.basis.shape != b.basis.shape or not np.allclose(a.basis, b.basis, atol=1e-6):
                raise ValueError(f"donor encoder differs at patch scale {M}")
        for m in range(2, donor.L + 1):
            src, dst = donor.nets[m], bundle.nets[m + 1]
            if (src.d_in, src.c_dim) != (dst.d_in, dst.c_dim):
                raise ValueError(f"reuse shape mismatch at donor level {m}")
            net = src.copy()
            net.level = m + 1
            bundle.nets[m + 1] = net
        to_train = [1, 2]

    results = {}

    def run(l):
        t0 = time.perf_counter()
        net, losses = train_level(bundle, l, data, train_rng(cfg.seed, l), latents=latents, on_step=on_step)
        log.info("level %d: %d steps, final loss %.4f (%.1fs)", l, len(losses), losses[-1] if losses else math.nan,
                 time.perf_counter() - t0)
        return l, losses

    if threads > 1 and len(to_train) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for l, losses in ex.map(run, to_train):
                results[l] = losses
    else:
        for l in to_train:
            results[l] = run(l)[1]
    for l in sorted(results):
        bundle.metrics += [(s, l, v) for s, v in enumerate(results[l])]
    return bundle


def smoothed(losses, window: int = 100) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) < window:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")


def vlb_weights(schedule: NoiseSchedule) -> np.ndarray:
    """Per-step weights lambda_t turning ||eps - eps_hat||^2 into KL nats, index 0 unused.

    The reverse variance is the posterior variance for t >= 2 and the
    forward increment at t = 1, where the posterior variance vanishes.
    """
    lam = np.zeros(schedule.T + 1)
    for t in range(1, schedule.T + 1):
        b = schedule.increments[t]
        _, _, var = posterior_coefficients(schedule, t)
        if t == 1:
            var = b
        lam[t] = b * b / (2.0 * var * (1.0 - b) * schedule.beta[t] ** 2)
    return lam


def prior_kl(schedule: NoiseSchedule, z0) -> float:
    """KL( q(z_T | z0) || N(0, I) )."""
    z0 = np.asarray(z0, dtype=np.float64)
    ab = schedule.alpha[-1] ** 2
    v = 1.0 - ab
    return float(0.5 * np.sum(ab * z0 * z0 + v - 1.0 - math.log(v)))


@dataclass
class ElboEstimate:
    levels: dict  # level -> total nats (diffusion terms + prior)
    diffusion: dict  # level -> mean weighted-MSE sum
    prior: dict  # level -> prior KL at t=T
    draws: dict  # level -> per-draw weighted-MSE sums

    @property
    def total(self) -> float:
        return float(sum(self.levels.values()))


def estimate_elbo(bundle: ModelBundle, image, n_mc: int, rng) -> ElboEstimate:
    """Monte-Carlo estimate of the per-level KL sums of the hierarchical bound.

    Each draw samples the upper-latent corruption and one eps per step,
    then sums lambda_t * ||eps - eps_hat||^2 over all t exactly.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    cfg = bundle.config
    s = bundle.schedule
    lam = vlb_weights(s)
    latents = build_latents(bundle.encoder, image, cfg)
    ts = np.arange(1, s.T + 1)
    out = ElboEstimate({}, {}, {}, {})
    for l in range(1, cfg.L + 1):
        z = latents[l][0]
        net = bundle.nets[l]
        draws = np.empty(n_mc)
        for k in range(n_mc):
            cond = None
            if l < cfg.L:
                cond = np.concatenate([inject_noise(latents[m][0], cfg.sigma_of(m), rng) for m in range(cfg.L, l, -1)])
            eps = rng.standard_normal((s.T, len(z)))
            zt = s.alpha[ts][:, None] * z + s.beta[ts][:, None] * eps
            eps_hat = predict_noise(net, zt, ts, cond, s.T)
            draws[k] = float(np.sum(lam[ts] * np.sum((eps - eps_hat) ** 2, axis=1)))
        out.draws[l] = draws
        out.diffusion[l] = float(draws.mean())
        out.prior[l] = prior_kl(s, z)
        out.levels[l] = out.diffusion[l] + out.prior[l]
    return out
