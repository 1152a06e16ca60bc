"""Per-level noise-prediction MLP with exact gradients.

Input is ``[z_t, sinusoidal(t/T), cond]`` where ``cond`` is either the
concatenated upper latents or a learnable null token of the same width.
Hidden layers use SiLU; the output layer starts at zero.

When a net carries a ``LinearPrior`` it is wrapped in fixed
preconditioning built from the best linear noise estimate under that
prior: ``eps_hat = c_skip * (z_t - alpha * m) + c_out * F(...)``.  For
rows fed a real condition, ``m`` is the linear regression of the latent
on the (noisy) condition and the spread is the regression residual; for
null-token rows they are the marginal mean and spread.  The skip carries
the full-rank part of the map, so a narrow MLP only has to learn a
low-rank correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/T, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = (1000.0 * t / T)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class LinearPrior:
    """Isotropic Gaussian summary of a level's training latents.

    Marginally ``z ~ N(mean, std^2 I)``; given a condition ``c``,
    ``z ~ N(mean + (c - cond_mean) @ cond_map, cond_std^2 I)``.
    """

    mean: np.ndarray
    std: float
    cond_mean: np.ndarray
    cond_map: np.ndarray  # (c_dim, d)
    cond_std: float

    @property
    def c_dim(self) -> int:
        return len(self.cond_mean)


# relative ridge on the condition covariance, and the floor on the residual spread
PRIOR_RIDGE = 1e-6
MIN_REL_SPREAD = 1e-3


def fit_linear_prior(z, cond=None, noise_std=None) -> LinearPrior:
    """Moments of ``z`` and its least-squares regression on ``cond + noise``.

    ``noise_std`` is the per-coordinate std of the Gaussian corruption the
    condition receives in training; it enters the condition covariance in
    closed form, so no noise is drawn.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    N, d = z.shape
    mean = z.mean(axis=0)
    zc = z - mean
    std = math.sqrt(float(np.mean(zc * zc)))
    if not std > 0:
        raise ValueError("latents have zero spread")
    if cond is None or np.shape(cond)[-1] == 0:
        return LinearPrior(mean, std, np.zeros(0), np.zeros((0, d)), std)
    cond = np.asarray(cond, dtype=np.float64)
    if len(cond) != N:
        raise ValueError("latents and conditions must have the same rows")
    c = cond.shape[1]
    noise = np.zeros(c) if noise_std is None else np.broadcast_to(np.asarray(noise_std, dtype=np.float64), (c,))
    cond_mean = cond.mean(axis=0)
    cc = cond - cond_mean
    s_cc = cc.T @ cc / N + np.diag(noise**2)
    s_cz = cc.T @ zc / N
    ridge = PRIOR_RIDGE * max(np.trace(s_cc) / c, np.finfo(float).tiny)
    A = np.linalg.solve(s_cc + ridge * np.eye(c), s_cz)
    r = zc - cc @ A
    resid = float(np.mean(r * r)) + float(np.sum((noise[:, None] * A) ** 2)) / d
    cond_std = max(math.sqrt(resid), MIN_REL_SPREAD * std)
    return LinearPrior(mean, std, cond_mean, A, cond_std)


@dataclass
class DenoiserNet:
    level: int
    d_in: int
    c_dim: int
    time_dim: int
    hidden: list
    params: dict = field(repr=False)
    # preconditioning is active when a prior is set; needs the schedule
    prior: LinearPrior | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    beta: np.ndarray | None = field(default=None, repr=False)
    # fixed multiplier on the condition block (1 / its spread in training)
    cond_scale: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def input_width(self) -> int:
        return self.d_in + self.time_dim + self.c_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_width, *self.hidden, self.d_in]
        return list(zip(widths[:-1], widths[1:]))

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names + ["null"]

    @property
    def preconditioned(self) -> bool:
        return self.prior is not None

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(
            self.level, self.d_in, self.c_dim, self.time_dim, list(self.hidden),
            {k: v.copy() for k, v in self.params.items()}, self.prior, self.alpha, self.beta,
            self.cond_scale,
        )


def init_denoiser(level: int, d_in: int, c_dim: int, rng, time_dim: int = 32, hidden=(256, 256),
                  zero_final: bool = True, schedule=None, prior: LinearPrior | None = None,
                  cond_scale: float = 1.0) -> DenoiserNet:
    if prior is not None and schedule is None:
        raise ValueError("preconditioning needs the noise schedule")
    if not cond_scale > 0:
        raise ValueError("cond_scale must be positive")
    net = DenoiserNet(level, d_in, c_dim, time_dim, list(hidden), {}, cond_scale=float(cond_scale))
    if prior is not None:
        attach_prior(net, prior, schedule)
    for i, (a, b) in enumerate(net.layer_shapes()):
        last = i == net.n_layers - 1
        if last and zero_final:
            W = np.zeros((a, b))
        else:
            W = rng.standard_normal((a, b)) * math.sqrt(2.0 / a)
        net.params[f"W{i}"] = W
        net.params[f"b{i}"] = np.zeros(b)
    net.params["null"] = np.zeros(c_dim)
    return net


def attach_prior(net: DenoiserNet, prior: LinearPrior, schedule):
    if len(prior.mean) != net.d_in or prior.c_dim != net.c_dim or prior.cond_map.shape != (net.c_dim, net.d_in):
        raise ValueError("prior shapes do not match the net")
    net.prior = prior
    net.alpha, net.beta = schedule.alpha, schedule.beta


def _as_batch(z_t, d: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z_t, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != d:
        raise ValueError(f"expected latent dim {d}, got {z.shape[1]}")
    return z, single


def _cond_block(net: DenoiserNet, cond, B: int, drop=None) -> np.ndarray:
    if net.c_dim == 0:
        return np.zeros((B, 0))
    null = np.broadcast_to(net.params["null"], (B, net.c_dim))
    if cond is None:
        return np.array(null)
    c = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if c.shape[1] != net.c_dim:
        raise ValueError(f"expected condition dim {net.c_dim}, got {c.shape[1]}")
    c = np.broadcast_to(c, (B, net.c_dim))
    if drop is None:
        return np.array(c)
    return np.where(drop[:, None], null, c)


def _forward(net: DenoiserNet, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    for i in range(net.n_layers):
        a = h @ net.params[f"W{i}"] + net.params[f"b{i}"]
        if i < net.n_layers - 1:
            pre.append(a)
            h = _silu(a)
            acts.append(h)
        else:
            h = a
    return h, (acts, pre)


def preconditioning(net: DenoiserNet, t, conditioned=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row (c_in, c_skip, c_out) for integer steps ``t``.

    ``conditioned`` marks rows fed a real condition (None: no row is).
    """
    t = np.asarray(t)
    if not net.preconditioned:
        one = np.ones(t.shape)
        return one, np.zeros(t.shape), one
    a, b = net.alpha[t], net.beta[t]
    p = net.prior
    s = np.full(t.shape, p.std)
    if conditioned is not None:
        s = np.where(conditioned, p.cond_std, s)
    c_in = 1.0 / np.sqrt(a * a * p.std**2 + b * b)
    denom = a * a * s * s + b * b
    return c_in, b / denom, a * s / np.sqrt(denom)


def _check_T(net: DenoiserNet, T: int):
    if net.preconditioned and len(net.alpha) != T + 1:
        raise ValueError(f"net was built for T={len(net.alpha) - 1}, called with T={T}")


def forward_eps(net: DenoiserNet, z, t, cond_block: np.ndarray, T: int, conditioned=None):
    """Noise estimate for a batch with an explicit condition block; returns (eps_hat, cache).

    ``conditioned`` is a per-row mask of rows whose block holds a real
    condition rather than the null token; None means none do.
    """
    _check_T(net, T)
    B = len(z)
    t = np.broadcast_to(np.asarray(t), (B,))
    if net.c_dim == 0 or conditioned is None:
        conditioned = np.zeros(B, dtype=bool)
    conditioned = np.broadcast_to(np.asarray(conditioned, dtype=bool), (B,))
    c_in, c_skip, c_out = preconditioning(net, t, conditioned)
    if net.preconditioned:
        a = net.alpha[t][:, None]
        p = net.prior
        centered = z - a * p.mean
        x = np.concatenate([c_in[:, None] * centered, time_embedding(t, T, net.time_dim),
                            net.cond_scale * cond_block], axis=1)
    else:
        a = None
        x = np.concatenate([z, time_embedding(t, T, net.time_dim), net.cond_scale * cond_block], axis=1)
    out, cache = _forward(net, x)
    if net.preconditioned:
        resid = centered
        if conditioned.any():
            shift = (cond_block[conditioned] - p.cond_mean) @ p.cond_map
            resid = centered.copy()
            resid[conditioned] -= a[conditioned] * shift
        out = c_skip[:, None] * resid + c_out[:, None] * out
    return out, (cache, c_out, c_skip, a, conditioned)


def backward_eps(net: DenoiserNet, cache, d_eps: np.ndarray) -> tuple[dict, np.ndarray]:
    """Parameter gradients and the gradient w.r.t. the condition block."""
    mlp_cache, c_out, c_skip, a, conditioned = cache
    d_out = c_out[:, None] * d_eps if net.preconditioned else d_eps
    grads, dx = _backward(net, mlp_cache, d_out)
    d_cond = net.cond_scale * dx[:, net.d_in + net.time_dim :]
    if net.preconditioned and conditioned.any():
        k = (c_skip[:, None] * a)[conditioned]
        d_cond[conditioned] -= (k * d_eps[conditioned]) @ net.prior.cond_map.T
    return grads, d_cond


def predict_noise(net: DenoiserNet, z_t, t, cond, T: int) -> np.ndarray:
    """Noise estimate for a latent (d,) or batch (B, d); ``cond=None`` uses the null token."""
    z, single = _as_batch(z_t, net.d_in)
    conditioned = None if cond is None else np.ones(len(z), dtype=bool)
    out, _ = forward_eps(net, z, t, _cond_block(net, cond, len(z)), T, conditioned)
    return out[0] if single else out


def _backward(net: DenoiserNet, cache, dout: np.ndarray) -> tuple[dict, np.ndarray]:
    acts, pre = cache
    grads = {}
    g = dout
    for i in reversed(range(net.n_layers)):
        grads[f"W{i}"] = acts[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.params[f"W{i}"].T
        if i > 0:
            g = g * _silu_grad(pre[i - 1])
    return grads, g


def loss_and_grads(net: DenoiserNet, batch, schedule, rng, drop_prob: float = 0.1):
    """Mean squared noise-prediction error and its gradients.

    ``batch`` is ``(z, cond)`` with ``z`` of shape (B, d) and ``cond`` of
    shape (B, c) or None.  Draws, in order: t ~ U{1..T}, eps ~ N(0, I),
    and (only when the net has a condition) the null-token drop mask.
    """
    z, cond = batch
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    B = len(z)
    if B == 0:
        raise ValueError("empty batch")
    if z.shape[1] != net.d_in:
        raise ValueError(f"expected latent dim {net.d_in}, got {z.shape[1]}")
    T = schedule.T
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal(z.shape)
    drop = None
    if net.c_dim > 0:
        drop = rng.random(B) < drop_prob
        if cond is None:
            drop = np.ones(B, dtype=bool)
    zt = schedule.alpha[t][:, None] * z + schedule.beta[t][:, None] * eps
    out, cache = forward_eps(net, zt, t, _cond_block(net, cond, B, drop), T, None if drop is None else ~drop)
    r = out - eps
    loss = float(np.mean(r * r))
    grads, dc = backward_eps(net, cache, 2.0 * r / r.size)
    if net.c_dim > 0:
        grads["null"] = dc[drop].sum(axis=0)
    else:
        grads["null"] = np.zeros(0)
    return loss, grads


def cfg_combine(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Guided estimate ``(1 + w) * eps_cond - w * eps_uncond``; w=0 is purely conditional."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 0:
        return eps_cond.copy()
    return (1.0 + w) * eps_cond - w * eps_uncond


def count_macs(net: DenoiserNet) -> int:
    return sum(a * b for a, b in net.layer_shapes())


class Adam:
    """Adam with bias correction, updating a parameter dict in place."""

    def __init__(self, params: dict, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class WeightAverage:
    """Exponential moving average of a parameter dict.

    The effective decay ramps up as ``min(decay, (1 + n) / (10 + n))`` so
    short runs still follow their weights.
    """

    def __init__(self, params: dict, decay: float):
        self.decay = decay
        self.n = 0
        self.avg = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict):
        self.n += 1
        d = min(self.decay, (1.0 + self.n) / (10.0 + self.n))
        for k, v in params.items():
            a = self.avg[k]
            a += (1.0 - d) * (v - a)

    def copy_to(self, params: dict):
        for k, a in self.avg.items():
            params[k][...] = a
