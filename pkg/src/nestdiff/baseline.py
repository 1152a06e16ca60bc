"""Plain single-level diffusion on flattened images.

A deliberately direct DDPM train/sample loop with no hierarchy, no
conditioning and no null token.  The nested model with L=1 must match it
bit for bit.
"""

from __future__ import annotations

import numpy as np

from .denoiser import (Adam, DenoiserNet, WeightAverage, backward_eps, fit_linear_prior, forward_eps, init_denoiser,
                       predict_noise)
from .schedule import NoiseSchedule, posterior_params


def plain_init(x: np.ndarray, seed: int, schedule: NoiseSchedule, time_dim: int = 32, hidden=(256, 256),
               precondition: bool = True) -> DenoiserNet:
    x = x.reshape(len(x), -1)
    prior = fit_linear_prior(x) if precondition else None
    return init_denoiser(1, x.shape[1], 0, np.random.default_rng([seed, 1, 0]), time_dim, hidden,
                         schedule=schedule, prior=prior)


def plain_train(net: DenoiserNet, x: np.ndarray, schedule: NoiseSchedule, steps: int, batch_size: int,
                lr: float, rng, ema_decay: float | None = None) -> list[float]:
    x = x.reshape(len(x), -1)
    opt = Adam(net.params, lr=lr)
    avg = WeightAverage(net.params, ema_decay) if ema_decay is not None else None
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(x), size=batch_size)
        x0 = x[idx]
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        xt = schedule.alpha[t][:, None] * x0 + schedule.beta[t][:, None] * eps
        out, cache = forward_eps(net, xt, t, np.zeros((batch_size, 0)), schedule.T)
        r = out - eps
        losses.append(float(np.mean(r * r)))
        grads, _ = backward_eps(net, cache, 2.0 * r / r.size)
        grads["null"] = np.zeros(0)
        opt.step(net.params, grads)
        if avg is not None:
            avg.update(net.params)
    if avg is not None:
        avg.copy_to(net.params)
    return losses


def plain_sample(net: DenoiserNet, schedule: NoiseSchedule, rngs, clip=(-1.0, 1.0)) -> np.ndarray:
    """Ancestral sampling, one generator per sample."""
    d = net.d_in
    x = np.stack([g.standard_normal(d) for g in rngs])
    for t in range(schedule.T, 0, -1):
        eps = predict_noise(net, x, t, None, schedule.T)
        x0 = (x - schedule.beta[t] * eps) / schedule.alpha[t]
        if clip is not None:
            x0 = np.clip(x0, *clip)
        mean, var = posterior_params(schedule, x0, x, t)
        x = mean + np.sqrt(var) * np.stack([g.standard_normal(d) for g in rngs]) if t > 1 else mean
    return x
