"""Discrete variance-preserving noise schedules.

Convention: index t runs over 0..T, t=0 is clean data and
``alpha[t]**2 + beta[t]**2 == 1``. ``beta`` is a standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("linear", "cosine")

# Per-step variance increments are capped so alpha never reaches zero.
# The rescaled linear ramp saturates for small T; 0.99 keeps 1 - alpha_bar
# representable below 1 (beta < 1) for every T up to 1000.
MAX_INCREMENT = 0.999
MAX_LINEAR_INCREMENT = 0.99


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    kind: str
    # per-step forward variances b_t, index 0 unused (kept at 0)
    increments: np.ndarray = field(repr=False)

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.alpha**2

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.alpha**2 / self.beta**2


def _linear_increments(T: int) -> np.ndarray:
    scale = 1000.0 / T
    if T == 1:
        b = np.array([0.02 * scale])
    else:
        b = np.linspace(1e-4 * scale, 0.02 * scale, T)
    return np.clip(b, 0.0, MAX_LINEAR_INCREMENT)


def _cosine_increments(T: int, offset: float = 0.008) -> np.ndarray:
    def f(t):
        return math.cos((t / T + offset) / (1 + offset) * math.pi / 2) ** 2

    ab = np.array([f(t) / f(0) for t in range(T + 1)])
    b = 1.0 - ab[1:] / ab[:-1]
    return np.clip(b, 0.0, MAX_INCREMENT)


def make_schedule(kind: str = "linear", T: int = 100) -> NoiseSchedule:
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "linear":
        b = _linear_increments(T)
    elif kind == "cosine":
        b = _cosine_increments(T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")

    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - b)])
    alpha = np.sqrt(alpha_bar)
    beta = np.sqrt(1.0 - alpha_bar)
    increments = np.concatenate([[0.0], b])
    for arr in (alpha, beta, increments):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, alpha=alpha, beta=beta, kind=kind, increments=increments)


def _check_t(s: NoiseSchedule, t: int, lo: int = 0) -> int:
    if not lo <= t <= s.T:
        raise ValueError(f"t={t} outside [{lo}, {s.T}]")
    return int(t)


def forward_sample(s: NoiseSchedule, z, t: int, eps) -> np.ndarray:
    """Return ``alpha(t) * z + beta(t) * eps``.

    ``t`` may be a scalar or an integer array broadcasting against the
    leading axis of ``z`` (one step per row).
    """
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t = _check_t(s, int(t_arr))
        return s.alpha[t] * z + s.beta[t] * eps
    if t_arr.min() < 0 or t_arr.max() > s.T:
        raise ValueError(f"t outside [0, {s.T}]")
    shape = (-1,) + (1,) * (z.ndim - 1)
    return s.alpha[t_arr].reshape(shape) * z + s.beta[t_arr].reshape(shape) * eps


def posterior_coefficients(s: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients (c0, ct, var) with mean = c0 * z0 + ct * zt for q(z_{t-1} | z_t, z0)."""
    t = _check_t(s, t, lo=1)
    ab_t = s.alpha[t] ** 2
    ab_prev = s.alpha[t - 1] ** 2
    b_t = s.increments[t]
    a_t = 1.0 - b_t
    c0 = math.sqrt(ab_prev) * b_t / (1.0 - ab_t)
    ct = math.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * b_t
    return c0, ct, var


def posterior_params(s: NoiseSchedule, z0, zt, t: int) -> tuple[np.ndarray, float]:
    z0 = np.asarray(z0, dtype=np.float64)
    zt = np.asarray(zt, dtype=np.float64)
    if z0.shape != zt.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs zt {zt.shape}")
    if t == 0:
        raise ValueError("posterior undefined at t=0")
    c0, ct, var = posterior_coefficients(s, t)
    return c0 * z0 + ct * zt, var
