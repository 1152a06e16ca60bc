"""Run configuration for nested models, read from and written to JSON."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .schedule import KINDS


def decaying_cfg_weights(L: int, top: float = 0.5, step: float = 0.1) -> list[float]:
    """Guidance weights ordered level 1..L, largest at the top level."""
    return [round(max(top - step * (L - l), 0.0), 10) for l in range(1, L + 1)]


def default_gamma(cfg_weights) -> float:
    return 0.3 if any(w > 0 for w in cfg_weights) else math.inf


@dataclass
class NestedConfig:
    L: int = 3
    d: int = 32
    T: int = 100
    schedule: str = "linear"
    # sigma[i] is the training noise std of level i + 2
    sigma: list = None
    # None resolves to 0.3 with guidance, inf without
    gamma: float | None = None
    # cfg_weights[i] is the guidance weight of level i + 1
    cfg_weights: list = None
    null_drop_prob: float = 0.1
    shape_schedule: str = "linear"
    hidden: list = field(default_factory=lambda: [256, 256])
    time_dim: int = 32
    # wrap each MLP in fixed preconditioning from a linear-Gaussian fit of its latents
    precondition: bool = True
    steps: int = 4000
    # per-level overrides of ``steps``, ordered level 1..L
    level_steps: list | None = None
    batch_size: int = 128
    lr: float = 1e-3
    # the trained net is the moving average of its weights; None keeps the last iterate
    ema_decay: float | None = 0.999
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = [0.5] * max(self.L - 1, 0)
        if self.cfg_weights is None:
            self.cfg_weights = [0.0] * self.L
        self.sigma = [float(s) for s in self.sigma]
        self.cfg_weights = [float(w) for w in self.cfg_weights]
        self.hidden = [int(h) for h in self.hidden]
        if isinstance(self.gamma, str):
            self.gamma = float(self.gamma)
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if len(self.sigma) != self.L - 1:
            raise ValueError(f"sigma needs {self.L - 1} entries (levels 2..L), got {len(self.sigma)}")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma values must be non-negative")
        if len(self.cfg_weights) != self.L:
            raise ValueError(f"cfg_weights needs {self.L} entries, got {len(self.cfg_weights)}")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.null_drop_prob <= 1.0:
            raise ValueError("null_drop_prob must be a probability")
        if self.schedule not in KINDS:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.level_steps is not None and len(self.level_steps) != self.L:
            raise ValueError("level_steps must have one entry per level")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.T < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("T and batch_size must be positive, steps non-negative")

    @property
    def resolved_gamma(self) -> float:
        return default_gamma(self.cfg_weights) if self.gamma is None else self.gamma

    def sigma_of(self, l: int) -> float:
        return self.sigma[l - 2]

    def steps_of(self, l: int) -> int:
        return int(self.level_steps[l - 1]) if self.level_steps is not None else int(self.steps)

    def with_(self, **kw) -> "NestedConfig":
        return replace(self, **kw)

    def resolved(self) -> dict:
        """Plain dict with every default materialised (gamma included)."""
        out = asdict(self)
        out["gamma"] = _encode_float(self.resolved_gamma)
        return out

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "NestedConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if raw.get("gamma") is not None:
            raw["gamma"] = _decode_float(raw["gamma"])
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "NestedConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _encode_float(x):
    return "inf" if x is not None and math.isinf(x) else x


def _decode_float(x):
    return float(x)
