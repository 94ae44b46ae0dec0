"""Memristive cell model: level mapping and lognormal programming variation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class DeviceModel:
    hgs: float = 1e-5
    lgs: float = 1e-7
    g_levels: int = 16
    cv: float = 0.05

    def __post_init__(self):
        if not (self.hgs > self.lgs > 0):
            raise ValueError(f"need hgs > lgs > 0, got hgs={self.hgs}, lgs={self.lgs}")
        if int(self.g_levels) != self.g_levels or self.g_levels < 2:
            raise ValueError(f"g_levels must be an integer >= 2, got {self.g_levels}")
        if self.cv < 0:
            raise ValueError(f"cv must be >= 0, got {self.cv}")

    @property
    def level_step(self) -> float:
        return (self.hgs - self.lgs) / (self.g_levels - 1)

    def replace(self, **kw) -> "DeviceModel":
        return DeviceModel(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LognormalParams:
    sigma: float
    mu: float

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.sigma ** 2 / 2)


def lognormal_params(target_mean: float, cv: float) -> LognormalParams:
    # mu uses sigma**2 / 2 so that the distribution mean equals target_mean.
    if not target_mean > 0:
        raise ValueError(f"target mean must be positive, got {target_mean}")
    if cv < 0:
        raise ValueError(f"cv must be >= 0, got {cv}")
    sigma = math.sqrt(math.log(cv * cv + 1.0))
    return LognormalParams(sigma=sigma, mu=math.log(target_mean) - sigma * sigma / 2)


def level_to_conductance(level, model: DeviceModel):
    lv = np.asarray(level)
    if np.any(lv < 0) or np.any(lv > model.g_levels - 1):
        raise ValueError(f"level out of range [0, {model.g_levels - 1}]")
    g = model.lgs + lv * model.level_step
    return float(g) if np.ndim(g) == 0 else g


def sample_programmed(ideal, model: DeviceModel, rng: np.random.Generator) -> np.ndarray:
    """Draw one programming event: lognormal around each ideal conductance.

    Device-to-device and cycle-to-cycle spread are lumped into a single draw
    with coefficient of variation ``model.cv``; results are clipped to
    [lgs/10, 10*hgs].
    """
    g = np.asarray(ideal, dtype=np.float64)
    slack = 1e-9 * model.hgs
    if np.any(g < model.lgs - slack) or np.any(g > model.hgs + slack):
        raise ValueError("ideal conductance outside the programmable range [lgs, hgs]")
    if model.cv == 0:
        return g.copy()
    sigma = math.sqrt(math.log(model.cv ** 2 + 1.0))
    z = rng.standard_normal(g.shape)
    out = g * np.exp(sigma * z - sigma * sigma / 2)
    return np.clip(out, model.lgs / 10, model.hgs * 10)
