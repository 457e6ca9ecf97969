"""Noise schedules, loss weightings and time samplers.

Time ``t`` lives on [0, 1]. The noise-to-signal ratio follows the EDM power
interpolation ``s(t) = (s_min^(1/rho) + t (s_max^(1/rho) - s_min^(1/rho)))^rho``.
With ``kind="edm"`` the signal coefficient is 1 and ``sigma = s``; with
``kind="vp"`` the pair is rescaled so that ``a^2 + sigma^2 = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .diffmath import DTYPE


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    t_max: int = 800
    sigma_init: float = 2.5
    kind: str = "edm"
    # log-normal proposal over the noise level for fake-score / teacher updates
    p_mean: float = -1.2
    p_std: float = 1.2

    def nsr(self, t):
        lo = self.sigma_min ** (1 / self.rho)
        hi = self.sigma_max ** (1 / self.rho)
        return (lo + t * (hi - lo)) ** self.rho

    def t_of_nsr(self, s):
        lo = self.sigma_min ** (1 / self.rho)
        hi = self.sigma_max ** (1 / self.rho)
        return (s ** (1 / self.rho) - lo) / (hi - lo)

    def a(self, t):
        if self.kind == "edm":
            return torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0
        s = self.nsr(t)
        return 1 / (1 + s**2) ** 0.5

    def sigma(self, t):
        if self.kind == "edm":
            return self.nsr(t)
        s = self.nsr(t)
        return s / (1 + s**2) ** 0.5

    def snr(self, t):
        return 1 / self.nsr(t) ** 2


def make_schedule(**params) -> NoiseSchedule:
    sched = NoiseSchedule(**params)
    if not (0 < sched.sigma_min < sched.sigma_max):
        raise ConfigError(
            f"need 0 < sigma_min < sigma_max, got {sched.sigma_min}, {sched.sigma_max}"
        )
    if sched.rho <= 0:
        raise ConfigError(f"rho must be positive, got {sched.rho}")
    if not 0 <= sched.t_max <= 1000:
        raise ConfigError(f"t_max must lie in [0, 1000], got {sched.t_max}")
    if sched.sigma_init <= 0:
        raise ConfigError(f"sigma_init must be positive, got {sched.sigma_init}")
    if sched.kind not in ("edm", "vp"):
        raise ConfigError(f"unknown schedule kind {sched.kind!r}")
    if sched.p_std <= 0:
        raise ConfigError(f"p_std must be positive, got {sched.p_std}")
    return sched


@dataclass
class TimeDraw:
    """Per-sample diffusion time and the coefficients derived from it.

    Every field is a 1-D tensor with one entry per batch element.
    ``omega`` is the base generator weight; ``gamma`` weights fake-score losses.
    """

    t: torch.Tensor
    a: torch.Tensor
    sigma: torch.Tensor
    omega: torch.Tensor
    gamma: torch.Tensor
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    def expand(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return v.reshape((-1,) + (1,) * (x.dim() - 1))

    def take(self, idx) -> "TimeDraw":
        return TimeDraw(self.t[idx], self.a[idx], self.sigma[idx], self.omega[idx], self.gamma[idx])

    @property
    def prefactor(self) -> torch.Tensor:
        """omega a^2 / sigma^4, the weight in front of the SiD term."""
        return self.omega * self.a**2 / self.sigma**4


def draw_at(schedule: NoiseSchedule, t) -> TimeDraw:
    """Build a TimeDraw for given times, with omega = sigma^4/a^2 and gamma = SNR."""
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    a = schedule.a(t)
    sigma = schedule.sigma(t)
    return TimeDraw(t=t, a=a, sigma=sigma, omega=sigma**4 / a**2, gamma=a**2 / sigma**2)


def draw_at_sigma(schedule: NoiseSchedule, sigma) -> TimeDraw:
    """Inverse map: the TimeDraw whose sigma equals the given value(s)."""
    sigma = torch.as_tensor(sigma, dtype=DTYPE).reshape(-1)
    if schedule.kind == "edm":
        s = sigma
    else:
        s = sigma / (1 - sigma**2) ** 0.5
    return draw_at(schedule, schedule.t_of_nsr(s))


def diffuse(x: torch.Tensor, draw: TimeDraw, eps: torch.Tensor) -> torch.Tensor:
    """Forward diffusion ``a_t x + sigma_t eps``; eps carries no gradient."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    return draw.expand(x, draw.a) * x + draw.expand(x, draw.sigma) * eps.detach()


def sample_generator_time(gen: torch.Generator, schedule: NoiseSchedule, n: int) -> TimeDraw:
    """t ~ Unif[0, t_max/1000], one draw per sample."""
    u = torch.rand(n, generator=gen, dtype=DTYPE)
    return draw_at(schedule, u * (schedule.t_max / 1000))


def sample_fakescore_time(gen: torch.Generator, schedule: NoiseSchedule, n: int) -> TimeDraw:
    """Log-normal proposal over the noise-to-signal ratio, clipped to the schedule range."""
    z = torch.randn(n, generator=gen, dtype=DTYPE)
    s = torch.exp(schedule.p_mean + schedule.p_std * z)
    s = s.clamp(schedule.sigma_min, schedule.sigma_max)
    return draw_at(schedule, schedule.t_of_nsr(s))


def lognormal_median(schedule: NoiseSchedule) -> float:
    return math.exp(schedule.p_mean)
