"""Discrete mean-reverting SDE: dx = theta_t (mu - x) dt + sigma_t dw, sigma_t^2 = 2 lam^2 theta_t.

With cumulative rate theta_bar_i, the marginal given x0 is Gaussian with mean
mu + (x0 - mu) exp(-theta_bar_i) and std lam * sqrt(1 - exp(-2 theta_bar_i)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ScheduleConfig

MAX_INVERSE_GAIN = 1e3


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    theta_bar: np.ndarray  # (T + 1,), theta_bar[0] == 0
    lam: float

    def __post_init__(self):
        tb = np.asarray(self.theta_bar, dtype=np.float64)
        object.__setattr__(self, "theta_bar", tb)
        if tb.ndim != 1 or tb.size < 2:
            raise ValueError("theta_bar needs at least two entries")
        if tb[0] != 0 or np.any(np.diff(tb) <= 0):
            raise ValueError("theta_bar must start at 0 and increase strictly")
        if math.exp(-2 * tb[-1]) > 1e-4 * (1 + 1e-9):
            raise ValueError("terminal state is not stationary: exp(-2 theta_bar_T) > 1e-4")
        if self.lam <= 0:
            raise ValueError("lam must be positive")

    @property
    def T(self) -> int:
        return self.theta_bar.size - 1

    @classmethod
    def quadratic(cls, T: int = 100, lam: float = 0.2, terminal: float = 1e-4) -> "NoiseSchedule":
        """theta_bar_i = theta_max (i / T)^2 with exp(-2 theta_max) = terminal."""
        theta_max = -0.5 * math.log(terminal)
        return cls(theta_max * (np.arange(T + 1) / T) ** 2, lam)

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        return cls.quadratic(config.steps, config.lam, config.terminal)

    @property
    def sigma_bar(self) -> np.ndarray:
        return self.lam * np.sqrt(1 - np.exp(-2 * self.theta_bar))

    def describe(self) -> dict:
        return {"T": self.T, "lam": self.lam, "theta_bar_T": float(self.theta_bar[-1])}

    def matches(self, other: "NoiseSchedule") -> bool:
        return self.T == other.T and math.isclose(self.lam, other.lam) and np.allclose(self.theta_bar, other.theta_bar)


def _coef(values: np.ndarray, i, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[i]`` (i int or (B,) tensor) shaped to broadcast against ``like``."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(i, torch.Tensor) and i.ndim > 0:
        return table[i.to(like.device)].view(-1, *([1] * (like.ndim - 1)))
    return table[int(i)]


def _check_index(schedule: NoiseSchedule, i, lowest: int = 0) -> None:
    lo = int(i.min()) if isinstance(i, torch.Tensor) else int(i)
    hi = int(i.max()) if isinstance(i, torch.Tensor) else int(i)
    if lo < lowest or hi > schedule.T:
        raise IndexError(f"timestep outside [{lowest}, {schedule.T}]: got {lo}..{hi}")


def forward_marginal(x0: torch.Tensor, mu: torch.Tensor, schedule: NoiseSchedule, i):
    _check_index(schedule, i)
    decay = _coef(np.exp(-schedule.theta_bar), i, x0)
    std = _coef(schedule.sigma_bar, i, x0)
    return mu + (x0 - mu) * decay, std


def forward_sample(x0, mu, schedule: NoiseSchedule, i, noise: torch.Tensor) -> torch.Tensor:
    mean, std = forward_marginal(x0, mu, schedule, i)
    return mean + std * noise


def reconstruct_x0(x_i, mu, eps, schedule: NoiseSchedule, i) -> torch.Tensor:
    """Invert the marginal for x0 given a noise estimate; the gain exp(theta_bar_i) is capped."""
    _check_index(schedule, i)
    gain = _coef(np.minimum(np.exp(schedule.theta_bar), MAX_INVERSE_GAIN), i, x_i)
    std = _coef(schedule.sigma_bar, i, x_i)
    return mu + (x_i - mu - std * eps) * gain


def reverse_coefficients(schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Weights (a_i, b_i) of the posterior mean x*_{i-1} = mu + a_i (x_i - mu) + b_i (x0 - mu).

    Index 0 is unused and set to zero.
    """
    tb = schedule.theta_bar
    prev, cur = tb[:-1], tb[1:]
    step = cur - prev
    denom = -np.expm1(-2 * cur)
    a = -np.expm1(-2 * prev) / denom * np.exp(-step)
    b = -np.expm1(-2 * step) / denom * np.exp(-prev)
    return np.concatenate([[0.0], a]), np.concatenate([[0.0], b])


def optimal_reverse_state(x_i, x0, mu, schedule: NoiseSchedule, i) -> torch.Tensor:
    """Most likely x_{i-1} given x_i and x0 (requires 1 <= i <= T)."""
    if not isinstance(i, torch.Tensor) and int(i) == 0:
        raise ValueError("optimal reverse state is undefined at i = 0")
    _check_index(schedule, i, lowest=1)
    a, b = reverse_coefficients(schedule)
    return mu + _coef(a, i, x_i) * (x_i - mu) + _coef(b, i, x_i) * (x0 - mu)
