"""Forward (noising) diffusion process on latent tensors.

Timesteps are 1-based: ``t`` in ``[1, T]`` uses ``betas[t - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> VarianceSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return VarianceSchedule(betas, alpha_bars)


def _check_pair(a: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if a.shape != noise.shape:
        raise ConfigError(f"noise shape {noise.shape} does not match latent shape {a.shape}")
    return a, noise


def forward_diffuse_step(z_prev, t: int, sched: VarianceSchedule, noise) -> np.ndarray:
    """One Markov step: ``sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise``."""
    z_prev, noise = _check_pair(z_prev, noise)
    beta = sched.beta(t)
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * noise


def q_sample(z0, t: int, sched: VarianceSchedule, noise) -> np.ndarray:
    """Closed-form jump from ``z_0`` straight to ``z_t``."""
    z0, noise = _check_pair(z0, noise)
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
