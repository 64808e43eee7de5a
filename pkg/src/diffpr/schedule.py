"""DDPM variance schedule and the forward (noising) process.

Schedules are 1-based: step indices run t = 1..T and the cumulative product
at t = 0 is defined as 1, so ``alpha_bar_at(0) == 1.0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .fields import ensure_image_field

SIGMA_MODES = ("fixed", "posterior")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noising variances beta and derived alpha / alpha_bar / sigma.

    ``beta``, ``alpha``, ``alpha_bar`` and ``sigma`` are length-T arrays whose
    index i holds the value for step t = i + 1.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "fixed"

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.T,):
                raise ParameterError(f"{name} must have shape ({self.T},), got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not ((self.beta > 0.0) & (self.beta < 1.0)).all():
            raise ParameterError("every beta must lie in (0, 1)")
        if not ((self.alpha_bar > 0.0) & (self.alpha_bar < 1.0)).all():
            raise ParameterError("every alpha_bar must lie in (0, 1)")
        if self.T > 1 and not (np.diff(self.alpha_bar) < 0.0).all():
            raise ParameterError("alpha_bar must be strictly decreasing")
        if (self.sigma < 0.0).any():
            raise ParameterError("sigma must be nonnegative")

    def _check_t(self, t: int, lowest: int = 1) -> int:
        t = int(t)
        if not lowest <= t <= self.T:
            raise ParameterError(f"step index t={t} outside [{lowest}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        t = self._check_t(t, lowest=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])


def _sigma_from_mode(beta: np.ndarray, alpha_bar: np.ndarray, sigma_mode: str) -> np.ndarray:
    if sigma_mode == "fixed":
        return np.sqrt(beta)
    if sigma_mode == "posterior":
        alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
        return np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    raise ParameterError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")


def make_schedule_from_betas(betas, sigma_mode: str = "fixed") -> NoiseSchedule:
    """Build a schedule from an explicit beta sequence."""
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ParameterError(f"betas must be a nonempty 1-D sequence, got shape {beta.shape}")
    if not ((beta > 0.0) & (beta < 1.0)).all():
        raise ParameterError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = _sigma_from_mode(beta, alpha_bar, sigma_mode)
    return NoiseSchedule(T=beta.size, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma, sigma_mode=sigma_mode)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                         sigma_mode: str = "fixed") -> NoiseSchedule:
    """Linearly interpolated beta from ``beta_start`` to ``beta_end`` inclusive.

    The defaults are the common DDPM choice. ``sigma_mode`` selects the
    per-step sampler noise scale: "fixed" uses sqrt(beta_t), "posterior" uses
    sqrt(beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)).
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.full(T, beta_start) if T == 1 else np.linspace(beta_start, beta_end, T)
    return make_schedule_from_betas(beta, sigma_mode=sigma_mode)


def forward_step_sample(x_prev: np.ndarray, t: int, sched: NoiseSchedule,
                        rng: np.random.Generator) -> np.ndarray:
    """One forward noising step: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * z."""
    x_prev = ensure_image_field(x_prev, "x_prev")
    beta = sched.beta_at(t)
    z = rng.standard_normal(x_prev.shape)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * z


def forward_marginal_sample(x0: np.ndarray, t: int, sched: NoiseSchedule,
                            eps: np.ndarray) -> np.ndarray:
    """Closed-form marginal: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    The caller supplies ``eps`` so tests can fix it; there is no RNG inside.
    """
    x0 = ensure_image_field(x0, "x0")
    eps = ensure_image_field(eps, "eps")
    if eps.shape != x0.shape:
        raise ParameterError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    a_bar = sched.alpha_bar_at(t)
    return np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps
