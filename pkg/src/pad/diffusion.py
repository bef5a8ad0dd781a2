"""Diffusion numerics: schedule, forward noising, DDIM stepping, losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import Tensor

__all__ = [
    "NoiseSchedule",
    "LossWeights",
    "build_schedule",
    "q_sample",
    "posterior_mean",
    "ddim_step",
    "make_ddim_ladder",
    "ddpm_loss",
    "combined_loss",
    "lambda_schedule",
]

MODALITIES = ("I", "A", "E")


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficients indexed by t in [0, T]; index 0 holds alpha_bar_0 = 1."""

    T: int
    beta: Tensor  # [T + 1], beta[0] = 0
    alpha: Tensor
    alpha_bar: Tensor

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t) -> Tensor:
        """alpha_bar at integer timestep(s); accepts an int or an index tensor."""
        if isinstance(t, Tensor):
            return self.alpha_bar[t]
        return self.alpha_bar[int(t)]


@dataclass(frozen=True)
class LossWeights:
    lambda_I: float = 1.0
    lambda_A: float = 1.0
    lambda_E: float = 1.0

    def __post_init__(self):
        if min(self.lambda_I, self.lambda_A, self.lambda_E) < 0:
            raise ValueError("loss weights must be nonnegative")

    def of(self, modality: str) -> float:
        return getattr(self, f"lambda_{modality}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule, computed in float64."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    beta = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _coef(sched: NoiseSchedule, t, like: Tensor) -> Tensor:
    """alpha_bar broadcast against ``like``; per-example when t is a 1-d tensor."""
    if isinstance(t, Tensor) and t.dim() == 1:
        if bool((t < 1).any()) or bool((t > sched.T).any()):
            raise ValueError(f"timesteps outside [1, {sched.T}]")
        a = sched.alpha_bar[t].to(like.dtype)
        return a.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.as_tensor(sched.alpha_bar[sched.check_t(t)].item(), dtype=like.dtype)


def q_sample(z0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != {tuple(z0.shape)}")
    a = _coef(sched, t, z0)
    return a.sqrt() * z0 + (1.0 - a).sqrt() * eps


def posterior_mean(z_t: Tensor, t, eps_hat: Tensor, sched: NoiseSchedule) -> Tensor:
    """Clean-sample estimate (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    if eps_hat.shape != z_t.shape:
        raise ValueError("eps_hat and z_t shapes differ")
    a = _coef(sched, t, z_t)
    return (z_t - (1.0 - a).sqrt() * eps_hat) / a.sqrt()


def ddim_step(z_t: Tensor, t: int, t_prev: int, eps_hat: Tensor, sched: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) update from t to t_prev."""
    t = sched.check_t(t)
    t_prev = int(t_prev)
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    z0_hat = posterior_mean(z_t, t, eps_hat, sched)
    a_prev = torch.as_tensor(sched.alpha_bar[t_prev].item(), dtype=z_t.dtype)
    return a_prev.sqrt() * z0_hat + (1.0 - a_prev).sqrt() * eps_hat


def make_ddim_ladder(T: int, n_steps: int) -> list[tuple[int, int]]:
    """Uniformly spaced descending (t, t_prev) pairs ending at t_prev = 0.

    Timesteps are round(T * j / n) for j = n..0, so the top rung is always T.
    """
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    ts = [int(math.floor(T * j / n_steps + 0.5)) for j in range(n_steps, -1, -1)]
    return list(zip(ts[:-1], ts[1:]))


def ddpm_loss(eps_hat: Tensor, eps: Tensor) -> Tensor:
    """Mean squared error over every element (batch included)."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return ((eps_hat - eps) ** 2).mean()


def combined_loss(
    per_modality: Mapping[str, Tensor | float],
    w: LossWeights,
    present: Mapping[str, bool],
) -> Tensor:
    """Weighted sum over present modalities; absent ones are never touched."""
    total = None
    for m in MODALITIES:
        if not present.get(m, False):
            continue
        term = w.of(m) * torch.as_tensor(per_modality[m])
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def lambda_schedule(step: int, total_steps: int, final: float = 2.0) -> LossWeights:
    """lambda_I fixed at 1; lambda_A and lambda_E ramp linearly 0 -> ``final``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0:
        raise ValueError("step must be nonnegative")
    frac = min(step / total_steps, 1.0)
    return LossWeights(1.0, final * frac, final * frac)
