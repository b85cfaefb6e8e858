"""Noise schedules, forward corruption, and multi-step DDIM-style sampling.

Timesteps are 1-based: t in [1, T] indexes the schedule arrays, and t = 0 is
the clean-image boundary with alpha_bar[0] defined as 1. The reverse process
is the deterministic DDIM update (eta = 0); an alternative cumulative-mean
update is available behind ``variant`` but is never used in training.
``sample`` keeps the whole unrolled chain on the autograd tape, so losses on
its output differentiate through every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rng import torch_gen


class NumericalFailure(RuntimeError):
    """Non-finite values encountered inside the sampler or a network."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products.

    beta, alpha and alpha_bar are float64 arrays of length T; entry i holds
    the value for timestep t = i + 1.
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a 1-D array with at least one entry")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for integer timestep(s) t in [0, T], with value 1 at t=0."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(beta=np.asarray(d["beta"], dtype=np.float64))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(beta=np.linspace(beta_start, beta_end, T))


def _gather(sched_values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Index schedule values by scalar or per-item t, shaped to broadcast over like."""
    t = torch.as_tensor(t, dtype=torch.long)
    vals = torch.from_numpy(np.ascontiguousarray(sched_values)).to(like.dtype)[t]
    if vals.ndim == 0:
        return vals
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def _alpha_bar_tensor(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    padded = np.concatenate([[1.0], sched.alpha_bar])
    t_arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}]")
    return _gather(padded, t, like)


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Corrupt x0 to timestep t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    ab = _alpha_bar_tensor(sched, t, x0)
    if torch.any(torch.as_tensor(t) < 1):
        raise ValueError("forward_noise requires t >= 1")
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward formula: (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)."""
    ab = _alpha_bar_tensor(sched, t, x_t)
    if torch.any(torch.as_tensor(t) < 1):
        raise ValueError("predict_x0 requires t >= 1")
    return (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    variant: str = "standard",
) -> torch.Tensor:
    """One deterministic reverse step from timestep t to t_prev < t.

    standard: sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_hat, with
    alpha_bar at t=0 equal to 1 so the terminal step returns x0_hat exactly.
    cumulative_mean: (x_t - (1-alpha_t)/sqrt(1-ab_t) * eps_hat) / sqrt(ab_t),
    a posterior-mean-style update with the cumulative product in the
    prefactor; it ignores t_prev and coincides with the standard terminal
    step only at t = 1. Excluded from training defaults.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if variant == "standard":
        x0_hat = predict_x0(x_t, eps_hat, t, sched)
        ab_prev = _alpha_bar_tensor(sched, t_prev, x_t)
        return torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1.0 - ab_prev) * eps_hat
    if variant == "cumulative_mean":
        ab = _alpha_bar_tensor(sched, t, x_t)
        alpha_t = _gather(sched.alpha, np.asarray(t) - 1, x_t)
        return (x_t - (1.0 - alpha_t) / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    raise ValueError(f"unknown ddim_step variant {variant!r}")


def strided_plan(T: int, n: int) -> list[int]:
    """Descending timesteps visiting every ceil(T/n)-th step, starting at T.

    The last listed step denoises to 0 (the implicit terminal boundary).
    """
    if not 1 <= n <= T:
        raise ValueError(f"n must be in [1, {T}], got {n}")
    stride = -(-T // n)  # ceil
    plan = [t for t in range(T, 0, -stride)]
    return plan


def check_plan(plan: list[int], T: int) -> None:
    if not plan:
        raise ValueError("empty timestep plan")
    if plan[0] != T:
        raise ValueError(f"plan must start at T={T}, starts at {plan[0]}")
    if any(not 1 <= t <= T for t in plan):
        raise ValueError("plan entries must lie in [1, T]")
    if any(a <= b for a, b in zip(plan, plan[1:])):
        raise ValueError("plan must be strictly decreasing")


def sample_from(
    denoiser,
    condition: torch.Tensor,
    plan: list[int],
    sched: NoiseSchedule,
    init: torch.Tensor,
    variant: str = "standard",
) -> torch.Tensor:
    """Run the reverse chain from a given Gaussian draw; keeps gradients."""
    check_plan(plan, sched.T)
    x = init
    for t, t_prev in zip(plan, list(plan[1:]) + [0]):
        t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
        eps_hat = denoiser(x, condition, t_batch)
        x = ddim_step(x, eps_hat, t, t_prev, sched, variant=variant)
        if not torch.isfinite(x.detach()).all():
            raise NumericalFailure(f"non-finite values after reverse step t={t}")
    return x


def sample(
    denoiser,
    condition: torch.Tensor,
    plan: list[int],
    sched: NoiseSchedule,
    seed: int,
    shape: tuple[int, ...],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Generate from a seeded isotropic-Gaussian draw through the plan."""
    init = torch.randn(shape, generator=torch_gen(seed, "sample-init"), dtype=dtype)
    return sample_from(denoiser, condition, plan, sched, init)
