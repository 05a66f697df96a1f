"""Discrete forward-diffusion schedule and closed-form posterior coefficients.

Timesteps are 1-indexed: ``t = T`` is the noisiest step and ``t = 0`` is the
clean image. Per-step arrays (``beta``, ``alpha``, ``A``, ``B``, ``sigma2``)
have length ``T`` and are indexed by ``t - 1``; ``alpha_bar`` has length
``T + 1`` and is indexed by ``t`` directly so that ``alpha_bar[0] == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ParameterError
from .validation import check_image_batch, check_same_shape, check_timestep

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma2: np.ndarray
    kind: str = "linear"
    beta_min: float = 0.1
    beta_max: float = 0.9

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "A", "B", "sigma2"):
            getattr(self, name).setflags(write=False)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma2)

    def table(self) -> list[dict]:
        """One row per timestep with every schedule constant."""
        return [
            dict(
                t=t,
                beta=float(self.beta[t - 1]),
                alpha=float(self.alpha[t - 1]),
                alpha_bar=float(self.alpha_bar[t]),
                A=float(self.A[t - 1]),
                B=float(self.B[t - 1]),
                sigma2=float(self.sigma2[t - 1]),
            )
            for t in range(1, self.T + 1)
        ]

    def params(self) -> dict:
        return dict(T=self.T, beta_min=self.beta_min, beta_max=self.beta_max, kind=self.kind)


def _cosine_betas(T: int, beta_max: float, s: float = 8e-3) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    betas = 1.0 - f[1:] / f[:-1]
    return np.clip(betas, 1e-8, beta_max)


def make_schedule(T: int = 4, beta_min: float = 0.1, beta_max: float = 0.9,
                  kind: str = "linear") -> NoiseSchedule:
    """Build the schedule and the DDPM posterior coefficients in float64.

    ``A_t = sqrt(abar_{t-1}) beta_t / (1 - abar_t)``,
    ``B_t = sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)`` and
    ``sigma2_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)``, so ``sigma2_1 = 0``.
    """
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        beta = _cosine_betas(T, beta_max)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")

    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    prev, cur = alpha_bar[:-1], alpha_bar[1:]
    A = np.sqrt(prev) * beta / (1.0 - cur)
    B = np.sqrt(alpha) * (1.0 - prev) / (1.0 - cur)
    sigma2 = beta * (1.0 - prev) / (1.0 - cur)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, A=A, B=B,
                         sigma2=sigma2, kind=kind, beta_min=float(beta_min),
                         beta_max=float(beta_max))


def gather(values: np.ndarray, index: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Pick ``values[index]`` and shape it to broadcast against ``like``."""
    out = torch.tensor(values, dtype=torch.float64)[index].to(like.dtype)
    if out.numel() == 1:
        out = out.expand(like.shape[0])
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Sample ``q(x_t | x_0)`` with caller-supplied unit Gaussian ``eps``."""
    x0 = check_image_batch(x0, "x0")
    eps = check_image_batch(eps, "eps")
    check_same_shape(x0, eps, ("x0", "eps"))
    t = check_timestep(t, sched.T)
    ab = gather(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_step(x_prev, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """One forward transition ``q(x_t | x_{t-1})``."""
    t = check_timestep(t, sched.T)
    beta = gather(sched.beta, t - 1, x_prev)
    return (1.0 - beta).sqrt() * x_prev + beta.sqrt() * eps


def diffuse_pair(x0, t, eps1, eps2, sched: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Jointly sample ``(x_{t-1}, x_t)`` from the forward process.

    ``x_{t-1}`` is drawn from ``q(x_{t-1} | x_0)`` (equal to ``x_0`` at ``t = 1``)
    and ``x_t`` from one further forward transition.
    """
    x0 = check_image_batch(x0, "x0")
    t = check_timestep(t, sched.T)
    ab_prev = gather(sched.alpha_bar, t - 1, x0)
    x_prev = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps1
    return x_prev, forward_step(x_prev, t, eps2, sched)
