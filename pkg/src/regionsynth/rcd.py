"""Reverse sampling with region-constrained fusion.

Each reverse step predicts a clean image, draws ``x'_{t-1}`` from the Gaussian
posterior, then keeps the previous state ``x_t`` wherever the mask is zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import NumericError
from .schedule import NoiseSchedule, gather
from .validation import (
    check_image_batch,
    check_mask,
    check_random_state,
    check_same_shape,
    check_timestep,
)


@dataclass
class SamplerOptions:
    rcd_enabled: bool = True
    final_clean_composite: bool = True
    seed: int | None = 0


def posterior_sample(x_hat0, x_t, t, noise, sched: NoiseSchedule) -> torch.Tensor:
    """``A_t * x_hat0 + B_t * x_t + sigma_t * noise``."""
    x_hat0 = check_image_batch(x_hat0, "x_hat0")
    x_t = check_image_batch(x_t, "x_t")
    noise = check_image_batch(noise, "noise")
    check_same_shape(x_hat0, x_t, ("x_hat0", "x_t"))
    check_same_shape(x_t, noise, ("x_t", "noise"))
    idx = check_timestep(t, sched.T) - 1
    a = gather(sched.A, idx, x_t)
    b = gather(sched.B, idx, x_t)
    s = gather(sched.sigma, idx, x_t)
    return a * x_hat0 + b * x_t + s * noise


def rcd_fuse(x_prev_candidate, x_t, m) -> torch.Tensor:
    """Take ``x_prev_candidate`` inside the mask and ``x_t`` outside it.

    Selection is exact, so background pixels are bit-identical to ``x_t``.
    """
    x_prev_candidate = check_image_batch(x_prev_candidate, "x_prev_candidate", finite=False)
    x_t = check_image_batch(x_t, "x_t", finite=False)
    check_same_shape(x_prev_candidate, x_t, ("x_prev_candidate", "x_t"))
    m = check_mask(m, like=x_t)
    return torch.where(m.bool(), x_prev_candidate, x_t)


def final_composite(x0_gen, x0_clean, m) -> torch.Tensor:
    """Paste generated foreground onto a clean background image."""
    x0_gen = check_image_batch(x0_gen, "x0_gen")
    x0_clean = check_image_batch(x0_clean, "x0_clean")
    check_same_shape(x0_gen, x0_clean, ("x0_gen", "x0_clean"))
    m = check_mask(m, like=x0_gen)
    return torch.where(m.bool(), x0_gen, x0_clean)


@torch.no_grad()
def rcd_reverse(
    generator: Callable,
    x_T,
    m,
    sched: NoiseSchedule,
    z_per_step: Sequence[torch.Tensor] | None = None,
    opts: SamplerOptions | None = None,
    *,
    rng: torch.Generator | None = None,
    z_dim: int | None = None,
    x0_clean=None,
    return_intermediates: bool = False,
):
    """Run ``t = T .. 1`` and return ``x_0``.

    ``generator(x_t, t, z)`` predicts the clean image. ``z_per_step[t - 1]`` is
    the latent used at step ``t``; when omitted, fresh latents of size
    ``z_dim`` (or ``generator.z_dim``) are drawn per step. Posterior noise
    comes from ``rng`` or, failing that, ``opts.seed``. When
    ``opts.final_clean_composite`` is set and ``x0_clean`` is given, the
    output background is replaced by ``x0_clean``.

    With ``return_intermediates`` the states ``[x_T, x_{T-1}, ..., x_0]``
    (before any final composite) are returned alongside the output.
    """
    opts = opts or SamplerOptions()
    x = check_image_batch(x_T, "x_T")
    m = check_mask(m, like=x)
    rng = rng if rng is not None else check_random_state(opts.seed)
    if z_per_step is None:
        z_dim = z_dim if z_dim is not None else getattr(generator, "z_dim")
    elif len(z_per_step) != sched.T:
        raise ValueError(f"need one latent per step ({sched.T}), got {len(z_per_step)}")

    states = [x]
    batch = x.shape[0]
    for t in range(sched.T, 0, -1):
        if z_per_step is None:
            z = torch.randn(batch, z_dim, generator=rng, dtype=x.dtype)
        else:
            z = z_per_step[t - 1]
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        t_vec = torch.full((batch,), t, dtype=torch.long)
        x_hat0 = generator(x, t_vec, z)
        if not torch.isfinite(x_hat0).all():
            raise NumericError(f"generator produced non-finite values at step t={t}")
        x_prev = posterior_sample(x_hat0, x, t_vec, noise, sched)
        if opts.rcd_enabled:
            x_prev = rcd_fuse(x_prev, x, m)
        if not torch.isfinite(x_prev).all():
            raise NumericError(f"non-finite sample at step t={t}")
        x = x_prev
        states.append(x)

    out = x
    if opts.final_clean_composite and x0_clean is not None:
        out = final_composite(x, x0_clean, m)
    if return_intermediates:
        return out, states
    return out
