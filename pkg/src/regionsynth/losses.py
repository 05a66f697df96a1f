"""Adversarial, reconstruction and R1 objectives."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ParameterError, ShapeError
from .validation import check_mask, check_same_shape


@dataclass
class LossWeights:
    lambda_d: float = 0.2
    lambda_img: float = 1.0
    lambda_mask: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    r1_gamma: float = 0.05

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {value}")
        if self.beta >= 1:
            raise ParameterError(f"beta must be < 1, got {self.beta}")


def softplus(x):
    """Overflow-safe ``log(1 + exp(x))`` for tensors or Python floats."""
    if not isinstance(x, torch.Tensor):
        return float(softplus(torch.tensor(float(x), dtype=torch.float64)))
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-x.abs()))


def _check_logits(*logits):
    sizes = {tuple(l.shape) for l in logits if l is not None}
    if len(sizes) > 1:
        raise ShapeError(f"logit batches differ in shape: {sorted(sizes)}")


def disc_loss(real_img_logit, real_fg_logit, fake_img_logit, fake_fg_logit,
              w: LossWeights) -> torch.Tensor:
    """Batch mean of ``sp(-r_img) + l*sp(-r_fg) + sp(f_img) + l*sp(f_fg)``.

    Passing ``None`` for both foreground logits drops those terms, which is
    the plain single-branch GAN objective.
    """
    _check_logits(real_img_logit, real_fg_logit, fake_img_logit, fake_fg_logit)
    per_elem = softplus(-real_img_logit) + softplus(fake_img_logit)
    if real_fg_logit is not None or fake_fg_logit is not None:
        if real_fg_logit is None or fake_fg_logit is None:
            raise ShapeError("foreground logits must be given for both real and fake samples")
        per_elem = (softplus(-real_img_logit) + w.lambda_d * softplus(-real_fg_logit)
                    + softplus(fake_img_logit) + w.lambda_d * softplus(fake_fg_logit))
    return per_elem.mean()


def masked_mse(x_hat0, x0, m, beta: float) -> torch.Tensor:
    """Squared error with background pixels down-weighted by ``beta``.

    Both terms are summed and divided by ``B*C*H*W``.
    """
    check_same_shape(x_hat0, x0, ("x_hat0", "x0"))
    m = check_mask(m, like=x0)
    sq = (x_hat0 - x0) ** 2
    fg = (m * sq).sum()
    bg = ((1 - m) * sq).sum()
    return (fg + beta * bg) / sq.numel()


def gen_loss(fake_img_logit, fake_fg_logit, x_hat0, x0, m, w: LossWeights):
    """Return ``(total, {"adv_img", "adv_mask", "mse"})``.

    ``fake_fg_logit=None`` removes the foreground adversarial term (its
    component is reported as an exact zero).
    """
    _check_logits(fake_img_logit, fake_fg_logit)
    adv_img = softplus(-fake_img_logit).mean()
    mse = masked_mse(x_hat0, x0, m, w.beta)
    if fake_fg_logit is None:
        adv_mask = torch.zeros((), dtype=adv_img.dtype)
        total = w.lambda_img * adv_img + w.alpha * mse
    else:
        adv_mask = softplus(-fake_fg_logit).mean()
        total = w.lambda_img * adv_img + w.lambda_mask * adv_mask + w.alpha * mse
    return total, {"adv_img": adv_img, "adv_mask": adv_mask, "mse": mse}


def r1_penalty(disc, real_batch: torch.Tensor, m=None, t=None, gamma: float = 0.05,
               make_input=None, create_graph: bool = True) -> torch.Tensor:
    """``gamma/2`` times the batch mean of ``||grad_x D_img(x)||^2`` at real samples.

    ``disc(x_in, m, t)`` may return either the global logit or a
    ``(logit_img, logit_fg)`` pair. ``make_input`` maps ``real_batch`` to the
    trunk input (e.g. concatenating the noisier pair member).
    """
    if not real_batch.requires_grad:
        raise ConfigurationError("r1_penalty needs real_batch with requires_grad=True")
    x_in = make_input(real_batch) if make_input is not None else real_batch
    out = disc(x_in, m, t)
    logit_img = out[0] if isinstance(out, tuple) else out
    if not logit_img.requires_grad:
        return torch.zeros((), dtype=real_batch.dtype)
    (grad,) = torch.autograd.grad(logit_img.sum(), real_batch, create_graph=create_graph,
                                  allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=real_batch.dtype)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()
