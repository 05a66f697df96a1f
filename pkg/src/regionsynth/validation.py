"""Input validation helpers shared by the functional core and the estimators."""
from __future__ import annotations

import numpy as np
import torch

from .errors import MaskValidationError, NumericError, ParameterError, ShapeError


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Tensor view of ``x``; floating inputs keep their precision unless ``dtype`` is given."""
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if dtype is None:
        dtype = t.dtype if t.is_floating_point() else torch.float32
    return t if t.dtype == dtype else t.to(dtype)


def check_image_batch(x, name: str = "x", finite: bool = True) -> torch.Tensor:
    """Return ``x`` as a float tensor of shape (B, C, H, W)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must have shape (B, C, H, W), got {tuple(x.shape)}")
    if finite and not torch.isfinite(x).all():
        raise NumericError(f"{name} contains non-finite values")
    return x


def check_same_shape(a: torch.Tensor, b: torch.Tensor, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} {tuple(a.shape)} and {names[1]} {tuple(b.shape)} differ in shape")


def check_mask(m, like: torch.Tensor | None = None, name: str = "m") -> torch.Tensor:
    """Validate a binary (B, 1, H, W) mask; ``like`` fixes batch and spatial dims."""
    m = as_tensor(m, dtype=like.dtype if like is not None else torch.float32)
    if m.ndim == 3:
        m = m.unsqueeze(1)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"{name} must have shape (B, 1, H, W), got {tuple(m.shape)}")
    if not ((m == 0) | (m == 1)).all():
        raise MaskValidationError(f"{name} must be strictly binary with values in {{0, 1}}")
    if like is not None:
        if m.shape[0] != like.shape[0] or m.shape[-2:] != like.shape[-2:]:
            raise ShapeError(
                f"{name} {tuple(m.shape)} does not match image batch {tuple(like.shape)}"
            )
    return m


def check_timestep(t, n_steps: int) -> torch.Tensor:
    """Return ``t`` as a 1-D long tensor after range-checking against ``[1, n_steps]``."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > n_steps:
        raise ParameterError(f"timestep must lie in [1, {n_steps}], got {t.tolist()}")
    return t


def check_random_state(seed) -> torch.Generator:
    """Turn ``None``, an int, or an existing ``torch.Generator`` into a generator."""
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    if seed is None:
        gen.seed()
    else:
        gen.manual_seed(int(seed))
    return gen
