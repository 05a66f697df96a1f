"""Random blob-shaped binary anomaly masks and mask statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GenerationError, MaskValidationError, ParameterError

FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass
class MaskGenParams:
    coverage_min: float = 0.01
    coverage_max: float = 0.25
    blob_count_min: int = 1
    blob_count_max: int = 3
    smoothness: float = 1.5
    seed: int | None = 0
    max_retries: int = 16

    def __post_init__(self):
        if not (0 < self.coverage_min <= self.coverage_max < 1):
            raise ParameterError(
                f"need 0 < coverage_min <= coverage_max < 1, got "
                f"[{self.coverage_min}, {self.coverage_max}]"
            )
        if not (1 <= self.blob_count_min <= self.blob_count_max):
            raise ParameterError("need 1 <= blob_count_min <= blob_count_max")
        if self.smoothness < 0:
            raise ParameterError("smoothness must be >= 0")


@dataclass
class MaskStats:
    coverage: float
    component_count: int
    bbox: tuple[int, int, int, int] | None  # (top, left, bottom, right), inclusive


def _blob_field(h: int, w: int, params: MaskGenParams, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(params.blob_count_min, params.blob_count_max + 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = 0.15 * rng.standard_normal((h, w))
    for _ in range(k):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy, sx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        field += np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    if params.smoothness > 0:
        field = ndimage.gaussian_filter(field, params.smoothness, mode="reflect")
    return field


def random_mask(h: int, w: int, params: MaskGenParams | None = None,
                rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Draw one ``(h, w)`` float32 mask with values in ``{0, 1}``.

    The target pixel count is sampled uniformly among counts whose coverage
    lies inside ``[coverage_min, coverage_max]``; the highest-valued pixels of
    a smoothed blob field are switched on, so the count is met exactly.
    """
    params = params or MaskGenParams()
    if h < 8 or w < 8:
        raise ParameterError(f"mask size must be at least 8x8, got {h}x{w}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(params.seed if rng is None else rng)
    n_pix = h * w
    lo = math.ceil(params.coverage_min * n_pix - 1e-9)
    hi = math.floor(params.coverage_max * n_pix + 1e-9)
    lo = max(lo, 1)
    if lo > hi:
        raise GenerationError(
            f"no pixel count in {h}x{w} satisfies coverage [{params.coverage_min}, {params.coverage_max}]"
        )
    for _ in range(max(1, params.max_retries)):
        count = int(rng.integers(lo, hi + 1))
        field = _blob_field(h, w, params, rng).ravel()
        order = np.argsort(-field, kind="stable")
        mask = np.zeros(n_pix, dtype=np.float32)
        mask[order[:count]] = 1.0
        mask = mask.reshape(h, w)
        if lo <= int(mask.sum()) <= hi:
            return mask
    raise GenerationError(f"could not meet coverage bounds after {params.max_retries} attempts")


def random_masks(n: int, h: int, w: int, params: MaskGenParams | None = None,
                 rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Stack ``n`` masks into an ``(n, 1, h, w)`` array."""
    params = params or MaskGenParams()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(params.seed if rng is None else rng)
    out = np.zeros((n, 1, h, w), dtype=np.float32)
    for i in range(n):
        out[i, 0] = random_mask(h, w, params, rng)
    return out


def mask_stats(m) -> MaskStats:
    m = np.asarray(m)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    if not np.isin(m, (0, 1)).all():
        raise MaskValidationError("mask must be strictly binary")
    fg = m.astype(bool)
    _, count = ndimage.label(fg, structure=FOUR_CONNECTIVITY)
    bbox = None
    if fg.any():
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        bbox = (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))
    return MaskStats(coverage=float(fg.mean()), component_count=int(count), bbox=bbox)
