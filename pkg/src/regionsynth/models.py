"""Clean-image generator and dual-branch mask-guided discriminator."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError
from .validation import check_mask

DISC_MODES = ("step_pair", "final_only")


def resample_mask(m: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Nearest-neighbour resampling; the result stays strictly binary."""
    if int(target_h) < 1 or int(target_w) < 1:
        raise ParameterError(f"target size must be >= 1, got {target_h}x{target_w}")
    m = check_mask(m)
    if m.shape[-2:] == (target_h, target_w):
        return m
    return F.interpolate(m, size=(int(target_h), int(target_w)), mode="nearest")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Generator(nn.Module):
    """U-shaped network predicting ``x_hat0 = G(x_t, t, z)``.

    The timestep embedding and a projection of ``z`` are summed and added into
    every decoder block. Output is squashed to ``[-1, 1]`` by ``tanh``.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 64, depth: int = 3,
                 z_dim: int = 100, temb_dim: int = 128):
        super().__init__()
        if depth < 1:
            raise ParameterError("depth must be >= 1")
        self.in_channels = in_channels
        self.depth = depth
        self.z_dim = z_dim
        self.temb_dim = temb_dim
        emb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.z_proj = nn.Linear(z_dim, emb_dim)

        chans = [base_channels * 2 ** i for i in range(depth)]
        self.conv_in = nn.Conv2d(in_channels, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down_blocks.append(ConvBlock(prev, ch))
            prev = ch
            if i < depth - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ConvBlock(prev, prev, emb_dim)
        self.up_blocks = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(depth)):
            ch = chans[i]
            self.up_blocks.append(ConvBlock(prev + ch, ch, emb_dim))
            prev = ch
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, in_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) input, got {tuple(x_t.shape)}")
        factor = 2 ** (self.depth - 1)
        if x_t.shape[-1] % factor or x_t.shape[-2] % factor:
            raise ShapeError(f"spatial dims {tuple(x_t.shape[-2:])} must be divisible by {factor}")
        if z.ndim != 2 or z.shape != (x_t.shape[0], self.z_dim):
            raise ShapeError(f"z must have shape ({x_t.shape[0]}, {self.z_dim}), got {tuple(z.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.temb_dim)) + self.z_proj(z)

        h = self.conv_in(x_t)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h)
            skips.append(h)
            if i < self.depth - 1:
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if j < self.depth - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class Discriminator(nn.Module):
    """Strided convolutional trunk with a global head and a masked foreground head.

    In ``step_pair`` mode the input is the channel concatenation of
    ``(x_{t-1}, x_t)`` and the trunk is conditioned on ``t``; in
    ``final_only`` mode the input is a single image and ``t`` is ignored.
    The foreground head is a bias-free 3x3 convolution applied to the
    tap-layer features multiplied by the resampled mask, then averaged over
    all spatial positions.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 32, n_blocks: int = 3,
                 disc_mode: str = "step_pair", temb_dim: int = 128, tap_layer: int | None = None):
        super().__init__()
        if disc_mode not in DISC_MODES:
            raise ParameterError(f"disc_mode must be one of {DISC_MODES}, got {disc_mode!r}")
        if n_blocks < 2:
            raise ParameterError("n_blocks must be >= 2")
        tap_layer = n_blocks - 2 if tap_layer is None else tap_layer
        if not 0 <= tap_layer < n_blocks:
            raise ParameterError(f"tap_layer {tap_layer} does not index one of {n_blocks} trunk blocks")
        self.image_channels = in_channels
        self.disc_mode = disc_mode
        self.tap_layer = tap_layer
        self.temb_dim = temb_dim
        self.input_channels = 2 * in_channels if disc_mode == "step_pair" else in_channels

        self.conv_in = nn.Conv2d(self.input_channels, base_channels, 3, padding=1)
        self.time_proj = (
            nn.Sequential(nn.Linear(temb_dim, base_channels), nn.LeakyReLU(0.2))
            if disc_mode == "step_pair" else None
        )
        chans = [base_channels * min(2 ** (i + 1), 8) for i in range(n_blocks)]
        blocks = []
        prev = base_channels
        for ch in chans:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(ch, ch, 3, padding=1), nn.LeakyReLU(0.2),
            ))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.img_head = nn.Linear(prev, 1)
        self.psi = nn.Conv2d(chans[tap_layer], 1, 3, padding=1, bias=False)

    def make_input(self, x: torch.Tensor, x_t: torch.Tensor | None = None) -> torch.Tensor:
        """Assemble the trunk input from an image and, in pair mode, its noisier partner."""
        if self.disc_mode == "step_pair":
            if x_t is None:
                raise ShapeError("step_pair discriminator needs the noisier state x_t")
            return torch.cat([x, x_t], dim=1)
        return x

    def features(self, x_in: torch.Tensor, t=None) -> list[torch.Tensor]:
        if x_in.ndim != 4 or x_in.shape[1] != self.input_channels:
            raise ShapeError(
                f"discriminator expects {self.input_channels} input channels, got {tuple(x_in.shape)}"
            )
        h = F.leaky_relu(self.conv_in(x_in), 0.2)
        if self.time_proj is not None:
            if t is None:
                raise ShapeError("step_pair discriminator needs a timestep")
            t = torch.as_tensor(t).reshape(-1).expand(x_in.shape[0])
            h = h + self.time_proj(timestep_embedding(t, self.temb_dim))[:, :, None, None]
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return feats

    def masked_features(self, feats: list[torch.Tensor], m: torch.Tensor) -> torch.Tensor:
        f = feats[self.tap_layer]
        return f * resample_mask(m, f.shape[-2], f.shape[-1]).to(f.dtype)

    def forward(self, x_in: torch.Tensor, m: torch.Tensor, t=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logit_img, logit_fg)``, each of shape ``(B,)``."""
        m = check_mask(m)
        if m.shape[0] != x_in.shape[0] or m.shape[-2:] != x_in.shape[-2:]:
            raise ShapeError(f"mask {tuple(m.shape)} does not match input {tuple(x_in.shape)}")
        feats = self.features(x_in, t)
        logit_img = self.img_head(feats[-1].mean(dim=(2, 3))).squeeze(1)
        logit_fg = self.psi(self.masked_features(feats, m)).mean(dim=(1, 2, 3))
        return logit_img, logit_fg


def generator_forward(params: Generator, x_t, t, z) -> torch.Tensor:
    return params(x_t, t, z)


def disc_forward(params: Discriminator, x_in, m, t=None) -> tuple[torch.Tensor, torch.Tensor]:
    return params(x_in, m, t)
