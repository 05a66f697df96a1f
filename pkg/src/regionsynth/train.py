"""Adversarial training of the clean-image generator against the dual-branch discriminator."""
from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
import numpy as np
import torch

from .errors import CheckpointError, ParameterError, ShapeError, TrainingError
from .losses import LossWeights, disc_loss, gen_loss, r1_penalty
from .models import DISC_MODES, Discriminator, Generator
from .rcd import posterior_sample, rcd_fuse
from .schedule import NoiseSchedule, diffuse_pair, make_schedule
from .validation import check_image_batch, check_mask

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_KEYS = ("iter", "l_d", "l_g", "adv_img", "adv_mask", "mse", "r1",
               "real_logit_mean", "fake_logit_mean")


@dataclass
class TrainConfig:
    n_steps: int = 4
    beta_min: float = 0.1
    beta_max: float = 0.9
    schedule_kind: str = "linear"
    batch_size: int = 4
    lr_g: float = 1.6e-4
    lr_d: float = 1.0e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    ema_decay: float = 0.999
    iterations: int = 20000
    weights: LossWeights = field(default_factory=LossWeights)
    disc_mode: str = "step_pair"
    rcd_enabled: bool = True
    dmg_enabled: bool = True
    image_size: int = 64
    channels: int = 3
    gen_base_channels: int = 64
    gen_depth: int = 3
    z_dim: int = 100
    temb_dim: int = 128
    disc_base_channels: int = 32
    disc_blocks: int = 3
    checkpoint_interval: int = 1000
    log_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.lr_g < 0 or self.lr_d < 0:
            raise ParameterError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.n_steps < 1:
            raise ParameterError("n_steps must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ParameterError("ema_decay must lie in [0, 1)")
        if self.disc_mode not in DISC_MODES:
            raise ParameterError(f"disc_mode must be one of {DISC_MODES}")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    ema: Generator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    schedule: NoiseSchedule
    rng: torch.Generator
    iteration: int = 0


def build_models(cfg: TrainConfig) -> tuple[Generator, Discriminator]:
    gen = Generator(cfg.channels, cfg.gen_base_channels, cfg.gen_depth, cfg.z_dim, cfg.temb_dim)
    disc = Discriminator(cfg.channels, cfg.disc_base_channels, cfg.disc_blocks, cfg.disc_mode,
                         cfg.temb_dim)
    return gen, disc


def init_state(cfg: TrainConfig) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        gen, disc = build_models(cfg)
    ema = copy.deepcopy(gen).requires_grad_(False).eval()
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=betas)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    sched = make_schedule(cfg.n_steps, cfg.beta_min, cfg.beta_max, cfg.schedule_kind)
    return TrainState(gen, disc, ema, opt_g, opt_d, sched, rng)


def _tensors(obj) -> list[torch.Tensor]:
    if isinstance(obj, torch.nn.Module):
        return [p.data for p in obj.parameters()]
    if isinstance(obj, dict):
        return list(obj.values())
    return [p.data if isinstance(p, torch.nn.Parameter) else p for p in obj]


@torch.no_grad()
def ema_update(shadow, current, decay: float):
    """In place ``shadow <- decay * shadow + (1 - decay) * current``; returns ``shadow``.

    Accepts modules, dicts of tensors or sequences of tensors. Uses ``lerp``
    so that equal inputs are left bit-identical.
    """
    if not 0 <= decay < 1:
        raise ParameterError(f"decay must lie in [0, 1), got {decay}")
    dst, src = _tensors(shadow), _tensors(current)
    if len(dst) != len(src):
        raise ShapeError(f"shadow has {len(dst)} tensors, current has {len(src)}")
    for s, c in zip(dst, src):
        if s.shape != c.shape:
            raise ShapeError(f"EMA shape mismatch: {tuple(s.shape)} vs {tuple(c.shape)}")
        s.lerp_(c, 1.0 - decay)
    return shadow


def _check_finite(metrics: dict, iteration: int) -> None:
    for name, value in metrics.items():
        if not np.isfinite(value):
            raise TrainingError(f"loss component {name} is {value} at iteration {iteration}")


def train_step(state: TrainState, batch, cfg: TrainConfig) -> tuple[TrainState, dict]:
    """One discriminator update followed by one generator update and an EMA step.

    ``batch`` is ``(x0, m)``: real anomalous images and their masks. The real
    pair ``(x_{t-1}, x_t)`` is forward-diffused from ``x0``; the fake pair uses
    the generator's clean-image prediction and the posterior. With RCD on,
    both pairs keep ``x_t`` outside the mask.
    """
    x0, m = batch
    x0 = check_image_batch(x0, "x0")
    m = check_mask(m, like=x0)
    gen, disc, sched, rng = state.generator, state.discriminator, state.schedule, state.rng
    w = cfg.weights
    bsz = x0.shape[0]

    t = torch.randint(1, sched.T + 1, (bsz,), generator=rng)
    eps1 = torch.randn(x0.shape, generator=rng)
    eps2 = torch.randn(x0.shape, generator=rng)
    z = torch.randn(bsz, cfg.z_dim, generator=rng)
    noise = torch.randn(x0.shape, generator=rng)

    x_prev, x_t = diffuse_pair(x0, t, eps1, eps2, sched)
    if cfg.rcd_enabled:
        x_prev = rcd_fuse(x_prev, x_t, m)

    def pair(x):
        return disc.make_input(x, x_t)

    # discriminator update
    gen.train()
    disc.requires_grad_(True)
    x_real = x_prev.detach().requires_grad_(True)
    real_img, real_fg = disc(pair(x_real), m, t)
    r1 = r1_penalty(disc, x_real, m, t, w.r1_gamma, make_input=pair)

    x_hat0 = gen(x_t, t, z)
    if not torch.isfinite(x_hat0).all():
        raise TrainingError(f"generator output is non-finite at iteration {state.iteration + 1}")
    x_fake = posterior_sample(x_hat0, x_t, t, noise, sched)
    if cfg.rcd_enabled:
        x_fake = rcd_fuse(x_fake, x_t, m)
    fake_img, fake_fg = disc(pair(x_fake.detach()), m, t)

    dmg = cfg.dmg_enabled
    l_adv_d = disc_loss(real_img.double(), real_fg.double() if dmg else None,
                        fake_img.double(), fake_fg.double() if dmg else None, w)
    l_d = l_adv_d + r1.double()
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    state.opt_d.step()

    # generator update
    disc.requires_grad_(False)
    g_img, g_fg = disc(pair(x_fake), m, t)
    l_g, comps = gen_loss(g_img.double(), g_fg.double() if dmg else None,
                          x_hat0.double(), x0.double(), m.double(), w)
    state.opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    state.opt_g.step()
    disc.requires_grad_(True)

    ema_update(state.ema, gen, cfg.ema_decay)
    state.iteration += 1

    metrics = {
        "iter": state.iteration,
        "l_d": float(l_d.detach()),
        "l_g": float(l_g.detach()),
        "adv_img": float(comps["adv_img"].detach()),
        "adv_mask": float(comps["adv_mask"].detach()),
        "mse": float(comps["mse"].detach()),
        "r1": float(r1.detach()),
        "real_logit_mean": float(real_img.detach().mean()),
        "fake_logit_mean": float(fake_img.detach().mean()),
    }
    _check_finite({k: v for k, v in metrics.items() if k != "iter"}, state.iteration)
    return state, metrics


def format_metrics(metrics: dict) -> str:
    parts = []
    for key in METRIC_KEYS:
        value = metrics[key]
        parts.append(f"{key}={value}" if key == "iter" else f"{key}={value:.8g}")
    return " ".join(parts)


def parse_metrics_line(line: str) -> dict:
    out = {}
    for item in line.split():
        key, value = item.split("=", 1)
        out[key] = int(value) if key == "iter" else float(value)
    return out


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> Path:
    """Write the checkpoint atomically plus a ``.manifest.txt`` listing tensor shapes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": cfg.to_dict(),
        "schedule": state.schedule.params(),
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "ema": state.ema.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng_state": state.rng.get_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)

    lines = []
    for group in ("generator", "discriminator", "ema"):
        for name, tensor in payload[group].items():
            lines.append(f"{group}.{name}\t{list(tensor.shape)}")
    lines.append(f"rng_state\t{list(payload['rng_state'].shape)}")
    manifest = path.with_name(path.name + ".manifest.txt")
    tmp = manifest.with_name(manifest.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, manifest)
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        found = payload.get("version") if isinstance(payload, dict) else None
        raise CheckpointError(
            f"checkpoint {path} has version {found}, expected {CHECKPOINT_VERSION}"
        )
    cfg = TrainConfig.from_dict(payload["config"])
    state = init_state(cfg)
    try:
        state.generator.load_state_dict(payload["generator"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.ema.load_state_dict(payload["ema"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    state.rng.set_state(payload["rng_state"])
    state.iteration = int(payload["iteration"])
    return state, cfg


# -- training loop -------------------------------------------------------------

def _as_training_arrays(dataset) -> tuple[torch.Tensor, torch.Tensor]:
    from .pipeline import DatasetManifest, load_pairs

    if isinstance(dataset, DatasetManifest):
        images, masks = load_pairs(dataset)
    else:
        images, masks = dataset
    images = check_image_batch(images, "images")
    masks = check_mask(masks, like=images, name="masks")
    if images.shape[0] == 0:
        raise ParameterError("training dataset is empty")
    return images, masks


def run_training(cfg: TrainConfig, dataset, out_dir, resume_from=None,
                 callback=None) -> Path:
    """Train for ``cfg.iterations`` total iterations and return the final checkpoint path.

    ``dataset`` is a manifest or an ``(images, masks)`` pair. Batch indices
    are drawn from the checkpointed RNG, so resuming from any checkpoint
    continues the same trajectory.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {ckpt_dir}: {exc}") from exc
    images, masks = _as_training_arrays(dataset)
    if images.shape[1] != cfg.channels:
        raise ShapeError(f"dataset has {images.shape[1]} channels, config expects {cfg.channels}")

    if resume_from is not None:
        state, saved_cfg = load_checkpoint(resume_from)
        if saved_cfg.to_dict() | {"iterations": 0} != cfg.to_dict() | {"iterations": 0}:
            raise CheckpointError("resume checkpoint was trained with a different config")
    else:
        state = init_state(cfg)

    log_path = out_dir / "metrics.log"
    with open(log_path, "a") as log:
        while state.iteration < cfg.iterations:
            idx = torch.randint(0, images.shape[0], (cfg.batch_size,), generator=state.rng)
            state, metrics = train_step(state, (images[idx], masks[idx]), cfg)
            it = state.iteration
            if it % cfg.log_interval == 0 or it == cfg.iterations:
                log.write(format_metrics(metrics) + "\n")
                log.flush()
                logger.info(format_metrics(metrics))
            if callback is not None:
                callback(state, metrics)
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0 and it < cfg.iterations:
                save_checkpoint(state, cfg, ckpt_dir / f"ckpt_{it:06d}.pt")
    return save_checkpoint(state, cfg, ckpt_dir / "final.pt")
