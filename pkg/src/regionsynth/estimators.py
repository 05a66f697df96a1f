"""scikit-learn style wrappers around the synthesis and segmentation cores."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossWeights
from .rcd import SamplerOptions, rcd_reverse
from .segeval import (
    ConfusionCounts,
    confusion_accumulate,
    miou_acc,
    predict_masks,
    train_tiny_segmenter,
)
from .train import TrainConfig, init_state, load_checkpoint, save_checkpoint, train_step
from .validation import check_image_batch, check_mask, check_random_state


def check_images(X, name="X") -> torch.Tensor:
    """Validate an ``(N, C, H, W)`` batch with values inside ``[-1, 1]``."""
    X = check_image_batch(X, name)
    if X.numel() and (X.min() < -1 - 1e-6 or X.max() > 1 + 1e-6):
        raise ValueError(f"{name} must lie in [-1, 1]; got range [{float(X.min())}, {float(X.max())}]")
    return X


class RegionDiffusionSynthesizer(BaseEstimator):
    """Few-step adversarial diffusion model that paints anomalies inside given masks.

    ``fit(X, masks)`` learns from real anomalous images and their masks.
    ``transform(X, masks)`` / ``sample`` turn normal images into anomalous
    ones: only masked pixels are generated, the rest is copied from ``X``.
    """

    def __init__(self, n_steps=4, beta_min=0.1, beta_max=0.9, schedule_kind="linear",
                 batch_size=4, lr_g=1.6e-4, lr_d=1.0e-4, adam_beta1=0.5, adam_beta2=0.9,
                 ema_decay=0.999, n_iter=2000, lambda_d=0.2, lambda_img=1.0, lambda_mask=1.0,
                 alpha=1.0, beta=0.1, r1_gamma=0.05, disc_mode="step_pair", rcd=True, dmg=True,
                 gen_base_channels=64, gen_depth=3, z_dim=100, temb_dim=128,
                 disc_base_channels=32, disc_blocks=3, random_state=0):
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.schedule_kind = schedule_kind
        self.batch_size = batch_size
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.ema_decay = ema_decay
        self.n_iter = n_iter
        self.lambda_d = lambda_d
        self.lambda_img = lambda_img
        self.lambda_mask = lambda_mask
        self.alpha = alpha
        self.beta = beta
        self.r1_gamma = r1_gamma
        self.disc_mode = disc_mode
        self.rcd = rcd
        self.dmg = dmg
        self.gen_base_channels = gen_base_channels
        self.gen_depth = gen_depth
        self.z_dim = z_dim
        self.temb_dim = temb_dim
        self.disc_base_channels = disc_base_channels
        self.disc_blocks = disc_blocks
        self.random_state = random_state

    def _make_config(self, X: torch.Tensor) -> TrainConfig:
        weights = LossWeights(self.lambda_d, self.lambda_img, self.lambda_mask, self.alpha,
                              self.beta, self.r1_gamma)
        return TrainConfig(
            n_steps=self.n_steps, beta_min=self.beta_min, beta_max=self.beta_max,
            schedule_kind=self.schedule_kind, batch_size=self.batch_size, lr_g=self.lr_g,
            lr_d=self.lr_d, adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            ema_decay=self.ema_decay, iterations=self.n_iter, weights=weights,
            disc_mode=self.disc_mode, rcd_enabled=self.rcd, dmg_enabled=self.dmg,
            image_size=X.shape[-1], channels=X.shape[1],
            gen_base_channels=self.gen_base_channels, gen_depth=self.gen_depth,
            z_dim=self.z_dim, temb_dim=self.temb_dim,
            disc_base_channels=self.disc_base_channels, disc_blocks=self.disc_blocks,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, masks):
        X = check_images(X)
        m = check_mask(masks, like=X, name="masks")
        if X.shape[0] == 0:
            raise ValueError("X is empty")
        cfg = self._make_config(X)
        state = init_state(cfg)
        history = []
        for _ in range(cfg.iterations):
            idx = torch.randint(0, X.shape[0], (cfg.batch_size,), generator=state.rng)
            state, metrics = train_step(state, (X[idx], m[idx]), cfg)
            history.append(metrics)
        self.state_ = state
        self.config_ = cfg
        self.schedule_ = state.schedule
        self.history_ = history
        self.n_iter_ = state.iteration
        return self

    def sample(self, backgrounds, masks, random_state=None, rcd=None,
               final_clean_composite=True, x_T=None) -> np.ndarray:
        """Synthesize anomalies with the EMA generator.

        Starts from unit Gaussian noise unless ``x_T`` is given. With
        ``final_clean_composite`` the unmasked pixels equal ``backgrounds``.
        """
        check_is_fitted(self, "state_")
        bg = check_images(backgrounds, "backgrounds")
        m = check_mask(masks, like=bg, name="masks")
        rng = check_random_state(self.random_state if random_state is None else random_state)
        if x_T is None:
            x_T = torch.randn(bg.shape, generator=rng)
        opts = SamplerOptions(rcd_enabled=self.rcd if rcd is None else rcd,
                              final_clean_composite=final_clean_composite)
        out = rcd_reverse(self.state_.ema.eval(), x_T, m, self.schedule_, None, opts, rng=rng,
                          z_dim=self.config_.z_dim, x0_clean=bg)
        return out.clamp(-1, 1).numpy()

    def transform(self, X, masks):
        return self.sample(X, masks)

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_checkpoint(self.state_, self.config_, path)

    @classmethod
    def from_checkpoint(cls, path) -> "RegionDiffusionSynthesizer":
        state, cfg = load_checkpoint(path)
        w = cfg.weights
        est = cls(n_steps=cfg.n_steps, beta_min=cfg.beta_min, beta_max=cfg.beta_max,
                  schedule_kind=cfg.schedule_kind, batch_size=cfg.batch_size, lr_g=cfg.lr_g,
                  lr_d=cfg.lr_d, adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2,
                  ema_decay=cfg.ema_decay, n_iter=cfg.iterations, lambda_d=w.lambda_d,
                  lambda_img=w.lambda_img, lambda_mask=w.lambda_mask, alpha=w.alpha,
                  beta=w.beta, r1_gamma=w.r1_gamma, disc_mode=cfg.disc_mode,
                  rcd=cfg.rcd_enabled, dmg=cfg.dmg_enabled,
                  gen_base_channels=cfg.gen_base_channels, gen_depth=cfg.gen_depth,
                  z_dim=cfg.z_dim, temb_dim=cfg.temb_dim,
                  disc_base_channels=cfg.disc_base_channels, disc_blocks=cfg.disc_blocks,
                  random_state=cfg.seed)
        est.state_, est.config_, est.schedule_ = state, cfg, state.schedule
        est.history_, est.n_iter_ = [], state.iteration
        return est


class TinySegmenter(BaseEstimator):
    """Binary anomaly segmenter; ``score`` returns mIoU over both classes."""

    def __init__(self, epochs=20, batch_size=8, lr=2e-3, threshold=0.5, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_mask(y, like=X, name="y")
        self.net_ = train_tiny_segmenter((X, y), self.epochs, self.random_state or 0,
                                         self.batch_size, self.lr)
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X)
        return torch.sigmoid(self.net_.eval()(X)).numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return predict_masks(self.net_, check_images(X), self.threshold)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        y = check_mask(y, like=torch.as_tensor(pred)).numpy()
        counts = ConfusionCounts()
        for p, g in zip(pred, y):
            counts = confusion_accumulate(p, g, counts)
        return miou_acc(counts).miou
