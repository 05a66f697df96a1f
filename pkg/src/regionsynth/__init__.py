"""Mask-constrained few-step diffusion for anomaly image-mask synthesis."""
from .estimators import RegionDiffusionSynthesizer, TinySegmenter
from .losses import LossWeights, disc_loss, gen_loss, r1_penalty, softplus
from .maskgen import MaskGenParams, mask_stats, random_mask
from .models import Discriminator, Generator, resample_mask
from .rcd import SamplerOptions, final_composite, posterior_sample, rcd_fuse, rcd_reverse
from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .segeval import ConfusionCounts, SegMetrics, confusion_accumulate, miou_acc
from .train import TrainConfig, TrainState, ema_update, run_training, train_step

__version__ = "0.1.0"
