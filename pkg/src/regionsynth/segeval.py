"""Downstream segmentation check: confusion counts, mIoU / pixel accuracy, tiny segmenter."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MaskValidationError, ParameterError, ShapeError
from .validation import check_random_state

CLASSES = ("background", "anomaly")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel counts with the anomaly class as the positive label."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def per_class(self) -> dict[str, dict[str, int]]:
        return {
            "anomaly": dict(tp=self.tp, fp=self.fp, fn=self.fn, tn=self.tn),
            "background": dict(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp),
        }

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    acc: float
    iou: dict


def _binary(a, name):
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise MaskValidationError(f"{name} must be binary")
    return a.astype(bool)


def confusion_accumulate(pred, gt, acc: ConfusionCounts | None = None) -> ConfusionCounts:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} and gt {g.shape} differ in shape")
    counts = ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )
    return counts if acc is None else acc + counts


def miou_acc(counts: ConfusionCounts) -> SegMetrics:
    """Mean IoU over the classes that occur in prediction or ground truth, and pixel accuracy."""
    if counts.total <= 0:
        raise ParameterError("cannot compute metrics over zero pixels")
    iou = {}
    for name, c in counts.per_class().items():
        denom = c["tp"] + c["fp"] + c["fn"]
        if denom > 0:
            iou[name] = c["tp"] / denom
    miou = sum(iou.values()) / len(iou)
    return SegMetrics(miou=miou, acc=(counts.tp + counts.tn) / counts.total, iou=iou)


# -- tiny segmenter ------------------------------------------------------------

def _double_conv(i, o):
    return nn.Sequential(
        nn.Conv2d(i, o, 3, padding=1), nn.BatchNorm2d(o), nn.ReLU(inplace=True),
        nn.Conv2d(o, o, 3, padding=1), nn.BatchNorm2d(o), nn.ReLU(inplace=True),
    )


class SegmenterNet(nn.Module):
    """Four-level encoder-decoder producing one anomaly logit per pixel."""

    def __init__(self, in_channels: int = 3, widths=(12, 24, 48, 64)):
        super().__init__()
        self.downs = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.downs.append(_double_conv(prev, w))
            prev = w
        self.ups = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.ups.append(_double_conv(prev + w, w))
            prev = w
        self.head = nn.Conv2d(prev, 1, 1)
        self.levels = len(widths)

    def forward(self, x):
        factor = 2 ** (self.levels - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"spatial dims must be divisible by {factor}")
        skips = []
        for i, down in enumerate(self.downs):
            x = down(x)
            if i < self.levels - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up in self.ups:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = up(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


def _as_arrays(data, channels=3):
    from .pipeline import DatasetManifest, load_pairs

    if isinstance(data, DatasetManifest):
        return load_pairs(data, channels)
    return data


def train_tiny_segmenter(trainset, epochs: int = 20, seed: int = 0, batch_size: int = 8,
                         lr: float = 2e-3) -> SegmenterNet:
    """Fit a :class:`SegmenterNet` with per-pixel binary cross-entropy.

    ``trainset`` is a manifest or an ``(images, masks)`` pair.
    """
    images, masks = _as_arrays(trainset)
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if images.shape[0] == 0:
        raise ParameterError("segmenter training set is empty")
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegmenterNet(images.shape[1])
    rng = check_random_state(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = images.shape[0]
    net.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.numel() < 2:  # batch norm needs two samples
                continue
            logits = net(images[idx])
            loss = F.binary_cross_entropy_with_logits(logits, masks[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return net.eval()


def _logit(threshold: float) -> float:
    if threshold <= 0:
        return -math.inf
    if threshold >= 1:
        return math.inf
    return math.log(threshold / (1 - threshold))


@torch.no_grad()
def predict_masks(net: SegmenterNet, images, threshold: float = 0.5, batch_size: int = 32) -> np.ndarray:
    """Binary ``(N, 1, H, W)`` predictions: probability strictly above ``threshold``.

    ``threshold <= 0`` marks every pixel and ``threshold >= 1`` none.
    """
    net.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    cut = _logit(threshold)
    out = []
    for start in range(0, images.shape[0], batch_size):
        out.append((net(images[start:start + batch_size]) > cut).float())
    return torch.cat(out).numpy() if out else np.zeros((0, 1) + tuple(images.shape[-2:]), np.float32)


def evaluate_segmenter(net: SegmenterNet, testset, threshold: float = 0.5,
                       categories=None) -> tuple[SegMetrics, dict[str, SegMetrics]]:
    """Pooled metrics over the whole test set and a per-category breakdown.

    ``testset`` is a manifest (categories read from it) or ``(images, masks)``
    with an optional parallel ``categories`` sequence.
    """
    from .pipeline import DatasetManifest

    if isinstance(testset, DatasetManifest):
        categories = [r.category for r in testset.records if r.mask is not None]
    images, masks = _as_arrays(testset)
    if len(images) == 0:
        raise ParameterError("segmenter test set is empty")
    preds = predict_masks(net, images, threshold)
    if categories is None:
        categories = ["all"] * len(images)
    total = ConfusionCounts()
    per_cat: dict[str, ConfusionCounts] = {}
    for p, g, c in zip(preds, np.asarray(masks), categories):
        counts = confusion_accumulate(p, g)
        total = total + counts
        per_cat[c] = per_cat.get(c, ConfusionCounts()) + counts
    return miou_acc(total), {c: miou_acc(v) for c, v in sorted(per_cat.items())}


def write_metrics_report(path, overall: SegMetrics, per_category: dict[str, SegMetrics],
                         title: str | None = None) -> Path:
    """Tab-separated rows ``category  mIoU  Acc`` in percent, then the category average and the pooled row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if title:
        lines.append(f"# {title}")
    lines.append("category\tmIoU\tAcc")
    for cat, m in per_category.items():
        lines.append(f"{cat}\t{100 * m.miou:.2f}\t{100 * m.acc:.2f}")
    if per_category:
        avg_miou = np.mean([m.miou for m in per_category.values()])
        avg_acc = np.mean([m.acc for m in per_category.values()])
        lines.append(f"Average\t{100 * avg_miou:.2f}\t{100 * avg_acc:.2f}")
    lines.append(f"Pooled\t{100 * overall.miou:.2f}\t{100 * overall.acc:.2f}")
    path.write_text("\n".join(lines) + "\n")
    return path
