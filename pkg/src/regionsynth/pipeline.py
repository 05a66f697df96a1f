"""Dataset manifests, toy data, MVTec-style ingestion and synthetic pair export."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import CheckpointError, ManifestError, MaskValidationError, ParameterError
from .imageio import from_uint8, read_image, read_mask, write_image, write_image_uint8, write_mask
from .maskgen import MaskGenParams, random_mask
from .rcd import SamplerOptions, rcd_reverse
from .validation import check_random_state

NO_MASK = "-"
BACKGROUND = "background"
TOY_CATEGORIES = ("stripes", "cells", "noise")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ManifestRecord:
    image: str
    mask: str | None
    split: str
    category: str


@dataclass
class DatasetManifest:
    """Records with paths relative to ``root`` (absolute paths are kept as-is)."""

    root: Path
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def select(self, split: str | None = None, category: str | None = None,
               with_mask: bool | None = None) -> "DatasetManifest":
        recs = [
            r for r in self.records
            if (split is None or r.split == split)
            and (category is None or r.category == category)
            and (with_mask is None or (r.mask is not None) == with_mask)
        ]
        return DatasetManifest(self.root, recs)

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def to_text(self) -> str:
        lines = [f"{r.image}\t{r.mask or NO_MASK}\t{r.split}\t{r.category}" for r in self.records]
        return "".join(line + "\n" for line in lines)

    def rebase(self, new_root) -> "DatasetManifest":
        """Same files, paths re-expressed relative to ``new_root`` where possible."""
        new_root = Path(new_root)
        if new_root.resolve() == Path(self.root).resolve():
            return DatasetManifest(new_root, list(self.records))

        def move(rel):
            if rel is None:
                return None
            return _rel(self.path(rel).resolve(), new_root.resolve())

        recs = [ManifestRecord(move(r.image), move(r.mask), r.split, r.category) for r in self.records]
        return DatasetManifest(new_root, recs)

    def save(self, path=None) -> Path:
        """Write the tab-separated index; paths are stored relative to the file's directory."""
        path = Path(path) if path is not None else Path(self.root) / "manifest.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.rebase(path.parent).to_text())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            image, mask, split, category = parts
            records.append(ManifestRecord(image, None if mask == NO_MASK else mask, split, category))
        manifest = cls(path.parent, records)
        manifest.validate(check_files=check_files)
        return manifest

    def validate(self, check_files: bool = True) -> None:
        seen: dict[str, str] = {}
        for r in self.records:
            prev = seen.setdefault(r.image, r.split)
            if prev != r.split:
                raise ManifestError(f"{r.image} appears in splits {prev!r} and {r.split!r}")
            if check_files:
                for rel in (r.image, r.mask):
                    if rel is not None and not self.path(rel).is_file():
                        raise ManifestError(f"listed file does not exist: {self.path(rel)}")


def _rel(path: Path, root: Path) -> str:
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return str(path)


# -- loading -------------------------------------------------------------------

def load_pairs(manifest: DatasetManifest, channels: int = 3,
               size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load every record that has a mask into ``(N, C, H, W)`` and ``(N, 1, H, W)`` arrays."""
    images, masks = [], []
    for r in manifest.records:
        if r.mask is None:
            continue
        img_path, mask_path = manifest.path(r.image), manifest.path(r.mask)
        img, m = _read_pair(img_path, mask_path, channels)
        if size is not None:
            img, m = resize_image(img, size), resize_mask(m, size)
        images.append(img)
        masks.append(m[None])
    if not images:
        return np.zeros((0, channels, 1, 1), np.float32), np.zeros((0, 1, 1, 1), np.float32)
    return np.stack(images), np.stack(masks)


def load_images(manifest: DatasetManifest, channels: int = 3, size: int | None = None) -> np.ndarray:
    out = []
    for r in manifest.records:
        img = _read(manifest.path(r.image), channels)
        out.append(resize_image(img, size) if size is not None else img)
    return np.stack(out) if out else np.zeros((0, channels, 1, 1), np.float32)


def _read(path: Path, channels: int) -> np.ndarray:
    try:
        return read_image(path, channels)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def _read_pair(img_path: Path, mask_path: Path, channels: int):
    img = _read(img_path, channels)
    try:
        m = read_mask(mask_path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {mask_path}: {exc}") from exc
    if m.shape != img.shape[-2:]:
        raise MaskValidationError(
            f"image {img_path} is {img.shape[-2:]} but mask {mask_path} is {m.shape}"
        )
    return img, m


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Resize a ``(C, H, W)`` image through 8-bit bilinear resampling."""
    if img.shape[-2:] == (size, size):
        return img
    from .imageio import to_uint8
    u = to_uint8(img)
    chans = [np.asarray(Image.fromarray(c).resize((size, size), Image.BILINEAR)) for c in u]
    return from_uint8(np.stack(chans))


def resize_mask(m: np.ndarray, size: int) -> np.ndarray:
    if m.shape == (size, size):
        return m
    im = Image.fromarray((m * 255).astype(np.uint8)).resize((size, size), Image.NEAREST)
    return (np.asarray(im) > 127).astype(np.float32)


# -- toy data ------------------------------------------------------------------

def _texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """An ``(H, W, 3)`` uint8 texture whose values stay inside ``[70, 185]``."""
    base = rng.uniform(105, 150, size=3)
    tint = rng.uniform(0.6, 1.0, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4, 10)
        phase = rng.uniform(0, 2 * np.pi)
        pattern = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    elif kind == "cells":
        n = int(rng.integers(6, 14))
        pts = rng.uniform(0, [h, w], size=(n, 2))
        d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
        d.sort(axis=-1)
        edge = np.sqrt(d[..., 1]) - np.sqrt(d[..., 0])
        shade = rng.uniform(-0.5, 0.5, size=n)[np.argmin(
            (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2, axis=-1)]
        pattern = np.clip(edge / 2.0, 0, 1) * 0.8 - 0.4 + shade
    elif kind == "noise":
        pattern = ndimage.gaussian_filter(rng.standard_normal((h, w)), rng.uniform(0.8, 2.0), mode="wrap")
        pattern = pattern / (np.abs(pattern).max() + 1e-8)
    else:
        raise ParameterError(f"unknown texture kind {kind!r}")
    pattern = pattern + 0.1 * rng.standard_normal((h, w))
    img = base[None, None, :] + 40.0 * pattern[..., None] * tint[None, None, :]
    return np.clip(np.rint(img), 70, 185).astype(np.uint8)


def _defect_patch(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A dark or bright blotch, ``(H, W, 3)`` uint8, outside the texture range."""
    if rng.random() < 0.5:
        level = rng.uniform(10, 40, size=3)
    else:
        level = rng.uniform(215, 245, size=3)
    grain = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0)
    img = level[None, None, :] + 25.0 * grain[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_defect(normal: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    patch = _defect_patch(*normal.shape[:2], rng)
    return np.where(mask[..., None].astype(bool), patch, normal)


def make_toy_dataset(n: int, h: int, w: int, rng, out_dir,
                     mask_params: MaskGenParams | None = None,
                     categories=TOY_CATEGORIES) -> DatasetManifest:
    """Write ``n`` normal textures and ``n`` defect copies with exact masks.

    Defect ``i`` is normal image ``i`` with a contrasting blotch pasted under
    its mask, so the two differ only inside the mask.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask_params = mask_params or MaskGenParams()
    out_dir = Path(out_dir)
    records, defects = [], []
    for i in range(n):
        cat = categories[i % len(categories)]
        normal = _texture(cat, h, w, rng)
        mask = random_mask(h, w, mask_params, rng)
        defect = make_defect(normal, mask, rng)
        stem = f"{cat}_{i:05d}"
        write_image_uint8(out_dir / "normal" / f"{stem}.png", normal)
        write_image_uint8(out_dir / "defect" / f"{stem}.png", defect)
        write_mask(out_dir / "defect" / f"{stem}_mask.png", mask)
        records.append(ManifestRecord(f"normal/{stem}.png", None, BACKGROUND, cat))
        defects.append(ManifestRecord(f"defect/{stem}.png", f"defect/{stem}_mask.png", "defect", cat))
    manifest = DatasetManifest(out_dir, records + defects)
    manifest.save()
    return manifest


# -- MVTec-style layout --------------------------------------------------------

def _images_in(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS) if d.is_dir() else []


def ingest_mvtec_layout(root, category: str, channels: int = 3) -> DatasetManifest:
    """Index ``root/category/{train/good, test/<type>, ground_truth/<type>}``.

    ``train/good`` images become backgrounds, ``test/good`` images are tagged
    ``test_good`` and every other test image is paired with
    ``ground_truth/<type>/<stem>_mask.png`` (``<stem>.png`` is also accepted).
    """
    root = Path(root)
    base = root / category
    for sub in ("train/good", "test", "ground_truth"):
        if not (base / sub).is_dir():
            raise ManifestError(f"{base} is missing the {sub} directory")
    records = [ManifestRecord(_rel(p, root), None, BACKGROUND, category)
               for p in _images_in(base / "train" / "good")]
    records += [ManifestRecord(_rel(p, root), None, "test_good", category)
                for p in _images_in(base / "test" / "good")]
    missing = []
    for defect_dir in sorted(p for p in (base / "test").iterdir() if p.is_dir() and p.name != "good"):
        gt_dir = base / "ground_truth" / defect_dir.name
        for img in _images_in(defect_dir):
            candidates = [gt_dir / f"{img.stem}_mask{img.suffix}", gt_dir / f"{img.stem}_mask.png",
                          gt_dir / f"{img.stem}.png"]
            mask = next((c for c in candidates if c.is_file()), None)
            if mask is None:
                missing.append(str(img))
                continue
            with Image.open(img) as a, Image.open(mask) as b:
                if a.size != b.size:
                    raise MaskValidationError(
                        f"image {img} is {a.size} but mask {mask} is {b.size}"
                    )
            records.append(ManifestRecord(_rel(img, root), _rel(mask, root), "test", category))
    if missing:
        raise ManifestError("no ground-truth mask for: " + ", ".join(missing))
    manifest = DatasetManifest(root, records)
    manifest.validate()
    return manifest


# -- synthesis -----------------------------------------------------------------

def synthesize_dataset(checkpoint, backgrounds: DatasetManifest | None, n: int,
                       maskcfg: MaskGenParams | None, opts: SamplerOptions | None,
                       out_dir, batch_size: int = 16,
                       train_fraction: float = 1.0 / 3.0) -> DatasetManifest:
    """Export ``n`` synthetic image-mask pairs generated with the EMA generator.

    Each pair starts from unit Gaussian noise, is sampled with the
    region-constrained reverse loop under a fresh random mask, and (with
    ``final_clean_composite``) has its background replaced by the chosen
    normal image. Roughly ``train_fraction`` of the pairs are tagged
    ``train`` and the rest ``val`` by a seeded shuffle.
    """
    from .train import load_checkpoint

    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    if not Path(checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    maskcfg = maskcfg or MaskGenParams()
    opts = opts or SamplerOptions()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n == 0:
        manifest = DatasetManifest(out_dir, [])
        manifest.save()
        return manifest
    bg = backgrounds.select(with_mask=False) if backgrounds is not None else DatasetManifest(out_dir)
    if bg.select(split=BACKGROUND).records:
        bg = bg.select(split=BACKGROUND)
    if not bg.records:
        raise ParameterError("background manifest lists no normal images")

    state, cfg = load_checkpoint(checkpoint)
    gen = state.ema.eval()
    ckpt_id = f"{Path(checkpoint).name}@{state.iteration}"
    size = cfg.image_size

    pick_rng = np.random.default_rng(opts.seed)
    mask_rng = np.random.default_rng(maskcfg.seed)
    noise_rng = check_random_state(opts.seed)
    picks = pick_rng.integers(0, len(bg.records), size=n)
    perm = pick_rng.permutation(n)
    n_train = int(round(n * train_fraction))
    splits = np.empty(n, dtype=object)
    splits[perm[:n_train]] = "train"
    splits[perm[n_train:]] = "val"

    cache: dict[int, np.ndarray] = {}
    records, meta = [], []
    for start in range(0, n, batch_size):
        idx = range(start, min(n, start + batch_size))
        clean = []
        for i in idx:
            j = int(picks[i])
            if j not in cache:
                img = _read(bg.path(bg.records[j].image), cfg.channels)
                cache[j] = resize_image(img, size)
            clean.append(cache[j])
        clean_t = torch.from_numpy(np.stack(clean))
        masks = np.stack([random_mask(size, size, maskcfg, mask_rng)[None] for _ in idx])
        m_t = torch.from_numpy(masks)
        x_T = torch.randn(clean_t.shape, generator=noise_rng)
        out = rcd_reverse(gen, x_T, m_t, state.schedule, None, opts, rng=noise_rng,
                          z_dim=cfg.z_dim, x0_clean=clean_t)
        out = out.clamp(-1, 1).numpy()
        for k, i in enumerate(idx):
            rec = bg.records[int(picks[i])]
            stem = f"{rec.category}_{i:05d}"
            write_image(out_dir / f"{stem}.png", out[k])
            write_mask(out_dir / f"{stem}_mask.png", masks[k, 0])
            records.append(ManifestRecord(f"{stem}.png", f"{stem}_mask.png", str(splits[i]), rec.category))
            meta.append({
                "index": i, "category": rec.category, "seed": opts.seed,
                "checkpoint": ckpt_id, "rcd": bool(opts.rcd_enabled), "dmg": bool(cfg.dmg_enabled),
                "final_clean_composite": bool(opts.final_clean_composite),
                "background": str(bg.path(rec.image)),
            })
    manifest = DatasetManifest(out_dir, records)
    manifest.save()
    (out_dir / "pairs.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in meta))
    return manifest
