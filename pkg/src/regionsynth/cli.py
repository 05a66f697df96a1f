"""Command-line front end.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime failures; failures print a one-line diagnostic to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ConfigError

OUT_ROOT_ENV = "REGIONSYNTH_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _add_section_flags(p: argparse.ArgumentParser, *sections: str) -> None:
    for section in sections:
        group = p.add_argument_group(f"[{section}] config keys")
        defaults = config_mod.SECTIONS[section]()
        for f in config_mod.section_fields(section):
            group.add_argument(f"--{section}.{f.name}", dest=f"cfg::{section}::{f.name}",
                               metavar="V", default=None,
                               help=f"(default: {getattr(defaults, f.name)})")


def _config_from_args(args, extra: dict[tuple[str, str], object] | None = None):
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg::") and value is not None:
            _, section, name = key.split("::")
            overrides[(section, name)] = str(value)
    for k, v in (extra or {}).items():
        if v is not None:
            overrides[k] = str(v)
    return config_mod.load_config(getattr(args, "config", None), overrides)


# -- commands ------------------------------------------------------------------

def cmd_make_toy_data(args) -> int:
    from .pipeline import make_toy_dataset

    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else _out_root() / "toy"
    manifest = make_toy_dataset(args.n, args.size, args.size, args.seed, out, cfg.mask)
    print(f"wrote {len(manifest)} records to {out / 'manifest.tsv'}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import DatasetManifest
    from .train import run_training

    cfg = _config_from_args(args, {("train", "iterations"): args.iterations,
                                   ("train", "seed"): args.seed,
                                   ("paths", "data_dir"): args.data,
                                   ("paths", "run_dir"): args.run_dir})
    if not cfg.paths.data_dir:
        raise UsageError("no training data given (use --data or [paths] data_dir)")
    data = Path(cfg.paths.data_dir)
    manifest = DatasetManifest.load(data / "manifest.tsv" if data.is_dir() else data)
    pairs = manifest.select(with_mask=True)
    if args.split:
        pairs = pairs.select(split=args.split)
    run_dir = Path(cfg.paths.run_dir) if cfg.paths.run_dir else _out_root() / "train"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(config_mod.dump_config(cfg))
    tcfg = cfg.train_config()
    ckpt = run_training(tcfg, pairs, run_dir, resume_from=args.resume)
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_synthesize(args) -> int:
    from .pipeline import DatasetManifest, synthesize_dataset

    cfg = _config_from_args(args, {("sampler", "seed"): args.seed})
    if args.no_rcd:
        cfg.sampler.rcd_enabled = False
    if args.no_composite:
        cfg.sampler.final_clean_composite = False
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.resolve().parent.parent / "samples"
    backgrounds = None
    if args.n > 0:
        if not args.backgrounds:
            raise UsageError("--backgrounds is required when --n > 0")
        backgrounds = DatasetManifest.load(_manifest_path(args.backgrounds))
    manifest = synthesize_dataset(ckpt, backgrounds, args.n, cfg.mask, cfg.sampler, out)
    print(f"wrote {len(manifest)} pairs to {out}")
    return 0


def cmd_seg_train_eval(args) -> int:
    from .pipeline import DatasetManifest
    from .segeval import evaluate_segmenter, train_tiny_segmenter, write_metrics_report

    cfg = _config_from_args(args)
    train = DatasetManifest.load(_manifest_path(args.train)).select(with_mask=True)
    if cfg.seg.train_split:
        train = train.select(split=cfg.seg.train_split)
    test = DatasetManifest.load(_manifest_path(args.test)).select(with_mask=True)
    if args.test_split:
        test = test.select(split=args.test_split)
    net = train_tiny_segmenter(train, cfg.seg.epochs, cfg.seg.seed, cfg.seg.batch_size, cfg.seg.lr)
    overall, per_cat = evaluate_segmenter(net, test, cfg.seg.threshold)
    report = Path(args.report) if args.report else _out_root() / "report.txt"
    write_metrics_report(report, overall, per_cat,
                         title=f"train={args.train} test={args.test}")
    print(f"mIoU={overall.miou:.4f} Acc={overall.acc:.4f} report={report}")
    return 0


def cmd_schedule_dump(args) -> int:
    from .schedule import make_schedule

    sched = make_schedule(args.T, args.beta_min, args.beta_max, args.kind)
    cols = ("t", "beta", "alpha", "alpha_bar", "A", "B", "sigma2")
    rows = sched.table()
    print("".join(f"{c:>14}" for c in cols))
    for r in rows:
        print(f"{r['t']:>14}" + "".join(f"{r[c]:>14.8f}" for c in cols[1:]))
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [",".join(cols)] + [",".join(repr(r[c]) for c in cols) for r in rows]
        path.write_text("\n".join(lines) + "\n")
    return 0


def cmd_grid(args) -> int:
    from PIL import Image

    from .imageio import read_image, read_mask, to_uint8
    from .pipeline import DatasetManifest

    manifest = DatasetManifest.load(_manifest_path(args.manifest)).select(with_mask=True)
    recs = manifest.records[: args.max]
    if not recs:
        raise UsageError("manifest lists no image-mask pairs")
    tiles = []
    for r in recs:
        img = to_uint8(read_image(manifest.path(r.image))).transpose(1, 2, 0)
        m = (read_mask(manifest.path(r.mask)) * 255).astype(np.uint8)
        tiles.append(np.concatenate([img, np.repeat(m[..., None], 3, axis=2)], axis=1))
    h, w, _ = tiles[0].shape
    cols = max(1, args.cols)
    rows = (len(tiles) + cols - 1) // cols
    pad = 2
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + tile.shape[0], x:x + tile.shape[1]] = tile
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out)
    print(f"wrote {len(tiles)}-pair grid to {out}")
    return 0


def cmd_ingest_mvtec(args) -> int:
    from .pipeline import ingest_mvtec_layout

    manifest = ingest_mvtec_layout(args.root, args.category)
    out = Path(args.out) if args.out else Path(args.root) / f"{args.category}_manifest.tsv"
    manifest.save(out)
    print(f"indexed {len(manifest)} records ({manifest.counts()}) into {out}")
    return 0


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.tsv" if p.is_dir() else p


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="regionsynth", description="Mask-constrained few-step diffusion anomaly synthesis.",
                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy-data", help="write the procedural texture/defect dataset", formatter_class=fmt)
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ROOT_ENV}/toy)")
    p.add_argument("--n", type=int, default=100, help="number of normal images (and defect copies)")
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    _add_section_flags(p, "mask")
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("train", help="adversarially train the generator", formatter_class=fmt)
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--data", default=None, help="dataset directory or manifest with image-mask pairs")
    p.add_argument("--split", default=None, help="only use records with this split tag")
    p.add_argument("--run-dir", default=None, help=f"run directory (default: ${OUT_ROOT_ENV}/train)")
    p.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_section_flags(p, "train", "loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="export synthetic image-mask pairs", formatter_class=fmt)
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--backgrounds", default=None, help="manifest (or its directory) listing normal images")
    p.add_argument("--n", type=int, default=60, help="number of pairs")
    p.add_argument("--out", default=None, help="output directory (default: <run dir>/samples)")
    p.add_argument("--seed", type=int, default=None, help="override sampler.seed")
    p.add_argument("--no-rcd", action="store_true", help="disable region-constrained fusion")
    p.add_argument("--no-composite", action="store_true", help="keep the sampled background")
    _add_section_flags(p, "sampler", "mask")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("seg-train-eval", help="train the tiny segmenter and report mIoU / Acc",
                       formatter_class=fmt)
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--train", required=True, help="manifest with training pairs")
    p.add_argument("--test", required=True, help="manifest with test pairs")
    p.add_argument("--test-split", default=None, help="only evaluate records with this split tag")
    p.add_argument("--report", default=None, help=f"report path (default: ${OUT_ROOT_ENV}/report.txt)")
    _add_section_flags(p, "seg")
    p.set_defaults(func=cmd_seg_train_eval)

    p = sub.add_parser("schedule-dump", help="print the noise schedule table", formatter_class=fmt)
    p.add_argument("--T", type=int, default=4, help="number of diffusion steps")
    p.add_argument("--beta-min", type=float, default=0.1, help="first beta")
    p.add_argument("--beta-max", type=float, default=0.9, help="last beta")
    p.add_argument("--kind", choices=("linear", "cosine"), default="linear", help="schedule shape")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("grid", help="tile image-mask pairs into one comparison image", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest (or its directory)")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--max", type=int, default=16, help="maximum number of pairs")
    p.add_argument("--cols", type=int, default=4, help="pairs per row")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ingest-mvtec", help="index an MVTec-style category directory", formatter_class=fmt)
    p.add_argument("--root", required=True, help="dataset root")
    p.add_argument("--category", required=True, help="category directory name")
    p.add_argument("--out", default=None, help="manifest path (default: <root>/<category>_manifest.tsv)")
    p.set_defaults(func=cmd_ingest_mvtec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"regionsynth {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"regionsynth {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
