"""Command line: ``memmc-mae {synth,train,score,eval,visualize}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, to_dict
from .data import DatasetError, generate_synthetic, load_folder_dataset, write_dataset
from .evaluation import (
    config_fingerprint,
    evaluate,
    evaluate_scores,
    read_scores_csv,
    result_record,
    write_scores_csv,
)
from .metrics import MetricError
from .patchgrid import sample_mask
from .scoring import score_images
from .training import train
from .viz import plot_loss_curve, save_heatmap, save_triptych

logger = logging.getLogger("memmc_mae")


class CliError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.synthetic.seed = args.seed
        cfg.eval.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    return load_checkpoint(args.checkpoint)


def _dataset(args, model_cfg):
    if not args.data:
        raise CliError("--data is required")
    root = Path(args.data)
    if not root.is_dir():
        raise CliError(f"dataset directory not found: {root}")
    manifest = args.manifest
    if manifest is None and (root / "manifest.csv").exists():
        manifest = "manifest.csv"
    return load_folder_dataset(root, manifest, model_cfg.image_size, model_cfg.channels)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    normal, test = generate_synthetic(cfg.synthetic)
    out = _out_dir(args)
    write_dataset(out, normal, test, meta=to_dict(cfg.synthetic))
    print(f"wrote {len(normal)} training and {len(test)} test images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
        cfg.train.warmup_epochs = min(cfg.train.warmup_epochs, args.epochs - 1)
        cfg.train.__post_init__()
    normal, _ = _dataset(args, cfg.model)
    if len(normal) == 0:
        raise CliError("dataset has no training images")
    out = _out_dir(args)
    resume = load_checkpoint(args.checkpoint) if args.checkpoint else None
    cfg.dump(out / "config.yaml")
    ckpt = train(normal, cfg.model, cfg.train, out_dir=out, resume=resume, progress=True)
    plot_loss_curve(out / "loss.png", ckpt.loss_curve)
    print(f"trained {ckpt.epoch} epochs; final loss {ckpt.loss_curve[-1][2]:.5f}; checkpoint {out / 'last.ckpt'}")
    return 0


def _score(args, cfg):
    ckpt = _checkpoint(args)
    model = ckpt.build_model()
    _, test = _dataset(args, model.config)
    if len(test) == 0:
        raise CliError("dataset has no test images")
    results = score_images(model, test.images, cfg.scoring, ids=test.ids)
    return ckpt, model, test, results


def cmd_score(args) -> int:
    cfg = _load_config(args)
    _, _, test, results = _score(args, cfg)
    out = _out_dir(args)
    write_scores_csv(out / "scores.csv", test.ids, test.labels, [r.image_score for r in results])
    heat_dir, rec_dir = out / "heatmaps", out / "records"
    heat_dir.mkdir(exist_ok=True)
    rec_dir.mkdir(exist_ok=True)
    for r, label in zip(results, test.labels):
        stem = Path(r.image_id).with_suffix("").as_posix().replace("/", "__")
        save_heatmap(heat_dir / f"{stem}.png", r.pixel_map)
        record = result_record(r, label, heatmap=f"heatmaps/{stem}.png")
        (rec_dir / f"{stem}.json").write_text(json.dumps(record, sort_keys=True))
    print(f"scored {len(results)} images -> {out / 'scores.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.scores:
        ids, labels, scores = read_scores_csv(args.scores)
        report = evaluate_scores(ids, labels, scores, config=cfg.eval,
                                 fingerprint=config_fingerprint(cfg.eval))
    else:
        ckpt, _, test, results = _score(args, cfg)
        fp = config_fingerprint(ckpt.model_config, cfg.scoring, cfg.eval)
        report = evaluate(test, results, cfg.eval, fingerprint=fp)
    print(report.summary())
    if args.out_dir:
        out = _out_dir(args)
        (out / "report.json").write_text(report.to_json())
        write_scores_csv(out / "scores.csv", [r["image_id"] for r in report.table],
                         [r["label"] for r in report.table], [r["score"] for r in report.table])
    return 0


def cmd_visualize(args) -> int:
    ckpt = _checkpoint(args)
    model = ckpt.build_model()
    _, test = _dataset(args, model.config)
    chosen = args.ids or test.ids[: args.n]
    index = {ident: i for i, ident in enumerate(test.ids)}
    missing = [c for c in chosen if c not in index]
    if missing:
        raise CliError(f"unknown image ids: {', '.join(missing)}")
    out = _out_dir(args)
    cfg = model.config
    part = sample_mask(cfg.num_patches, cfg.mask_ratio, args.mask_seed)
    for ident in chosen:
        img = test.images[index[ident]]
        recon, _ = model.reconstruct(img, part)
        stem = Path(ident).with_suffix("").as_posix().replace("/", "__")
        save_triptych(out / f"{stem}_triptych.png", img, recon, part, cfg.patch_side)
    print(f"wrote {len(chosen)} triptychs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file; missing fields take defaults")
    common.add_argument("--seed", type=int, help="override training, synthetic and eval seeds")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--data", help="dataset root (manifest.csv or train/test folders)")
    common.add_argument("--manifest", help="manifest CSV relative to --data")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="memmc-mae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset to --out-dir")
    p.set_defaults(func=cmd_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train on the normal images of --data")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("score", parents=[common], help="score test images: scores.csv, heatmaps, records")
    p.set_defaults(func=cmd_score, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="AUC and grouped IoU report")
    p.add_argument("--scores", help="evaluate an existing scores.csv instead of scoring")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("visualize", parents=[common], help="masked input / reconstruction / original")
    p.add_argument("--n", type=int, default=3, help="number of test images (default 3)")
    p.add_argument("--ids", nargs="+", help="explicit test image ids")
    p.add_argument("--mask-seed", type=int, default=0)
    p.set_defaults(func=cmd_visualize, needs_out=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and not args.out_dir:
        print(f"error: {args.command} needs --out-dir", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, CheckpointError, DatasetError, MetricError, ValueError, TypeError,
            FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
