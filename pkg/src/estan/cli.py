"""``estan`` command line: train, predict, evaluate, inspect, synth.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .config import ConfigError, RunConfig, load_config
from .errors import NonFiniteError, UndefinedMetricError
from .model import estan_forward, init_params, param_count, receptive_fields_csv, shape_trace
from .training import load_checkpoint, train

log = logging.getLogger("estan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--manifest")
    p.add_argument("--fold", type=int, help="held-out fold index, -1 to use every record")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--input-hw", dest="input_hw", type=int)
    p.add_argument("--out")
    p.add_argument("--tiny", action="store_const", const=True, help="channel tables / 4 for CPU-scale runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="estan", description="ESTAN breast ultrasound tumor segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on k-1 folds of a manifest")
    _run_options(p)
    p.add_argument("--augment", dest="shift_augment", action="store_const", const=True, help="random shift augmentation")

    p = sub.add_parser("predict", help="write binary masks (and probabilities) for a manifest")
    _run_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--save-prob", action="store_true", help="also write 8-bit probability maps")

    p = sub.add_parser("evaluate", help="per-image metrics and size-group table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True, help="directory of <image_id>.png masks")
    p.add_argument("--out", required=True, help="directory for per_image.csv and groups.csv")

    p = sub.add_parser("inspect", help="parameter count, shape trace and receptive fields")
    _run_options(p)

    p = sub.add_parser("synth", help="generate a synthetic ultrasound-like corpus")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-axis", type=float)
    p.add_argument("--out", required=True)
    return parser


def _resolve(args) -> RunConfig:
    keys = ("manifest", "fold", "seed", "learning_rate", "batch_size", "epochs", "input_hw", "out", "tiny", "shift_augment", "checkpoint")
    return load_config(args.config, **{k: getattr(args, k, None) for k in keys})


def _need_manifest(cfg: RunConfig):
    if cfg.manifest is None:
        raise ConfigError("no manifest given (--manifest or manifest = ... in the config)")
    return data.read_manifest(cfg.manifest)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    spec, tcfg = cfg.arch(), cfg.train_config()
    records = _need_manifest(cfg)
    if cfg.fold == -1:
        train_recs, val_recs = records, []
    else:
        split = data.kfold_split(len(records), cfg.folds, cfg.seed)
        train_recs = [records[i] for i in split.train_indices(cfg.fold)]
        val_recs = [records[i] for i in split.test_indices(cfg.fold)]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")

    images, masks, _ = data.load_arrays(train_recs, cfg.input_hw)
    validation = None
    if val_recs:
        vi, vm, _ = data.load_arrays(val_recs, cfg.input_hw)
        validation = (vi, vm)
    params = init_params(spec, seed=cfg.seed)
    log.info("training %d images (%d held out), %d parameters", len(train_recs), len(val_recs), param_count(params))
    _, history = train(tcfg, (images, masks), params, spec, out_dir=out, validation=validation)
    if history.mean_loss:
        print(f"final mean loss {history.mean_loss[-1]:.6f}")
    print(out / "final.ckpt")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _resolve(args)
    if cfg.checkpoint is None:
        raise ConfigError("predict needs --checkpoint")
    spec = cfg.arch()
    params = load_checkpoint(cfg.checkpoint, spec)
    records = _need_manifest(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    for rec in records:
        sample = data.load_sample(rec, cfg.input_hw)
        prob = estan_forward(sample.image, params, spec)[0, 0]
        mask = metrics.binarize(prob, cfg.threshold)
        data.write_gray_png(mask * 255, out / "masks" / f"{rec.image_id}.png")
        if args.save_prob:
            data.write_gray_png(np.round(255.0 * prob.astype(np.float64)), out / "prob" / f"{rec.image_id}.png")
    print(out / "masks")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = data.read_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    reports, missing = [], 0
    for rec in records:
        original = (data.read_gray_png(rec.mask_path) > 0).astype(np.uint8)
        pred_path = pred_dir / f"{rec.image_id}.png"
        if not pred_path.exists():
            missing += 1
            report = metrics.MetricsReport(rec.image_id, flags=[f"missing prediction {pred_path}"])
            try:
                report.tumor_size = metrics.tumor_longest_axis(original)
            except UndefinedMetricError as exc:
                report.flags.append(f"size: {exc}")
        else:
            pred = (data.read_gray_png(pred_path) > 127).astype(np.uint8)
            gt = data.resize_nearest(original, *pred.shape)
            report = metrics.evaluate_image(rec.image_id, pred, gt, original_gt=original)
        if rec.tumor_size is not None:
            report.tumor_size = rec.tumor_size
        if report.tumor_size is not None:
            report.size_group = metrics.size_group(report.tumor_size)
        reports.append(report)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_image.csv").write_text(metrics.reports_to_csv(reports))
    sized = [r for r in reports if r.tumor_size is not None]
    groups = metrics.stratify(sized)
    (out / "groups.csv").write_text(metrics.groups_to_csv(groups))
    for g in groups.values():
        print(f"{g.group}: {g.count}")
    if missing:
        print(f"{missing} prediction(s) missing", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _resolve(args)
    spec = cfg.arch()
    print(f"parameters,{param_count(init_params(spec))}")
    print()
    print(shape_trace(spec).to_csv(), end="")
    print()
    print(receptive_fields_csv(spec), end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError(f"count must be >= 1, got {args.count}")
    data.synth_generate(args.count, args.hw, args.seed, args.out, min_axis=args.min_axis)
    print(Path(args.out) / "manifest.csv")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "inspect": cmd_inspect, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"estan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"estan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"estan: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
