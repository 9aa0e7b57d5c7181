"""Five-fold cross-validation on a synthetic corpus, end to end through the CLI.

    python scripts/cross_validate.py --out runs/cv

For each fold: train on the other four, predict the held-out images,
evaluate, then pool the per-image rows into one size-group table. The
defaults are sized for a laptop (small images, few epochs); scale them up
for meaningful numbers.
"""

import argparse
import csv
import io
from pathlib import Path

from estan import metrics
from estan.cli import main as estan
from estan.data import kfold_split, read_manifest, write_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/cv")
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--hw", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    if estan(["synth", "--count", str(args.count), "--hw", str(args.hw), "--seed", str(args.seed), "--out", str(data)]):
        raise SystemExit("synth failed")
    manifest = data / "manifest.csv"
    records = read_manifest(manifest)
    split = kfold_split(len(records), args.folds, args.seed)

    reports = []
    for fold in range(args.folds):
        run = out / f"fold{fold}"
        common = ["--manifest", str(manifest), "--tiny", "--input-hw", str(args.hw), "--seed", str(args.seed)]
        cfg = run / "run.cfg"
        run.mkdir(parents=True, exist_ok=True)
        cfg.write_text(f"folds = {args.folds}\nfold = {fold}\n")
        if estan(["train", "--config", str(cfg), *common, "--epochs", str(args.epochs), "--out", str(run / "train")]):
            raise SystemExit(f"training fold {fold} failed")
        held_out = [records[i] for i in split.test_indices(fold)]
        write_manifest(held_out, data / f"fold{fold}.csv")
        fold_manifest = ["--manifest", str(data / f"fold{fold}.csv")]
        estan(["predict", "--checkpoint", str(run / "train" / "final.ckpt"), *common, *fold_manifest, "--out", str(run / "pred")])
        estan(["evaluate", *fold_manifest, "--pred-dir", str(run / "pred" / "masks"), "--out", str(run / "eval")])
        for row in csv.DictReader(io.StringIO((run / "eval" / "per_image.csv").read_text())):
            vals = {m: float(row[m]) if row[m] else None for m in metrics.METRIC_NAMES}
            reports.append(metrics.MetricsReport(row["image_id"], **vals, tumor_size=float(row["tumor_size"])))

    table = metrics.groups_to_csv(metrics.stratify(reports))
    (out / "groups.csv").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
