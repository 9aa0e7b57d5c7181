"""Overfit the CPU-scale network on a handful of synthetic images.

    python scripts/overfit_demo.py --out runs/overfit

Writes the corpus, the training history and a summary line with the final
training Dice loss and DSC. Defaults mirror acceptance criterion 3.
"""

import argparse
import time
from pathlib import Path

from estan.data import load_arrays, synth_generate
from estan.model import ArchSpec, init_params, param_count
from estan.training import TrainConfig, mean_dsc, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--divisor", type=int, default=4, help="channel-table divisor")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    records = synth_generate(args.count, args.hw, args.data_seed, out / "data")
    images, masks, _ = load_arrays(records, args.hw)
    spec = ArchSpec.scaled(args.divisor, args.hw)
    params = init_params(spec, seed=args.seed)
    print(f"{param_count(params):,} parameters, {len(images)} images")

    cfg = TrainConfig(learning_rate=args.lr, batch_size=4, max_epochs=args.epochs, seed=args.seed, input_hw=args.hw)
    t0 = time.perf_counter()
    params, history = train(cfg, (images, masks), params, spec, out_dir=out / "train")
    elapsed = time.perf_counter() - t0
    dsc = mean_dsc(params, spec, images, masks)
    for epoch in range(0, len(history.mean_loss), max(1, len(history.mean_loss) // 10)):
        print(f"epoch {epoch + 1:4d}  loss {history.mean_loss[epoch]:.4f}")
    print(f"final loss {history.mean_loss[-1]:.4f}  training DSC {dsc:.4f}  ({elapsed:.0f}s)")


if __name__ == "__main__":
    main()
