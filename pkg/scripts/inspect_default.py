"""Parameter budget and receptive fields of the default network.

    python scripts/inspect_default.py

Prints parameters per stage (basic encoder, ESTAN encoder, decoder, head)
and per-axis receptive fields through each ESTAN block: the vertical
kernel of the row-column branch stretches the field along rows only,
and its horizontal partner squares it up again.
"""

from collections import Counter

from estan.model import ArchSpec, param_shapes, receptive_fields


def main():
    spec = ArchSpec()
    per_stage = Counter()
    for name, (o, i, kh, kw) in param_shapes(spec).items():
        per_stage[name.split(".")[0]] += o * i * kh * kw + o
    total = sum(per_stage.values())
    for stage, n in per_stage.items():
        print(f"{stage:12s} {n:>12,}  {100 * n / total:5.1f}%")
    print(f"{'total':12s} {total:>12,}")
    print()
    fields = receptive_fields(spec)
    print("layer          rf_h  rf_w")
    for j in range(1, 6):
        for name in (f"estan.e{j}.rowcol.row", f"estan.e{j}.rowcol.col", f"estan.e{j}.sq3", f"estan.e{j}"):
            rh, rw = fields[name]
            print(f"{name:22s} {rh:5d} {rw:5d}")
    rh, rw = fields["head.conv"]
    print(f"{'head.conv':22s} {rh:5d} {rw:5d}")


if __name__ == "__main__":
    main()
