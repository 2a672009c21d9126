#!/usr/bin/env python3
"""Plot a training run from its CSV logs (schema v1).

Usage: python scripts/plot_runlog.py RUN_DIR [--out plot.png]

Left panel: directional derivative per step (raw and clipped). Right panel:
loss per step with the periodic test metric overlaid. Reads runlog.csv and
eval.csv; never touches the trainer.
"""

import argparse
import csv
import sys
from pathlib import Path


def read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir")
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run_dir)
    steps_rows = read_rows(run / "runlog.csv")
    eval_rows = read_rows(run / "eval.csv")

    steps = [int(r["step"]) for r in steps_rows]
    loss = [float(r["loss"]) for r in steps_rows]
    d = [float(r["d"]) for r in steps_rows]
    d_clipped = [float(r["d_clipped"]) for r in steps_rows]

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    left.plot(steps, d, lw=0.6, alpha=0.6, label="d")
    left.plot(steps, d_clipped, lw=0.8, label="d clipped")
    left.set_xlabel("step")
    left.set_ylabel("directional derivative")
    left.legend()

    right.plot(steps, loss, lw=0.7, label="train loss")
    if eval_rows:
        right2 = right.twinx()
        right2.plot(
            [int(r["step"]) for r in eval_rows],
            [float(r["value"]) for r in eval_rows],
            "o-", color="tab:green", label=f"test {eval_rows[0]['metric']}",
        )
        right2.set_ylabel(f"test {eval_rows[0]['metric']}")
    right.set_xlabel("step")
    right.set_ylabel("loss")

    fig.tight_layout()
    out = args.out or str(run / "runlog.png")
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
