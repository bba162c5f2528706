#!/usr/bin/env python3
"""Scatter-plot the 2-D embedding projections exported by `enjoint embed`.

Reads the projections.csv written by the embed command and renders one panel
per checkpoint, colored by water type; before/after adaptation the point
clouds go from separated to mixed.

Usage:
    python scripts/plot_embeddings.py --projections out/embed/projections.csv \
        --out embeddings.png
"""

import argparse
import csv
import sys
from collections import defaultdict

COLORS = {"greenish": "tab:green", "bluish": "tab:blue", "turbid": "tab:orange"}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--projections", required=True)
    ap.add_argument("--out", default="embeddings.png")
    args = ap.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_ck = defaultdict(lambda: defaultdict(list))
    with open(args.projections) as f:
        for row in csv.DictReader(f):
            by_ck[row["checkpoint"]][row["tag"]].append((float(row["x"]), float(row["y"])))

    cks = sorted(by_ck)
    fig, axes = plt.subplots(1, len(cks), figsize=(4 * len(cks), 4), squeeze=False)
    for ax, ck in zip(axes[0], cks):
        for tag, pts in sorted(by_ck[ck].items()):
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=12, label=tag, color=COLORS.get(tag), alpha=0.7)
        ax.set_title(ck)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
