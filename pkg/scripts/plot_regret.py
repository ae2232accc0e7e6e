"""Plot mean cumulative regret curves from aggregate JSON files.

usage: python scripts/plot_regret.py out/desk/*.json -o regret.png
"""

import argparse
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("files", nargs="+")
    ap.add_argument("-o", "--out", default="regret.png")
    args = ap.parse_args()
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.files:
        with open(path) as fh:
            data = json.load(fh)
        mean = np.asarray(data["mean_curve"])
        hw = np.asarray(data["halfwidth_curve"])
        t = np.arange(1, mean.size + 1)
        ax.plot(t, mean, label=data["policy"])
        ax.fill_between(t, mean - hw, mean + hw, alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("cumulative regret")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
