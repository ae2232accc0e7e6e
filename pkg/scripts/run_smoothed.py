"""Smoothed-adversary comparison (fixed grid, sigma^2 = 0.1)."""

import sys
from pathlib import Path

from bandit_clusters.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoothed.yaml"

if __name__ == "__main__":
    sys.exit(main(["run", "-c", str(CONFIG), *sys.argv[1:]]))
