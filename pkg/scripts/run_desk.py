"""Desk-scale stochastic comparison; writes traces and aggregates to out/desk."""

import sys
from pathlib import Path

from bandit_clusters.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"

if __name__ == "__main__":
    sys.exit(main(["run", "-c", str(CONFIG), *sys.argv[1:]]))
