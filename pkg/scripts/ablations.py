"""Run the K and u sweeps back to back. Extra arguments go to both sweeps."""

import sys
from pathlib import Path

from bandit_clusters.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

if __name__ == "__main__":
    codes = [main(["sweep", "-c", str(CONFIGS / name), *sys.argv[1:]]) for name in ("sweep_K.yaml", "sweep_u.yaml")]
    sys.exit(max(codes))
