"""Directional finite-difference check of the reduced 2-class model (input 64x32), float64.

    python3 scripts/gradcheck.py [--seeds 20]
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from test_model import _e2e_errors  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    worst = 0.0
    for seed in range(args.seeds):
        errs = _e2e_errors(seed)
        worst = max(worst, max(errs.values()))
        print(f"seed {seed:2d}: " + " ".join(f"{k}={v:.1e}" for k, v in errs.items()))
    print(f"max relative error {worst:.2e}")


if __name__ == "__main__":
    main()
