"""Print the layer/parameter table and time a full-size forward pass.

    python3 scripts/table1.py [--classes 10] [--blocks 3]
"""
import argparse
import time

import numpy as np

from bbnn.cli import inspect_lines
from bbnn.model import build


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--blocks", type=int, default=3)
    args = ap.parse_args()
    print("\n".join(inspect_lines(args.classes, args.blocks)))

    model = build(args.classes, L=args.blocks)
    probes = {}
    t = time.perf_counter()
    model.forward(np.random.default_rng(0).random((1, 647, 128, 1), dtype=np.float32), probes=probes)
    print(f"\nforward pass on 1x647x128x1: {time.perf_counter() - t:.2f}s")
    for name, shape in probes.items():
        print(f"  {name:<20}{'x'.join(map(str, shape[1:]))}")


if __name__ == "__main__":
    main()
