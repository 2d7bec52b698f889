#!/usr/bin/env python3
"""Write a procedural dataset tree (images/ and labels/) for smoke runs."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vesselseg.data import write_pnm
from vesselseg.synthetic import make_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="dataset root to create")
    parser.add_argument("--count", type=int, default=8)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = Path(args.out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    images, gts = make_dataset(args.seed, args.count, args.size)
    for i, (img, gt) in enumerate(zip(images, gts)):
        stem = f"sample{i:03d}"
        write_pnm(root / "images" / f"{stem}.ppm", img)
        write_pnm(root / "labels" / f"{stem}.pgm", gt * 255)
    print(f"wrote {args.count} images of size {args.size} under {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
