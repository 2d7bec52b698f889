#!/usr/bin/env python3
"""End-to-end smoke run: generate data, train briefly, score, predict.

Finishes in about a minute on one CPU core; outputs land in --workdir.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vesselseg.cli import main as cli_main
from vesselseg.data import write_pnm
from vesselseg.synthetic import make_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_run")
    parser.add_argument("--steps", type=int, default=60)
    args = parser.parse_args()

    work = Path(args.workdir)
    data_root = work / "data"
    (data_root / "images").mkdir(parents=True, exist_ok=True)
    (data_root / "labels").mkdir(exist_ok=True)
    images, gts = make_dataset(0, 4, 128)
    for i, (img, gt) in enumerate(zip(images, gts)):
        write_pnm(data_root / "images" / f"sample{i:03d}.ppm", img)
        write_pnm(data_root / "labels" / f"sample{i:03d}.pgm", gt * 255)

    config = work / "demo.cfg"
    config.write_text(
        "variant=cieunet\n"
        "norm_kind=BN\n"
        "base_width=8\n"
        "patch_size=64\n"
        "batch_size=4\n"
        f"max_steps={args.steps}\n"
        "log_every=10\n"
        f"data_root={data_root}\n")

    run_dir = work / "run"
    for step in (
        ["train", "--config", str(config), "--out", str(run_dir)],
        ["evaluate", "--checkpoint", str(run_dir / "checkpoint.bin"),
         "--data", str(data_root), "--out", str(work / "metrics.csv")],
        ["predict", str(data_root / "images" / "sample000.ppm"),
         "--checkpoint", str(run_dir / "checkpoint.bin"),
         "--out", str(work / "predictions")],
        ["rf-analyze", "multigrid", "uniform", "2,2,2"],
    ):
        code = cli_main(step)
        if code != 0:
            return code
    print(f"demo artifacts under {work}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
