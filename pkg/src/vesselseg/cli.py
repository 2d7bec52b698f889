"""Command-line front end.

Every failure is reported as a single `ERR:<code>: message` line on
stderr with exit status 2, so callers can match on the code alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_config
from .data import PnmError, load_dataset, read_pnm, save_mask, save_prob
from .metrics import (METRIC_COLUMNS, evaluate_image, metric_record,
                      predict_probability_map, write_metrics_csv)
from .models import build_network, layer_report, load_checkpoint, save_checkpoint
from .receptive import receptive_field_mask, stack_from_rates
from .tensor import FormatError, ShapeError
from .training import TrainingDiverged, train, write_loss_rows


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail_code(exc: Exception) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, PnmError):
        return "format"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, ShapeError):
        return "shape"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FileNotFoundError):
        return "io"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "invalid"
    return "internal"


def _limit_threads() -> None:
    import threadpoolctl

    controller = threadpoolctl.threadpool_limits(limits=1)
    # Keep the controller alive for the rest of the process.
    globals()["_thread_limit"] = controller


def _prepare_run_dir(path: str) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise OSError(f"{out} exists and is not a directory")
        if any(out.iterdir()):
            raise OSError(f"refusing to write into non-empty directory {out}")
    else:
        out.mkdir(parents=True)
    return out


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "data", None):
        cfg.data_root = args.data
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _dataset_for(cfg: RunConfig):
    if not cfg.data_root:
        raise ConfigError("no data_root configured; pass --data or set it in the config")
    return load_dataset(cfg.data_root)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_run_dir(args.out)
    ds = _dataset_for(cfg)
    spec = cfg.network_spec()
    net = build_network(spec, seed=cfg.seed)
    report = layer_report(net)
    print(f"training {spec.variant} ({spec.norm_kind}, context {spec.resolved_context()}): "
          f"{report.conv_count} conv / {report.norm_count} norm layers, "
          f"{report.param_count} parameters")
    rows = train(net, ds.images, ds.gts, cfg.train_config(), out_dir=out)
    write_loss_rows(out / "loss.csv", rows)
    save_checkpoint(out / "checkpoint.bin", net)
    write_config(out / "config.txt", cfg)
    print(f"finished {rows[-1].step} steps; final loss {rows[-1].loss:.6f}; "
          f"run dir {out}")
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threshold = _check_threshold(args.threshold)
    for image_path in args.images:
        image = read_pnm(image_path)
        if image.ndim != 3:
            raise ShapeError(f"{image_path} is not a color image")
        prob = predict_probability_map(net, image)
        stem = Path(image_path).stem
        save_prob(out / f"{stem}_prob.pgm", prob)
        save_mask(out / f"{stem}_mask.pgm", (prob >= threshold).astype(np.uint8))
        print(f"{image_path}: wrote {stem}_prob.pgm and {stem}_mask.pgm")
    return 0


def _check_threshold(value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"threshold must lie in [0, 1], got {value}")
    return value


def cmd_evaluate(args) -> int:
    net = load_checkpoint(args.checkpoint)
    cfg = RunConfig(data_root=args.data)
    ds = _dataset_for(cfg)
    threshold = _check_threshold(args.threshold)
    rows = []
    for i, name in enumerate(ds.names):
        fov = ds.fovs[i] if ds.fovs is not None else None
        record = evaluate_image(net, ds.images[i], ds.gts[i],
                                threshold=threshold, fov=fov)
        rows.append((name, record))
        print(f"{name}: f1={record['f1']:.4f} auc={record['auc']:.4f}")
    mean = {col: float(np.mean([r[col] for _, r in rows])) for col in METRIC_COLUMNS}
    rows.append(("mean", mean))
    write_metrics_csv(args.out, rows)
    print(f"mean f1 {mean['f1']:.4f}; wrote {args.out}")
    return 0


ABLATION_GRID = (
    ("backbone", dict(variant="backbone")),
    ("dilated16", dict(variant="dilated16", multigrid=False)),
    ("dilated8", dict(variant="dilated8", multigrid=False)),
    ("dilated4", dict(variant="dilated4", multigrid=False)),
    ("dilated4_mg", dict(variant="dilated4", multigrid=True)),
    ("unet", dict(variant="unet")),
    ("unet_cdm", dict(variant="unet_cdm")),
    ("unet_cdm_aspp", dict(variant="unet_cdm", context="aspp", aspp_rates=(2, 4, 8))),
    ("cieunet_bn", dict(variant="cieunet", norm_kind="BN")),
    ("cieunet_gn", dict(variant="cieunet", norm_kind="GN")),
    ("cieunet_in", dict(variant="cieunet", norm_kind="IN")),
)


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_run_dir(args.out)
    ds = _dataset_for(cfg)
    if len(ds) < 2:
        raise ValueError("ablation needs at least two images to hold one out")
    holdout = max(1, len(ds) // 5)
    train_images = ds.images[:-holdout]
    train_gts = ds.gts[:-holdout]
    eval_index = range(len(ds) - holdout, len(ds))

    header = ("name,variant,norm,context,multigrid,"
              + ",".join(METRIC_COLUMNS))
    lines = [header]
    for name, overrides in ABLATION_GRID:
        row_cfg = dataclasses.replace(cfg, **overrides)
        spec = row_cfg.network_spec()
        net = build_network(spec, seed=row_cfg.seed)
        rows = train(net, train_images, train_gts, row_cfg.train_config())
        records = []
        for i in eval_index:
            fov = ds.fovs[i] if ds.fovs is not None else None
            records.append(evaluate_image(net, ds.images[i], ds.gts[i],
                                          threshold=0.5, fov=fov))
        mean = {col: float(np.mean([r[col] for r in records]))
                for col in METRIC_COLUMNS}
        cells = ",".join(f"{mean[col]:.6f}" for col in METRIC_COLUMNS)
        lines.append(f"{name},{spec.variant},{spec.norm_kind},"
                     f"{spec.resolved_context()},"
                     f"{'true' if spec.multigrid else 'false'},{cells}")
        print(f"{name}: train loss {rows[-1].loss:.4f}, eval f1 {mean['f1']:.4f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


_NAMED_SCHEDULES = {
    "multigrid": ((1, 2, 1), (2, 4, 2), (4, 8, 4)),
    "uniform": ((2, 2, 2), (4, 4, 4), (8, 8, 8)),
}


def _parse_rates(text: str):
    if text in _NAMED_SCHEDULES:
        return [rate for triple in _NAMED_SCHEDULES[text] for rate in triple]
    cleaned = text.strip().strip("()")
    try:
        rates = [int(v) for v in cleaned.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse rates {text!r}") from exc
    if not rates:
        raise UsageError(f"cannot parse rates {text!r}")
    return rates


def cmd_rf_analyze(args) -> int:
    lines = ["schedule,extent,reachable,box,density"]
    for text in args.schedules:
        rates = _parse_rates(text)
        mask = receptive_field_mask(stack_from_rates(rates, kernel=args.kernel))
        extent = mask.extent[0]
        box = mask.extent[0] * mask.extent[1]
        lines.append(f"{'x'.join(str(r) for r in rates)},{extent},"
                     f"{mask.reachable},{box},{mask.density:.6f}")
        print(f"{text}: extent {extent}, reachable {mask.reachable}/{box}, "
              f"density {mask.density:.4f}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="vesselseg",
                       description="Dense vessel segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize a network on a dataset")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--data", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--serial", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="write probability and mask maps")
    p_pred.add_argument("images", nargs="+")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--threshold", type=float, default=0.5)
    p_pred.add_argument("--serial", action="store_true")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--serial", action="store_true")
    p_eval.set_defaults(func=cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="train and score the variant grid")
    p_abl.add_argument("--config", default=None)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--data", default=None)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--serial", action="store_true")
    p_abl.set_defaults(func=cmd_ablate)

    p_rf = sub.add_parser("rf-analyze", help="report receptive-field coverage")
    p_rf.add_argument("schedules", nargs="+",
                      help="rate lists like 2,2,2 or the names "
                           "multigrid / uniform")
    p_rf.add_argument("--kernel", type=int, default=3)
    p_rf.add_argument("--out", default=None)
    p_rf.add_argument("--serial", action="store_true")
    p_rf.set_defaults(func=cmd_rf_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "serial", False):
            _limit_threads()
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        message = str(exc).replace("\n", " ")
        print(f"ERR:{_fail_code(exc)}: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
