"""knotseg command line: gen, train, eval, predict, export3d.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .binio import atomic_write, seal
from .harness.evaluation import evaluate_fold, evaluate_predictions, predict_fold, write_prediction
from .harness.inference import sliding_window_predict
from .harness.training import train
from .models.checkpoint import load_checkpoint
from .models.config import VARIANTS
from .runconfig import ConfigError, RunConfig
from .synthlog.dataset import FOLDS, generate_dataset, iter_fold_counts, read_manifest
from .synthlog.volume_io import VolumeSample, read_volume

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
VOXEL_MAGIC = b"KVOX"
VOXEL_VERSION = 1


class UsageError(Exception):
    pass


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("full", "desk"), help="bundled base configuration (default: full)")
    p.add_argument("--config", metavar="FILE", help="key=value file layered over the preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for generation and scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knotseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a model on a dataset's train fold")
    _config_args(p)
    p.add_argument("--model", choices=VARIANTS, help="network variant")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--ckpt-dir", required=True, help="checkpoint and run log directory")
    p.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")

    p = sub.add_parser("eval", help="score a checkpoint or stored predictions on one fold")
    _config_args(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint to run")
    src.add_argument("--pred-dir", help="directory of stored predictions laid out like the dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--fold", choices=FOLDS, default="test")
    p.add_argument("--report-dir", help="write species, tree, volume and kappa tables here")
    p.add_argument("--method", help="method name in report rows")

    p = sub.add_parser("predict", help="write probability volumes")
    _config_args(p)
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tree-file", help="volume file holding a whole tree; predicted by sliding window")
    src.add_argument("--data", help="dataset directory; predicts every volume of --fold")
    p.add_argument("--fold", choices=FOLDS, default="test")
    p.add_argument("--out", required=True, help="output file (with --tree-file) or directory (with --data)")

    p = sub.add_parser("export3d", help="voxel lists for external 3D viewers")
    p.add_argument("--pred", required=True, help="prediction volume file")
    p.add_argument("--gt", help="ground-truth volume file of the same shape")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "model", None):
        overrides.append(f"model={args.model}")
    try:
        return RunConfig.resolve(args.preset, args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen(args: argparse.Namespace) -> int:
    config = resolve_config(args).generator()
    manifest = generate_dataset(config, args.out, threads=args.threads)
    for fold, trees, volumes in iter_fold_counts(manifest):
        print(f"{fold}: {trees} trees, {volumes} volumes")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    config = run.train(data=args.data, ckpt_dir=args.ckpt_dir)

    def log(epoch: int, loss: float, val: Optional[dict]) -> None:
        tail = f" val_dice {val['dice']:.4f} val_kappa {val['kappa']:.4f}" if val else ""
        print(f"epoch {epoch + 1}/{config.epochs} loss {loss:.5f}{tail}", flush=True)

    result = train(config, resume=args.resume, log=log)
    print(f"checkpoints in {args.ckpt_dir}; best val dice {result.best_val_dice}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    manifest = read_manifest(args.data)
    pitch = float(manifest.params.get("pixel_pitch_mm", 1.0)), float(manifest.params.get("slice_pitch_mm", 1.25))
    eval_config = run.evaluation(*pitch)
    if args.ckpt:
        window, stride = run.window()
        report = evaluate_fold(args.ckpt, manifest, args.fold, eval_config, args.method, args.report_dir,
                               threads=args.threads, window=window, stride=stride)
    else:
        report = evaluate_predictions(args.pred_dir, manifest, args.fold, eval_config, args.method or "prediction",
                                      args.report_dir, threads=args.threads)
    for row in report.species_rows:
        print("\t".join(row))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    run = resolve_config(args)
    model = load_checkpoint(args.ckpt)
    threshold = float(run.get("threshold", 0.5))
    window, stride = run.window()
    if args.data:
        written = predict_fold(model, read_manifest(args.data), args.fold, args.out, threshold, window, stride)
        print(f"wrote {len(written)} prediction files under {args.out}")
        return EXIT_OK
    tree = read_volume(args.tree_file)
    prob = sliding_window_predict(tree.contour, model, window=window, stride=stride)
    write_prediction(tree, prob, args.out, threshold)
    print(f"wrote {args.out}")
    return EXIT_OK


def voxel_records(sample: VolumeSample, values: Optional[np.ndarray] = None) -> np.ndarray:
    """[N, 4] float64 rows of (x_mm, y_mm, z_mm, value) for every positive voxel, z-major order."""
    z, y, x = np.nonzero(sample.knots)
    vals = np.ones(len(z)) if values is None else values[z, y, x].astype(np.float64)
    return np.column_stack([x * sample.pixel_pitch_mm, y * sample.pixel_pitch_mm,
                            sample.z_offset_mm + z * sample.slice_pitch_mm, vals])


def write_voxels(records: np.ndarray, stem: Path) -> tuple[Path, Path]:
    """ASCII list plus a binary twin (magic, version, count, float32 rows, CRC-64)."""
    text = "# x_mm y_mm z_mm value\n" + "".join(f"{a:.4f} {b:.4f} {c:.4f} {d:.6g}\n" for a, b, c, d in records)
    txt, binary = stem.with_suffix(".xyz"), stem.with_suffix(".kvox")
    atomic_write(txt, text.encode())
    payload = VOXEL_MAGIC + struct.pack("<IQ", VOXEL_VERSION, len(records)) + records.astype("<f4").tobytes()
    atomic_write(binary, seal(payload))
    return txt, binary


def cmd_export3d(args: argparse.Namespace) -> int:
    pred = read_volume(args.pred)
    gt = read_volume(args.gt) if args.gt else None
    if gt is not None and gt.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    out = Path(args.out)
    outputs = write_voxels(voxel_records(pred, pred.probabilities), out / "prediction")
    if gt is not None:
        outputs += write_voxels(voxel_records(gt), out / "ground_truth")
    for path in outputs:
        print(path)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "export3d": cmd_export3d}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "threads", 1) < 1:
        parser.print_usage(sys.stderr)
        print("knotseg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"knotseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("knotseg: interrupted", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError, MemoryError, FloatingPointError) as exc:
        print(f"knotseg: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
