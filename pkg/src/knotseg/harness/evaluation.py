"""Fold-level evaluation and per-species, per-tree reports."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..metrics.core import EvalConfig, VolumeMetrics, aggregate, binarize, evaluate_volume, kappa_distribution
from ..metrics.report import species_rows, tree_rows, write_reports
from ..models.architectures import SegmentationNet
from ..models.checkpoint import load_checkpoint
from ..synthlog.dataset import FOLDS, Manifest, TreeRecord, read_manifest
from ..synthlog.volume_io import VolumeSample, read_volume, write_volume
from .inference import predict_volume, sliding_window_predict

METHOD_NAMES = {"segnet": "SegNet", "unet": "U-Net", "convlstm": "ConvLSTM"}


@dataclass
class FoldReport:
    method: str
    fold: str
    volumes: list[VolumeMetrics]

    @property
    def species_rows(self) -> list[tuple[str, ...]]:
        return species_rows(self.method, self.volumes)

    @property
    def tree_rows(self) -> list[tuple[str, ...]]:
        return tree_rows(self.method, self.volumes)

    @property
    def kappa_distribution(self):
        return kappa_distribution(self.volumes)

    def mean(self, name: str) -> float:
        (row,) = aggregate(self.volumes, "fold")
        return getattr(row, name)

    def write(self, report_dir: str | os.PathLike) -> dict[str, str]:
        return write_reports(report_dir, self.method, self.volumes)


def eval_config_for(manifest: Manifest, **overrides) -> EvalConfig:
    """EvalConfig with the dataset's pixel and slice pitch."""
    kw = {}
    for key in ("pixel_pitch_mm", "slice_pitch_mm"):
        if key in manifest.params:
            kw[key] = float(manifest.params[key])
    kw.update(overrides)
    return EvalConfig(**kw)


def _check_fold(manifest: Manifest, fold: str) -> list[tuple[TreeRecord, Path]]:
    if fold not in FOLDS:
        raise ValueError(f"unknown fold {fold!r}; expected one of {FOLDS}")
    if not manifest.trees(fold):
        raise ValueError(f"fold {fold!r} has no trees in the manifest")
    missing = manifest.missing_files(fold)
    if missing:
        raise FileNotFoundError(f"{len(missing)} volume file(s) missing: " + ", ".join(map(str, missing)))
    return manifest.volume_paths(fold)


def _evaluate(manifest: Manifest, fold: str, probabilities: Callable[[TreeRecord, int, VolumeSample], np.ndarray],
              eval_config: Optional[EvalConfig], method: str, threads: int = 1) -> FoldReport:
    """Predictions are produced in order on the calling thread; scoring runs `threads` volumes at a time."""
    entries = _check_fold(manifest, fold)
    eval_config = eval_config or eval_config_for(manifest)
    index: dict[int, int] = {}
    results: list[VolumeMetrics] = []
    with ThreadPoolExecutor(max(1, threads)) as pool:
        pending = []
        for rec, path in entries:
            k = index[rec.tree_id] = index.get(rec.tree_id, -1) + 1
            gt = read_volume(path)
            prob = probabilities(rec, k, gt)
            pending.append(pool.submit(evaluate_volume, prob, gt.knots, eval_config, rec.tree_id, k, rec.species))
            if len(pending) >= max(1, threads):
                results += [f.result() for f in pending]
                pending = []
        results += [f.result() for f in pending]
    return FoldReport(method, fold, results)


def fold_predictor(model: SegmentationNet, manifest: Manifest, window: Optional[int] = None,
                   stride: int = 1) -> Callable[[TreeRecord, int, VolumeSample], np.ndarray]:
    """probabilities(rec, k, gt) for the k-th volume of a tree.

    With `window` unset each volume is one forward pass. With a window the
    whole tree is predicted by sliding window and cut back into volumes, so
    windows cross volume boundaries.
    """
    if window is None:
        return lambda rec, k, gt: predict_volume(model, gt.contour)
    cache: dict[int, list[np.ndarray]] = {}

    def probabilities(rec: TreeRecord, k: int, gt: VolumeSample) -> np.ndarray:
        if rec.tree_id not in cache:
            cache.clear()
            vols = [read_volume(manifest.root / f) for f in rec.files]
            prob = sliding_window_predict(np.concatenate([v.contour for v in vols]), model, window, stride)
            cache[rec.tree_id] = np.split(prob, np.cumsum([v.shape[0] for v in vols])[:-1])
        return cache[rec.tree_id][k]
    return probabilities


def evaluate_fold(model: "SegmentationNet | str | os.PathLike", manifest: "Manifest | str | os.PathLike",
                  fold: str = "test", eval_config: Optional[EvalConfig] = None, method: Optional[str] = None,
                  report_dir: Optional[str | os.PathLike] = None, threads: int = 1, window: Optional[int] = None,
                  stride: int = 1) -> FoldReport:
    """Per-volume metrics of `model` (or a checkpoint path) on one fold, with optional report files.

    `window`/`stride` switch to whole-tree sliding-window inference (see `fold_predictor`).
    """
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    _check_fold(manifest, fold)
    if not isinstance(model, SegmentationNet):
        model = load_checkpoint(model)
    method = method or METHOD_NAMES[model.config.variant]
    report = _evaluate(manifest, fold, fold_predictor(model, manifest, window, stride), eval_config, method, threads)
    if report_dir is not None:
        report.write(report_dir)
    return report


def prediction_path(pred_dir: str | os.PathLike, relative: str) -> Path:
    return Path(pred_dir) / relative


def predict_fold(model: SegmentationNet, manifest: Manifest, fold: str, out_dir: str | os.PathLike,
                 threshold: float = 0.5, window: Optional[int] = None, stride: int = 1) -> list[Path]:
    """Write one probability-carrying volume file per input volume, mirroring the dataset layout."""
    predictor = fold_predictor(model, manifest, window, stride)
    written, index = [], {}
    for rec, path in _check_fold(manifest, fold):
        k = index[rec.tree_id] = index.get(rec.tree_id, -1) + 1
        gt = read_volume(path)
        written.append(write_prediction(gt, predictor(rec, k, gt),
                                        prediction_path(out_dir, os.path.relpath(path, manifest.root)), threshold))
    return written


def write_prediction(source: VolumeSample, prob: np.ndarray, path: str | os.PathLike, threshold: float = 0.5) -> Path:
    """Store `prob` with its thresholded mask; the contour is echoed from `source`."""
    write_volume(VolumeSample(source.contour, binarize(prob, threshold), source.pixel_pitch_mm,
                              source.slice_pitch_mm, source.tree_id, source.z_offset_mm, prob), path)
    return Path(path)


def evaluate_predictions(pred_dir: str | os.PathLike, manifest: "Manifest | str | os.PathLike", fold: str = "test",
                         eval_config: Optional[EvalConfig] = None, method: str = "prediction",
                         report_dir: Optional[str | os.PathLike] = None, threads: int = 1) -> FoldReport:
    """Metrics of stored prediction files against the fold's ground truth."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    entries = _check_fold(manifest, fold)
    preds = {path: prediction_path(pred_dir, os.path.relpath(path, manifest.root)) for _, path in entries}
    missing = [p for p in preds.values() if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} prediction file(s) missing: " + ", ".join(map(str, missing)))
    paths = iter(preds.values())

    def load(rec: TreeRecord, k: int, gt: VolumeSample) -> np.ndarray:
        pred = read_volume(next(paths))
        if pred.shape != gt.shape:
            raise ValueError(f"tree {rec.tree_id} volume {k}: prediction {pred.shape} vs ground truth {gt.shape}")
        return pred.probabilities if pred.probabilities is not None else pred.knots

    report = _evaluate(manifest, fold, load, eval_config, method, threads)
    if report_dir is not None:
        report.write(report_dir)
    return report


def oracle_report(manifest: Manifest, fold: str, eval_config: Optional[EvalConfig] = None) -> FoldReport:
    """Ground truth scored against itself."""
    return _evaluate(manifest, fold, lambda rec, k, gt: gt.knots, eval_config, "oracle")
