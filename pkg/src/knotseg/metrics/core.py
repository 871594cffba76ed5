"""Per-volume Dice, Cohen's kappa and Hausdorff distance (mm), and their aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .edt import squared_edt

HD_POLICIES = ("skip", "frame_diagonal")
HD_MODES = ("3d", "2d")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    pixel_pitch_mm: float = 1.0
    slice_pitch_mm: float = 1.25
    hd_empty_policy: str = "skip"
    hd_mode: str = "3d"

    def __post_init__(self) -> None:
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.hd_empty_policy not in HD_POLICIES:
            raise ValueError(f"hd_empty_policy must be one of {HD_POLICIES}, got {self.hd_empty_policy!r}")
        if self.hd_mode not in HD_MODES:
            raise ValueError(f"hd_mode must be one of {HD_MODES}, got {self.hd_mode!r}")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.slice_pitch_mm, self.pixel_pitch_mm, self.pixel_pitch_mm)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class VolumeMetrics:
    dice: float
    hd_mm: Optional[float]  # None when excluded by the empty-set policy
    kappa: float
    tree_id: int = 0
    volume_index: int = 0
    species: str = ""

    @property
    def hd_excluded(self) -> bool:
        return self.hd_mm is None


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """p >= threshold -> True."""
    prob = np.asarray(prob)
    if prob.dtype == bool:
        return prob.copy()
    if np.isnan(prob).any() or prob.min(initial=0.0) < 0 or prob.max(initial=0.0) > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return prob >= threshold


def _pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(gt)) - tp
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def dice_from_counts(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def kappa_from_counts(c: ConfusionCounts) -> float:
    n = c.total
    # integer form of (p_o - p_e) / (1 - p_e), scaled by n^2
    chance = (c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)
    denom = n * n - chance
    if denom == 0:
        return 1.0
    return (n * (c.tp + c.tn) - chance) / denom


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both are empty."""
    return dice_from_counts(confusion(pred, gt))


def kappa(pred: np.ndarray, gt: np.ndarray) -> float:
    """Cohen's kappa over voxels; 1.0 when chance agreement is already total."""
    return kappa_from_counts(confusion(pred, gt))


def _diagonal(shape: Sequence[int], spacing: Sequence[float]) -> float:
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def _hd(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float], policy: str) -> Optional[float]:
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return _diagonal(pred.shape, spacing) if policy == "frame_diagonal" else None
    sq = max(squared_edt(gt, spacing)[pred].max(), squared_edt(pred, spacing)[gt].max())
    return math.sqrt(sq)


def hausdorff_mm(pred: np.ndarray, gt: np.ndarray, config: EvalConfig = EvalConfig()) -> Optional[float]:
    """Symmetric Hausdorff distance in mm between the positive voxels of two [T,H,W] masks.

    Two empty sets are at distance 0. If exactly one is empty the result
    follows `config.hd_empty_policy`: None ("skip") or the frame diagonal.
    In "2d" mode the value is the mean of per-slice distances over slices
    where it is defined.
    """
    pred, gt = _pair(pred, gt)
    if config.hd_mode == "3d":
        return _hd(pred, gt, config.spacing, config.hd_empty_policy)
    per_slice = [_hd(p, g, config.spacing[1:], config.hd_empty_policy) for p, g in zip(pred, gt)]
    defined = [v for v in per_slice if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate_volume(prob: np.ndarray, gt: np.ndarray, config: EvalConfig = EvalConfig(),
                    tree_id: int = 0, volume_index: int = 0, species: str = "") -> VolumeMetrics:
    pred = binarize(prob, config.threshold)
    pred, gt = _pair(pred, gt)
    c = confusion(pred, gt)
    return VolumeMetrics(dice_from_counts(c), hausdorff_mm(pred, gt, config), kappa_from_counts(c),
                         tree_id, volume_index, species)


@dataclass(frozen=True)
class AggregateRow:
    group: str
    species: str
    n_volumes: int
    dice: float
    hd_mm: Optional[float]
    kappa: float
    hd_excluded: int = 0
    tree_ids: tuple[int, ...] = field(default=(), compare=False)


def aggregate(metrics: Iterable[VolumeMetrics], group_by: str = "tree") -> list[AggregateRow]:
    """Arithmetic means per group: "tree", "species" or "fold" (everything)."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("cannot aggregate an empty group of volumes")
    keys = {"tree": lambda m: str(m.tree_id), "species": lambda m: m.species, "fold": lambda m: "all"}
    if group_by not in keys:
        raise ValueError(f"group_by must be one of {sorted(keys)}, got {group_by!r}")
    groups: dict[str, list[VolumeMetrics]] = {}
    for m in metrics:
        groups.setdefault(keys[group_by](m), []).append(m)
    rows = []
    for key, ms in groups.items():
        hds = [m.hd_mm for m in ms if m.hd_mm is not None]
        species = sorted({m.species for m in ms})
        rows.append(AggregateRow(
            group=key, species=species[0] if len(species) == 1 else "all", n_volumes=len(ms),
            dice=float(np.mean([m.dice for m in ms])), hd_mm=float(np.mean(hds)) if hds else None,
            kappa=float(np.mean([m.kappa for m in ms])), hd_excluded=len(ms) - len(hds),
            tree_ids=tuple(sorted({m.tree_id for m in ms})),
        ))
    return rows


def kappa_distribution(metrics: Iterable[VolumeMetrics]) -> list[tuple[str, int, int, float]]:
    """(species, tree_id, volume_index, kappa) per volume, for violin-style plots."""
    return [(m.species, m.tree_id, m.volume_index, m.kappa)
            for m in sorted(metrics, key=lambda m: (m.species, m.tree_id, m.volume_index))]
