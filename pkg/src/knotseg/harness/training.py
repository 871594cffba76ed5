"""Epoch loop: seeded shuffling, augmentation, BCE-with-logits, Adam, per-epoch validation.

RNG streams are keyed by (seed, epoch, item, purpose) rather than drawn from one
running generator, so every epoch, and every volume's augmentation within it,
is reproducible on its own. That makes resumed runs and runs with
augmentation forced to identity replay the same random choices as a fresh run.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import Tensor, bce_with_logits
from ..autodiff.optim import AdamState, adam_step
from ..metrics.core import EvalConfig, evaluate_volume
from ..models.architectures import SegmentationNet, build_model
from ..models.checkpoint import (
    Checkpoint,
    model_from_checkpoint,
    optimizer_state_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from ..models.config import ModelConfig
from ..synthlog.dataset import read_manifest
from ..synthlog.volume_io import VolumeSample
from .augment import AugmentSpec, augment_volume
from .inference import model_input, predict_volume

LAST, BEST = "last.kckp", "best.kckp"
RUNLOG, TIMING = "runlog.jsonl", "runlog_timing.jsonl"

# stream purposes
_SHUFFLE, _AUGMENT, _DROPOUT = 0, 1, 2


def default_batch_size(variant: str) -> int:
    return 4 if variant == "segnet" else 10


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 150
    batch_size: Optional[int] = None  # None -> 10 (U-Net, ConvLSTM) or 4 (SegNet)
    lr: float = 1e-4
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    data: str = ""
    ckpt_dir: str = ""
    scale_preset: str = "full"
    threshold: float = 0.5
    validate: bool = True
    # train only on volumes whose ground truth contains knots
    knot_volumes_only: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else default_batch_size(self.model.variant)

    @property
    def dropout_p(self) -> float:
        return self.model.dropout_p if self.model.variant == "convlstm" else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["batch_size"] = self.effective_batch_size
        d["augment"] = {"enabled": self.augment.enabled, "rotation_angles": list(self.augment.rotation_angles),
                        "hflip_prob": self.augment.hflip_prob, "forced": self.augment.forced}
        return d


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


class RunLog:
    """Append-only JSON-lines log: one config record, then one record per completed epoch.

    Wall-clock time goes to a sidecar file so the main log is a pure function
    of the seed and config.
    """

    def __init__(self, directory: Optional[str | os.PathLike] = None):
        self.dir = Path(directory) if directory else None
        self.records: list[dict] = []
        self.timing: list[dict] = []

    def _append(self, name: str, record: dict) -> None:
        if self.dir is not None:
            with open(self.dir / name, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def start(self, config: dict, seed: int) -> None:
        rec = {"type": "config", "seed": seed, "config": config}
        self.records.append(rec)
        self._append(RUNLOG, rec)

    def epoch(self, epoch: int, loss: float, val: Optional[dict], elapsed_s: float) -> None:
        rec = {"type": "epoch", "epoch": epoch, "loss": loss,
               "val_dice": val["dice"] if val else None, "val_hd": val["hd_mm"] if val else None,
               "val_kappa": val["kappa"] if val else None}
        self.records.append(rec)
        self.timing.append({"epoch": epoch, "elapsed_s": elapsed_s})
        self._append(RUNLOG, rec)
        self._append(TIMING, self.timing[-1])

    @property
    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["type"] == "epoch"]

    @classmethod
    def load(cls, directory: str | os.PathLike, upto_epoch: Optional[int] = None) -> "RunLog":
        """Read a log back, keeping epochs <= `upto_epoch`, and rewrite it truncated."""
        log = cls(directory)
        for name, bucket in ((RUNLOG, log.records), (TIMING, log.timing)):
            path = log.dir / name
            if path.exists():
                for line in path.read_text().splitlines():
                    rec = json.loads(line)
                    if upto_epoch is None or rec.get("epoch", -1) <= upto_epoch:
                        bucket.append(rec)
            path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in bucket))
        return log


def validate(model: SegmentationNet, volumes: Sequence[VolumeSample], eval_config: EvalConfig) -> Optional[dict]:
    if not volumes:
        return None
    ms = [evaluate_volume(predict_volume(model, v.contour), v.knots, eval_config) for v in volumes]
    hds = [m.hd_mm for m in ms if m.hd_mm is not None]
    return {"dice": float(np.mean([m.dice for m in ms])), "hd_mm": float(np.mean(hds)) if hds else None,
            "kappa": float(np.mean([m.kappa for m in ms]))}


@dataclass
class TrainResult:
    model: SegmentationNet
    checkpoint: Checkpoint
    runlog: RunLog
    best_val_dice: Optional[float]


def fit(config: TrainConfig, train_volumes: Sequence[VolumeSample], val_volumes: Sequence[VolumeSample] = (),
        eval_config: Optional[EvalConfig] = None, resume: bool = False, log=None,
        monitor: Optional[Callable[[int, SegmentationNet], bool]] = None) -> TrainResult:
    """Train `config.model` on in-memory volumes; checkpoints go to `config.ckpt_dir` if set.

    `log(epoch, loss, val)` is called after each epoch is checkpointed;
    `monitor(epoch, model)` likewise, and training stops early when it returns True.
    """
    if not train_volumes:
        raise ValueError("no training volumes")
    shapes = {v.shape for v in train_volumes}
    if len(shapes) != 1:
        raise ValueError(f"training volumes differ in shape: {sorted(shapes)}")
    t, h, w = shapes.pop()
    if (h, w) != (config.model.input_resolution,) * 2:
        raise ValueError(f"volumes are {h}x{w} but the model expects {config.model.input_resolution}px input")
    eval_config = eval_config or EvalConfig(threshold=config.threshold, pixel_pitch_mm=train_volumes[0].pixel_pitch_mm,
                                            slice_pitch_mm=train_volumes[0].slice_pitch_mm)
    ckpt_dir = Path(config.ckpt_dir) if config.ckpt_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(config.model, config.seed)
    opt = AdamState(lr=config.lr)
    start, best, ckpt = 0, None, None
    if resume and ckpt_dir is not None and (ckpt_dir / LAST).exists():
        ckpt = read_checkpoint(ckpt_dir / LAST, config.model)
        model = model_from_checkpoint(ckpt)
        opt = optimizer_state_from_checkpoint(ckpt) or opt
        start, best = ckpt.extra["epoch"] + 1, ckpt.extra.get("best_val_dice")
        runlog = RunLog.load(ckpt_dir, upto_epoch=ckpt.extra["epoch"])
    else:
        if ckpt_dir is not None:
            for name in (RUNLOG, TIMING):
                (ckpt_dir / name).unlink(missing_ok=True)
        runlog = RunLog(ckpt_dir)
        runlog.start(config.to_dict(), config.seed)

    params = model.parameters()
    bs = config.effective_batch_size
    n = len(train_volumes)
    t0 = time.perf_counter()
    for epoch in range(start, config.epochs):
        order = stream(config.seed, epoch, 0, _SHUFFLE).permutation(n)
        losses = []
        for b, first in enumerate(range(0, n, bs)):
            idx = order[first:first + bs]
            batch = [augment_volume(train_volumes[i], stream(config.seed, epoch, int(i), _AUGMENT), config.augment)
                     for i in idx]
            x = Tensor(model_input(np.stack([v.contour for v in batch])))
            y = np.stack([v.knots for v in batch]).astype(np.float32)[:, :, None]
            model.train()
            model.zero_grad()
            try:
                loss = bce_with_logits(model(x, stream(config.seed, epoch, b, _DROPOUT)), y)
            except MemoryError as exc:
                raise MemoryError(f"out of memory on a batch of {len(idx)} volumes of {t}x{h}x{w}; "
                                  f"reduce batch_size or use the desk preset") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                         f"(volumes {[int(i) for i in idx]})")
            loss.backward()
            adam_step(params, opt)
            losses.append(value)
        model.eval()
        val = validate(model, val_volumes, eval_config) if config.validate else None
        loss_mean = float(np.mean(losses))
        runlog.epoch(epoch, loss_mean, val, time.perf_counter() - t0)
        improved = val is not None and (best is None or val["dice"] > best)
        if improved:
            best = val["dice"]
        extra = {"epoch": epoch, "best_val_dice": best, "loss": loss_mean, "seed": config.seed}
        if ckpt_dir is not None:
            ckpt = save_checkpoint(model, ckpt_dir / LAST, step=opt.t, extra=extra, optimizer_state=opt)
            if improved:
                save_checkpoint(model, ckpt_dir / BEST, step=opt.t, extra=extra)
        else:
            ckpt = Checkpoint(model.config, dict(model.state_dict()), opt.t, None, extra)
        if log is not None:
            log(epoch, loss_mean, val)
        if monitor is not None and monitor(epoch, model):
            break
    model.eval()
    return TrainResult(model, ckpt, runlog, best)


def train(config: TrainConfig, resume: bool = False, log=None) -> TrainResult:
    """Train on the manifest's train fold, validating on its val fold."""
    manifest = read_manifest(config.data)
    train_volumes = [v for _, v in manifest.load_fold("train")]
    if config.knot_volumes_only:
        train_volumes = [v for v in train_volumes if v.knots.any()]
    val_volumes = [v for _, v in manifest.load_fold("val")] if config.validate and manifest.trees("val") else []
    return fit(config, train_volumes, val_volumes, resume=resume, log=log)
