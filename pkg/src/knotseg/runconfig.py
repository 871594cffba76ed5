"""Flat key=value run configuration shared by every CLI command.

A file holds one ``key = value`` per line; ``#`` starts a comment. Per-species
and per-variant settings use dotted keys (``split.fir = 18,4,5``,
``batch_size.segnet = 4``). Values are layered: the preset's bundled file,
then a user file, then command-line overrides.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Optional

from .harness.augment import ANGLES, AugmentSpec
from .harness.training import TrainConfig
from .metrics.core import EvalConfig
from .models.config import PRESETS, VARIANTS, ModelConfig
from .synthlog.dataset import GeneratorConfig


class ConfigError(ValueError):
    """Bad key or value in a run configuration."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(","))


def _choice(options: Iterable[str]) -> Callable[[str], str]:
    options = tuple(options)

    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


KEYS: dict[str, Callable[[str], object]] = {
    "preset": _choice(PRESETS),
    "seed": int,
    # data generation
    "image_size": int,
    "pixel_pitch_mm": float,
    "slice_pitch_mm": float,
    "n_slices": int,
    "volume_slices": int,
    "ring_px": int,
    # model
    "model": _choice(VARIANTS),
    "encoder_channels": _ints,
    "dropout": float,
    "forget_bias": float,
    "head_bias": float,
    # training
    "epochs": int,
    "lr": float,
    "augment": _bool,
    "rotation_angles": _ints,
    "hflip_prob": float,
    "validate": _bool,
    "knot_volumes_only": _bool,
    # evaluation and inference
    "threshold": float,
    "window": int,
    "stride": int,
    "hd_empty_policy": str,
    "hd_mode": str,
}
PREFIXES: dict[str, Callable[[str], object]] = {"split": _ints, "profile": str, "batch_size": int}


def parse_item(key: str, value: str, where: str) -> tuple[str, object]:
    key, value = key.strip(), value.strip()
    prefix, dot, sub = key.partition(".")
    if dot and prefix in PREFIXES and sub:
        if prefix == "batch_size" and sub not in VARIANTS:
            raise ConfigError(f"{where}: unknown model variant in {key!r}; valid variants: {', '.join(VARIANTS)}")
        parse = PREFIXES[prefix]
    elif key in KEYS:
        parse = KEYS[key]
    else:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return key, parse(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}, line {n}: expected key = value, got {raw.strip()!r}")
        key, value = parse_item(*line.split("=", 1), where=f"{source}, line {n}")
        out[key] = value
    return out


def parse_file(path: str | os.PathLike) -> dict[str, object]:
    with open(path) as fh:
        return parse_text(fh.read(), str(path))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return resources.files("knotseg").joinpath("configs", f"{name}.cfg").read_text()


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def resolve(cls, preset: Optional[str] = None, path: Optional[str | os.PathLike] = None,
                overrides: Iterable[str] = ()) -> "RunConfig":
        """Preset file, then `path`, then ``key=value`` overrides; later layers win.

        The preset comes from `preset`, else from the user file's ``preset`` key,
        else ``full``.
        """
        user = parse_file(path) if path is not None else {}
        extra = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r}: expected key=value")
            key, value = parse_item(*item.split("=", 1), where=f"override {item!r}")
            extra[key] = value
        name = preset or extra.get("preset") or user.get("preset") or "full"
        values = parse_text(preset_text(name), f"{name}.cfg")
        values.update(user)
        values.update(extra)
        values["preset"] = name
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def _prefixed(self, prefix: str) -> dict[str, object]:
        return {k.split(".", 1)[1]: v for k, v in sorted(self.values.items()) if k.startswith(prefix + ".")}

    def generator(self) -> GeneratorConfig:
        keys = ("image_size", "pixel_pitch_mm", "slice_pitch_mm", "n_slices", "volume_slices", "ring_px", "seed")
        kw = {k: self.values[k] for k in keys if k in self.values}
        split = self._prefixed("split")
        if split:
            kw["split"] = split
        profiles = {s: s for s in kw.get("split", {})}
        profiles.update(self._prefixed("profile"))
        if profiles:
            kw["profiles"] = profiles
        return GeneratorConfig.preset_config(self.values["preset"], **kw)

    def model(self, variant: Optional[str] = None) -> ModelConfig:
        kw = {"variant": variant or self.values.get("model", "convlstm")}
        for ours, theirs in (("image_size", "input_resolution"), ("volume_slices", "sequence_length"),
                             ("encoder_channels", "encoder_channels"), ("dropout", "dropout_p"),
                             ("forget_bias", "forget_bias"), ("head_bias", "head_bias")):
            if ours in self.values:
                kw[theirs] = self.values[ours]
        return ModelConfig.preset(self.values["preset"], **kw)

    def augment(self) -> AugmentSpec:
        angles = self.values.get("rotation_angles", ANGLES)
        if tuple(sorted(angles)) != ANGLES:
            raise ConfigError(f"rotation_angles must be the eight multiples of 45 degrees, got {angles}")
        return AugmentSpec(enabled=self.values.get("augment", True), hflip_prob=self.values.get("hflip_prob", 0.5))

    def train(self, variant: Optional[str] = None, data: str = "", ckpt_dir: str = "") -> TrainConfig:
        model = self.model(variant)
        kw = {k: self.values[k] for k in ("epochs", "lr", "seed", "threshold", "validate", "knot_volumes_only") if k in self.values}
        return TrainConfig(model=model, batch_size=self._prefixed("batch_size").get(model.variant),
                           augment=self.augment(), data=data, ckpt_dir=ckpt_dir,
                           scale_preset=self.values["preset"], **kw)

    def evaluation(self, pixel_pitch_mm: float, slice_pitch_mm: float) -> EvalConfig:
        kw = {k: self.values[k] for k in ("threshold", "hd_empty_policy", "hd_mode") if k in self.values}
        return EvalConfig(pixel_pitch_mm=pixel_pitch_mm, slice_pitch_mm=slice_pitch_mm, **kw)

    def window(self) -> tuple[int, int]:
        return int(self.values.get("window", self.values.get("volume_slices", 40))), int(self.values.get("stride", 1))

    def encode(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return str(value)
