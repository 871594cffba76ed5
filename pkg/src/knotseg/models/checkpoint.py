"""KCKP checkpoint container.

Layout (little-endian)::

    b"KCKP" | u32 version | u32 len | config JSON | u32 len | meta JSON
    | u32 count | count x (u16 name_len, name, u8 rank, rank x u32, f32 payload)
    | u64 CRC-64 of everything before it
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..binio import FormatError, Reader, atomic_write, seal, unseal
from .architectures import SegmentationNet, build_model
from .config import ModelConfig

MAGIC = b"KCKP"
VERSION = 1


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[dict] = None
    extra: dict[str, Any] = field(default_factory=dict)


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_json({"model": ckpt.config.to_dict()}),
                 _json({"step": ckpt.step, "rng_state": ckpt.rng_state, "extra": ckpt.extra})):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f4").tobytes()]
    return seal(b"".join(parts))


def decode_checkpoint(blob: bytes, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    _, body = unseal(blob, MAGIC, (VERSION,), "checkpoint")
    r = Reader(body)
    config_blob = json.loads(r.take(r.unpack("I")))
    config = ModelConfig.from_dict(config_blob["model"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint was saved for {config}, expected {expected_config}")
    meta = json.loads(r.take(r.unpack("I")))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.unpack("I")):
        name = r.take(r.unpack("H")).decode()
        rank = r.unpack("B")
        shape = r.values(f"{rank}I")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after tensor table")
    return Checkpoint(config, tensors, meta["step"], meta["rng_state"], meta["extra"])


def read_checkpoint(path: str | os.PathLike, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_config)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def save_checkpoint(model: SegmentationNet, path: str | os.PathLike, step: int = 0,
                    rng: Optional[np.random.Generator] = None, extra: Optional[dict] = None,
                    optimizer_state=None) -> Checkpoint:
    tensors = dict(model.state_dict())
    extra = dict(extra or {})
    if optimizer_state is not None:
        for name in model.parameters():
            tensors[f"adam.m.{name}"] = optimizer_state.m[name]
            tensors[f"adam.v.{name}"] = optimizer_state.v[name]
        extra["adam"] = {"lr": optimizer_state.lr, "beta1": optimizer_state.beta1,
                         "beta2": optimizer_state.beta2, "eps": optimizer_state.eps, "t": optimizer_state.t}
    model_rng = getattr(model, "rng", None)
    if model_rng is not None:
        extra["model_rng_state"] = model_rng.bit_generator.state
    ckpt = Checkpoint(model.config, tensors, step, rng.bit_generator.state if rng is not None else None, extra)
    write_checkpoint(ckpt, path)
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> SegmentationNet:
    model = build_model(ckpt.config)
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    if "model_rng_state" in ckpt.extra and getattr(model, "rng", None) is not None:
        model.rng.bit_generator.state = ckpt.extra["model_rng_state"]
    return model


def optimizer_state_from_checkpoint(ckpt: Checkpoint):
    from ..autodiff.optim import AdamState

    hyper = ckpt.extra.get("adam")
    if hyper is None:
        return None
    state = AdamState(lr=hyper["lr"], beta1=hyper["beta1"], beta2=hyper["beta2"], eps=hyper["eps"], t=hyper["t"])
    for key, arr in ckpt.tensors.items():
        if key.startswith("adam.m."):
            state.m[key[len("adam.m."):]] = arr.copy()
        elif key.startswith("adam.v."):
            state.v[key[len("adam.v."):]] = arr.copy()
    return state


def load_checkpoint(path: str | os.PathLike, expected_config: Optional[ModelConfig] = None) -> SegmentationNet:
    """Rebuild the model stored at `path`; nothing is returned on any validation failure."""
    return model_from_checkpoint(read_checkpoint(path, expected_config))
