"""KVOL volume container.

Layout (little-endian)::

    b"KVOL" | u32 version | u16 T, H, W | f32 pixel_pitch_mm | f32 slice_pitch_mm
    | u32 tree_id | f32 z_offset_mm | packbits(contour) | packbits(knots)
    | [version 2 only: f32 probabilities, T*H*W] | u64 CRC-64

Bits are packed in C order with `bitorder="little"`. Version 2 carries a model's
probability stack next to its thresholded mask, used for prediction files.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..binio import FormatError, Reader, atomic_write, seal, unseal

MAGIC = b"KVOL"
VERSION = 1
VERSION_PROB = 2
HEADER = "3H2fIf"


@dataclass
class VolumeSample:
    contour: np.ndarray
    knots: np.ndarray
    pixel_pitch_mm: float = 1.0
    slice_pitch_mm: float = 1.25
    tree_id: int = 0
    z_offset_mm: float = 0.0
    probabilities: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.contour = np.asarray(self.contour, dtype=bool)
        self.knots = np.asarray(self.knots, dtype=bool)
        if self.contour.ndim != 3 or self.contour.shape != self.knots.shape:
            raise ValueError(f"contour {self.contour.shape} and knots {self.knots.shape} must be equal [T,H,W] stacks")
        if self.probabilities is not None:
            self.probabilities = np.asarray(self.probabilities, dtype=np.float32)
            if self.probabilities.shape != self.knots.shape:
                raise ValueError(f"probabilities {self.probabilities.shape} do not match knots {self.knots.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.contour.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, VolumeSample):
            return NotImplemented
        same_prob = (self.probabilities is None and other.probabilities is None) or (
            self.probabilities is not None and other.probabilities is not None
            and self.probabilities.tobytes() == other.probabilities.tobytes())
        return (np.array_equal(self.contour, other.contour) and np.array_equal(self.knots, other.knots)
                and self.pixel_pitch_mm == other.pixel_pitch_mm and self.slice_pitch_mm == other.slice_pitch_mm
                and self.tree_id == other.tree_id and self.z_offset_mm == other.z_offset_mm and same_prob)


def _f32(v: float) -> float:
    return float(np.float32(v))


def encode_volume(sample: VolumeSample) -> bytes:
    t, h, w = sample.shape
    if max(t, h, w) > 0xFFFF:
        raise ValueError(f"volume extents {sample.shape} exceed u16")
    version = VERSION if sample.probabilities is None else VERSION_PROB
    parts = [MAGIC, struct.pack("<I", version),
             struct.pack("<" + HEADER, t, h, w, sample.pixel_pitch_mm, sample.slice_pitch_mm,
                         sample.tree_id, sample.z_offset_mm),
             np.packbits(sample.contour, axis=None, bitorder="little").tobytes(),
             np.packbits(sample.knots, axis=None, bitorder="little").tobytes()]
    if sample.probabilities is not None:
        parts.append(sample.probabilities.astype("<f4").tobytes())
    return seal(b"".join(parts))


def decode_volume(blob: bytes) -> VolumeSample:
    version, body = unseal(blob, MAGIC, (VERSION, VERSION_PROB), "volume")
    r = Reader(body)
    t, h, w, pitch, slice_pitch, tree_id, z_offset = r.values(HEADER)
    n = t * h * w
    nbytes = (n + 7) // 8

    def bits() -> np.ndarray:
        packed = np.frombuffer(r.take(nbytes), dtype=np.uint8)
        return np.unpackbits(packed, count=n, bitorder="little").astype(bool).reshape(t, h, w)

    contour, knots = bits(), bits()
    prob = None
    if version == VERSION_PROB:
        prob = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(t, h, w)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes in volume body")
    return VolumeSample(contour, knots, pitch, slice_pitch, tree_id, z_offset, prob)


def write_volume(sample: VolumeSample, path: str | os.PathLike) -> None:
    atomic_write(path, encode_volume(sample))


def read_volume(path: str | os.PathLike) -> VolumeSample:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def quantize_header(sample: VolumeSample) -> VolumeSample:
    """Round the float header fields to f32 so in-memory samples equal their read-back."""
    sample.pixel_pitch_mm = _f32(sample.pixel_pitch_mm)
    sample.slice_pitch_mm = _f32(sample.slice_pitch_mm)
    sample.z_offset_mm = _f32(sample.z_offset_mm)
    return sample
