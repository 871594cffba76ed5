"""Rotation / flip augmentation applied identically to contour and knot stacks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..synthlog.volume_io import VolumeSample

ANGLES = tuple(range(0, 360, 45))


@dataclass(frozen=True)
class AugmentSpec:
    enabled: bool = True
    hflip_prob: float = 0.5
    # (angle, flip) applied to every sample instead of drawing; for debugging and tests
    forced: Optional[tuple[int, bool]] = None

    @property
    def rotation_angles(self) -> tuple[int, ...]:
        return ANGLES

    def __post_init__(self) -> None:
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.forced is not None and self.forced[0] not in ANGLES:
            raise ValueError(f"forced angle must be one of {ANGLES}, got {self.forced[0]}")


def _rotate45(stack: np.ndarray) -> np.ndarray:
    """Counter-clockwise 45 degree nearest-neighbour rotation about the raster centre."""
    n = stack.shape[-1]
    c = (n - 1) / 2
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    # inverse map: destination (row, col) -> source
    s = np.sqrt(0.5)
    y, x = c - i, j - c  # y up
    src_x = s * x + s * y
    src_y = -s * x + s * y
    si = np.rint(c - src_y).astype(int)
    sj = np.rint(src_x + c).astype(int)
    inside = (si >= 0) & (si < n) & (sj >= 0) & (sj < n)
    out = np.zeros_like(stack)
    out[..., inside] = stack[..., si[inside], sj[inside]]
    return out


def rotate_stack(stack: np.ndarray, angle: int) -> np.ndarray:
    """Rotate every [.., H, W] slice counter-clockwise by a multiple of 45 degrees."""
    if angle not in ANGLES:
        raise ValueError(f"angle must be one of {ANGLES}, got {angle}")
    out = np.rot90(stack, angle // 90, axes=(-2, -1))
    if angle % 90:
        out = _rotate45(out)
    return np.ascontiguousarray(out)


def transform_stack(stack: np.ndarray, angle: int, flip: bool) -> np.ndarray:
    out = rotate_stack(stack, angle)
    if flip:
        out = np.ascontiguousarray(out[..., ::-1])
    return out.astype(bool) if stack.dtype == bool else out


def augment_volume(sample: VolumeSample, rng: np.random.Generator, spec: AugmentSpec = AugmentSpec()) -> VolumeSample:
    """Draw one angle (uniform over 8) and one flip coin; transform both stacks alike."""
    h, w = sample.shape[1:]
    if h != w:
        raise ValueError(f"augmentation needs square rasters, got {h}x{w}")
    if not spec.enabled:
        return sample
    if spec.forced is not None:
        angle, flip = spec.forced
    else:
        angle = ANGLES[int(rng.integers(len(ANGLES)))]
        flip = bool(rng.random() < spec.hflip_prob)
    if angle == 0 and not flip:
        return sample
    return VolumeSample(transform_stack(sample.contour, angle, flip), transform_stack(sample.knots, angle, flip),
                        sample.pixel_pitch_mm, sample.slice_pitch_mm, sample.tree_id, sample.z_offset_mm)
