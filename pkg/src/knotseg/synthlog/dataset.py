"""Whole-dataset generation and the manifest that ties trees to folds."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..binio import atomic_write
from .geometry import SPECIES, Raster, get_profile, render_stack, sample_log_spec
from .volume_io import VolumeSample, read_volume, write_volume

FOLDS = ("train", "val", "test")
MANIFEST_NAME = "manifest.txt"
MANIFEST_HEADER = "# knotseg manifest 1"


@dataclass(frozen=True)
class GeneratorConfig:
    preset: str = "full"
    image_size: int = 192
    pixel_pitch_mm: float = 1.0
    slice_pitch_mm: float = 1.25
    n_slices: int = 800
    volume_slices: int = 40
    ring_px: int = 2
    # species -> (train, val, test) tree counts
    split: dict = field(default_factory=lambda: {"fir": (18, 4, 5), "spruce": (8, 2, 5)})
    profiles: dict = field(default_factory=lambda: {"fir": "fir", "spruce": "spruce"})
    seed: int = 0

    def __post_init__(self) -> None:
        if self.volume_slices < 1 or self.n_slices < self.volume_slices:
            raise ValueError(f"need n_slices >= volume_slices >= 1, got {self.n_slices} and {self.volume_slices}")
        for species, counts in self.split.items():
            if len(counts) != 3 or min(counts) < 0:
                raise ValueError(f"split for {species!r} must be three non-negative counts, got {counts}")
        frame = self.image_size * self.pixel_pitch_mm
        for species in self.split:
            profile = get_profile(self.profiles.get(species, species))
            if profile.max_extent_mm() >= frame / 2:
                raise ValueError(f"profile {profile.name!r} reaches {profile.max_extent_mm():.1f} mm; "
                                 f"frame half-width is only {frame / 2} mm")

    @classmethod
    def preset_config(cls, name: str, **overrides) -> "GeneratorConfig":
        if name == "full":
            base = {}
        elif name == "desk":
            # same 192 mm frame at a quarter of the resolution in x, y and z
            base = dict(image_size=48, pixel_pitch_mm=4.0, slice_pitch_mm=5.0, n_slices=192, volume_slices=12,
                        split={"fir": (6, 2, 2), "spruce": (3, 1, 2)})
        else:
            raise ValueError(f"unknown preset {name!r}; expected 'full' or 'desk'")
        base.update(overrides)
        return cls(preset=name, **base)

    @property
    def length_mm(self) -> float:
        return self.n_slices * self.slice_pitch_mm

    @property
    def volumes_per_tree(self) -> int:
        return self.n_slices // self.volume_slices

    @property
    def raster(self) -> Raster:
        return Raster(self.image_size, self.pixel_pitch_mm, self.ring_px)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = {k: list(v) for k, v in self.split.items()}
        return d


@dataclass(frozen=True)
class TreeRecord:
    tree_id: int
    species: str
    fold: str
    files: tuple[str, ...]


@dataclass
class Manifest:
    records: list[TreeRecord]
    root: Path = Path(".")
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: dict[int, str] = {}
        for rec in self.records:
            if rec.fold not in FOLDS:
                raise ValueError(f"tree {rec.tree_id}: unknown fold {rec.fold!r}")
            if rec.tree_id in seen:
                raise ValueError(f"duplicate tree_id {rec.tree_id} (folds {seen[rec.tree_id]!r} and {rec.fold!r})")
            seen[rec.tree_id] = rec.fold

    def trees(self, fold: Optional[str] = None) -> list[TreeRecord]:
        return [r for r in self.records if fold is None or r.fold == fold]

    def tree(self, tree_id: int) -> TreeRecord:
        for r in self.records:
            if r.tree_id == tree_id:
                return r
        raise KeyError(f"tree {tree_id} not in manifest")

    def volume_paths(self, fold: Optional[str] = None) -> list[tuple[TreeRecord, Path]]:
        return [(r, self.root / f) for r in self.trees(fold) for f in r.files]

    def missing_files(self, fold: Optional[str] = None) -> list[Path]:
        return [p for _, p in self.volume_paths(fold) if not p.is_file()]

    def load_fold(self, fold: str) -> list[tuple[TreeRecord, VolumeSample]]:
        if not self.trees(fold):
            raise ValueError(f"fold {fold!r} has no trees in the manifest")
        missing = self.missing_files(fold)
        if missing:
            raise FileNotFoundError(f"{len(missing)} volume file(s) missing: " + ", ".join(map(str, missing)))
        return [(r, read_volume(p)) for r, p in self.volume_paths(fold)]

    def load_tree(self, tree_id: int) -> VolumeSample:
        """All of a tree's volumes concatenated along z."""
        vols = [read_volume(self.root / f) for f in self.tree(tree_id).files]
        first = vols[0]
        return VolumeSample(np.concatenate([v.contour for v in vols]), np.concatenate([v.knots for v in vols]),
                            first.pixel_pitch_mm, first.slice_pitch_mm, first.tree_id, first.z_offset_mm)

    def encode(self) -> str:
        lines = [MANIFEST_HEADER]
        lines += [f"# {k}={self.params[k]}" for k in sorted(self.params)]
        lines += ["\t".join([str(r.tree_id), r.species, r.fold, ",".join(r.files)]) for r in self.records]
        return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    atomic_write(path, manifest.encode().encode())


def read_manifest(path: str | os.PathLike) -> Manifest:
    """Parse a manifest; `path` may be the file or the dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: not a knotseg manifest")
    params, records = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            params[key] = value
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
        records.append(TreeRecord(int(cols[0]), cols[1], cols[2], tuple(cols[3].split(",")) if cols[3] else ()))
    return Manifest(records, path.parent, params)


def tree_seed(master_seed: int, tree_id: int) -> int:
    """Independent per-tree stream derived by hashing (master_seed, tree_id)."""
    return int(np.random.SeedSequence([master_seed, tree_id]).generate_state(1, np.uint64)[0])


def _plan(config: GeneratorConfig) -> list[tuple[int, str, str]]:
    plan, tree_id = [], 0
    for species in config.split:
        for fold, count in zip(FOLDS, config.split[species]):
            for _ in range(count):
                plan.append((tree_id, species, fold))
                tree_id += 1
    return plan


def generate_tree(config: GeneratorConfig, tree_id: int, species: str) -> list[VolumeSample]:
    spec = sample_log_spec(tree_seed(config.seed, tree_id), config.profiles.get(species, species),
                           config.length_mm, tree_id, config.image_size * config.pixel_pitch_mm)
    t = config.volume_slices
    z = (np.arange(config.volumes_per_tree * t) + 0.5) * config.slice_pitch_mm
    contour, knots = render_stack(spec, z, config.raster)
    return [VolumeSample(contour[k * t:(k + 1) * t], knots[k * t:(k + 1) * t], config.pixel_pitch_mm,
                         config.slice_pitch_mm, tree_id, k * t * config.slice_pitch_mm)
            for k in range(config.volumes_per_tree)]


def generate_dataset(config: GeneratorConfig, out_dir: str | os.PathLike, threads: int = 1) -> Manifest:
    """Render every tree of the split into `out_dir`; returns the written manifest.

    On failure every file written by this call is removed again.
    """
    out = Path(out_dir)
    plan = _plan(config)
    written: list[Path] = []

    def build(item: tuple[int, str, str]) -> list[VolumeSample]:
        return generate_tree(config, item[0], item[1])

    try:
        records = []
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            for (tree_id, species, fold), vols in zip(plan, pool.map(build, plan)):
                files = []
                for k, vol in enumerate(vols):
                    rel = f"volumes/tree{tree_id:04d}_v{k:03d}.kvol"
                    write_volume(vol, out / rel)
                    written.append(out / rel)
                    files.append(rel)
                records.append(TreeRecord(tree_id, species, fold, tuple(files)))
        params = {k: v for k, v in config.to_dict().items()}
        manifest = Manifest(records, out, {k: str(v).replace("\n", " ") for k, v in params.items()})
        write_manifest(manifest, out / MANIFEST_NAME)
        written.append(out / MANIFEST_NAME)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return manifest


def iter_fold_counts(manifest: Manifest) -> Iterator[tuple[str, int, int]]:
    for fold in FOLDS:
        trees = manifest.trees(fold)
        yield fold, len(trees), sum(len(t.files) for t in trees)
