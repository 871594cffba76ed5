"""Procedural log geometry: outer contour with branch scars, internal knot cones.

Coordinates are millimetres with the frame centre at the origin; z runs along
the log from 0 (butt) to `length_mm`. A branch emerging at height `z_mm`
leaves a knot cone whose apex sits on the pith at that height and whose axis
rises at `elevation_rad` along `azimuth_rad`. The cone reaches the bark at
the emergence height ``z_mm + R * tan(elevation)``; the scar bump on the
contour is centred there, so the knot's lower slices carry no visible cue.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class SpeciesProfile:
    """Sampling ranges (lo, hi) for one species; angles in degrees."""
    name: str
    branch_spacing_mm: float
    base_radius_mm: tuple[float, float]
    wobble_mm: tuple[float, float]
    drift_mm: tuple[float, float]
    scar_bump_mm: tuple[float, float]
    scar_extent_mm: tuple[float, float]
    scar_width_rad: tuple[float, float]
    elevation_deg: tuple[float, float]
    half_angle_deg: tuple[float, float]
    knot_radius_mm: tuple[float, float]
    hidden_prob: float

    def max_extent_mm(self) -> float:
        """Largest distance from the frame centre the contour can reach."""
        return self.base_radius_mm[1] + self.wobble_mm[1] + self.scar_bump_mm[1] + self.drift_mm[1]


FIR = SpeciesProfile(
    name="fir", branch_spacing_mm=120.0, base_radius_mm=(55.0, 70.0), wobble_mm=(1.0, 3.0),
    drift_mm=(0.0, 4.0), scar_bump_mm=(10.0, 16.0), scar_extent_mm=(20.0, 35.0),
    scar_width_rad=(0.35, 0.5), elevation_deg=(30.0, 40.0), half_angle_deg=(6.0, 10.0),
    knot_radius_mm=(6.0, 10.0), hidden_prob=0.1,
)
SPRUCE = SpeciesProfile(
    name="spruce", branch_spacing_mm=100.0, base_radius_mm=(50.0, 65.0), wobble_mm=(1.0, 3.0),
    drift_mm=(0.0, 4.0), scar_bump_mm=(8.0, 13.0), scar_extent_mm=(15.0, 30.0),
    scar_width_rad=(0.3, 0.45), elevation_deg=(35.0, 45.0), half_angle_deg=(5.0, 8.0),
    knot_radius_mm=(5.0, 8.0), hidden_prob=0.2,
)
# strongly distorted contours, for robustness evaluation only
DISTORTED = replace(FIR, name="distorted", base_radius_mm=(45.0, 55.0), wobble_mm=(10.0, 16.0),
                    drift_mm=(2.0, 8.0))
PROFILES = {p.name: p for p in (FIR, SPRUCE, DISTORTED)}
SPECIES = ("fir", "spruce")


def get_profile(profile: "str | SpeciesProfile") -> SpeciesProfile:
    if isinstance(profile, SpeciesProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown species profile {profile!r}; expected one of {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class BranchSpec:
    z_mm: float
    azimuth_rad: float
    elevation_rad: float
    knot_half_angle_rad: float
    knot_radius_mm: float
    scar_bump_mm: float
    scar_extent_mm: float
    scar_width_rad: float
    visible: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.elevation_rad < math.pi / 2:
            raise ValueError(f"elevation must lie in (0, pi/2), got {self.elevation_rad}")
        if self.visible and self.scar_extent_mm <= 0:
            raise ValueError("a visible branch needs scar_extent_mm > 0")

    def axis_distance(self, z: float) -> float:
        """Radial distance of the cone axis from the pith at height z."""
        return (z - self.z_mm) / math.tan(self.elevation_rad)

    def knot_radius(self, z: float) -> float:
        return self.knot_radius_mm + self.axis_distance(z) * math.tan(self.knot_half_angle_rad)


@dataclass(frozen=True)
class LogSpec:
    """One log. `wobble` holds (amplitude_mm, angular_order, phase, z_period_mm) terms;
    `pith_drift` holds (ax_mm, ay_mm, z_period_mm, phase)."""
    tree_id: int
    species_profile: str
    length_mm: float
    base_radius_mm: float
    wobble: tuple[tuple[float, int, float, float], ...] = ()
    pith_drift: tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 0.0)
    branches: tuple[BranchSpec, ...] = ()
    rng_seed: int = 0
    frame_mm: float = 192.0

    def __post_init__(self) -> None:
        for b in self.branches:
            if not 0 <= b.z_mm <= self.length_mm:
                raise ValueError(f"branch height {b.z_mm} outside [0, {self.length_mm}]")
        reach = (self.base_radius_mm + sum(abs(w[0]) for w in self.wobble)
                 + max((b.scar_bump_mm for b in self.branches), default=0.0)
                 + math.hypot(self.pith_drift[0], self.pith_drift[1]))
        if reach >= self.frame_mm / 2:
            raise ValueError(f"log reaches {reach:.1f} mm from the centre, frame half-width is {self.frame_mm / 2}")

    def pith(self, z: float) -> tuple[float, float]:
        ax, ay, period, phase = self.pith_drift
        s = math.sin(2 * math.pi * z / period + phase)
        return ax * s, ay * s

    def bare_radius(self, theta: np.ndarray, z: float) -> np.ndarray:
        """Contour radius without scars."""
        r = np.full(np.shape(theta), self.base_radius_mm, dtype=np.float64)
        for amp, order, phase, period in self.wobble:
            r += amp * np.cos(order * theta + phase + 2 * np.pi * z / period)
        return r

    def emergence_height(self, b: BranchSpec) -> float:
        return b.z_mm + self.base_radius_mm * math.tan(b.elevation_rad)

    def scar(self, b: BranchSpec, theta: np.ndarray, z: float) -> np.ndarray:
        """Cosine-tapered bump in angle and height; zero for hidden branches."""
        dz = z - self.emergence_height(b)
        if not b.visible or abs(dz) >= b.scar_extent_mm:
            return np.zeros(np.shape(theta))
        dtheta = np.angle(np.exp(1j * (theta - b.azimuth_rad)))
        ang = np.where(np.abs(dtheta) < b.scar_width_rad, 0.5 * (1 + np.cos(np.pi * dtheta / b.scar_width_rad)), 0.0)
        return b.scar_bump_mm * ang * 0.5 * (1 + math.cos(math.pi * dz / b.scar_extent_mm))

    def radius(self, theta: np.ndarray, z: float) -> np.ndarray:
        r = self.bare_radius(theta, z)
        for b in self.branches:
            r = r + self.scar(b, theta, z)
        return r


@dataclass(frozen=True)
class Raster:
    """Pixel grid: `size` x `size` pixels of `pitch_mm`, centred on the origin."""
    size: int = 192
    pitch_mm: float = 1.0
    ring_px: int = 2

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(self.size) + 0.5 - self.size / 2) * self.pitch_mm
        y, x = np.meshgrid(c, c, indexing="ij")
        return x, y


def sample_log_spec(seed: int, species_profile: "str | SpeciesProfile" = "fir", length_mm: float = 1000.0,
                    tree_id: int = 0, frame_mm: float = 192.0) -> LogSpec:
    """Draw a log; branch heights form a Poisson process with the profile's mean spacing."""
    p = get_profile(species_profile)
    if p.max_extent_mm() >= frame_mm / 2:
        raise ValueError(f"profile {p.name!r} can reach {p.max_extent_mm():.1f} mm, "
                         f"more than the frame half-width {frame_mm / 2}")
    rng = np.random.default_rng(seed)
    u = lambda lohi: float(rng.uniform(*lohi))
    base = u(p.base_radius_mm)
    total_wobble = u(p.wobble_mm)
    split = rng.dirichlet([1.0, 1.0])
    wobble = tuple((float(total_wobble * w), order, float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(300, 900)))
                   for w, order in zip(split, (2, 3)))
    drift = u(p.drift_mm)
    heading = rng.uniform(0, 2 * np.pi)
    pith_drift = (float(drift * np.cos(heading)), float(drift * np.sin(heading)),
                  float(rng.uniform(800, 2000)), float(rng.uniform(0, 2 * np.pi)))

    heights = []
    if p.branch_spacing_mm > 0 and np.isfinite(p.branch_spacing_mm):
        z = rng.exponential(p.branch_spacing_mm)
        while z <= length_mm:
            heights.append(float(z))
            z += rng.exponential(p.branch_spacing_mm)
    branches = []
    for z in heights:
        elevation = math.radians(u(p.elevation_deg))
        # a branch near the top must still break the bark inside the log
        elevation = max(min(elevation, math.atan((length_mm - z) / base)), 1e-3)
        span = base * math.tan(elevation)
        # keep the scar off the knot's central slices
        extent = min(u(p.scar_extent_mm), 0.4 * span)
        branches.append(BranchSpec(
            z_mm=z, azimuth_rad=float(rng.uniform(0, 2 * np.pi)), elevation_rad=elevation,
            knot_half_angle_rad=math.radians(u(p.half_angle_deg)), knot_radius_mm=u(p.knot_radius_mm),
            scar_bump_mm=u(p.scar_bump_mm), scar_extent_mm=extent, scar_width_rad=u(p.scar_width_rad),
            visible=bool(rng.random() >= p.hidden_prob),
        ))
    return LogSpec(tree_id=tree_id, species_profile=p.name, length_mm=length_mm, base_radius_mm=base,
                   wobble=wobble, pith_drift=pith_drift, branches=tuple(branches), rng_seed=seed,
                   frame_mm=frame_mm)


def _polar(spec: LogSpec, raster: Raster, z: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x, y = raster.coords()
    px, py = spec.pith(z)
    dx, dy = x - px, y - py
    return np.hypot(dx, dy), np.arctan2(dy, dx), dx, dy


def knot_disc(spec: LogSpec, b: BranchSpec, dx: np.ndarray, dy: np.ndarray, z: float) -> np.ndarray:
    """Unclipped cone cross-section of one branch at height z (pith-relative coords)."""
    d = b.axis_distance(z)
    if d < 0:
        return np.zeros(dx.shape, dtype=bool)
    rho = b.knot_radius(z)
    if d - rho > spec.base_radius_mm + spec.frame_mm:
        return np.zeros(dx.shape, dtype=bool)
    kx, ky = d * math.cos(b.azimuth_rad), d * math.sin(b.azimuth_rad)
    return (dx - kx) ** 2 + (dy - ky) ** 2 <= rho * rho


def render_slice(spec: LogSpec, z_mm: float, raster: Raster = Raster()) -> tuple[np.ndarray, np.ndarray]:
    """(contour ring, knot mask) at height `z_mm`, both bool [size, size]."""
    if not 0 <= z_mm <= spec.length_mm:
        warnings.warn(f"z={z_mm} mm outside the log [0, {spec.length_mm}]; returning empty rasters")
        empty = np.zeros((raster.size, raster.size), dtype=bool)
        return empty, empty.copy()
    r, theta, dx, dy = _polar(spec, raster, z_mm)
    outer = spec.radius(theta, z_mm)
    inner = outer - raster.ring_px * raster.pitch_mm
    contour = (r < outer) & (r >= inner)
    knots = np.zeros_like(contour)
    for b in spec.branches:
        knots |= knot_disc(spec, b, dx, dy, z_mm)
    knots &= r < inner
    return contour, knots


def render_stack(spec: LogSpec, z_values: np.ndarray, raster: Raster = Raster()) -> tuple[np.ndarray, np.ndarray]:
    pairs = [render_slice(spec, float(z), raster) for z in z_values]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
