"""Synthetic susceptibility phantoms and simulated local-phase acquisitions.

Coordinates are in mm with voxel ``i`` centered at ``(i + 0.5) * voxel_size``,
so a grid of 64 voxels spans [0, 64] mm and its center is 32 mm. Shapes are
voxelized with partial-volume occupancy (sub-voxel supersampling), which keeps
the field inside a uniform sphere close to the continuous solution.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .dipole import Orientation, dipole_kernel, forward
from .volcore import GridSpec

SUPERSAMPLE = 4


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    delta_chi: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Cylinder:
    """Cylinder through ``point`` along ``axis``; infinite unless ``length`` is set."""

    point: tuple[float, float, float]
    axis: tuple[float, float, float]
    radius: float
    delta_chi: float
    length: Optional[float] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"cylinder radius must be positive, got {self.radius}")
        a = np.asarray(self.axis, dtype=float)
        if a.shape != (3,) or not np.linalg.norm(a) > 0:
            raise ValueError(f"cylinder axis must be a non-zero 3-vector, got {self.axis}")
        object.__setattr__(self, "axis", tuple(a / np.linalg.norm(a)))


Shape = Union[Sphere, Cylinder]


@dataclass(frozen=True)
class PhantomSpec:
    grid: GridSpec
    shapes: tuple = ()
    background_chi: float = 0.0
    smooth_sigma: Optional[float] = None


def _check_fits(shape: Shape, grid: GridSpec) -> None:
    ext = np.asarray(grid.extent)
    if isinstance(shape, Sphere):
        c = np.asarray(shape.center, dtype=float)
        if np.any(c - shape.radius < 0) or np.any(c + shape.radius > ext):
            raise ValueError(f"sphere {shape} does not fit in grid extent {tuple(ext)}")
    else:
        p = np.asarray(shape.point, dtype=float)
        if np.any(p < 0) or np.any(p > ext) or 2 * shape.radius > ext.min():
            raise ValueError(f"cylinder {shape} does not fit in grid extent {tuple(ext)}")


def _occupancy(shape: Shape, grid: GridSpec, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each voxel covered by ``shape``."""
    vox = np.asarray(grid.voxel_size)
    offsets = ((np.arange(ss) + 0.5) / ss - 0.5)
    cx, cy, cz = grid.voxel_centers()
    acc = np.zeros(grid.dims)
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                px, py, pz = cx + ox * vox[0], cy + oy * vox[1], cz + oz * vox[2]
                if isinstance(shape, Sphere):
                    c = shape.center
                    inside = (px - c[0]) ** 2 + (py - c[1]) ** 2 + (pz - c[2]) ** 2 <= shape.radius**2
                else:
                    a, p = shape.axis, shape.point
                    dx, dy, dz = px - p[0], py - p[1], pz - p[2]
                    t = dx * a[0] + dy * a[1] + dz * a[2]
                    r2 = dx**2 + dy**2 + dz**2 - t**2
                    inside = r2 <= shape.radius**2
                    if shape.length is not None:
                        inside = inside & (np.abs(t) <= shape.length / 2)
                acc += inside
    return acc / ss**3


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Susceptibility map (ppm) with the grid mean removed."""
    grid = spec.grid
    x = np.full(grid.dims, float(spec.background_chi))
    for shape in spec.shapes:
        _check_fits(shape, grid)
        x += shape.delta_chi * _occupancy(shape, grid)
    if spec.smooth_sigma:
        sigma = [spec.smooth_sigma / v for v in grid.voxel_size]
        x = ndimage.gaussian_filter(x, sigma, mode="wrap")
    return x - x.mean()


def standard_phantom_spec(grid: GridSpec) -> PhantomSpec:
    """Fixed four-sphere phantom scaled to the grid extent (positive and negative sources)."""
    e = np.asarray(grid.extent)
    m = e.min()
    shapes = (
        Sphere(tuple(0.5 * e), 0.22 * m, 0.1),
        Sphere(tuple(e * [0.28, 0.3, 0.5]), 0.1 * m, -0.08),
        Sphere(tuple(e * [0.72, 0.7, 0.45]), 0.12 * m, 0.15),
        Sphere(tuple(e * [0.5, 0.25, 0.75]), 0.08 * m, 0.05),
    )
    return PhantomSpec(grid=grid, shapes=shapes)


def sphere_mask(grid: GridSpec, center, radius) -> np.ndarray:
    """Boolean mask of voxels whose centers lie within ``radius`` of ``center``."""
    cx, cy, cz = grid.voxel_centers()
    c = center
    return (cx - c[0]) ** 2 + (cy - c[1]) ** 2 + (cz - c[2]) ** 2 <= radius**2


def ellipsoid_mask(grid: GridSpec, fraction: float = 0.8) -> np.ndarray:
    """Centered ellipsoid filling ``fraction`` of each half-extent; a stand-in brain mask."""
    cx, cy, cz = grid.voxel_centers()
    ext = grid.extent
    r = [fraction * e / 2 for e in ext]
    return (((cx - ext[0] / 2) / r[0]) ** 2 + ((cy - ext[1] / 2) / r[1]) ** 2
            + ((cz - ext[2] / 2) / r[2]) ** 2) <= 1.0


# --- orientations -----------------------------------------------------------


def _cap_rotation(theta: float, phi: float) -> np.ndarray:
    # rotation by theta about the horizontal axis (-sin phi, cos phi, 0): maps z_hat onto
    # (sin t cos p, sin t sin p, cos t)
    u = np.array([-np.sin(phi), np.cos(phi), 0.0])
    K = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def sample_cap(n: int, max_tilt_deg: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` directions uniform on the spherical cap of half-angle ``max_tilt_deg`` about z."""
    if not 0 <= max_tilt_deg <= 90:
        raise ValueError(f"max_tilt_deg must be in [0, 90], got {max_tilt_deg}")
    cmin = np.cos(np.radians(max_tilt_deg))
    cos_t = 1.0 - rng.random(n) * (1.0 - cmin)
    phi = 2 * np.pi * rng.random(n)
    sin_t = np.sqrt(np.maximum(1.0 - cos_t**2, 0.0))
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


def random_orientation(max_tilt_deg: float, rng_seed) -> Orientation:
    """Direction drawn uniformly from the cap of half-angle ``max_tilt_deg`` about z."""
    if max_tilt_deg == 0:
        return Orientation(h=np.array([0.0, 0.0, 1.0]), rotation=np.eye(3))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    h = sample_cap(1, max_tilt_deg, rng)[0]
    theta = np.arccos(np.clip(h[2], -1, 1))
    phi = np.arctan2(h[1], h[0])
    return Orientation.from_rotation(_cap_rotation(theta, phi))


# --- acquisition ------------------------------------------------------------


@dataclass
class AcqSpec:
    orientations: list
    noise_sigma: float
    seed: int = 0
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.orientations) < 1:
            raise ValueError("AcqSpec needs at least one orientation")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def simulate_phase(x, acq: AcqSpec, grid: Optional[GridSpec] = None) -> list:
    """Local field for every orientation plus white Gaussian noise, optionally masked.

    Noise for orientation ``i`` comes from the stream ``default_rng([seed, i])``.
    """
    x = np.asarray(x, dtype=float)
    grid = grid or GridSpec(x.shape)
    grid.check(x, "x")
    out = []
    for i, o in enumerate(acq.orientations):
        y = forward(dipole_kernel(grid, o), x)
        if acq.noise_sigma > 0:
            y = y + acq.noise_sigma * np.random.default_rng([acq.seed, i]).standard_normal(grid.dims)
        if acq.mask is not None:
            y = y * grid.check(np.asarray(acq.mask, dtype=float), "mask")
        out.append(y)
    return out


# --- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class PhantomFamily:
    """Ranges for randomized phantoms (lengths in mm, susceptibility in ppm)."""

    grid: GridSpec
    n_shapes: tuple[int, int] = (3, 8)
    radius_mm: tuple[float, float] = (1.5, 5.0)
    chi_range: tuple[float, float] = (-0.2, 0.2)
    cylinder_fraction: float = 0.3
    smooth_sigma: Optional[float] = None

    def sample(self, rng: np.random.Generator) -> PhantomSpec:
        ext = np.asarray(self.grid.extent)
        lo, hi = self.chi_range
        shapes = []
        for _ in range(int(rng.integers(self.n_shapes[0], self.n_shapes[1] + 1))):
            r = float(rng.uniform(*self.radius_mm))
            c = tuple(float(v) for v in rng.uniform(r, ext - r))
            chi = float(rng.uniform(lo, hi))
            if rng.random() < self.cylinder_fraction:
                axis = tuple(float(v) for v in rng.normal(size=3))
                length = float(rng.uniform(2 * r, ext.min() / 2))
                shapes.append(Cylinder(point=c, axis=axis, radius=r, delta_chi=chi, length=length))
            else:
                shapes.append(Sphere(center=c, radius=r, delta_chi=chi))
        return PhantomSpec(grid=self.grid, shapes=tuple(shapes), smooth_sigma=self.smooth_sigma)

    def make(self, rng: np.random.Generator) -> np.ndarray:
        """Sample, voxelize and rescale so that every value lies inside ``chi_range``."""
        x = make_phantom(self.sample(rng))
        lo, hi = self.chi_range
        peak_hi, peak_lo = x.max(), x.min()
        scale = 1.0
        if peak_hi > hi > 0:
            scale = min(scale, hi / peak_hi)
        if peak_lo < lo < 0:
            scale = min(scale, lo / peak_lo)
        return x * scale


@dataclass(frozen=True)
class AcqTemplate:
    """How each dataset pair is acquired: random tilts within a cap, fixed noise."""

    noise_sigma: float
    max_tilt_deg: float = 45.0
    n_orientations: int = 1


@dataclass
class TrainPair:
    y: np.ndarray
    op: object
    x_c: np.ndarray
    seed: tuple = field(default=())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x_c).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


def make_pair(family: PhantomFamily, acq: AcqTemplate, seed, index: int) -> list:
    """All ``acq.n_orientations`` pairs drawn from one phantom."""
    rng = np.random.default_rng([seed, index])
    x = family.make(rng)
    orients = [random_orientation(acq.max_tilt_deg, rng) for _ in range(acq.n_orientations)]
    spec = AcqSpec(orientations=orients, noise_sigma=acq.noise_sigma,
                   seed=int(rng.integers(2**31)))
    ys = simulate_phase(x, spec, family.grid)
    return [TrainPair(y=y, op=dipole_kernel(family.grid, o), x_c=x, seed=(seed, index))
            for y, o in zip(ys, orients)]


def make_dataset(n_pairs: int, family: PhantomFamily, acq_template: AcqTemplate, seed) -> list:
    """``n_pairs`` phantoms, each with its simulated measurement(s); deterministic per seed."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    pairs = []
    for i in range(n_pairs):
        pairs.extend(make_pair(family, acq_template, seed, i))
    return pairs


def fixed_orientations(tilts_deg: Sequence[float], axis: str = "x") -> list:
    return [Orientation.from_tilt(t, axis) for t in tilts_deg]
