"""Grid description, 3D discrete Fourier transforms and inner products.

Volumes are plain ``numpy`` arrays of shape ``grid.dims`` indexed ``[x, y, z]``.
On disk the x index varies fastest (Fortran order); in memory the array shape
alone fixes the axis meaning, so no transposition ever happens between the two.

FFT convention: unnormalized forward transform, ``1/N`` on the inverse.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AXES = (0, 1, 2)


@dataclass(frozen=True)
class GridSpec:
    """Cartesian image grid.

    Parameters
    ----------
    dims : tuple of int
        Number of voxels along (x, y, z). Every entry must be at least 2.
    voxel_size : tuple of float
        Voxel edge lengths in mm.
    """

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vox = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or len(vox) != 3:
            raise ValueError("GridSpec needs three dims and three voxel sizes")
        if min(dims) < 2:
            raise ValueError(f"all grid dims must be >= 2, got {dims}")
        if not all(np.isfinite(v) and v > 0 for v in vox):
            raise ValueError(f"voxel sizes must be positive, got {vox}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vox)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical side lengths in mm."""
        return tuple(d * v for d, v in zip(self.dims, self.voxel_size))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dims)

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open-mesh coordinates (mm) of voxel centers; voxel i sits at (i + 0.5) * size."""
        return tuple(
            ((np.arange(n) + 0.5) * v).reshape([-1 if a == ax else 1 for a in AXES])
            for ax, (n, v) in enumerate(zip(self.dims, self.voxel_size))
        )

    def frequencies(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open-mesh physical DFT frequencies (cycles/mm).

        Standard DFT layout: negative frequencies in the upper half, and the
        Nyquist bin of an even dimension is counted as negative.
        """
        return tuple(
            np.fft.fftfreq(n, d=v).reshape([-1 if a == ax else 1 for a in AXES])
            for ax, (n, v) in enumerate(zip(self.dims, self.voxel_size))
        )

    def check(self, arr: np.ndarray, name: str = "volume") -> np.ndarray:
        """Raise ``ValueError`` unless ``arr`` has this grid's shape."""
        if np.shape(arr) != self.dims:
            raise ValueError(f"{name} has shape {np.shape(arr)}, grid expects {self.dims}")
        return arr


def _as_volume(v) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite entries")
    return v


def fft3(v) -> np.ndarray:
    """Unnormalized forward 3D DFT."""
    return np.fft.fftn(_as_volume(v), axes=AXES)


def ifft3(v) -> np.ndarray:
    """Inverse of :func:`fft3` (carries the ``1/N`` factor)."""
    return np.fft.ifftn(_as_volume(v), axes=AXES)


def inner_product(a, b) -> float:
    """Real Euclidean inner product of two same-shape volumes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    return float(np.vdot(a.ravel(), b.ravel()).real)
