"""Dipole kernel and the forward operators built on it.

The field perturbation of a susceptibility distribution ``x`` measured along
the main field direction ``h`` is ``F^-1 D F x`` with

    D(k) = 1/3 - (k . h)^2 / |k|^2,     D(0) := 0,

``k`` in physical units (cycles/mm). ``D`` is real and even in ``k`` so the
operator is self-adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .volcore import GridSpec, fft3, ifft3

Z_HAT = np.array([0.0, 0.0, 1.0])

# imaginary residue allowed after the inverse transform, relative to the real part
_IMAG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Orientation:
    """Main field direction ``h`` in image coordinates.

    When built from a rotation ``R`` (object rotated, B0 fixed in the lab
    frame) ``h = R @ z_hat``.
    """

    h: np.ndarray
    rotation: Optional[np.ndarray] = None
    label: Optional[str] = None

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if h.shape != (3,) or not np.all(np.isfinite(h)):
            raise ValueError(f"orientation needs a finite 3-vector, got {self.h!r}")
        if abs(np.linalg.norm(h) - 1.0) > 1e-12:
            raise ValueError(f"B0 direction must be unit length, |h| = {np.linalg.norm(h)!r}")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        if self.rotation is not None:
            R = np.array(self.rotation, dtype=float)
            _check_rotation(R)
            if np.max(np.abs(R @ Z_HAT - h)) > 1e-10:
                raise ValueError("h does not equal R @ z_hat")
            R.setflags(write=False)
            object.__setattr__(self, "rotation", R)

    @classmethod
    def from_rotation(cls, R, label=None) -> "Orientation":
        R = np.array(R, dtype=float)
        _check_rotation(R)
        h = R @ Z_HAT
        # absorb the rounding of R @ z_hat so the unit-norm check is exact
        h = h / np.linalg.norm(h)
        return cls(h=h, rotation=R, label=label)

    @classmethod
    def from_tilt(cls, degrees: float, axis: str = "x", label=None) -> "Orientation":
        """Object rotated by ``degrees`` about a coordinate axis."""
        return cls.from_rotation(axis_rotation(axis, degrees), label=label)

    def tilt_deg(self) -> float:
        """Angle between ``h`` and the z axis."""
        return float(np.degrees(np.arccos(np.clip(self.h[2], -1.0, 1.0))))

    def __eq__(self, other):
        if not isinstance(other, Orientation):
            return NotImplemented
        return np.array_equal(self.h, other.h)

    def __hash__(self):
        return hash(self.h.tobytes())


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-10:
        raise ValueError("rotation is not orthonormal")
    if np.linalg.det(R) <= 0:
        raise ValueError("rotation must have det = +1")


def axis_rotation(axis: str, degrees: float) -> np.ndarray:
    """Right-handed rotation matrix about ``x``, ``y`` or ``z``."""
    t = np.radians(degrees)
    c, s = np.cos(t), np.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"unknown axis {axis!r}")


def kernel_values(kx, ky, kz, h) -> np.ndarray:
    """Evaluate ``1/3 - (k.h)^2/|k|^2`` on broadcastable frequency arrays, 0 at k = 0."""
    kx, ky, kz = np.broadcast_arrays(kx, ky, kz)
    k2 = kx**2 + ky**2 + kz**2
    kh = kx * h[0] + ky * h[1] + kz * h[2]
    D = np.zeros(k2.shape)
    nz = k2 > 0
    D[nz] = 1.0 / 3.0 - kh[nz] ** 2 / k2[nz]
    return D


@dataclass(frozen=True, eq=False)
class DipoleOperator:
    """Diagonal Fourier-domain dipole kernel for one orientation on one grid."""

    grid: GridSpec
    orientation: Orientation
    D: np.ndarray = field(repr=False)

    def __call__(self, x):
        return forward(self, x)


def negate_index(a: np.ndarray) -> np.ndarray:
    """``a[-i mod n]`` along every axis (DFT index negation)."""
    return np.roll(np.flip(a, axis=(0, 1, 2)), 1, axis=(0, 1, 2))


def dipole_kernel(grid: GridSpec, orientation: Orientation) -> DipoleOperator:
    """Sample the kernel on the DFT grid.

    On the Nyquist plane of an even dimension, index negation does not negate
    the physical frequency, so an oblique ``h`` leaves the raw samples uneven
    there. The kernel keeps their even part, which is exactly the operator
    obtained by taking the real part of ``F^-1 D F`` for real input.
    """
    if not isinstance(orientation, Orientation):
        orientation = Orientation(h=orientation)
    D = kernel_values(*grid.frequencies(), orientation.h)
    D = 0.5 * (D + negate_index(D))
    D.setflags(write=False)
    return DipoleOperator(grid=grid, orientation=orientation, D=D)


def _apply_kernel(D: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = ifft3(D * fft3(x))
    re = out.real
    resid = np.linalg.norm(out.imag)
    if resid > _IMAG_TOL * max(np.linalg.norm(re), np.finfo(float).tiny):
        raise ArithmeticError(f"imaginary residue {resid:.3e} exceeds tolerance")
    return np.ascontiguousarray(re)


def forward(op: DipoleOperator, x) -> np.ndarray:
    """Noiseless local field ``F^-1 D F x``."""
    x = op.grid.check(np.asarray(x, dtype=float), "x")
    return _apply_kernel(op.D, x)


def adjoint(op: DipoleOperator, y) -> np.ndarray:
    """Adjoint of :func:`forward`; identical to it because D is real and even."""
    return forward(op, y)


@dataclass(frozen=True)
class StackedOperator:
    """Vertical stack of ``L >= 1`` dipole operators sharing one grid."""

    ops: tuple

    def __post_init__(self):
        ops = tuple(self.ops)
        if not ops:
            raise ValueError("StackedOperator needs at least one operator")
        g = ops[0].grid
        for op in ops[1:]:
            if op.grid != g:
                raise ValueError(f"grid mismatch in stack: {op.grid} vs {g}")
        object.__setattr__(self, "ops", ops)

    @property
    def grid(self) -> GridSpec:
        return self.ops[0].grid

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def check_measurements(self, ys: Sequence) -> list:
        if len(ys) != len(self.ops):
            raise ValueError(f"{len(ys)} measurements for {len(self.ops)} operators")
        return [self.grid.check(np.asarray(y, dtype=float), f"y[{i}]") for i, y in enumerate(ys)]

    def adjoint_data(self, ys) -> np.ndarray:
        """``(1/L) sum_l Phi_l^H y_l``."""
        ys = self.check_measurements(ys)
        acc = np.zeros(self.grid.dims)
        for op, y in zip(self.ops, ys):
            acc += adjoint(op, y)
        return acc / len(self.ops)

    def normal(self, x) -> np.ndarray:
        """``(1/L) sum_l Phi_l^H Phi_l x`` computed with one forward transform."""
        x = self.grid.check(np.asarray(x, dtype=float), "x")
        return _apply_kernel(self.normal_kernel, x)

    @cached_property
    def normal_kernel(self) -> np.ndarray:
        D2 = sum(op.D**2 for op in self.ops) / len(self.ops)
        D2.setflags(write=False)
        return D2


def as_stack(ops) -> StackedOperator:
    if isinstance(ops, StackedOperator):
        return ops
    if isinstance(ops, DipoleOperator):
        return StackedOperator((ops,))
    return StackedOperator(tuple(ops))


def datafit(ops, x, ys) -> float:
    """Averaged data fidelity ``(1/2L) sum_l ||y_l - Phi_l x||^2``."""
    ops = as_stack(ops)
    ys = ops.check_measurements(ys)
    x = ops.grid.check(np.asarray(x, dtype=float), "x")
    total = 0.0
    for op, y in zip(ops.ops, ys):
        r = forward(op, x) - y
        total += 0.5 * float(np.vdot(r, r))
    return total / len(ops)


def grad_datafit(ops, x, ys) -> np.ndarray:
    """Gradient of :func:`datafit`: ``(1/L) sum_l Phi_l^H (Phi_l x - y_l)``."""
    ops = as_stack(ops)
    ys = ops.check_measurements(ys)
    x = ops.grid.check(np.asarray(x, dtype=float), "x")
    acc = np.zeros(ops.grid.dims)
    for op, y in zip(ops.ops, ys):
        acc += adjoint(op, forward(op, x) - y)
    return acc / len(ops)


# --- patch operator ---------------------------------------------------------


@dataclass(frozen=True)
class PadSpec:
    """Placement of a patch inside a full grid."""

    patch_dims: tuple[int, int, int]
    offset: tuple[int, int, int]
    full_dims: tuple[int, int, int]

    def __post_init__(self):
        p, o, f = (tuple(int(v) for v in t) for t in (self.patch_dims, self.offset, self.full_dims))
        if not (len(p) == len(o) == len(f) == 3):
            raise ValueError("PadSpec entries must be integer triples")
        if min(p) < 1 or min(f) < 1 or min(o) < 0:
            raise ValueError(f"invalid PadSpec {p}, {o}, {f}")
        if any(oi + pi > fi for oi, pi, fi in zip(o, p, f)):
            raise ValueError(f"patch {p} at offset {o} does not fit in {f}")
        object.__setattr__(self, "patch_dims", p)
        object.__setattr__(self, "offset", o)
        object.__setattr__(self, "full_dims", f)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(self.offset, self.patch_dims))


def zeropad(patch, pad: PadSpec) -> np.ndarray:
    """Embed ``patch`` into a zero volume of ``pad.full_dims``."""
    patch = np.asarray(patch, dtype=float)
    if patch.shape != pad.patch_dims:
        raise ValueError(f"patch shape {patch.shape} != {pad.patch_dims}")
    out = np.zeros(pad.full_dims)
    out[pad.slices] = patch
    return out


def crop(vol, pad: PadSpec) -> np.ndarray:
    """Adjoint of :func:`zeropad`."""
    vol = np.asarray(vol, dtype=float)
    if vol.shape != pad.full_dims:
        raise ValueError(f"volume shape {vol.shape} != {pad.full_dims}")
    return vol[pad.slices].copy()


def padded_forward(op: DipoleOperator, patch, pad: PadSpec) -> np.ndarray:
    """Patch operator ``C Phi P`` using the full-grid kernel."""
    if op.grid.dims != pad.full_dims:
        raise ValueError(f"operator grid {op.grid.dims} != pad full dims {pad.full_dims}")
    return crop(forward(op, zeropad(patch, pad)), pad)


def patched_kernel_forward(op: DipoleOperator, patch) -> np.ndarray:
    """Forward model with a kernel built on the patch grid itself.

    Only for comparison against :func:`padded_forward`; it drops the
    frequency content a patch-sized kernel cannot represent.
    """
    patch = np.asarray(patch, dtype=float)
    small = dipole_kernel(GridSpec(patch.shape, op.grid.voxel_size), op.orientation)
    return forward(small, patch)
