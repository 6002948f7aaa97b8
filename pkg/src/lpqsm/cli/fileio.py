"""On-disk formats: QVOL volumes, orientation JSON, atomic writes.

QVOL layout (little-endian)::

    b"QVOL1\\0"
    3 x uint32  dims (nx, ny, nz)
    3 x float32 voxel size in mm
    float32 payload, x fastest (Fortran order), nx*ny*nz values
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from ..dipole import Orientation

QVOL_MAGIC = b"QVOL1\0"
_HEADER = struct.Struct("<3I3f")


class DataFileError(ValueError):
    pass


def write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def qvol_bytes(vol, voxel_size=(1.0, 1.0, 1.0)) -> bytes:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise DataFileError(f"QVOL holds 3D volumes, got shape {vol.shape}")
    if len(voxel_size) != 3:
        raise DataFileError(f"need 3 voxel sizes, got {voxel_size!r}")
    head = QVOL_MAGIC + _HEADER.pack(*vol.shape, *(float(v) for v in voxel_size))
    return head + np.asarray(vol, dtype="<f4").tobytes(order="F")


def write_qvol(path, vol, voxel_size=(1.0, 1.0, 1.0)) -> None:
    write_atomic(path, qvol_bytes(vol, voxel_size))


def parse_qvol(blob: bytes, name: str = "<bytes>") -> tuple[np.ndarray, tuple]:
    """Return the float32 volume and the voxel size (as float32 values widened to float)."""
    n0 = len(QVOL_MAGIC)
    if blob[:n0] != QVOL_MAGIC:
        raise DataFileError(f"{name}: not a QVOL1 file (magic {blob[:n0]!r})")
    if len(blob) < n0 + _HEADER.size:
        raise DataFileError(f"{name}: truncated header")
    *dims, vx, vy, vz = _HEADER.unpack_from(blob, n0)
    if min(dims) < 1:
        raise DataFileError(f"{name}: bad dims {dims}")
    payload = blob[n0 + _HEADER.size:]
    need = 4 * int(np.prod(dims))
    if len(payload) != need:
        raise DataFileError(f"{name}: payload has {len(payload)} bytes, dims {dims} need {need}")
    vol = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return vol.astype(np.float32), (vx, vy, vz)


def read_qvol(path) -> tuple[np.ndarray, tuple]:
    with open(path, "rb") as f:
        return parse_qvol(f.read(), os.fspath(path))


# --- orientations ---------------------------------------------------------------


def orientation_from_dict(d: dict) -> Orientation:
    label = d.get("label")
    if "rotation" in d:
        R = np.array(d["rotation"], dtype=float)
        if R.shape != (3, 3):
            raise DataFileError(f"rotation must be 3x3 row-major, got shape {R.shape}")
        if "h" in d:
            return Orientation(h=np.array(d["h"], dtype=float), rotation=R, label=label)
        return Orientation.from_rotation(R, label=label)
    if "tilt_deg" in d:
        return Orientation.from_tilt(float(d["tilt_deg"]), d.get("axis", "x"), label=label)
    h = np.array(d["h"], dtype=float)
    n = np.linalg.norm(h)
    if n == 0 or not np.isfinite(n):
        raise DataFileError(f"h must be a finite non-zero vector, got {d['h']!r}")
    if abs(n - 1.0) > 1e-12:
        h = h / n
    return Orientation(h=h, label=label)


def orientation_to_dict(o: Orientation) -> dict:
    d = {"h": [float(v) for v in o.h]}
    if o.rotation is not None:
        d["rotation"] = [[float(v) for v in row] for row in o.rotation]
    if o.label is not None:
        d["label"] = o.label
    return d


def write_orientation(path, o: Orientation) -> None:
    write_text_atomic(path, json.dumps(orientation_to_dict(o), indent=2) + "\n")


def read_orientation(path) -> Orientation:
    from .schemas import ORIENTATION, load_json

    return orientation_from_dict(load_json(path, ORIENTATION))
