"""Weight container.

Layout (all integers little-endian uint32)::

    b"LPCNNW1"
    u32 header length, UTF-8 JSON header (arch, sharing, sets, meta)
    per tensor, in declaration order:
        u32 ndim, ndim x u32 dims, float64 little-endian payload (C order)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .network import ArchSpec, ProxParams

MAGIC = b"LPCNNW1"


class WeightFileError(ValueError):
    pass


def dumps_params(params: ProxParams) -> bytes:
    header = json.dumps({
        "arch": params.arch.to_dict(),
        "shared_across_iterations": params.shared_across_iterations,
        "sets": params.sets,
        "meta": params.meta,
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for w in params.weights:
        parts.append(struct.pack("<I", w.ndim))
        parts.append(struct.pack(f"<{w.ndim}I", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_params(blob: bytes, expected_arch: ArchSpec | None = None) -> ProxParams:
    if blob[:len(MAGIC)] != MAGIC:
        raise WeightFileError(f"not a weight file or unsupported version (magic {blob[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        arch = ArchSpec(**header["arch"])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise WeightFileError(f"corrupt weight header: {exc}") from exc
    if expected_arch is not None and arch != expected_arch:
        raise WeightFileError(f"architecture mismatch: file has {arch}, expected {expected_arch}")

    weights = []
    try:
        while pos < len(blob):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(blob):
                raise WeightFileError("truncated tensor payload")
            weights.append(np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos)
                           .reshape(shape).astype(np.float64))
            pos += nbytes
    except struct.error as exc:
        raise WeightFileError(f"corrupt tensor header: {exc}") from exc
    try:
        return ProxParams(arch, weights, bool(header["shared_across_iterations"]),
                          int(header["sets"]), dict(header.get("meta", {})))
    except ValueError as exc:
        raise WeightFileError(f"weights inconsistent with architecture: {exc}") from exc


def save_params(params: ProxParams, path) -> None:
    """Write atomically (temp file + rename)."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-weights-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps_params(params))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path, expected_arch: ArchSpec | None = None) -> ProxParams:
    with open(path, "rb") as f:
        return loads_params(f.read(), expected_arch)


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
