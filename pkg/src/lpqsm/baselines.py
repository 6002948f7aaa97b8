"""Classical dipole inversions: TKD, multi-orientation COSMOS, and an l1 proximal."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dipole import DipoleOperator
from .volcore import fft3, ifft3


@dataclass(frozen=True)
class TkdConfig:
    threshold: float = 0.2

    def __post_init__(self):
        if not 0 < self.threshold < 2.0 / 3.0:
            raise ValueError(f"TKD threshold must lie in (0, 2/3), got {self.threshold}")


@dataclass(frozen=True)
class CosmosConfig:
    threshold: float = 1e-6

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"COSMOS threshold must be positive, got {self.threshold}")


def truncated_kernel(D: np.ndarray, t: float) -> np.ndarray:
    """Replace kernel values with ``|D| < t`` by ``sign(D) * t`` (sign(0) = +1)."""
    sign = np.where(D < 0, -1.0, 1.0)
    return np.where(np.abs(D) >= t, D, sign * t)


def tkd(y, op: DipoleOperator, cfg: TkdConfig = TkdConfig()) -> np.ndarray:
    """Thresholded k-space division."""
    y = op.grid.check(np.asarray(y, dtype=float), "y")
    return ifft3(fft3(y) / truncated_kernel(op.D, cfg.threshold)).real


def cosmos_lsq(ys, ops, cfg: CosmosConfig = CosmosConfig()) -> np.ndarray:
    """Per-frequency least squares over all orientations.

    ``x(k) = sum_l D_l(k) Y_l(k) / sum_l D_l(k)^2``, zeroed where the
    denominator falls below ``cfg.threshold``.
    """
    ops = list(ops)
    ys = list(ys)
    if not ops or len(ops) != len(ys):
        raise ValueError(f"need matching non-empty lists, got {len(ys)} y and {len(ops)} operators")
    grid = ops[0].grid
    if any(op.grid != grid for op in ops):
        raise ValueError("all operators must share one grid")
    if len(ops) > 1 and len({op.orientation for op in ops}) == 1:
        warnings.warn("all COSMOS orientations are identical; no conditioning gain", stacklevel=2)

    num = np.zeros(grid.dims, dtype=complex)
    den = np.zeros(grid.dims)
    for op, y in zip(ops, ys):
        num += op.D * fft3(grid.check(np.asarray(y, dtype=float), "y"))
        den += op.D**2
    keep = den >= cfg.threshold
    X = np.zeros_like(num)
    X[keep] = num[keep] / den[keep]
    return ifft3(X).real


def soft_threshold_prox(z, tau: float) -> np.ndarray:
    """Proximal map of ``tau * ||.||_1``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


class SoftThresholdProx:
    family = "soft-threshold"

    def __init__(self, tau: float):
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.tau = float(tau)

    def __call__(self, z):
        return soft_threshold_prox(z, self.tau)
