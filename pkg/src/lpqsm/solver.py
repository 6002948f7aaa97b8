"""Proximal gradient descent for dipole inversion.

Each iteration is

    x_{i+1} = prox( x_i + alpha * ( (1/L) sum Phi_l^H y_l - (1/L) sum Phi_l^H Phi_l x_i ) )

which for a single orientation is ``prox(alpha Phi^H y + (I - alpha Phi^H Phi) x_i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .dipole import DipoleOperator, PadSpec, StackedOperator, as_stack, crop, padded_forward

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6


class DivergenceError(ArithmeticError):
    """An iterate became non-finite or blew past the divergence guard."""


class ProximalMap(Protocol):
    family: str

    def __call__(self, z: np.ndarray) -> np.ndarray: ...


class IdentityProx:
    family = "identity"

    def __call__(self, z):
        return z


@dataclass
class ReconConfig:
    alpha: float = 1.0
    iterations: int = 3
    initial: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        self.iterations = int(self.iterations)


@dataclass
class IterTrace:
    datafit: list = field(default_factory=list)
    nrmse: Optional[list] = None


class DataTerm:
    """Averaged least-squares data term for a stack of measurements.

    Holds the precomputed back-projection ``(1/L) sum Phi_l^H y_l`` and the
    normal operator. With a :class:`PadSpec` the operators act on a patch
    through the zero-pad / crop sandwich ``C Phi P``.
    """

    def __init__(self, ops, ys: Sequence, pad: Optional[PadSpec] = None):
        self.stack: StackedOperator = as_stack(ops)
        self.pad = pad
        L = len(self.stack)
        if len(ys) != L:
            raise ValueError(f"{len(ys)} measurements for {L} operators")
        if pad is None:
            self.ys = self.stack.check_measurements(ys)
            self.shape = self.stack.grid.dims
            self.rhs = self.stack.adjoint_data(self.ys)
        else:
            if self.stack.grid.dims != pad.full_dims:
                raise ValueError(f"operator grid {self.stack.grid.dims} != pad full dims {pad.full_dims}")
            self.ys = [np.asarray(y, dtype=float) for y in ys]
            for i, y in enumerate(self.ys):
                if y.shape != pad.patch_dims:
                    raise ValueError(f"y[{i}] shape {y.shape} != patch dims {pad.patch_dims}")
            self.shape = pad.patch_dims
            self.rhs = sum(padded_forward(op, y, pad) for op, y in zip(self.stack.ops, self.ys)) / L

    def __len__(self):
        return len(self.stack)

    def apply(self, op: DipoleOperator, x) -> np.ndarray:
        if self.pad is None:
            return op(x)
        return padded_forward(op, x, self.pad)

    def normal(self, x) -> np.ndarray:
        if self.pad is None:
            return self.stack.normal(x)
        return sum(self.apply(op, self.apply(op, x)) for op in self.stack.ops) / len(self)

    def value(self, x) -> float:
        total = 0.0
        for op, y in zip(self.stack.ops, self.ys):
            r = self.apply(op, x) - y
            total += 0.5 * float(np.vdot(r, r))
        return total / len(self)

    def step(self, x, alpha: float) -> np.ndarray:
        """Affine pre-proximal update ``x + alpha (rhs - normal(x))``."""
        x = np.asarray(x, dtype=float)
        if x.shape != self.shape:
            raise ValueError(f"iterate shape {x.shape} != {self.shape}")
        if alpha == 0:
            return x.copy()
        return x + alpha * (self.rhs - self.normal(x))


def data_consistency_step(ops, ys, x, alpha: float, pad: Optional[PadSpec] = None) -> np.ndarray:
    """``(alpha/L) Phi_bar^H y_bar + (I - (alpha/L) Phi_bar^H Phi_bar) x``."""
    return DataTerm(ops, ys, pad).step(x, alpha)


def pgd_reconstruct(
    ops,
    ys: Sequence,
    prox: Callable = None,
    cfg: ReconConfig = None,
    reference: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, IterTrace]:
    """Run ``cfg.iterations`` proximal gradient steps from ``cfg.initial`` (zero by default).

    Returns the final iterate and a trace of the data fidelity after every
    iteration (plus NRMSE in percent against ``reference`` when given).
    """
    prox = prox if prox is not None else IdentityProx()
    cfg = cfg if cfg is not None else ReconConfig()
    term = DataTerm(ops, ys)
    x = np.zeros(term.shape) if cfg.initial is None else term.stack.grid.check(
        np.array(cfg.initial, dtype=float), "initial")

    limit = DIVERGENCE_FACTOR * np.linalg.norm(cfg.alpha * term.rhs)
    trace = IterTrace(nrmse=[] if reference is not None else None)
    ref_norm = np.linalg.norm(reference) if reference is not None else None

    for i in range(cfg.iterations):
        p = prox.for_iteration(i) if hasattr(prox, "for_iteration") else prox
        x = p(term.step(x, cfg.alpha))
        if x.shape != term.shape:
            raise ValueError(f"proximal map changed the grid: {x.shape}")
        norm = np.linalg.norm(x)
        if not np.isfinite(norm):
            raise DivergenceError(f"non-finite iterate at iteration {i + 1}")
        if limit > 0 and norm > limit:
            raise DivergenceError(
                f"iterate norm {norm:.3e} exceeds guard {limit:.3e} at iteration {i + 1}")
        trace.datafit.append(term.value(x))
        if reference is not None:
            trace.nrmse.append(100.0 * np.linalg.norm(x - reference) / ref_norm)
        log.debug("iter %d  f=%.6e", i + 1, trace.datafit[-1])
    return x, trace


def patch_data_term(op: DipoleOperator, y_full, pad: PadSpec) -> DataTerm:
    """Data term for a patch cut out of a full-grid measurement."""
    return DataTerm([op], [crop(y_full, pad)], pad)
