"""Dipole inversion for quantitative susceptibility mapping with learned proximal networks."""
from .volcore import GridSpec, fft3, ifft3, inner_product
from .dipole import (
    DipoleOperator,
    Orientation,
    PadSpec,
    StackedOperator,
    adjoint,
    dipole_kernel,
    forward,
    grad_datafit,
    padded_forward,
)
from .solver import IdentityProx, ReconConfig, data_consistency_step, pgd_reconstruct

__version__ = "0.1.0"

__all__ = [
    "DipoleOperator",
    "GridSpec",
    "IdentityProx",
    "Orientation",
    "PadSpec",
    "ReconConfig",
    "StackedOperator",
    "adjoint",
    "data_consistency_step",
    "dipole_kernel",
    "fft3",
    "forward",
    "grad_datafit",
    "ifft3",
    "inner_product",
    "padded_forward",
    "pgd_reconstruct",
]
