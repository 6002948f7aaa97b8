"""Learned proximal network, its differentiation engine and the unrolled trainer."""
from .io import WeightFileError, load_params, save_params
from .network import ArchSpec, LearnedProx, ProxParams, init_params, prox_apply, zero_params
from .train import AdamW, TrainConfig, loss_and_grads, train, unrolled_reconstruct

__all__ = [
    "AdamW",
    "ArchSpec",
    "LearnedProx",
    "ProxParams",
    "TrainConfig",
    "WeightFileError",
    "init_params",
    "load_params",
    "loss_and_grads",
    "prox_apply",
    "save_params",
    "train",
    "unrolled_reconstruct",
    "zero_params",
]
