"""End-to-end training of the unrolled learned-proximal reconstruction.

For each pair the pipeline runs ``k`` iterations of

    x <- P_theta( x + alpha * (Phi'^H y - Phi'^H Phi' x) ),   x_0 = 0,

and the loss is ``||x_c - x_k||^2``. Patches use the zero-pad / crop operator
``C Phi P`` so the full-grid dipole kernel is always applied.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..dipole import PadSpec, crop
from ..solver import DataTerm, DivergenceError
from . import autodiff as ad
from .network import ArchSpec, ProxParams, init_params, prox_graph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    unroll_k: int = 3
    epochs: int = 100
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay_ratio: float = 0.8
    lr_decay_every: int = 25
    patch_dims: Optional[tuple] = (64, 64, 64)
    seed: int = 0
    alpha: float = 1.0
    shared_across_iterations: bool = True
    arch: ArchSpec = field(default_factory=ArchSpec)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchSpec(**self.arch)
        if self.patch_dims is not None:
            self.patch_dims = tuple(int(p) for p in self.patch_dims)
        if self.unroll_k < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("unroll_k, batch_size and lr_decay_every must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0 or not self.alpha > 0:
            raise ValueError("learning_rate and weight_decay must be >= 0, alpha > 0")
        if not 0 < self.lr_decay_ratio <= 1:
            raise ValueError("lr_decay_ratio must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_ratio ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_dims"] = list(self.patch_dims) if self.patch_dims is not None else None
        return d


def unrolled_graph(weight_sets: list, term: DataTerm, y_vars: list, alpha: float, k: int,
                   arch: ArchSpec, training=False, rng=None) -> ad.Var:
    """Record ``k`` data-consistency + proximal iterations from ``x_0 = 0``."""
    rhs = ad.backproject(y_vars, term)
    x = ad.leaf(np.zeros((1,) + tuple(term.shape)), name="x0")
    for i in range(k):
        ws = weight_sets[0] if len(weight_sets) == 1 else weight_sets[i]
        x = prox_graph(ws, ad.dc_step(x, rhs, term, alpha), arch, training, rng)
    return x


@dataclass
class Gradients:
    loss: float
    weights: list
    inputs: list
    prediction: np.ndarray


def loss_and_grads(params: ProxParams, term: DataTerm, target, alpha: float = 1.0,
                   k: int = 3, training=False, rng=None) -> Gradients:
    """Loss ``||target - x_k||^2`` and its exact gradients w.r.t. every weight and each ``y``."""
    n = len(params.arch.tensor_shapes())
    wvars = [ad.leaf(w, name=f"w{i}") for i, w in enumerate(params.weights)]
    sets = [wvars[s * n:(s + 1) * n] for s in range(params.sets)]
    if not params.shared_across_iterations and params.sets != k:
        raise ValueError(f"{params.sets} weight sets for {k} iterations")
    yvars = [ad.leaf(y[None], name=f"y{i}") for i, y in enumerate(term.ys)]
    pred = unrolled_graph(sets, term, yvars, alpha, k, params.arch, training, rng)
    loss = ad.sq_error(pred, np.asarray(target, dtype=float)[None])
    ad.backward(loss)
    zero = np.zeros
    return Gradients(
        loss=float(loss.value),
        weights=[w.grad if w.grad is not None else zero(w.value.shape) for w in wvars],
        inputs=[y.grad[0] if y.grad is not None else zero(y.value.shape[1:]) for y in yvars],
        prediction=pred.value[0],
    )


def unrolled_reconstruct(params: ProxParams, term: DataTerm, alpha: float = 1.0, k: int = 3) -> np.ndarray:
    n = len(params.arch.tensor_shapes())
    wvars = [ad.leaf(w) for w in params.weights]
    sets = [wvars[s * n:(s + 1) * n] for s in range(params.sets)]
    yvars = [ad.leaf(y[None]) for y in term.ys]
    return unrolled_graph(sets, term, yvars, alpha, k, params.arch).value[0]


class AdamW:
    """Adam with decoupled weight decay: ``w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)``."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, weights: list, grads: list, lr: float, weight_decay: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0:
                continue
            w -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * w)


def _sample_term(pair, patch_dims, rng) -> tuple:
    """Data term and target for one pair, cropped to a random patch when requested."""
    full = tuple(np.shape(pair.x_c))
    if patch_dims is None or tuple(patch_dims) == full:
        return DataTerm([pair.op], [pair.y]), pair.x_c
    if any(p > f for p, f in zip(patch_dims, full)):
        raise ValueError(f"patch {patch_dims} larger than volume {full}")
    offset = tuple(int(rng.integers(0, f - p + 1)) for p, f in zip(patch_dims, full))
    pad = PadSpec(patch_dims, offset, full)
    return DataTerm([pair.op], [crop(pair.y, pad)], pad), crop(pair.x_c, pad)


def train(dataset: Sequence, cfg: TrainConfig, seed: Optional[int] = None,
          init: Optional[ProxParams] = None, callback=None) -> tuple[ProxParams, list]:
    """Minimize the mean unrolled reconstruction loss over ``dataset``.

    Returns the trained parameters and one mean per-pair loss per epoch.
    Everything random (init, shuffling, patch placement, dropout) derives
    from ``seed`` (``cfg.seed`` by default).
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    shape = np.shape(dataset[0].x_c)
    for i, p in enumerate(dataset):
        if np.shape(p.x_c) != shape or np.shape(p.y) != shape or p.op.grid.dims != shape:
            raise ValueError(f"pair {i} has inconsistent grids")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(
        cfg.arch, rng, cfg.shared_across_iterations, cfg.unroll_k)
    params.meta.update(unroll_k=cfg.unroll_k, alpha=cfg.alpha)
    opt = AdamW([w.shape for w in params.weights])
    history = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(dataset))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            acc = [np.zeros(w.shape) for w in params.weights]
            for j in batch:
                term, target = _sample_term(dataset[j], cfg.patch_dims, rng)
                g = loss_and_grads(params, term, target, cfg.alpha, cfg.unroll_k, training=True, rng=rng)
                if not np.isfinite(g.loss) or not all(np.all(np.isfinite(a)) for a in g.weights):
                    raise DivergenceError(f"non-finite loss or gradient at epoch {epoch + 1}, step {step + 1}")
                losses.append(g.loss)
                for a, gw in zip(acc, g.weights):
                    a += gw
            opt.step(params.weights, [a / len(batch) for a in acc], lr, cfg.weight_decay)
        history.append(float(np.mean(losses)))
        log.info("epoch %d  lr=%.2e  loss=%.6e", epoch + 1, lr, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return params, history
