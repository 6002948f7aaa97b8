"""Residual 3D CNN used as the learned proximal map.

Layout (pre-activation wide-ResNet style)::

    h = stem(z)                                   1 -> width
    h = h + conv_b2(drop(act(conv_b1(act(h)))))   repeated `blocks` times
    out = z + head(act(h))                        width -> 1

The second conv of every block and the head start at zero, so a freshly
initialized network is exactly the identity map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ArchSpec:
    blocks: int = 4
    width: int = 16
    kernel: int = 3
    activation: str = "leaky_relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.blocks < 1 or self.width < 1:
            raise ValueError(f"blocks and width must be >= 1, got {self.blocks}, {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"choose from {sorted(ad.ACTIVATIONS)}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def tensor_shapes(self) -> list:
        """Shapes of one weight set in declaration order."""
        k, w = self.kernel, self.width
        shapes = [(w, 1, k, k, k), (w,)]
        for _ in range(self.blocks):
            shapes += [(w, w, k, k, k), (w,), (w, w, k, k, k), (w,)]
        shapes += [(1, w, k, k, k), (1,)]
        return shapes

    def tensor_names(self) -> list:
        names = ["stem.w", "stem.b"]
        for i in range(self.blocks):
            names += [f"block{i}.conv1.w", f"block{i}.conv1.b", f"block{i}.conv2.w", f"block{i}.conv2.b"]
        return names + ["head.w", "head.b"]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProxParams:
    """Network weights; ``sets`` is 1 when shared across iterations, else one per iteration."""

    arch: ArchSpec
    weights: list
    shared_across_iterations: bool = True
    sets: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.shared_across_iterations and self.sets != 1:
            raise ValueError("shared parameters must have exactly one weight set")
        expected = self.arch.tensor_shapes() * self.sets
        if len(self.weights) != len(expected):
            raise ValueError(f"expected {len(expected)} tensors for {self.arch}, got {len(self.weights)}")
        for i, (w, s) in enumerate(zip(self.weights, expected)):
            if tuple(w.shape) != s:
                raise ValueError(f"tensor {i} has shape {tuple(w.shape)}, arch expects {s}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"tensor {i} has non-finite entries")

    def weight_set(self, iteration: int = 0) -> list:
        n = len(self.arch.tensor_shapes())
        s = 0 if self.shared_across_iterations else iteration
        if s >= self.sets:
            raise ValueError(f"no weight set for iteration {iteration} (have {self.sets})")
        return self.weights[s * n:(s + 1) * n]

    def copy(self) -> "ProxParams":
        return ProxParams(self.arch, [w.copy() for w in self.weights],
                          self.shared_across_iterations, self.sets, dict(self.meta))


def init_params(arch: ArchSpec, rng, shared: bool = True, unroll_k: int = 1) -> ProxParams:
    """Fan-in scaled uniform weights; residual-branch outputs and head at zero."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sets = 1 if shared else unroll_k
    weights = []
    for _ in range(sets):
        for name, shape in zip(arch.tensor_names(), arch.tensor_shapes()):
            if name.endswith(".b") or name.startswith("head") or "conv2" in name:
                weights.append(np.zeros(shape))
            else:
                bound = np.sqrt(3.0 / np.prod(shape[1:]))
                weights.append(rng.uniform(-bound, bound, size=shape))
    return ProxParams(arch, weights, shared, sets)


def zero_params(arch: ArchSpec) -> ProxParams:
    return ProxParams(arch, [np.zeros(s) for s in arch.tensor_shapes()])


def prox_graph(weights: list, z: ad.Var, arch: ArchSpec, training=False, rng=None,
               probe: Optional[list] = None) -> ad.Var:
    """Record ``z + net(z)`` on the tape; ``z`` has shape (1, nx, ny, nz).

    When ``probe`` is a list, the output of every layer is appended to it.
    """
    act = ad.ACTIVATIONS[arch.activation]
    it = iter(weights)
    h = ad.conv3d(z, next(it), next(it))
    if probe is not None:
        probe.append(h)
    for _ in range(arch.blocks):
        w1, b1, w2, b2 = next(it), next(it), next(it), next(it)
        t = act(ad.conv3d(act(h), w1, b1))
        if probe is not None:
            probe.append(t)
        if training and arch.dropout_rate > 0:
            t = ad.dropout(t, arch.dropout_rate, rng)
        h = ad.add(h, ad.conv3d(t, w2, b2))
        if probe is not None:
            probe.append(h)
    out = ad.add(z, ad.conv3d(act(h), next(it), next(it)))
    if probe is not None:
        probe.append(out)
    return out


def prox_apply(params: ProxParams, z, iteration: int = 0) -> np.ndarray:
    """Evaluation-mode proximal map (dropout off)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("proximal input has non-finite entries")
    ws = [ad.leaf(w) for w in params.weight_set(iteration)]
    probe = []
    with np.errstate(over="ignore", invalid="ignore"):
        out = prox_graph(ws, ad.leaf(z[None]), params.arch, probe=probe).value[0]
    if not np.all(np.isfinite(out)):
        layer = next(i for i, v in enumerate(probe) if not np.all(np.isfinite(v.value)))
        raise FloatingPointError(f"non-finite activations in proximal network at layer {layer}")
    return out


class LearnedProx:
    """Adapter exposing trained parameters as a solver proximal map."""

    family = "learned"

    def __init__(self, params: ProxParams, iteration: Optional[int] = None):
        self.params = params
        self.iteration = iteration or 0

    def for_iteration(self, i: int) -> "LearnedProx":
        if self.params.shared_across_iterations:
            return self
        return LearnedProx(self.params, i)

    def __call__(self, z):
        return prox_apply(self.params, z, self.iteration)
