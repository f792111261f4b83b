"""Consistency losses between the attention maps of two augmented views.

Given per-layer attention matrices A (plain view) and A' (transformed
view), each A' is first mapped back into the plain view's token order
(`invert_attention`), then compared block-wise:

  * activation loss  -- class-to-patch rows  A[0, 1:]
  * affinity loss    -- patch-to-patch block A[1:, 1:]

Distances reduce by mean over block elements so the weights are
resolution-independent, and layers are averaged. Everything is built
from tape ops, so gradients reach both branches' parameters, including
through the inversion's re-indexing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .gridtransform import GridShape, SpatialTransform, invert_attention

DISTANCES = ("l1", "l2", "smooth_l1")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the two consistency terms and the distance they use.

    ``total = l_cls + alpha * l_act + beta * l_aff``.
    """

    alpha: float = 100.0
    beta: float = 100.0
    distance: str = "l1"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError(f"loss weights must be >= 0, got alpha={self.alpha}, "
                                f"beta={self.beta}")
        if self.distance not in DISTANCES:
            raise ContractError(f"distance must be one of {DISTANCES}, got {self.distance!r}")


@dataclass
class LossBreakdown:
    """Scalar tape tensors; backward on .total trains the model."""

    l_cls: Tensor
    l_act: Tensor
    l_aff: Tensor
    total: Tensor

    def to_floats(self) -> dict[str, float]:
        return {"l_cls": float(self.l_cls.data), "l_act": float(self.l_act.data),
                "l_aff": float(self.l_aff.data), "total": float(self.total.data)}


def _distance(x: Tensor, y: Tensor, distance: str) -> Tensor:
    if distance == "l1":
        return ad.abs_mean(x, y)
    if distance == "l2":
        diff = ad.sub(x, y)
        return ad.mean(ad.mul(diff, diff))
    if distance == "smooth_l1":
        return ad.smooth_l1_mean(x, y)
    raise ContractError(f"distance must be one of {DISTANCES}, got {distance!r}")


def _check_layers(a_layers, a_prime_layers, grid: GridShape) -> int:
    if len(a_layers) == 0 or len(a_layers) != len(a_prime_layers):
        raise DimensionError(f"need equal nonzero layer counts, got {len(a_layers)} "
                             f"and {len(a_prime_layers)}")
    m = grid.n + 1
    for i, a in enumerate(a_layers):
        if a.shape != (m, m):
            raise DimensionError(f"layer {i}: expected {(m, m)} attention for grid "
                                 f"{grid}, got {a.shape}")
    return len(a_layers)


def _block_loss(a_layers: Sequence[Tensor], a_prime_layers: Sequence[Tensor],
                transform: SpatialTransform, grid: GridShape, distance: str,
                r0: int, c0: int) -> Tensor:
    """Mean distance between a block of A and the same block of the
    back-transformed A', averaged over layers. (r0, c0) selects the
    block corner: (0, 1) = class-to-patch row, (1, 1) = patch block."""
    layers = _check_layers(a_layers, a_prime_layers, grid)
    total = None
    for a, ap in zip(a_layers, a_prime_layers):
        back = invert_attention(ap, transform, grid)
        lhs = ad.slice2d(a, r0, 1 if r0 == 0 else None, c0, None)
        rhs = ad.slice2d(back, r0, 1 if r0 == 0 else None, c0, None)
        term = _distance(lhs, rhs, distance)
        total = term if total is None else ad.add(total, term)
    return total if layers == 1 else ad.mul(total, 1.0 / layers)


def region_activation_loss(a_layers: Sequence[Tensor], a_prime_layers: Sequence[Tensor],
                           transform: SpatialTransform, grid: GridShape,
                           distance: str = "l1") -> Tensor:
    """Consistency of the class token's attention over patches: compares
    A[0, 1:] against the back-transformed A'[0, 1:] per layer."""
    return _block_loss(a_layers, a_prime_layers, transform, grid, distance, 0, 1)


def region_affinity_loss(a_layers: Sequence[Tensor], a_prime_layers: Sequence[Tensor],
                         transform: SpatialTransform, grid: GridShape,
                         distance: str = "l1") -> Tensor:
    """Consistency of patch-to-patch affinities: compares A[1:, 1:]
    against the back-transformed A'[1:, 1:] per layer."""
    return _block_loss(a_layers, a_prime_layers, transform, grid, distance, 1, 1)


def classification_loss(logits: Tensor, logits_prime: Tensor, targets) -> Tensor:
    """Mean of BCE-with-logits over the two views (multi-hot targets)."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float64))
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} != logits shape {logits.shape}")
    both = ad.add(ad.bce_with_logits(logits, t), ad.bce_with_logits(logits_prime, t))
    return ad.mul(both, 0.5)


def total_loss(logits: Tensor, logits_prime: Tensor, targets,
               act: Tensor, aff: Tensor, weights: LossWeights) -> LossBreakdown:
    """Weighted objective: classification + alpha * activation
    consistency + beta * affinity consistency."""
    l_cls = classification_loss(logits, logits_prime, targets)
    total = l_cls
    if weights.alpha != 0.0:
        total = ad.add(total, ad.mul(act, weights.alpha))
    if weights.beta != 0.0:
        total = ad.add(total, ad.mul(aff, weights.beta))
    return LossBreakdown(l_cls=l_cls, l_act=act, l_aff=aff, total=total)
