"""Structure residual branch.

A per-cell two-layer projection turns the structure feature map into a
residual over the token grid, which is added to backbone features scaled by
``gamma``.  The output layer starts at zero so the branch is inert until it
has been trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, Tensor, add, as_tensor, matmul, scale, sigmoid

__all__ = ["SpmParams", "StructureScale", "init_spm_params", "project_residual", "inject_structure"]

DEFAULT_GAMMA = 0.7


@dataclass
class SpmParams:
    phi_w1: Tensor  # d_s x d_h
    phi_b1: Tensor  # 1 x d_h
    phi_w2: Tensor  # d_h x d
    phi_b2: Tensor  # 1 x d

    def __post_init__(self):
        d_s, d_h = self.phi_w1.shape
        d = self.phi_w2.shape[1]
        if self.phi_b1.shape != (1, d_h) or self.phi_w2.shape[0] != d_h or self.phi_b2.shape != (1, d):
            raise ShapeError(
                "SpmParams: inconsistent shapes "
                f"w1={self.phi_w1.shape} b1={self.phi_b1.shape} w2={self.phi_w2.shape} b2={self.phi_b2.shape}"
            )

    @property
    def in_channels(self) -> int:
        return self.phi_w1.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"phi_w1": self.phi_w1, "phi_b1": self.phi_b1, "phi_w2": self.phi_w2, "phi_b2": self.phi_b2}


@dataclass(frozen=True)
class StructureScale:
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not (self.gamma >= 0.0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be a finite value >= 0, got {self.gamma}")


def init_spm_params(d_s: int, d: int, rng: np.random.Generator, d_h: int | None = None) -> SpmParams:
    d_h = 2 * d if d_h is None else d_h
    return SpmParams(
        phi_w1=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_s), (d_s, d_h))),
        phi_b1=Tensor(np.zeros((1, d_h))),
        phi_w2=Tensor(np.zeros((d_h, d))),
        phi_b2=Tensor(np.zeros((1, d))),
    )


def project_residual(f_s, params: SpmParams) -> Tensor:
    """Map an ``H x W x d_s`` feature grid to an ``(H*W) x d`` residual, cells row-major."""
    feat = f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s, dtype=np.float64)
    if feat.ndim != 3 or feat.shape[2] != params.in_channels:
        raise ShapeError(
            f"project_residual: feature map {feat.shape} does not match {params.in_channels} input channels"
        )
    cells = as_tensor(feat.reshape(-1, feat.shape[2]))
    hidden = sigmoid(add(matmul(cells, params.phi_w1), params.phi_b1))
    return add(matmul(hidden, params.phi_w2), params.phi_b2)


def inject_structure(f_unet: Tensor, r_s: Tensor, structure_scale: StructureScale | float) -> Tensor:
    gamma = structure_scale.gamma if isinstance(structure_scale, StructureScale) else StructureScale(structure_scale).gamma
    if f_unet.shape != r_s.shape:
        raise ShapeError(f"inject_structure: feature shape {f_unet.shape} != residual shape {r_s.shape}")
    return add(f_unet, scale(r_s, gamma))
