"""Gated style cross-attention.

The style embedding is projected to ``m`` key/value tokens by frozen
matrices, backbone queries attend over those tokens, and a sigmoid gate
computed from the content/style agreement is added on top of the
alpha-blend of attention output and queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    matmul,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    transpose,
)

__all__ = [
    "SimParams",
    "GateConfig",
    "init_sim_params",
    "project_style",
    "style_attention",
    "compute_gate",
    "inject_style",
]


@dataclass
class SimParams:
    w_k: Tensor  # d x (m*d)
    w_v: Tensor  # d x (m*d)
    w_g: Tensor  # d x d
    b_g: Tensor  # 1 x d
    m: int = 4

    def __post_init__(self):
        d = self.w_g.shape[0]
        if self.m < 1:
            raise ValueError(f"style token count must be >= 1, got {self.m}")
        for name, t, want in (
            ("w_k", self.w_k, (d, self.m * d)),
            ("w_v", self.w_v, (d, self.m * d)),
            ("w_g", self.w_g, (d, d)),
            ("b_g", self.b_g, (1, d)),
        ):
            if t.shape != want:
                raise ShapeError(f"SimParams.{name}: expected {want}, got {t.shape}")

    @property
    def width(self) -> int:
        return self.w_g.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"w_k": self.w_k, "w_v": self.w_v, "w_g": self.w_g, "b_g": self.b_g}


@dataclass(frozen=True)
class GateConfig:
    """``mode`` is "learned" or "fixed"; ``constant`` is used only when fixed."""

    alpha: float = 0.5
    mode: str = "learned"
    constant: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in ("learned", "fixed"):
            raise ValueError(f"gate mode must be 'learned' or 'fixed', got {self.mode!r}")

    @classmethod
    def fixed(cls, constant: float, alpha: float = 0.5) -> "GateConfig":
        return cls(alpha=alpha, mode="fixed", constant=constant)


def init_sim_params(d: int, m: int, rng: np.random.Generator) -> SimParams:
    """Scaled-normal style projections (std 1/sqrt(d)); neutral zero gate."""
    std = 1.0 / math.sqrt(d)
    return SimParams(
        w_k=Tensor(rng.normal(0.0, std, (d, m * d))),
        w_v=Tensor(rng.normal(0.0, std, (d, m * d))),
        w_g=Tensor(np.zeros((d, d))),
        b_g=Tensor(np.zeros((1, d))),
        m=m,
    )


def _row(e, d: int, what: str) -> Tensor:
    t = as_tensor(e)
    if t.data.ndim == 1:
        t = reshape(t, (1, t.shape[0]))
    if t.shape != (1, d):
        raise ShapeError(f"{what}: expected width {d}, got shape {t.shape}")
    return t


def project_style(e_r, params: SimParams) -> tuple[Tensor, Tensor]:
    """Style keys and values, each ``m x d``."""
    d, m = params.width, params.m
    e = _row(e_r, d, "project_style")
    k = reshape(matmul(e, params.w_k), (m, d))
    v = reshape(matmul(e, params.w_v), (m, d))
    return k, v


def style_attention(q: Tensor, k_r: Tensor, v_r: Tensor) -> Tensor:
    if q.data.ndim != 2 or k_r.shape[1] != q.shape[1] or v_r.shape != k_r.shape:
        raise ShapeError(
            f"style_attention: widths disagree, Q {q.shape}, K {k_r.shape}, V {v_r.shape}"
        )
    d = q.shape[1]
    logits = scale(matmul(q, transpose(k_r)), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(logits), v_r)


def compute_gate(e_c, e_r, params: SimParams, cfg: GateConfig) -> Tensor:
    """Gate row ``1 x d``.  Fixed mode puts no parameters on the tape."""
    d = params.width
    if cfg.mode == "fixed":
        return Tensor(np.full((1, d), float(cfg.constant)))
    agree = mul(_row(e_c, d, "compute_gate e_c"), _row(e_r, d, "compute_gate e_r"))
    return sigmoid(add(matmul(agree, params.w_g), params.b_g))


def inject_style(q: Tensor, e_c, e_r, params: SimParams, cfg: GateConfig, gate: Tensor | None = None) -> Tensor:
    """``alpha * A_R + (1 - alpha) * Q + g`` with ``g`` spread over the query rows.

    Pass ``gate`` to reuse an already computed gate (the pipeline collects
    gates for the regularizer).
    """
    if q.data.ndim != 2 or q.shape[1] != params.width:
        raise ShapeError(f"inject_style: query shape {q.shape} does not match width {params.width}")
    k_r, v_r = project_style(e_r, params)
    a_r = style_attention(q, k_r, v_r)
    g = compute_gate(e_c, e_r, params, cfg) if gate is None else gate
    blended = add(scale(a_r, cfg.alpha), scale(q, 1.0 - cfg.alpha))
    return add(blended, g)
