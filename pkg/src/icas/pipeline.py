"""Toy denoising backbone carrying the style, structure and content adapters.

The backbone is a single-resolution stack of ``blocks`` attention blocks over
``H*W`` latent tokens of width ``d``.  Each block runs, in order:

1. self-attention (frozen backbone weights)
2. content cross-attention fed by the cyclic content schedule: a single
   content key/value pair with a sigmoid per-token gate
3. gated style injection
4. structure residual injection, if the block's site mask is on
5. a SiLU MLP (frozen backbone weights)

A sinusoidal timestep embedding is added to the tokens on entry.  The final
token state is the noise prediction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .content_cycling import ContentEmbeddingList, CyclicSchedule, build_schedule, embedding_for_site
from .numerics import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    matmul,
    scale,
    sigmoid,
    silu,
    softmax_rows,
    sub,
    transpose,
)
from .structure_preservation import SpmParams, StructureScale, init_spm_params, inject_structure, project_residual
from .style_injection import GateConfig, SimParams, compute_gate, init_sim_params, inject_style
from .synthdata import IMAGE_SIZE, SyntheticImage

__all__ = [
    "BackboneConfig",
    "Conditions",
    "IcasModel",
    "NoiseSchedule",
    "forward",
    "plain_forward",
    "sample",
    "decode",
    "timestep_embedding",
    "output_digest",
]


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 8
    width_cells: int = 8
    width: int = 16  # token width d
    blocks: int = 6
    style_tokens: int = 4
    structure_channels: int = 4
    steps: int = 8
    alpha: float = 0.5
    gate_mode: str = "learned"
    gate_constant: float = 1.0
    gamma: float = 0.7
    spm_sites: tuple[bool, ...] | None = None  # None: every block
    init_seed: int = 42

    def __post_init__(self):
        for name in ("height", "width_cells", "width", "blocks", "style_tokens", "structure_channels", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.spm_sites is not None and len(self.spm_sites) != self.blocks:
            raise ValueError(f"spm_sites lists {len(self.spm_sites)} blocks, config has {self.blocks}")
        # validate the derived configs eagerly
        self.gate_config
        StructureScale(self.gamma)

    @property
    def tokens(self) -> int:
        return self.height * self.width_cells

    @property
    def gate_config(self) -> GateConfig:
        return GateConfig(alpha=self.alpha, mode=self.gate_mode, constant=self.gate_constant)

    def site_enabled(self, i: int) -> bool:
        return True if self.spm_sites is None else bool(self.spm_sites[i])

    def with_(self, **changes) -> "BackboneConfig":
        return replace(self, **changes)


@dataclass
class Conditions:
    """Per-sample conditioning.

    ``content`` may be a bare embedding (no schedule is built) or a
    :class:`ContentEmbeddingList` cycled over the blocks.
    """

    content: ContentEmbeddingList | np.ndarray
    style: np.ndarray
    structure: np.ndarray | None = None

    def schedule(self, num_sites: int) -> CyclicSchedule | None:
        if isinstance(self.content, ContentEmbeddingList):
            return build_schedule(len(self.content), num_sites)
        return None

    def content_for_site(self, schedule: CyclicSchedule | None, site: int) -> np.ndarray:
        if schedule is None:
            return np.asarray(self.content, dtype=np.float64)
        return embedding_for_site(schedule, self.content, site)


BACKBONE = "backbone"
CONTENT = "content"
GATE = "gate"
STYLE = "style"
SPM = "spm"


class IcasModel:
    """Named parameters of the backbone and its adapters.

    Names are ``blocks.{i}.{attn,content,sim,mlp}.*`` and ``spm.*``; the
    iteration order of :attr:`params` is fixed at construction and is the
    checkpoint order.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config)

    def copy(self) -> "IcasModel":
        return IcasModel(self.config, {k: Tensor(v.data, v.requires_grad) for k, v in self.params.items()})

    def with_config(self, config: BackboneConfig) -> "IcasModel":
        """Share parameters under different inference settings (alpha, gamma, gate mode)."""
        if (config.width, config.blocks, config.style_tokens, config.structure_channels) != (
            self.config.width,
            self.config.blocks,
            self.config.style_tokens,
            self.config.structure_channels,
        ):
            raise ValueError("parameter shapes differ between configs")
        return IcasModel(config, self.params)

    def sim(self, i: int) -> SimParams:
        p = self.params
        return SimParams(
            p[f"blocks.{i}.sim.w_k"], p[f"blocks.{i}.sim.w_v"], p[f"blocks.{i}.sim.w_g"], p[f"blocks.{i}.sim.b_g"],
            m=self.config.style_tokens,
        )

    @property
    def spm(self) -> SpmParams:
        p = self.params
        return SpmParams(p["spm.phi_w1"], p["spm.phi_b1"], p["spm.phi_w2"], p["spm.phi_b2"])

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def param_group(name: str) -> str:
    """Which adapter family a parameter belongs to."""
    if name.startswith("spm."):
        return SPM
    parts = name.split(".")
    if len(parts) != 4 or parts[0] != "blocks" or parts[2] not in ("attn", "content", "sim", "mlp"):
        raise ValueError(f"unrecognized parameter name {name!r}")
    if parts[2] == "content":
        return CONTENT
    if parts[2] == "sim":
        return GATE if parts[3] in ("w_g", "b_g") else STYLE
    return BACKBONE


def _init_params(cfg: BackboneConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.init_seed)
    d = cfg.width
    std = 1.0 / math.sqrt(d)
    params: dict[str, Tensor] = {}
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        for n in ("w_q", "w_k", "w_v"):
            params[pre + "attn." + n] = Tensor(rng.normal(0.0, std, (d, d)))
        params[pre + "attn.w_o"] = Tensor(rng.normal(0.0, 0.5 * std, (d, d)))
        params[pre + "content.w_kc"] = Tensor(rng.normal(0.0, std, (d, d)))
        params[pre + "content.w_vc"] = Tensor(rng.normal(0.0, 0.5 * std, (d, d)))
        params[pre + "content.b_c"] = Tensor(np.zeros((1, 1)))
        sim = init_sim_params(d, cfg.style_tokens, rng)
        for n, t in sim.named().items():
            params[pre + "sim." + n] = t
        params[pre + "mlp.w1"] = Tensor(rng.normal(0.0, std, (d, 2 * d)))
        params[pre + "mlp.b1"] = Tensor(np.zeros((1, 2 * d)))
        params[pre + "mlp.w2"] = Tensor(rng.normal(0.0, 0.5 / math.sqrt(2 * d), (2 * d, d)))
        params[pre + "mlp.b2"] = Tensor(np.zeros((1, d)))
    for n, t in init_spm_params(cfg.structure_channels, d, rng).named().items():
        params["spm." + n] = t
    for n, t in params.items():
        t.name = n
    return params


def timestep_embedding(t: int, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    emb = np.zeros(d)
    emb[:half] = np.sin(t * freqs)
    emb[half : 2 * half] = np.cos(t * freqs)
    return 0.1 * emb.reshape(1, d)


def _entry_code(t: int, cfg: BackboneConfig) -> Tensor:
    # added on entry and removed on exit so the residual stream predicts noise, not noise plus code
    return Tensor(timestep_embedding(t, cfg.width))


def _row(v: np.ndarray) -> Tensor:
    return Tensor(np.asarray(v, dtype=np.float64).reshape(1, -1))


def _self_attention(h: Tensor, p: dict[str, Tensor], pre: str, d: int) -> Tensor:
    q = matmul(h, p[pre + "w_q"])
    k = matmul(h, p[pre + "w_k"])
    v = matmul(h, p[pre + "w_v"])
    att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    return add(h, matmul(matmul(att, v), p[pre + "w_o"]))


def _content_attention(h: Tensor, e_c: Tensor, p: dict[str, Tensor], pre: str, d: int) -> Tensor:
    k = matmul(e_c, p[pre + "w_kc"])
    v = matmul(e_c, p[pre + "w_vc"])
    weight = sigmoid(add(scale(matmul(h, transpose(k)), 1.0 / math.sqrt(d)), p[pre + "b_c"]))
    return add(h, matmul(weight, v))


def _mlp(h: Tensor, p: dict[str, Tensor], pre: str) -> Tensor:
    hidden = silu(add(matmul(h, p[pre + "w1"]), p[pre + "b1"]))
    return add(h, add(matmul(hidden, p[pre + "w2"]), p[pre + "b2"]))


def _check_inputs(x_t: Tensor, cond: Conditions, cfg: BackboneConfig) -> None:
    if x_t.shape != (cfg.tokens, cfg.width):
        raise ShapeError(f"x_t has shape {x_t.shape}, config wants {(cfg.tokens, cfg.width)}")
    if np.asarray(cond.style).reshape(-1).shape[0] != cfg.width:
        raise ShapeError(f"style embedding width {np.asarray(cond.style).size} != {cfg.width}")
    if cond.structure is not None:
        want = (cfg.height, cfg.width_cells, cfg.structure_channels)
        if np.shape(cond.structure) != want:
            raise ShapeError(f"structure condition shape {np.shape(cond.structure)} != {want}")


def forward(
    model: IcasModel,
    x_t: Tensor | np.ndarray,
    t: int,
    cond: Conditions,
    return_gates: bool = False,
):
    """Noise prediction ``eps_hat`` (``N x d``); optionally also the per-block gates."""
    cfg = model.config
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    _check_inputs(x_t, cond, cfg)
    if not 0 <= t <= cfg.steps:
        raise ValueError(f"timestep {t} outside [0, {cfg.steps}]")
    d, p = cfg.width, model.params
    schedule = cond.schedule(cfg.blocks)
    gate_cfg = cfg.gate_config
    e_s = _row(cond.style)
    residual = None
    if cond.structure is not None and any(cfg.site_enabled(i) for i in range(cfg.blocks)):
        residual = project_residual(cond.structure, model.spm)

    gates: list[Tensor] = []
    code = _entry_code(t, cfg)
    h = add(x_t, code)
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        e_c = _row(cond.content_for_site(schedule, i))
        h = _self_attention(h, p, pre + "attn.", d)
        h = _content_attention(h, e_c, p, pre + "content.", d)
        sim = model.sim(i)
        g = compute_gate(e_c, e_s, sim, gate_cfg)
        if gate_cfg.mode == "learned":
            gates.append(g)
        h = inject_style(h, e_c, e_s, sim, gate_cfg, gate=g)
        if residual is not None and cfg.site_enabled(i):
            h = inject_structure(h, residual, StructureScale(cfg.gamma))
        h = _mlp(h, p, pre + "mlp.")
    eps_hat = sub(h, code)
    return (eps_hat, gates) if return_gates else eps_hat


def plain_forward(model: IcasModel, x_t: Tensor | np.ndarray, t: int, content: np.ndarray) -> Tensor:
    """The backbone with self- and content attention only: no style, structure or cycling."""
    cfg = model.config
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    d, p = cfg.width, model.params
    e_c = _row(content)
    code = _entry_code(t, cfg)
    h = add(x_t, code)
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        h = _self_attention(h, p, pre + "attn.", d)
        h = _content_attention(h, e_c, p, pre + "content.", d)
        h = _mlp(h, p, pre + "mlp.")
    return sub(h, code)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative signal ratios; ``alpha_bar[0] == 1`` and strictly decreasing."""

    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar)
        if ab.size < 2 or ab[0] != 1.0 or not (np.diff(ab) < 0).all() or ab[-1] <= 0:
            raise ValueError("alpha_bar must start at 1, decrease strictly and stay positive")

    @classmethod
    def cosine(cls, steps: int, offset: float = 0.008, floor: float = 1e-3) -> "NoiseSchedule":
        if steps < 1:
            raise ValueError("schedule needs at least one step")
        s = np.arange(steps + 1) / steps
        f = np.cos((s + offset) / (1 + offset) * math.pi / 2) ** 2
        ab = np.maximum(f / f[0], floor)
        ab[0] = 1.0
        return cls(tuple(float(v) for v in ab))

    @property
    def steps(self) -> int:
        return len(self.alpha_bar) - 1

    def __getitem__(self, t: int) -> float:
        return self.alpha_bar[t]

    def corrupt(self, x0: np.ndarray, noise: np.ndarray, t: int) -> np.ndarray:
        ab = self.alpha_bar[t]
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def sample(
    model: IcasModel | None,
    x_T: np.ndarray,
    cond: Conditions | None,
    schedule: NoiseSchedule,
    eps_fn: EpsFn | None = None,
    clip_x0: float | None = None,
) -> np.ndarray:
    """Deterministic DDIM (eta = 0) from ``x_T`` down to ``x_0``.

    ``eps_fn(x_t, t)`` replaces the network when given.  ``clip_x0`` clamps
    each intermediate clean-latent estimate to ``[-clip_x0, clip_x0]`` and
    re-derives the noise from it; ``None`` runs the plain update.
    """
    x = np.array(x_T, dtype=np.float64)
    if eps_fn is None:
        if model is None or cond is None:
            raise ValueError("sample needs a model and conditions unless eps_fn is given")

        def eps_fn(xt, t):
            return forward(model, Tensor(xt), t, cond).data

    for t in range(schedule.steps, 0, -1):
        eps = np.asarray(eps_fn(x, t), dtype=np.float64)
        ab_t, ab_prev = schedule[t], schedule[t - 1]
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        if clip_x0 is not None:
            x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
            eps = (x - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
        with np.errstate(invalid="ignore", over="ignore"):
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
        if not np.isfinite(x).all():
            raise NonFiniteError(f"sampler produced non-finite values at step {t}")
    return x


def decode(x0: np.ndarray, height: int = 8, width: int = 8, size: int = IMAGE_SIZE) -> SyntheticImage:
    """First three latent channels to RGB: ``0.5 + 0.5 * x``, clamped, nearest-upsampled."""
    lat = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    rgb = np.clip(0.5 + 0.5 * lat[:, :3], 0.0, 1.0).reshape(height, width, 3)
    fy, fx = size // height, size // width
    return SyntheticImage(np.repeat(np.repeat(rgb, fy, axis=0), fx, axis=1))


def output_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()
