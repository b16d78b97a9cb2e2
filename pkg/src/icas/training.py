"""Partial fine-tuning: parameter partitions, AdamW, denoising loss, checkpoints.

Checkpoint layout (all integers little-endian)::

    b"ICAS1\\n"
    u64 entry count
    per entry: u64 name length, UTF-8 name, u8 dtype code (1 = f64),
               u64 rank, rank x u64 extents, row-major f64 payload
    32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .content_cycling import ContentEmbeddingList, extract_content_embeddings
from .numerics import NonFiniteError, Tensor, add, mean, mse, scale, square, sub
from .pipeline import (
    BACKBONE,
    CONTENT,
    GATE,
    SPM,
    STYLE,
    Conditions,
    IcasModel,
    NoiseSchedule,
    forward,
    param_group,
)
from . import synthdata

__all__ = [
    "PRESETS",
    "ParameterPartition",
    "PartitionBreach",
    "TrainConfig",
    "AdamW",
    "Example",
    "LossParts",
    "TrainResult",
    "make_example",
    "make_batch",
    "loss",
    "train",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "param_hashes",
    "write_loss_curve",
    "CheckpointError",
    "content_conditions",
    "item_conditions",
    "evaluation_batch",
    "parse_checkpoint",
    "model_from_checkpoint",
]

FROZEN = "frozen"
TRAINABLE = "trainable"

PRESETS: dict[str, frozenset[str]] = {
    "content_only": frozenset({CONTENT, GATE, SPM}),
    "full_finetune": frozenset({CONTENT, GATE, STYLE, SPM}),
    "no_finetune": frozenset(),
    # base-model stand-in: everything except the structure projection
    "base": frozenset({BACKBONE, STYLE, CONTENT, GATE}),
    # every parameter, backbone included; used by the gradient suite
    "all": frozenset({CONTENT, GATE, STYLE, SPM, BACKBONE}),
}


class PartitionBreach(RuntimeError):
    """A frozen parameter received a gradient or optimizer state."""


@dataclass(frozen=True)
class ParameterPartition:
    preset: str
    labels: dict[str, str]

    @classmethod
    def from_preset(cls, model: IcasModel, preset: str) -> "ParameterPartition":
        try:
            groups = PRESETS[preset]
        except KeyError:
            raise ValueError(f"unknown partition preset {preset!r}; choose from {sorted(PRESETS)}") from None
        labels = {n: TRAINABLE if param_group(n) in groups else FROZEN for n in model.params}
        return cls(preset, labels)

    def apply(self, model: IcasModel) -> None:
        if set(self.labels) != set(model.params):
            missing = set(model.params) ^ set(self.labels)
            raise PartitionBreach(f"partition does not cover the model exactly: {sorted(missing)[:5]}")
        for n, t in model.params.items():
            t.requires_grad = self.labels[n] == TRAINABLE
            t.grad = None

    @property
    def trainable(self) -> list[str]:
        return [n for n, lab in self.labels.items() if lab == TRAINABLE]

    @property
    def frozen(self) -> list[str]:
        return [n for n, lab in self.labels.items() if lab == FROZEN]

    def trainable_count(self, model: IcasModel) -> int:
        return int(sum(model.params[n].data.size for n in self.trainable))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    lambda_gate: float = 1e-3
    batch_size: int = 4
    steps: int = 200
    seed: int = 0
    preset: str = "content_only"
    multi_embed: bool = True
    augment: bool = True
    fixed_batch: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning_rate must be > 0, batch_size >= 1, steps >= 0")
        if self.lambda_gate < 0:
            raise ValueError("lambda_gate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown partition preset {self.preset!r}")


class AdamW:
    """Adam with decoupled weight decay; state is kept for trainable names only."""

    def __init__(self, partition: ParameterPartition, cfg: TrainConfig):
        self.partition = partition
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @property
    def state_names(self) -> set[str]:
        return set(self.m)

    def step(self, model: IcasModel) -> None:
        cfg = self.cfg
        for n in self.partition.frozen:
            if model.params[n].grad is not None:
                raise PartitionBreach(f"frozen parameter {n} received a gradient")
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for n in self.partition.trainable:
            p = model.params[n]
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            decayed = p.data * (1.0 - cfg.learning_rate * cfg.weight_decay)
            p.data = decayed - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        extra = self.state_names - set(self.partition.trainable)
        if extra:
            raise PartitionBreach(f"optimizer state held for frozen parameters {sorted(extra)}")


# ---------------------------------------------------------------------------
# data and loss


@dataclass
class Example:
    x0: np.ndarray
    noise: np.ndarray
    t: int
    cond: Conditions
    image_id: str = ""

    def x_t(self, schedule: NoiseSchedule) -> np.ndarray:
        return schedule.corrupt(self.x0, self.noise, self.t)


def content_conditions(content: synthdata.SyntheticImage, d: int, multi_embed: bool) -> ContentEmbeddingList:
    """Per-subject embeddings (multi) or one whole-image embedding (single)."""
    if multi_embed:
        return extract_content_embeddings(content, content.subject_masks, lambda im, m: synthdata.encode_content(im, m, d))
    return ContentEmbeddingList.of([synthdata.encode_content(content, None, d)], ["whole"])


def item_conditions(item: synthdata.CorpusItem, model: IcasModel, multi_embed: bool, content=None) -> Conditions:
    cfg = model.config
    content = item.content if content is None else content
    return Conditions(
        content=content_conditions(content, cfg.width, multi_embed),
        style=synthdata.encode_style(item.style_ref, cfg.width),
        structure=synthdata.encode_structure(content, cfg.height),
    )


def make_example(
    item: synthdata.CorpusItem,
    model: IcasModel,
    rng: np.random.Generator,
    multi_embed: bool = True,
    augment: bool = False,
) -> Example:
    cfg = model.config
    content, target = item.content, item.target
    if augment:
        if rng.random() < 0.5:
            content, target = synthdata.flip_horizontal(content), synthdata.flip_horizontal(target)
        if rng.random() < 0.5:
            content = synthdata.color_jitter(content, rng)
    t = int(rng.integers(1, cfg.steps + 1))
    noise = rng.normal(size=(cfg.tokens, cfg.width))
    x0 = synthdata.encode_latent(target, cfg.width, cfg.height)
    return Example(x0, noise, t, item_conditions(item, model, multi_embed, content), item.image_id)


def make_batch(
    corpus: Sequence[synthdata.CorpusItem],
    model: IcasModel,
    rng: np.random.Generator,
    size: int,
    multi_embed: bool = True,
    augment: bool = False,
) -> list[Example]:
    idx = rng.integers(0, len(corpus), size)
    return [make_example(corpus[int(i)], model, rng, multi_embed, augment) for i in idx]


@dataclass
class LossParts:
    total: Tensor
    mse: float
    gate_reg: float

    @property
    def value(self) -> float:
        return self.total.item()


def loss(batch: Sequence[Example], model: IcasModel, cfg: TrainConfig, schedule: NoiseSchedule | None = None) -> LossParts:
    """``MSE(eps_hat, noise) + lambda_gate * mean((g - 0.5)^2)`` averaged over the batch.

    The regularizer averages over every learned gate site of every example.
    """
    schedule = schedule or NoiseSchedule.cosine(model.config.steps)
    recon_terms, reg_terms = [], []
    for ex in batch:
        eps_hat, gates = forward(model, ex.x_t(schedule), ex.t, ex.cond, return_gates=True)
        recon_terms.append(mse(eps_hat, Tensor(ex.noise)))
        for g in gates:
            reg_terms.append(mean(square(sub(g, Tensor(np.full(g.shape, 0.5))))))
    recon = _average(recon_terms)
    total = recon
    reg_value = 0.0
    if reg_terms:
        reg = _average(reg_terms)
        reg_value = reg.item()
        if cfg.lambda_gate > 0:
            total = add(recon, scale(reg, cfg.lambda_gate))
    if not math.isfinite(total.item()):
        raise NonFiniteError(f"non-finite loss (mse={recon.item()}, gate_reg={reg_value})")
    return LossParts(total, recon.item(), reg_value)


def _average(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: IcasModel
    partition: ParameterPartition
    optimizer: AdamW
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    init_hashes: dict[str, str] = field(default_factory=dict)
    final_hashes: dict[str, str] = field(default_factory=dict)
    eval_loss: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.eval_loss


def evaluation_batch(corpus, model: IcasModel, cfg: TrainConfig) -> list[Example]:
    """Fixed held-out batch: independent of the training stream, identical across presets."""
    rng = np.random.default_rng([cfg.seed, 0xE7A1])
    return make_batch(corpus, model, rng, max(cfg.batch_size, 8), cfg.multi_embed, augment=False)


def train(model: IcasModel, corpus: Sequence[synthdata.CorpusItem], cfg: TrainConfig) -> TrainResult:
    """Train a copy of ``model`` under ``cfg.preset``; the input model is left untouched.

    The data stream depends only on ``cfg.seed``, so presets trained with the
    same seed see identical batches.
    """
    model = model.copy()
    partition = ParameterPartition.from_preset(model, cfg.preset)
    partition.apply(model)
    opt = AdamW(partition, cfg)
    schedule = NoiseSchedule.cosine(model.config.steps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, partition, opt, init_hashes=param_hashes(model.params))
    fixed = make_batch(corpus, model, rng, cfg.batch_size, cfg.multi_embed, cfg.augment) if cfg.fixed_batch else None
    for step in range(cfg.steps):
        batch = fixed if fixed is not None else make_batch(corpus, model, rng, cfg.batch_size, cfg.multi_embed, cfg.augment)
        model.zero_grad()
        parts = loss(batch, model, cfg, schedule)
        parts.total.backward()
        result.curve.append((step, parts.value, parts.mse, parts.gate_reg))
        opt.step(model)
    model.zero_grad()
    result.eval_loss = loss(evaluation_batch(corpus, model, cfg), model, cfg, schedule).value
    result.final_hashes = param_hashes(model.params)
    return result


def write_loss_curve(path, curve: Sequence[tuple[int, float, float, float]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "mse", "gate_reg"])
    for step, total, recon, reg in curve:
        w.writerow([step, repr(total), repr(recon), repr(reg)])
    synthdata._atomic_write(Path(path), buf.getvalue().encode())


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ICAS1\n"
DTYPE_F64 = 1


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def param_hashes(params: Mapping[str, Tensor | np.ndarray]) -> dict[str, str]:
    return {n: hashlib.sha256(np.ascontiguousarray(_array(v), dtype="<f8").tobytes()).hexdigest() for n, v in params.items()}


def checkpoint_bytes(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<Q", len(params))
    for name, value in params.items():
        arr = np.ascontiguousarray(_array(value), dtype="<f8")
        raw_name = name.encode("utf-8")
        out += struct.pack("<Q", len(raw_name)) + raw_name
        out += struct.pack("<BQ", DTYPE_F64, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    payload = checkpoint_bytes(params)
    synthdata._atomic_write(Path(path), payload)
    return payload


class CheckpointError(ValueError):
    pass


def parse_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    try:
        return _parse_checkpoint(raw)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def _parse_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < len(MAGIC) + 8 + 32 or not raw.startswith(MAGIC):
        raise CheckpointError("not an ICAS1 checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BQ", body, pos)
        pos += 9
        if code != DTYPE_F64:
            raise CheckpointError(f"{name}: unsupported dtype code {code}")
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return params


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(raw)


def model_from_checkpoint(config, path) -> IcasModel:
    arrays = load_checkpoint(path)
    model = IcasModel(config)
    if set(arrays) != set(model.params):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for n, t in model.params.items():
        if arrays[n].shape != t.shape:
            raise CheckpointError(f"{n}: checkpoint shape {arrays[n].shape} != model shape {t.shape}")
        t.data = arrays[n]
    return model
