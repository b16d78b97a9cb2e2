"""Experiment orchestration: base model, fine-tuning arms, paired evaluation, outputs.

Each ``run_*`` function maps an :class:`ExperimentConfig` to a
:class:`RunReport`; :func:`emit_outputs` writes it to disk.  Everything in
``report.json`` and ``metrics.csv`` is a pure function of the config, so a
re-run overwrites them with identical bytes.  Wall-clock goes to
``timings.json`` only.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import synthdata
from .config import ConfigError, ExperimentConfig
from .content_cycling import build_schedule
from .pipeline import BackboneConfig, IcasModel, NoiseSchedule, decode, sample
from .training import (
    CheckpointError,
    TrainConfig,
    checkpoint_bytes,
    item_conditions,
    model_from_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)

__all__ = [
    "METRICS_HEADER",
    "GAMMA_GRID",
    "RunReport",
    "MetricRow",
    "run_experiment",
    "run_train",
    "run_sample",
    "run_sweep_gamma",
    "run_ablate_gate",
    "run_ablate_embed",
    "run_compare_strategies",
    "emit_outputs",
    "base_model",
    "evaluate",
    "thread_cap",
]

METRICS_HEADER = (
    "experiment",
    "variant",
    "gamma",
    "alpha",
    "k",
    "image_id",
    "structure_alignment",
    "style_distance",
    "subject_id",
    "subject_match",
)
GAMMA_GRID = (0.4, 0.5, 0.6, 0.7, 0.8)
# reserved for metrics imported from third-party systems; never produced here
EXTERNAL_VARIANT = "external"

# carried in every report.json so nobody mistakes the proxies for the real metrics
METRIC_NOTES = {
    "style_distance": "proxy: L2 between per-channel (mean, std) of output and style reference",
    "structure_alignment": "proxy: IoU of binarized edge maps against the latent-resolution content image",
    "subject_match": "proxy: edge-map cross-correlation inside each dilated subject mask",
}


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    variant: str
    gamma: float
    alpha: float
    k: int
    image_id: str
    structure_alignment: float
    style_distance: float
    subject_id: int
    subject_match: float

    def cells(self) -> list[str]:
        return [
            self.experiment,
            self.variant,
            repr(self.gamma),
            repr(self.alpha),
            str(self.k),
            self.image_id,
            repr(self.structure_alignment),
            repr(self.style_distance),
            str(self.subject_id),
            repr(self.subject_match),
        ]


@dataclass
class Evaluation:
    rows: list[MetricRow]
    noise_digest: str
    output_digest: str
    samples: dict[str, np.ndarray]

    def summary(self) -> dict:
        by_image: dict[str, MetricRow] = {}
        for r in self.rows:
            by_image.setdefault(r.image_id, r)
        per_image_var = []
        for image_id in by_image:
            scores = [r.subject_match for r in self.rows if r.image_id == image_id]
            per_image_var.append(float(np.var(scores)))
        return {
            "images": len(by_image),
            "mean_structure_alignment": _mean(r.structure_alignment for r in by_image.values()),
            "mean_style_distance": _mean(r.style_distance for r in by_image.values()),
            "mean_subject_match": _mean(r.subject_match for r in self.rows),
            "mean_subject_match_variance": _mean(per_image_var),
            "noise_sha256": self.noise_digest,
            "output_sha256": self.output_digest,
        }


@dataclass
class RunReport:
    experiment: str
    config: dict
    config_sha256: str
    inputs: dict = field(default_factory=dict)
    variants: dict[str, dict] = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    rows: list[MetricRow] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, bytes] = field(default_factory=dict)
    curves: dict[str, list] = field(default_factory=dict)
    samples: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "config_sha256": self.config_sha256,
            "inputs": self.inputs,
            "variants": self.variants,
            "audit": self.audit,
            "metrics_header": list(METRICS_HEADER),
            "metric_notes": METRIC_NOTES,
            "checkpoints": {n: hashlib.sha256(b).hexdigest() for n, b in self.checkpoints.items()},
            "files": sorted(self._files()),
        }

    def _files(self) -> list[str]:
        out = ["report.json", "metrics.csv", "timings.json"]
        out += [f"checkpoints/{n}.ck" for n in self.checkpoints]
        out += [f"loss_{n}.csv" for n in self.curves]
        out += [f"samples/{v}/{i}.ppm" for v, imgs in self.samples.items() for i in imgs]
        return out

    def summary(self, variant: str) -> dict:
        return self.variants[variant]


def _mean(values) -> float:
    vals = list(values)
    return float(np.mean(vals)) if vals else float("nan")


def _git_blob_sha1(payload: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


class _Clock:
    def __init__(self, timings: dict[str, float]):
        self.timings = timings

    def __call__(self, phase: str):
        clock = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                clock.timings[phase] = clock.timings.get(phase, 0.0) + time.perf_counter() - self.t0

        return _Phase()


def thread_cap() -> int:
    raw = os.environ.get("ICAS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ICAS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ICAS_THREADS must be a positive integer, got {raw!r}")
    return n


def _parallel(jobs: Sequence[Callable[[], object]]) -> list:
    """Run independent variant jobs; results come back in submission order."""
    cap = min(thread_cap(), len(jobs)) or 1
    if cap == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(lambda job: job(), jobs))


# ---------------------------------------------------------------------------
# models


def _inference_copy(model: IcasModel) -> IcasModel:
    out = model.copy()
    for t in out.params.values():
        t.requires_grad = False
    return out


def _pretrain_cache(cfg: ExperimentConfig) -> Path | None:
    if not cfg.pretrain.checkpoint:
        return None
    key = {"backbone": dataclasses.asdict(cfg.backbone), "pretrain": dataclasses.asdict(cfg.pretrain)}
    key["pretrain"].pop("checkpoint")
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
    path = Path(cfg.pretrain.checkpoint)
    return path.with_name(f"{path.stem}-{digest}{path.suffix or '.ck'}")


def base_model(cfg: ExperimentConfig) -> tuple[IcasModel, dict]:
    """Starting weights: an explicit checkpoint, or a pretrained stand-in base model.

    ``[pretrain] checkpoint`` names a cache; the file actually used carries a
    digest of the backbone and pretrain settings, so a changed config never
    picks up stale weights.
    """
    bb = cfg.backbone
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if not path.exists():
            raise CheckpointError(f"missing checkpoint {path}")
        model = model_from_checkpoint(bb, path)
        return model, {"source": "checkpoint", "path": str(path), "git_blob_sha1": _git_blob_sha1(path.read_bytes())}
    pre = cfg.pretrain
    model = IcasModel(bb)
    info: dict = {"source": "pretrain", "steps": pre.steps}
    if pre.steps > 0:
        cache = _pretrain_cache(cfg)
        if cache is not None and cache.exists():
            model = model_from_checkpoint(bb, cache)
        else:
            corpus = synthdata.make_corpus(pre.corpus_seed, pre.corpus_size, pre.n_subjects)
            tcfg = TrainConfig(
                preset="base",
                steps=pre.steps,
                learning_rate=pre.learning_rate,
                batch_size=pre.batch_size,
                seed=pre.corpus_seed,
                multi_embed=False,
            )
            model = train(model, corpus, tcfg).model
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(cache, model.params)
    info["git_blob_sha1"] = _git_blob_sha1(checkpoint_bytes(model.params))
    return model, info


# ---------------------------------------------------------------------------
# evaluation


def _noise(seed: int, image_index: int, draw: int, bb: BackboneConfig) -> np.ndarray:
    rng = np.random.default_rng([seed, image_index, draw])
    return rng.normal(size=(bb.tokens, bb.width))


def _reference(content: synthdata.SyntheticImage, bb: BackboneConfig) -> synthdata.SyntheticImage:
    """Content seen at latent resolution: the best a decoded sample could match."""
    px = decode(synthdata.encode_latent(content, bb.width, bb.height), bb.height, bb.width_cells).pixels
    return synthdata.SyntheticImage(px, content.subject_masks, content.metadata)


def evaluate(
    model: IcasModel,
    items: Sequence[synthdata.CorpusItem],
    cfg: ExperimentConfig,
    experiment: str,
    variant: str,
    multi_embed: bool = True,
    dump: int = 0,
) -> Evaluation:
    """Sample every item from seeded noise and score it against its content.

    The noise for image ``i``, draw ``n`` depends only on ``(seed, i, n)``,
    so arms evaluated with the same config see identical inputs.
    """
    bb = model.config
    schedule = NoiseSchedule.cosine(bb.steps)
    clip = cfg.eval.clip_x0 if cfg.eval.clip_x0 > 0 else None
    noise_hash, out_hash = hashlib.sha256(), hashlib.sha256()
    rows: list[MetricRow] = []
    samples: dict[str, np.ndarray] = {}
    for i, item in enumerate(items):
        cond = item_conditions(item, model, multi_embed)
        k = len(cond.content)
        ref = _reference(item.content, bb)
        for n in range(cfg.eval.noise_seeds):
            x_T = _noise(cfg.seed, i, n, bb)
            noise_hash.update(np.ascontiguousarray(x_T, dtype="<f8").tobytes())
            x0 = sample(model, x_T, cond, schedule, clip_x0=clip)
            out_hash.update(np.ascontiguousarray(x0, dtype="<f8").tobytes())
            image = decode(x0, bb.height, bb.width_cells)
            image_id = item.image_id if cfg.eval.noise_seeds == 1 else f"{item.image_id}:n{n}"
            if i < dump and n == 0:
                samples[item.image_id] = image.pixels
            align = synthdata.metric_structure_alignment(image, ref)
            style = synthdata.metric_style_distance(image, item.style_ref)
            for j, score in enumerate(synthdata.metric_subject_match(image, ref)):
                rows.append(MetricRow(experiment, variant, bb.gamma, bb.alpha, k, image_id, align, style, j, score))
    return Evaluation(rows, noise_hash.hexdigest(), out_hash.hexdigest(), samples)


def _eval_corpus(cfg: ExperimentConfig):
    e = cfg.eval
    return synthdata.make_corpus(e.seed, e.size, e.n_subjects, cfg.corpus.n_styles)


def _train_corpus(cfg: ExperimentConfig):
    c = cfg.corpus
    return synthdata.make_corpus(c.seed, c.size, c.n_subjects, c.n_styles)


def _new_report(cfg: ExperimentConfig) -> RunReport:
    return RunReport(cfg.kind, cfg.as_dict(), cfg.digest())


def _record(report: RunReport, variant: str, ev: Evaluation, extra: dict | None = None) -> None:
    report.rows.extend(ev.rows)
    report.variants[variant] = dict(ev.summary(), **(extra or {}))
    if ev.samples:
        report.samples[variant] = ev.samples


def _paired_audit(report: RunReport, names: Sequence[str]) -> None:
    hashes = {n: report.variants[n]["noise_sha256"] for n in names}
    report.audit["paired_noise"] = {"variants": list(names), "identical": len(set(hashes.values())) == 1}


def _finetuned(cfg: ExperimentConfig, report: RunReport, clock: _Clock) -> IcasModel:
    """Base model fine-tuned under ``[train]``; zero steps leaves it untouched."""
    with clock("base_model"):
        model, info = base_model(cfg)
    report.inputs["base_model"] = info
    if cfg.train.steps == 0:
        return model
    with clock("train"):
        result = train(model, _train_corpus(cfg), cfg.train)
    _audit_partition(report, cfg.train.preset, result)
    report.curves[cfg.train.preset] = result.curve
    report.inputs["train_final_loss"] = result.final_loss
    return result.model


def _audit_partition(report: RunReport, preset: str, result) -> None:
    frozen = result.partition.frozen
    changed = [n for n in frozen if result.init_hashes[n] != result.final_hashes[n]]
    report.audit.setdefault("partition", {})[preset] = {
        "trainable": len(result.partition.trainable),
        "frozen": len(frozen),
        "trainable_values": result.partition.trainable_count(result.model),
        "optimizer_state_matches_trainable": result.optimizer.state_names == set(result.partition.trainable),
        "frozen_unchanged": not changed,
    }


def _schedule_audit(items, model: IcasModel) -> list[dict]:
    ks = sorted({len(item.content.subject_masks) for item in items})
    return [build_schedule(k, model.config.blocks).as_dict() for k in ks]


# ---------------------------------------------------------------------------
# experiments


def run_train(cfg: ExperimentConfig) -> RunReport:
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    with clock("base_model"):
        model, info = base_model(cfg)
    report.inputs["base_model"] = info
    with clock("train"):
        result = train(model, _train_corpus(cfg), cfg.train)
    preset = cfg.train.preset
    _audit_partition(report, preset, result)
    report.curves[preset] = result.curve
    report.checkpoints[preset] = checkpoint_bytes(result.model.params)
    with clock("evaluate"):
        ev = evaluate(_inference_copy(result.model), _eval_corpus(cfg), cfg, cfg.kind, preset, dump=cfg.eval.dump_images)
    _record(report, preset, ev, {"final_loss": result.final_loss})
    return report


def run_sample(cfg: ExperimentConfig) -> RunReport:
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    with clock("base_model"):
        model, info = base_model(cfg)
    report.inputs["base_model"] = info
    with clock("evaluate"):
        ev = evaluate(_inference_copy(model), _eval_corpus(cfg), cfg, cfg.kind, "sample", dump=cfg.eval.dump_images)
    _record(report, "sample", ev)
    return report


def _run_variants(cfg, report, clock, items, arms: Sequence[tuple[str, IcasModel, bool]]) -> None:
    jobs = [
        (lambda m=m, v=v, multi=multi: evaluate(m, items, cfg, cfg.kind, v, multi, cfg.eval.dump_images))
        for v, m, multi in arms
    ]
    with clock("evaluate"):
        results = _parallel(jobs)
    for (v, _, _), ev in zip(arms, results):
        _record(report, v, ev)


def run_sweep_gamma(cfg: ExperimentConfig) -> RunReport:
    """Control at gamma 0 plus the five-point grid; alignment and style distance per gamma."""
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    model = _inference_copy(_finetuned(cfg, report, clock))
    items = _eval_corpus(cfg)
    arms = [("gamma_control", model.with_config(model.config.with_(gamma=0.0)), True)]
    arms += [(f"gamma_{g}", model.with_config(model.config.with_(gamma=g)), True) for g in GAMMA_GRID]
    _run_variants(cfg, report, clock, items, arms)
    # the control must coincide with a pipeline whose structure sites are all switched off
    off = model.with_config(model.config.with_(spm_sites=(False,) * model.config.blocks))
    with clock("audit"):
        probe = evaluate(off, items[:1], cfg, cfg.kind, "spm_disabled", True)
        control = evaluate(model.with_config(model.config.with_(gamma=0.0)), items[:1], cfg, cfg.kind, "gamma_control", True)
    report.audit["gamma_grid"] = list(GAMMA_GRID)
    report.audit["control_matches_spm_disabled"] = probe.output_digest == control.output_digest
    _paired_audit(report, [a[0] for a in arms])
    return report


def run_ablate_gate(cfg: ExperimentConfig) -> RunReport:
    """Learned gate against a fixed constant gate, same weights and noise."""
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    model = _inference_copy(_finetuned(cfg, report, clock))
    items = _eval_corpus(cfg)
    fixed = model.config.with_(gate_mode="fixed", gate_constant=1.0)
    arms = [("learned_gate", model, True), ("fixed_gate", model.with_config(fixed), True)]
    _run_variants(cfg, report, clock, items, arms)
    _paired_audit(report, [a[0] for a in arms])
    report.audit["per_image_delta_subject_match"] = _paired_delta(report, "learned_gate", "fixed_gate")
    return report


def run_ablate_embed(cfg: ExperimentConfig) -> RunReport:
    """One embedding per subject, cycled over the sites, against one whole-image embedding."""
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    model = _inference_copy(_finetuned(cfg, report, clock))
    items = _eval_corpus(cfg)
    arms = [("multi_embed", model, True), ("single_embed", model, False)]
    _run_variants(cfg, report, clock, items, arms)
    _paired_audit(report, [a[0] for a in arms])
    report.audit["schedules"] = _schedule_audit(items, model)
    report.audit["per_image_delta_subject_match"] = _paired_delta(report, "multi_embed", "single_embed")
    return report


def run_compare_strategies(cfg: ExperimentConfig) -> RunReport:
    """ContentOnly, FullFinetune and NoFinetune from one base model and one data stream."""
    report = _new_report(cfg)
    clock = _Clock(report.timings)
    with clock("base_model"):
        model, info = base_model(cfg)
    report.inputs["base_model"] = info
    corpus, items = _train_corpus(cfg), _eval_corpus(cfg)
    presets = ("content_only", "full_finetune", "no_finetune")

    def arm(preset: str):
        t0 = time.perf_counter()
        result = train(model, corpus, dataclasses.replace(cfg.train, preset=preset))
        train_time = time.perf_counter() - t0
        ev = evaluate(_inference_copy(result.model), items, cfg, cfg.kind, preset, True, cfg.eval.dump_images)
        return result, ev, train_time

    with clock("arms"):
        outcomes = _parallel([lambda p=p: arm(p) for p in presets])
    for preset, (result, ev, train_time) in zip(presets, outcomes):
        _audit_partition(report, preset, result)
        report.timings[f"train_{preset}"] = train_time
        report.curves[preset] = result.curve
        report.checkpoints[preset] = checkpoint_bytes(result.model.params)
        _record(report, preset, ev, {
            "final_loss": result.final_loss,
            "trainable_values": result.partition.trainable_count(result.model),
        })
    report.audit["no_finetune_equals_base"] = report.checkpoints["no_finetune"] == checkpoint_bytes(model.params)
    _paired_audit(report, list(presets))
    return report


def _paired_delta(report: RunReport, a: str, b: str) -> dict[str, float]:
    def per_image(v):
        out: dict[str, list[float]] = {}
        for r in report.rows:
            if r.variant == v:
                out.setdefault(r.image_id, []).append(r.subject_match)
        return {k: float(np.mean(s)) for k, s in out.items()}

    pa, pb = per_image(a), per_image(b)
    return {k: pa[k] - pb[k] for k in pa}


RUNNERS: dict[str, Callable[[ExperimentConfig], RunReport]] = {
    "train": run_train,
    "sample": run_sample,
    "sweep-gamma": run_sweep_gamma,
    "ablate-gate": run_ablate_gate,
    "ablate-embed": run_ablate_embed,
    "compare-strategies": run_compare_strategies,
}


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    return RUNNERS[cfg.kind](cfg)


# ---------------------------------------------------------------------------
# outputs


def metrics_csv(rows: Sequence[MetricRow]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue().encode()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode()


def emit_outputs(report: RunReport, out_dir) -> list[Path]:
    """Write every artifact of ``report`` under ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    written: list[Path] = []

    def put(rel: str, payload: bytes):
        path = out / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {path.parent}: {exc}") from exc
        synthdata._atomic_write(path, payload)
        written.append(path)

    put("metrics.csv", metrics_csv(report.rows))
    for name, payload in report.checkpoints.items():
        put(f"checkpoints/{name}.ck", payload)
    for name, curve in report.curves.items():
        path = out / f"loss_{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_loss_curve(path, curve)
        written.append(path)
    for variant, images in report.samples.items():
        for image_id, pixels in images.items():
            path = out / "samples" / variant / f"{image_id}.ppm"
            path.parent.mkdir(parents=True, exist_ok=True)
            synthdata.write_ppm(path, pixels)
            written.append(path)
    put("timings.json", _json_bytes({k: round(v, 6) for k, v in sorted(report.timings.items())}))
    put("report.json", _json_bytes(report.manifest()))
    return written
