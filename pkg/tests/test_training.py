import struct
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

import oracles
from conftest import randomize
from icas import synthdata as sd
from icas.numerics import Tensor
from icas.pipeline import BackboneConfig, IcasModel, NoiseSchedule
from icas.training import (
    PRESETS,
    AdamW,
    CheckpointError,
    ParameterPartition,
    PartitionBreach,
    TrainConfig,
    checkpoint_bytes,
    load_checkpoint,
    loss,
    make_batch,
    model_from_checkpoint,
    param_hashes,
    parse_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)

TINY = BackboneConfig(height=2, width_cells=2, width=4, blocks=2, style_tokens=2, steps=4)


def _one_param(value, grad):
    p = Tensor(np.array([[value]]), requires_grad=True)
    p.grad = np.array([[grad]])
    model = SimpleNamespace(params={"w": p})
    return model, ParameterPartition("manual", {"w": "trainable"})


def test_first_adam_step_by_hand():
    model, part = _one_param(1.0, 1.0)
    AdamW(part, TrainConfig(learning_rate=0.1, weight_decay=0.0)).step(model)
    assert model.params["w"].data[0, 0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_zero_gradient_is_pure_decay():
    model, part = _one_param(2.0, 0.0)
    AdamW(part, TrainConfig(learning_rate=0.1, weight_decay=0.5)).step(model)
    assert model.params["w"].data[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_adamw_matches_reference_over_steps(rng):
    cfg = TrainConfig(learning_rate=0.03, weight_decay=0.1, beta1=0.8, beta2=0.95, eps=1e-6)
    theta0 = rng.normal(size=(3, 2))
    p = Tensor(theta0, requires_grad=True)
    model = SimpleNamespace(params={"w": p})
    opt = AdamW(ParameterPartition("manual", {"w": "trainable"}), cfg)
    theta, m, v = theta0.copy(), np.zeros_like(theta0), np.zeros_like(theta0)
    for t in range(1, 8):
        g = rng.normal(size=(3, 2))
        p.grad = g
        opt.step(model)
        theta, m, v = oracles.adamw_step(theta, g, m, v, t, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        np.testing.assert_allclose(p.data, theta, rtol=1e-13, atol=1e-15)


def test_frozen_gradient_is_a_breach():
    a = Tensor([[1.0]], requires_grad=True)
    b = Tensor([[1.0]])
    b.grad = np.ones((1, 1))
    model = SimpleNamespace(params={"a": a, "b": b})
    opt = AdamW(ParameterPartition("manual", {"a": "trainable", "b": "frozen"}), TrainConfig())
    with pytest.raises(PartitionBreach, match="b"):
        opt.step(model)


def test_preset_definitions():
    model = IcasModel(TINY)
    groups = {}
    for preset in ("content_only", "full_finetune", "no_finetune"):
        part = ParameterPartition.from_preset(model, preset)
        groups[preset] = part
    assert all(n.startswith("spm.") or n.split(".")[2] in ("content", "sim") for n in groups["content_only"].trainable)
    assert not [n for n in groups["content_only"].trainable if n.endswith(("sim.w_k", "sim.w_v"))]
    assert set(groups["content_only"].trainable) < set(groups["full_finetune"].trainable)
    assert groups["no_finetune"].trainable == []
    counts = [groups[p].trainable_count(model) for p in ("no_finetune", "content_only", "full_finetune")]
    assert counts[0] == 0 < counts[1] < counts[2]
    assert PRESETS["base"].isdisjoint({"spm"})


def test_unknown_preset_rejected():
    with pytest.raises(ValueError):
        ParameterPartition.from_preset(IcasModel(TINY), "lora")
    with pytest.raises(ValueError):
        TrainConfig(preset="lora")


def test_partition_must_cover_model():
    model = IcasModel(TINY)
    part = ParameterPartition("manual", {"blocks.0.attn.w_q": "trainable"})
    with pytest.raises(PartitionBreach):
        part.apply(model)


def test_loss_is_mse_plus_gate_term(rng):
    model = randomize(IcasModel(TINY), rng, 0.2)
    corpus = sd.make_corpus(0, 3, 2)
    cfg = TrainConfig(lambda_gate=0.5)
    batch = make_batch(corpus, model, np.random.default_rng(0), 2)
    parts = loss(batch, model, cfg)
    assert parts.value == pytest.approx(parts.mse + 0.5 * parts.gate_reg, rel=1e-12)
    assert parts.gate_reg > 0


def test_training_leaves_input_model_and_frozen_weights_alone():
    model = IcasModel(TINY)
    before = param_hashes(model.params)
    result = train(model, sd.make_corpus(0, 4, 2), TrainConfig(steps=5))
    assert param_hashes(model.params) == before
    for n in result.partition.frozen:
        assert result.final_hashes[n] == result.init_hashes[n]
    assert any(result.final_hashes[n] != result.init_hashes[n] for n in result.partition.trainable)
    assert result.optimizer.state_names == set(result.partition.trainable)
    assert [row[0] for row in result.curve] == list(range(5))


def test_training_is_reproducible():
    corpus = sd.make_corpus(0, 4, 2)
    a = train(IcasModel(TINY), corpus, TrainConfig(steps=3))
    b = train(IcasModel(TINY), corpus, TrainConfig(steps=3))
    assert checkpoint_bytes(a.model.params) == checkpoint_bytes(b.model.params)
    assert a.curve == b.curve


def test_no_finetune_keeps_every_weight():
    model = IcasModel(TINY)
    result = train(model, sd.make_corpus(0, 4, 2), TrainConfig(steps=3, preset="no_finetune"))
    assert checkpoint_bytes(result.model.params) == checkpoint_bytes(model.params)
    assert result.optimizer.state_names == set()


def test_loss_curve_format(tmp_path):
    write_loss_curve(tmp_path / "c.csv", [(0, 1.5, 1.25, 0.25), (1, 0.1, 0.1, 0.0)])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["step,loss,mse,gate_reg", "0,1.5,1.25,0.25", "1,0.1,0.1,0.0"]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_layout():
    raw = checkpoint_bytes({"ab": np.array([[1.0, 2.0]])})
    assert raw.startswith(b"ICAS1\n")
    assert struct.unpack_from("<Q", raw, 6) == (1,)
    assert struct.unpack_from("<Q", raw, 14) == (2,)
    assert raw[22:24] == b"ab"
    assert raw[24] == 1
    assert struct.unpack_from("<QQQ", raw, 25) == (2, 1, 2)
    assert struct.unpack_from("<2d", raw, 49) == (1.0, 2.0)
    assert len(raw) == 49 + 16 + 32


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=st.floats(allow_nan=False)), max_size=4))
def test_checkpoint_round_trip(params):
    back = parse_checkpoint(checkpoint_bytes(params))
    assert list(back) == list(params)
    for n in params:
        assert back[n].shape == params[n].shape
        assert back[n].tobytes() == np.ascontiguousarray(params[n], dtype="<f8").tobytes()


def test_corrupted_checkpoint_rejected():
    raw = bytearray(checkpoint_bytes({"w": np.ones((2, 2))}))
    raw[30] ^= 1
    with pytest.raises(CheckpointError, match="digest"):
        parse_checkpoint(bytes(raw))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOPE" + bytes(60))


def test_model_checkpoint_round_trip(tmp_path):
    model = IcasModel(TINY)
    save_checkpoint(tmp_path / "m.ck", model.params)
    back = model_from_checkpoint(TINY, tmp_path / "m.ck")
    assert checkpoint_bytes(back.params) == checkpoint_bytes(model.params)
    with pytest.raises(CheckpointError):
        model_from_checkpoint(TINY.with_(blocks=3), tmp_path / "m.ck")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "none.ck")


def test_noise_schedule_used_by_examples():
    model = IcasModel(TINY)
    ex = make_batch(sd.make_corpus(0, 2, 2), model, np.random.default_rng(3), 1)[0]
    s = NoiseSchedule.cosine(TINY.steps)
    assert 1 <= ex.t <= TINY.steps
    np.testing.assert_array_equal(ex.x_t(s), s.corrupt(ex.x0, ex.noise, ex.t))
