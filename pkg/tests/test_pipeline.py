import numpy as np
import pytest

import oracles
from conftest import random_conditions, randomize
from icas import synthdata as sd
from icas.content_cycling import ContentEmbeddingList
from icas.numerics import NonFiniteError, ShapeError
from icas.pipeline import (
    BackboneConfig,
    Conditions,
    IcasModel,
    NoiseSchedule,
    decode,
    forward,
    output_digest,
    param_group,
    plain_forward,
    sample,
)
from icas.training import item_conditions

# sha256 of the little-endian f64 output bytes; regenerate only on an intended model change
GOLDEN_FORWARD = "bac58b6f230d82bfc7f85d60f73357d6f6cf5f265967903bf829fd00c8444898"


def test_default_forward_is_pinned():
    cfg = BackboneConfig()
    model = IcasModel(cfg)
    cond = item_conditions(sd.make_corpus(0, 1, 2)[0], model, True)
    x = np.random.default_rng(42).normal(size=(cfg.tokens, cfg.width))
    assert output_digest(forward(model, x, 4, cond).data) == GOLDEN_FORWARD


def test_init_is_seeded(small_cfg):
    a, b = IcasModel(small_cfg), IcasModel(small_cfg)
    c = IcasModel(small_cfg.with_(init_seed=7))
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_parameter_groups(small_cfg):
    groups = {param_group(n) for n in IcasModel(small_cfg).params}
    assert groups == {"backbone", "content", "gate", "style", "spm"}
    assert param_group("blocks.0.sim.w_g") == "gate"
    assert param_group("blocks.1.sim.w_k") == "style"
    assert param_group("blocks.1.content.w_kc") == "content"
    with pytest.raises(ValueError):
        param_group("head.w")


def test_forward_output_shape(small_cfg, rng):
    model = randomize(IcasModel(small_cfg), rng)
    out = forward(model, rng.normal(size=(4, 4)), 2, random_conditions(small_cfg, rng))
    assert out.shape == (4, 4)


def test_forward_input_checks(small_cfg, rng):
    model = IcasModel(small_cfg)
    cond = random_conditions(small_cfg, rng)
    with pytest.raises(ShapeError):
        forward(model, rng.normal(size=(5, 4)), 1, cond)
    with pytest.raises(ValueError, match="timestep"):
        forward(model, rng.normal(size=(4, 4)), 9, cond)
    too_many = Conditions(ContentEmbeddingList.of([np.zeros(4)] * 3), np.zeros(4))
    with pytest.raises(ValueError, match="cannot be spread"):
        forward(model, rng.normal(size=(4, 4)), 1, too_many)


def test_zero_gamma_equals_structure_free_pass(small_cfg, rng):
    model = randomize(IcasModel(small_cfg.with_(gamma=0.0)), rng)
    cond = random_conditions(small_cfg, rng)
    x = rng.normal(size=(4, 4))
    with_structure = forward(model, x, 3, cond).data
    without = forward(model, x, 3, Conditions(cond.content, cond.style, None)).data
    assert with_structure.tobytes() == without.tobytes()


def test_zero_initialized_projection_ignores_gamma(small_cfg, rng):
    model = IcasModel(small_cfg)
    cond = random_conditions(small_cfg, rng)
    x = rng.normal(size=(4, 4))
    ref = forward(model, x, 3, cond).data.tobytes()
    for gamma in (0.0, 0.4, 0.8, 5.0):
        assert forward(model.with_config(small_cfg.with_(gamma=gamma)), x, 3, cond).data.tobytes() == ref


def test_single_embedding_equals_bare_content(small_cfg, rng):
    model = randomize(IcasModel(small_cfg), rng)
    cond = random_conditions(small_cfg, rng, k=1)
    x = rng.normal(size=(4, 4))
    bare = Conditions(np.asarray(cond.content[0]), cond.style, cond.structure)
    assert forward(model, x, 1, cond).data.tobytes() == forward(model, x, 1, bare).data.tobytes()


def test_disabled_sites_skip_injection(small_cfg, rng):
    model = randomize(IcasModel(small_cfg), rng)
    cond = random_conditions(small_cfg, rng)
    x = rng.normal(size=(4, 4))
    off = model.with_config(small_cfg.with_(spm_sites=(False, False)))
    ref = forward(off, x, 1, Conditions(cond.content, cond.style, None)).data
    assert forward(off, x, 1, cond).data.tobytes() == ref.tobytes()
    assert forward(model, x, 1, cond).data.tobytes() != ref.tobytes()


def test_plain_forward_ignores_style(small_cfg, rng):
    model = randomize(IcasModel(small_cfg), rng)
    x, e = rng.normal(size=(4, 4)), rng.normal(size=4)
    a = plain_forward(model, x, 2, e).data
    for n, t in model.params.items():
        if ".sim." in n or n.startswith("spm."):
            t.data = t.data * 3.0
    assert plain_forward(model, x, 2, e).data.tobytes() == a.tobytes()


def test_gates_collected_only_when_learned(small_cfg, rng):
    model = IcasModel(small_cfg)
    cond = random_conditions(small_cfg, rng)
    _, gates = forward(model, rng.normal(size=(4, 4)), 1, cond, return_gates=True)
    assert len(gates) == small_cfg.blocks
    fixed = model.with_config(small_cfg.with_(gate_mode="fixed"))
    _, gates = forward(fixed, rng.normal(size=(4, 4)), 1, cond, return_gates=True)
    assert gates == []


def test_with_config_rejects_shape_changes(small_cfg):
    with pytest.raises(ValueError):
        IcasModel(small_cfg).with_config(small_cfg.with_(width=8))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(blocks=0)
    with pytest.raises(ValueError):
        BackboneConfig(spm_sites=(True,))
    with pytest.raises(ValueError):
        BackboneConfig(gamma=-1.0)


# ---------------------------------------------------------------------------
# schedule and sampler


def test_cosine_schedule_shape():
    s = NoiseSchedule.cosine(8)
    assert s.steps == 8 and s[0] == 1.0
    assert all(s[t] > s[t + 1] > 0 for t in range(8))


@pytest.mark.parametrize("bad", [(0.9, 0.5), (1.0, 1.0), (1.0, -0.1), (1.0,)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        NoiseSchedule(bad)


def test_corrupt_formula(rng):
    s = NoiseSchedule.cosine(4)
    x0, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    np.testing.assert_allclose(s.corrupt(x0, eps, 2), np.sqrt(s[2]) * x0 + np.sqrt(1 - s[2]) * eps, rtol=1e-15)


@pytest.mark.parametrize("steps", [1, 4, 8])
def test_true_noise_recovers_clean_latent(steps, rng):
    s = NoiseSchedule.cosine(steps)
    x0, eps = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    out = sample(None, s.corrupt(x0, eps, steps), None, s, eps_fn=lambda x, t: eps)
    assert np.abs(out - x0).max() < 1e-10


def test_sampler_matches_reference_loop(small_cfg, rng):
    model = randomize(IcasModel(small_cfg), rng, std=0.2)
    cond = random_conditions(small_cfg, rng)
    s = NoiseSchedule.cosine(small_cfg.steps)
    x_T = rng.normal(size=(4, 4))
    got = sample(model, x_T, cond, s)
    want = oracles.ddim(x_T, lambda x, t: forward(model, x, t, cond).data, s.alpha_bar)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_clipped_sampler_bounds_estimate(rng):
    s = NoiseSchedule.cosine(4)
    out = sample(None, rng.normal(size=(4, 3)), None, s, eps_fn=lambda x, t: -5 * x, clip_x0=1.0)
    assert np.abs(out).max() <= 1.0 + 1e-12


def test_sampler_reports_non_finite(rng):
    s = NoiseSchedule.cosine(2)
    with pytest.raises(NonFiniteError, match="step"):
        sample(None, rng.normal(size=(2, 2)), None, s, eps_fn=lambda x, t: np.full_like(x, np.inf))


def test_sampler_needs_model_or_eps():
    with pytest.raises(ValueError):
        sample(None, np.zeros((2, 2)), None, NoiseSchedule.cosine(2))


# ---------------------------------------------------------------------------
# decoding


def test_zero_latent_decodes_to_mid_gray():
    img = decode(np.zeros((64, 16)))
    assert img.pixels.shape == (32, 32, 3)
    assert np.all(img.pixels == 0.5)


def test_encode_decode_round_trip():
    img = sd.gen_content(3, 2)
    x0 = sd.encode_latent(img, 16, 8)
    back = sd.encode_latent(decode(x0), 16, 8)
    np.testing.assert_allclose(back, x0, atol=1e-14)


def test_decode_clamps():
    img = decode(np.full((64, 16), 3.0))
    assert img.pixels.max() == 1.0
