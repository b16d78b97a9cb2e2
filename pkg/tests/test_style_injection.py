import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from icas.numerics import ShapeError, Tensor, grad_check, mean, square
from icas.style_injection import (
    GateConfig,
    SimParams,
    compute_gate,
    init_sim_params,
    inject_style,
    project_style,
    style_attention,
)


def _random_sim(rng, d, m, gate_scale=0.5):
    p = init_sim_params(d, m, rng)
    p.w_g.data = rng.normal(0, gate_scale, (d, d))
    p.b_g.data = rng.normal(0, gate_scale, (1, d))
    return p


def test_matches_straight_line_reference(rng):
    for _ in range(20):
        d, m, n = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        p = _random_sim(rng, d, m)
        q, e_c, e_r = rng.normal(size=(n, d)), rng.normal(size=d), rng.normal(size=d)
        alpha = float(rng.uniform())
        got = inject_style(Tensor(q), e_c, e_r, p, GateConfig(alpha)).data
        want = oracles.style_injection(q, e_c, e_r, p.w_k.data, p.w_v.data, p.w_g.data, p.b_g.data, m, alpha)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_fixed_gate_matches_reference(rng):
    p = _random_sim(rng, 4, 3)
    q, e_c, e_r = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=4)
    got = inject_style(Tensor(q), e_c, e_r, p, GateConfig.fixed(1.0, alpha=0.3)).data
    want = oracles.style_injection(q, e_c, e_r, p.w_k.data, p.w_v.data, None, None, 3, 0.3, gate_constant=1.0)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_single_style_token_attends_to_its_value(rng):
    p = _random_sim(rng, 5, 1)
    q = Tensor(rng.normal(size=(7, 5)))
    k, v = project_style(rng.normal(size=5), p)
    out = style_attention(q, k, v).data
    assert np.array_equal(out, np.repeat(v.data, 7, axis=0))


def test_zero_alpha_and_zero_gate_return_queries(rng):
    p = _random_sim(rng, 6, 4)
    q = rng.normal(size=(9, 6))
    out = inject_style(Tensor(q), rng.normal(size=6), rng.normal(size=6), p, GateConfig.fixed(0.0, alpha=0.0))
    assert out.data.tobytes() == q.tobytes()


def test_zero_initialized_gate_is_one_half(rng):
    p = init_sim_params(4, 2, rng)
    g = compute_gate(rng.normal(size=4), rng.normal(size=4), p, GateConfig())
    assert np.array_equal(g.data, np.full((1, 4), 0.5))


def test_fixed_gate_records_no_parameters(rng):
    p = _random_sim(rng, 3, 2)
    for t in p.named().values():
        t.requires_grad = True
    g = compute_gate(np.ones(3), np.ones(3), p, GateConfig.fixed(1.0))
    assert not g.requires_grad


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_alpha_outside_unit_interval_rejected(alpha):
    with pytest.raises(ValueError):
        GateConfig(alpha)


def test_unknown_gate_mode_rejected():
    with pytest.raises(ValueError):
        GateConfig(mode="soft")


def test_width_mismatch_names_shapes(rng):
    p = _random_sim(rng, 4, 2)
    with pytest.raises(ShapeError, match="width 4"):
        inject_style(Tensor(np.ones((3, 5))), np.ones(4), np.ones(4), p, GateConfig())
    with pytest.raises(ShapeError, match="width 4"):
        project_style(np.ones(3), p)


def test_bad_parameter_shapes_rejected():
    with pytest.raises(ShapeError, match="w_k"):
        SimParams(Tensor(np.ones((4, 4))), Tensor(np.ones((4, 8))), Tensor(np.ones((4, 4))), Tensor(np.ones((1, 4))), m=2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_gradients_through_every_weight(seed, alpha):
    rng = np.random.default_rng(seed)
    d, m = 3, 2
    p = _random_sim(rng, d, m)
    q = Tensor(rng.normal(size=(4, d)), requires_grad=True)
    e_c, e_r = rng.normal(size=d), rng.normal(size=d)
    params = dict(p.named(), q=q)
    for t in params.values():
        t.requires_grad = True
    report = grad_check(lambda: mean(square(inject_style(q, e_c, e_r, p, GateConfig(alpha)))), params)
    assert report.passed, report.summary()
