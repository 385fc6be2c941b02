import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plfo.funcapprox import (
    AdamState,
    Linear,
    ParamFunction,
    TargetPair,
    adam_step,
    default_projection_radius,
    eval_fn,
    grad_params,
    l2_project_weights,
    linear,
    mlp2,
    polyak_update,
    tabular,
)

import gradcheck


def test_tabular_zero_outputs_zero():
    fn = tabular(5, 3)
    assert np.array_equal(eval_fn(fn, 2), np.zeros(3))


def test_linear_identity_feature_picks_coordinate():
    fn = linear(4, 1, feature_map="identity", bias=False)
    fn.params[:] = np.eye(4)[2]
    x = np.array([0.3, -1.0, 7.5, 2.0])
    assert eval_fn(fn, x)[0] == 7.5


def _independent_mlp_forward(params, in_dim, hidden, out_dim, x):
    w1 = params[: in_dim * hidden].reshape(in_dim, hidden)
    b1 = params[in_dim * hidden: in_dim * hidden + hidden]
    off = in_dim * hidden + hidden
    w2 = params[off: off + hidden * out_dim].reshape(hidden, out_dim)
    b2 = params[off + hidden * out_dim:]
    out = []
    for row in x:
        h = [np.tanh(sum(row[i] * w1[i, j] for i in range(in_dim)) + b1[j]) for j in range(hidden)]
        out.append([sum(h[j] * w2[j, k] for j in range(hidden)) + b2[k] for k in range(out_dim)])
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_forward_matches_independent_pass(seed):
    rng = np.random.default_rng(seed)
    fn = mlp2(6, 7, 3, rng, feature_map="identity")
    x = rng.normal(size=(4, 6))
    assert np.allclose(fn.forward(x), _independent_mlp_forward(fn.params, 6, 7, 3, x), atol=1e-12, rtol=0)


def test_clip_bounds_hold():
    fn = tabular(3, 2, np.array([[-5.0, 0.5], [2.0, 9.0], [0.0, 1.0]]), bounds=(0.0, 1.0))
    out = fn.forward(np.arange(3))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sigmoid_head_needs_bounds():
    with pytest.raises(ValueError):
        tabular(2, 2, head="sigmoid")


def test_shape_errors():
    with pytest.raises(ValueError):
        tabular(3, 2).forward(np.array([3]))
    with pytest.raises(ValueError):
        linear(3, 2, feature_map="identity").forward(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        ParamFunction(Linear(3, 2), np.zeros(5))


def test_grad_of_constant_loss_is_zero():
    fn = mlp2(4, 3, 2, np.random.default_rng(0))
    _, grad = grad_params(fn, np.arange(4), lambda out: (1.0, np.zeros_like(out)))
    assert np.array_equal(grad, np.zeros_like(fn.params))


def test_grad_of_half_squared_norm_is_params():
    fn = tabular(3, 2, np.arange(6.0).reshape(3, 2))
    value, grad = grad_params(fn, np.arange(3), lambda out: (0.5 * float((out ** 2).sum()), out))
    assert value == pytest.approx(0.5 * float((fn.params ** 2).sum()))
    assert np.array_equal(grad, fn.params)


@pytest.mark.parametrize("arch", gradcheck.ARCHS)
@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(arch, seed):
    for case in gradcheck.build_cases(arch, seed):
        assert gradcheck.check(case) <= gradcheck.TOLERANCE[arch], case.name


def test_adam_zero_gradient():
    fn = tabular(2, 2, 1.0)
    state = AdamState.for_fn(fn, 0.1)
    adam_step(state, fn, np.zeros(4))
    assert np.array_equal(fn.params, np.ones(4))
    assert state.step == 1


def test_adam_first_step_has_magnitude_lr():
    fn = tabular(1, 3)
    state = AdamState.for_fn(fn, 0.01)
    adam_step(state, fn, np.array([3.0, -0.5, 100.0]))
    assert np.allclose(fn.params, [-0.01, 0.01, -0.01], rtol=1e-6)


def test_adam_converges_on_bowl():
    rng = np.random.default_rng(0)
    fn = tabular(1, 10, rng.normal(size=(1, 10)))
    state = AdamState.for_fn(fn, 0.05)
    for _ in range(1000):
        adam_step(state, fn, fn.params.copy())
    assert np.linalg.norm(fn.params) <= 1e-3


def test_adam_is_deterministic():
    rng = np.random.default_rng(1)
    fn = mlp2(3, 4, 2, rng)
    state = AdamState.for_fn(fn, 0.01)
    grad = rng.normal(size=fn.params.size)
    adam_step(state, fn, grad)
    fa, sa = fn.copy(), state.copy()
    fb, sb = fn.copy(), state.copy()
    adam_step(sa, fa, grad)
    adam_step(sb, fb, grad)
    assert np.array_equal(fa.params, fb.params)
    assert np.array_equal(sa.v, sb.v) and np.all(sa.v >= 0)


def _bias_mask(fn):
    mask = np.zeros(fn.params.size, dtype=bool)
    for name, sl, _ in fn.blocks():
        if name.startswith("b"):
            mask[sl] = True
    return mask


def test_projection_inside_ball_is_identity():
    fn = mlp2(3, 4, 2, np.random.default_rng(0))
    assert np.array_equal(l2_project_weights(fn, 1e6).params, fn.params)


def test_projection_halves_block_of_norm_2r():
    fn = linear(3, 2, feature_map="identity")
    w = np.random.default_rng(0).normal(size=6)
    r = 0.7
    fn.params[:6] = w / np.linalg.norm(w) * 2 * r
    out = l2_project_weights(fn, r)
    assert np.linalg.norm(out.params[:6]) == pytest.approx(r, abs=1e-12)
    assert np.allclose(out.params[:6] / r, fn.params[:6] / (2 * r), atol=1e-12)


def test_projection_skips_tabular():
    fn = tabular(2, 2, 50.0)
    assert np.array_equal(l2_project_weights(fn, 1.0).params, fn.params)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 5.0), st.sampled_from(["linear", "mlp2"]))
def test_projection_idempotent_and_bias_preserving(seed, radius, arch):
    rng = np.random.default_rng(seed)
    fn = mlp2(4, 5, 3, rng, scale=10.0) if arch == "mlp2" else linear(4, 3, init=rng.normal(0, 5, 15))
    once = l2_project_weights(fn, radius)
    twice = l2_project_weights(once, radius)
    assert np.max(np.abs(twice.params - once.params)) <= 1e-12
    mask = _bias_mask(fn)
    assert np.max(np.abs(once.params[mask] - fn.params[mask]), initial=0.0) <= 1e-12
    for name, sl, _ in once.blocks():
        if name.startswith("W"):
            assert np.linalg.norm(once.params[sl]) <= radius * (1 + 1e-12)


def test_default_radius():
    fn = tabular(4, 4)
    assert default_projection_radius(10.0, fn) == pytest.approx(100 * 10.0 / 4)


def test_polyak_endpoints():
    live = tabular(2, 2, 3.0)
    pair = TargetPair(live, tabular(2, 2, 1.0), tau=1.0)
    polyak_update(pair)
    assert np.array_equal(pair.target.params, live.params)
    pair = TargetPair(live, tabular(2, 2, 1.0), tau=0.0)
    polyak_update(pair)
    assert np.array_equal(pair.target.params, np.ones(4))


def test_polyak_geometric_decay():
    live = tabular(3, 2, 5.0)
    pair = TargetPair(live, tabular(3, 2, 0.0), tau=0.005)
    gap0 = np.linalg.norm(pair.target.params - live.params)
    for _ in range(1000):
        polyak_update(pair)
    ratio = np.linalg.norm(pair.target.params - live.params) / gap0
    assert ratio == pytest.approx(0.995 ** 1000, rel=0.01)
    assert ratio == pytest.approx(0.0067, rel=0.01)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 0.99))
def test_polyak_contracts_toward_live(seed, tau):
    rng = np.random.default_rng(seed)
    live = mlp2(3, 4, 2, rng)
    pair = TargetPair(live, mlp2(3, 4, 2, rng), tau)
    before = np.linalg.norm(pair.target.params - live.params)
    polyak_update(pair)
    assert np.linalg.norm(pair.target.params - live.params) <= (1 - tau) * before + 1e-12


def test_polyak_arch_mismatch():
    with pytest.raises(ValueError):
        TargetPair(tabular(2, 2), tabular(2, 3))


def test_json_round_trip(tmp_path):
    fn = mlp2(3, 4, 2, np.random.default_rng(0), bounds=(0.0, 1.0), head="sigmoid")
    fn.save(tmp_path / "f.json")
    back = ParamFunction.load(tmp_path / "f.json")
    assert back.arch == fn.arch and back.bounds == fn.bounds and back.head == fn.head
    assert np.array_equal(back.params, fn.params)
