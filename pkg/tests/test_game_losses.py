import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plfo import envs
from plfo.datasets import Batch, DynamicsDataset, collect_trajectories, estimate_behavior_policy
from plfo.funcapprox import AdamState, adam_step, mlp2, tabular
from plfo.game import losses as L
from plfo.mdp import TabularPolicy, policy_eval_q

LEFT, RIGHT = envs.LEFT, envs.RIGHT


def _random_data(rng, S=4, A=3, n=60):
    return DynamicsDataset(rng.integers(0, S, n), rng.integers(0, A, n), rng.integers(0, S, n))


# --- pessimism ---------------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pessimism_vanishes_at_behavior_policy(seed):
    rng = np.random.default_rng(seed)
    data = _random_data(rng)
    mu = estimate_behavior_policy(data, 4, 3)
    f = rng.normal(0, 10, (4, 3))
    assert abs(L.pessimism_loss(data.full_batch(), mu, f)) <= 1e-10


def test_pessimism_constant_critic():
    data = _random_data(np.random.default_rng(0))
    pi = TabularPolicy(np.random.default_rng(1).dirichlet(np.ones(3), size=4))
    assert L.pessimism_loss(data.full_batch(), pi, np.full((4, 3), 3.3)) == pytest.approx(0.0, abs=1e-12)


def test_pessimism_hand_batch():
    batch = Batch(np.array([0, 0]), np.array([0, 1]), np.array([LEFT, RIGHT]))
    pi = TabularPolicy.deterministic([RIGHT, RIGHT], 2)
    f = np.array([[0.0, 2.0], [0.0, 0.0]])
    assert L.pessimism_loss(batch, pi, f) == 1.0


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        L.pessimism_loss(Batch(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)), np.ones((1, 1)), np.ones((1, 1)))


# --- reward consistency ---------------------------------------------------------------------------


def test_reward_mse_true_reward_is_zero():
    mdp = envs.grid5()
    _, rew = collect_trajectories(mdp, TabularPolicy.uniform(25, 4), 30, 64, 0)
    assert L.reward_mse_loss(rew.full_batch(), mdp.reward) <= 1e-12


def test_reward_mse_zero_vs_ones():
    batch = Batch(np.array([0, 1]), np.array([1, 0]), r=np.ones(2))
    assert L.reward_mse_loss(batch, np.zeros((2, 2))) == 1.0


def test_reward_mse_matches_per_record_sum():
    rng = np.random.default_rng(3)
    g = tabular(5, 5, rng.normal(size=(5, 5)), bounds=(0.0, 1.0), head="sigmoid")
    s, sp, r = rng.integers(0, 5, 40), rng.integers(0, 5, 40), rng.uniform(size=40)
    total = 0.0
    for i in range(40):
        total += (g.forward(np.array([s[i]]))[0, sp[i]] - r[i]) ** 2
    assert L.reward_mse_loss(Batch(s, sp, r=r), g) == pytest.approx(total / 40, abs=1e-12)


# --- TD and DQRA ------------------------------------------------------------------------------------


def test_td_zero_for_exact_bellman_critic():
    mdp = envs.chain2()
    pi = TabularPolicy(np.array([[0.3, 0.7], [0.6, 0.4]]))
    q = policy_eval_q(mdp, pi)
    dyn, _ = collect_trajectories(mdp, TabularPolicy.uniform(2, 2), 20, 10, 0)
    assert L.td_loss(dyn.full_batch(), pi, q, q, mdp.reward, mdp.gamma) <= 1e-20


def test_td_myopic():
    rng = np.random.default_rng(0)
    data = _random_data(rng)
    f, g = rng.normal(size=(4, 3)), rng.uniform(size=(4, 4))
    batch = data.full_batch()
    pi = TabularPolicy.uniform(4, 3)
    expected = np.mean((f[batch.s, batch.a] - g[batch.s, batch.sp]) ** 2)
    assert L.td_loss(batch, pi, f, rng.normal(size=(4, 3)), g, 0.0) == pytest.approx(expected, abs=1e-14)


def test_td_loop_hand_arithmetic():
    batch = Batch(np.zeros(3, int), np.zeros(3, int), np.zeros(3, int))
    assert L.td_loss(batch, np.ones((1, 1)), np.array([[10.0]]), np.array([[10.0]]), np.ones((1, 1)), 0.9) \
        == pytest.approx(0.0, abs=1e-24)


def test_terminal_mask_stops_bootstrap():
    batch = Batch(np.array([0]), np.array([1]), np.array([0]))
    f = np.array([[1.0], [5.0]])
    g = np.zeros((2, 2))
    assert L.td_loss(batch, np.ones((2, 1)), f, f, g, 0.5, terminal=np.array([0.0, 1.0])) == 1.0


def _dqra_inputs(seed):
    rng = np.random.default_rng(seed)
    data = _random_data(rng)
    pi = mlp2(4, 5, 3, rng)
    f = mlp2(4, 5, 3, rng)
    targets = (mlp2(4, 5, 3, rng), mlp2(4, 5, 3, rng))
    g = mlp2(4, 5, 4, rng, bounds=(0.0, 1.0), head="sigmoid")
    return data.full_batch(), pi, f, targets, g


def test_dqra_endpoints():
    batch, pi, f, targets, g = _dqra_inputs(0)
    assert L.dqra_loss(batch, pi, f, targets, g, 0.0, 0.9) == L.td_loss(batch, pi, f, f, g, 0.9)
    assert L.dqra_loss(batch, pi, f, targets, g, 1.0, 0.9) == L.td_loss(batch, pi, f, L.MinOf(*targets), g, 0.9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dqra_affine_in_w(seed):
    batch, pi, f, targets, g = _dqra_inputs(seed)
    v = {w: L.dqra_loss(batch, pi, f, targets, g, w, 0.9) for w in (0.0, 0.25, 0.5, 1.0)}
    for w in (0.25, 0.5):
        assert abs(v[w] - ((1 - w) * v[0.0] + w * v[1.0])) <= 1e-10


def test_dqra_rejects_w_outside_unit():
    batch, pi, f, targets, g = _dqra_inputs(0)
    with pytest.raises(ValueError):
        L.dqra_loss(batch, pi, f, targets, g, 1.5, 0.9)


# --- Bellman error estimate --------------------------------------------------------------------------


def _closed_form_bellman(batch, pi, f, g, gamma, A):
    y = g[batch.s, batch.sp] + gamma * (pi.probs[batch.sp] * f[batch.sp]).sum(axis=1)
    total = 0.0
    cells = {}
    for i in range(len(batch)):
        cells.setdefault((batch.s[i], batch.a[i]), []).append(y[i])
    for (s, a), ys in cells.items():
        ys = np.array(ys)
        total += len(ys) / len(batch) * (f[s, a] - ys.mean()) ** 2
    return total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_bellman_error_closed_form(seed):
    rng = np.random.default_rng(seed)
    mdp = envs.chain2()
    dyn, _ = collect_trajectories(mdp, TabularPolicy.uniform(2, 2), 30, 8, rng)
    f, g = rng.uniform(0, 2, (2, 2)), rng.uniform(0, 1, (2, 2))
    pi = TabularPolicy(rng.dirichlet(np.ones(2), size=2))
    est = L.empirical_bellman_error(dyn.full_batch(), pi, f, g, mdp.gamma)
    assert est.value >= -1e-10
    assert est.value == pytest.approx(_closed_form_bellman(dyn.full_batch(), pi, f, g, mdp.gamma, 2), abs=1e-8)


def test_bellman_error_zero_at_cell_means():
    rng = np.random.default_rng(0)
    data = _random_data(rng)
    batch = data.full_batch()
    pi = TabularPolicy.uniform(4, 3)
    g = rng.uniform(size=(4, 4))
    # the per-cell mean of targets depends on f through the bootstrap; iterate to the fixed point
    f = np.zeros((4, 3))
    for _ in range(400):
        y = L.bootstrap_targets(batch, pi, f, g, 0.5)
        means, counts = L.cell_means(batch.s * 3 + batch.a, y, 12)
        f = np.where(counts > 0, means, f.reshape(-1)).reshape(4, 3)
    assert abs(L.empirical_bellman_error(batch, pi, f, g, 0.5).value) <= 1e-10


def test_bellman_error_zero_for_consistent_critic_on_deterministic_mdp():
    mdp = envs.chain2()
    pi = TabularPolicy.deterministic([RIGHT, LEFT], 2)
    q = policy_eval_q(mdp, pi)
    dyn, _ = collect_trajectories(mdp, TabularPolicy.uniform(2, 2), 20, 10, 1)
    assert abs(L.empirical_bellman_error(dyn.full_batch(), pi, q, mdp.reward, mdp.gamma).value) <= 1e-10


def test_bellman_error_non_tabular_inner_minimization():
    rng = np.random.default_rng(0)
    data = _random_data(rng, n=40)
    f = mlp2(4, 6, 3, rng)
    est = L.empirical_bellman_error(data.full_batch(), TabularPolicy.uniform(4, 3), f, rng.uniform(size=(4, 4)),
                                    0.5, inner_tol=1e-4, max_iter=20_000)
    assert est.value >= -1e-4
    assert est.iterations >= 1


# --- actor and temperature -----------------------------------------------------------------------------


def test_actor_loss_zero_temperature_is_negative_pessimism():
    batch, pi, f, _, _ = _dqra_inputs(1)
    assert L.actor_loss(batch, pi, f, 0.0) == -L.pessimism_loss(batch, pi, f)


def test_uniform_policy_entropy_term():
    batch = _random_data(np.random.default_rng(0)).full_batch()
    pi = TabularPolicy.uniform(4, 3)
    f = np.zeros((4, 3))
    assert L.actor_loss(batch, pi, f, 2.0) == pytest.approx(-2.0 * np.log(3), abs=1e-12)


def test_actor_ascent_picks_better_action():
    pi = tabular(1, 2)
    f = np.array([[0.0, 1.0]])
    batch = Batch(np.zeros(8, int), np.zeros(8, int), np.array([0, 1] * 4))
    opt = AdamState.for_fn(pi, 5e-4)
    for _ in range(10_000):
        adam_step(opt, pi, L.actor_grad(batch, pi, f, 0.0)[1]["pi"])
    assert L.policy_probs(pi, np.array([0]))[0, 1] >= 0.99


def test_temperature_update_rules():
    assert L.temperature_update(0.3, 0.5, 0.5, 0.1) == 0.3
    assert L.temperature_update(0.05, 5.0, 0.5, 0.1) == 0.0
    with pytest.raises(ValueError):
        L.temperature_update(0.1, 0.1, 0.1, 0.0)


def test_temperature_closed_loop_reaches_entropy_target():
    # bandit with one clearly better action: entropy would collapse without the constraint
    pi = tabular(1, 4)
    f = np.array([[1.0, 0.0, 0.0, 0.0]])
    batch = Batch(np.zeros(4, int), np.zeros(4, int), np.arange(4))
    target = 0.5 * np.log(4)
    opt = AdamState.for_fn(pi, 0.01)
    temp = 0.0
    for _ in range(20_000):
        _, grads = L.actor_grad(batch, pi, f, temp)
        adam_step(opt, pi, grads["pi"])
        ent = float(L.entropy_rows(L.policy_probs(pi, np.array([0])))[0])
        temp = L.temperature_update(temp, ent, target, 0.01)
    assert abs(ent - target) <= 0.1
