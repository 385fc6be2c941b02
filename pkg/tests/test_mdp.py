import itertools
import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plfo import envs
from plfo.mdp import (
    TabularMdp,
    TabularPolicy,
    apply_transition_op,
    bellman_residual,
    effective_reward,
    expected_return,
    occupancy,
    policy_eval_q,
    reach_probability,
    value_iteration,
)

from conftest import random_mdp, random_policy

L, R = envs.LEFT, envs.RIGHT
ALWAYS_R = TabularPolicy.deterministic([R, R], 2)
ALWAYS_L = TabularPolicy.deterministic([L, L], 2)


# --- validation and persistence ---------------------------------------------------------------


def test_rejects_bad_rows():
    P = np.ones((2, 1, 2))
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 2)), 0.5, np.array([1.0, 0.0]))


def test_rejects_reward_above_r_max():
    P = np.ones((1, 1, 1))
    with pytest.raises(ValueError):
        TabularMdp(P, np.full((1, 1), 2.0), 0.5, np.ones(1), r_max=1.0)


def test_rejects_gamma_one():
    with pytest.raises(ValueError):
        envs.loop1(gamma=1.0)


def test_terminal_must_absorb():
    P = np.zeros((2, 1, 2))
    P[:, 0, 0] = 1.0
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 2)), 0.5, np.array([1.0, 0.0]), terminal_states={1})


def test_json_round_trip(tmp_path):
    mdp = envs.grid5()
    path = tmp_path / "m.json"
    mdp.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"n_states", "n_actions", "gamma", "r_max", "d0", "terminal", "P", "R"}
    back = TabularMdp.load(path)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.terminal_states == mdp.terminal_states
    assert back.digest() == mdp.digest()


def test_json_size_mismatch():
    doc = envs.chain2().to_dict()
    doc["n_states"] = 3
    with pytest.raises(ValueError):
        TabularMdp.from_dict(doc)


# --- worked examples -------------------------------------------------------------------------------


def test_effective_reward_examples():
    assert effective_reward(envs.loop1()).tolist() == [[1.0]]
    assert effective_reward(envs.chain2())[0, R] == 1.0


def test_effective_reward_matches_exhaustive_sum(rng):
    mdp = random_mdp(rng, 3, 2)
    expected = np.zeros((3, 2))
    for s, a, t in itertools.product(range(3), range(2), range(3)):
        expected[s, a] += mdp.transition[s, a, t] * mdp.reward[s, t]
    assert np.allclose(effective_reward(mdp), expected, atol=1e-14)


def test_transition_op_examples():
    loop = envs.loop1()
    pi = TabularPolicy.uniform(1, 1)
    assert np.allclose(apply_transition_op(loop, pi, np.zeros((1, 1))), 0.0)
    assert apply_transition_op(loop, pi, np.array([[10.0]]))[0, 0] == pytest.approx(9.0, abs=1e-12)
    chain = envs.chain2()
    q = policy_eval_q(chain, ALWAYS_R)
    assert np.allclose(apply_transition_op(chain, ALWAYS_R, q), q - effective_reward(chain), atol=1e-9)


def test_transition_op_shape_error():
    with pytest.raises(ValueError):
        apply_transition_op(envs.chain2(), ALWAYS_R, np.zeros((3, 2)))


def test_policy_eval_examples():
    assert policy_eval_q(envs.loop1(), TabularPolicy.uniform(1, 1))[0, 0] == pytest.approx(10.0, abs=1e-9)
    q = policy_eval_q(envs.chain2(), ALWAYS_R)
    assert q[0, R] == pytest.approx(2.0, abs=1e-12)
    assert q[1, R] == pytest.approx(2.0, abs=1e-12)
    assert q[1, L] == pytest.approx(1.0, abs=1e-12)
    assert q[0, L] == pytest.approx(1.0, abs=1e-12)


def test_policy_eval_myopic(rng):
    mdp = random_mdp(rng, 4, 3, gamma=0.0)
    pi = random_policy(rng, 4, 3)
    assert np.array_equal(policy_eval_q(mdp, pi), effective_reward(mdp))


def test_value_iteration_examples():
    _, pi = value_iteration(envs.chain2())
    assert pi.probs.argmax(axis=1).tolist() == [R, R]
    assert expected_return(envs.chain2(), pi) == pytest.approx(2.0, abs=1e-9)
    _, pi = value_iteration(envs.loop1())
    assert expected_return(envs.loop1(), pi) == pytest.approx(10.0, abs=1e-9)


def _bfs_distance(mdp, start, goal):
    seen = {start: 0}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        for a in range(mdp.n_actions):
            t = int(np.argmax(mdp.transition[s, a]))
            if t not in seen:
                seen[t] = seen[s] + 1
                queue.append(t)
    return seen[goal]


def test_grid_optimum_follows_shortest_path():
    mdp = envs.grid5(slip=0.0)
    goal = next(iter(mdp.terminal_states))
    d = _bfs_distance(mdp, 0, goal)
    assert d == 8
    _, pi = value_iteration(mdp)
    assert expected_return(mdp, pi) == pytest.approx(mdp.gamma ** (d - 1), abs=1e-9)
    s, steps = 0, 0
    while s != goal:
        s = int(np.argmax(mdp.transition[s, pi.probs[s].argmax()]))
        steps += 1
    assert steps == d


def test_occupancy_examples():
    assert occupancy(envs.loop1(), TabularPolicy.uniform(1, 1)).tolist() == [[1.0]]
    d = occupancy(envs.chain2(), ALWAYS_R)
    assert d[0, R] == pytest.approx(0.5, abs=1e-12)
    assert d[1, R] == pytest.approx(0.5, abs=1e-12)


def test_expected_return_examples():
    assert expected_return(envs.chain2(), ALWAYS_R) == pytest.approx(2.0, abs=1e-12)
    assert expected_return(envs.chain2(), ALWAYS_L) == pytest.approx(0.0, abs=1e-12)
    assert expected_return(envs.loop1(), TabularPolicy.uniform(1, 1)) == pytest.approx(10.0, abs=1e-9)


def test_reach_probability_deterministic():
    mdp = envs.grid5(slip=0.0)
    _, pi = value_iteration(mdp)
    assert reach_probability(mdp, pi, mdp.terminal_states, 8) == pytest.approx(1.0)
    assert reach_probability(mdp, pi, mdp.terminal_states, 7) == pytest.approx(0.0)


def test_large_mdp_uses_iterative_path(rng):
    mdp = random_mdp(rng, 150, 70, gamma=0.8)
    pi = random_policy(rng, 150, 70)
    q = policy_eval_q(mdp, pi, tol=1e-8)
    assert bellman_residual(mdp, pi, q) <= 1e-8
    d = occupancy(mdp, pi)
    assert d.sum() == pytest.approx(1.0, abs=1e-8)


# --- properties over random instances -------------------------------------------------------------------

instances = st.tuples(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 4))


@settings(max_examples=100, deadline=None)
@given(instances)
def test_policy_eval_residual_within_tol(inst):
    seed, S, A = inst
    rng = np.random.default_rng(seed)
    mdp, pi = random_mdp(rng, S, A), random_policy(rng, S, A)
    assert bellman_residual(mdp, pi, policy_eval_q(mdp, pi, tol=1e-10)) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(instances)
def test_value_iteration_dominates_random_policies(inst):
    seed, S, A = inst
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A)
    _, pi_star = value_iteration(mdp)
    j_star = expected_return(mdp, pi_star)
    for _ in range(50):
        assert expected_return(mdp, random_policy(rng, S, A)) <= j_star + 1e-6


@settings(max_examples=100, deadline=None)
@given(instances)
def test_return_equals_occupancy_formula(inst):
    seed, S, A = inst
    rng = np.random.default_rng(seed)
    mdp, pi = random_mdp(rng, S, A), random_policy(rng, S, A)
    d = occupancy(mdp, pi)
    assert np.all(d >= 0)
    assert d.sum() == pytest.approx(1.0, abs=1e-8)
    via_d = float((d * effective_reward(mdp)).sum()) / (1.0 - mdp.gamma)
    assert expected_return(mdp, pi) == pytest.approx(via_d, abs=1e-6)
