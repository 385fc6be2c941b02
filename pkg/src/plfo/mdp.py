"""Finite MDPs with state-transition rewards and exact evaluation oracles."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DENSE_LIMIT = 10_000
ROW_TOL = 1e-9


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP whose reward is defined on (s, s') pairs.

    ``transition[s, a, s']`` is the probability of landing in ``s'`` and
    ``reward[s, s']`` the reward of that transition. Terminal states are
    absorbing with zero self-reward.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    r_max: float = 1.0
    terminal_states: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        d0 = np.array(self.initial_dist, dtype=float)
        P.setflags(write=False)
        R.setflags(write=False)
        d0.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "terminal_states", frozenset(int(t) for t in self.terminal_states))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states)
        mask[list(self.terminal_states)] = 1.0
        return mask

    def validate(self) -> None:
        P, R = self.transition, self.reward
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] == 0 or P.shape[1] == 0:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S = P.shape[0]
        if R.shape != (S, S):
            raise ValueError(f"reward must have shape ({S}, {S}), got {R.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist must have one entry per state")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("every transition row must be a probability distribution")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if np.any(R < 0) or np.any(R > self.r_max):
            raise ValueError("rewards must lie in [0, r_max]")
        for t in self.terminal_states:
            if not 0 <= t < S:
                raise ValueError(f"terminal state {t} out of range")
            if np.any(np.abs(P[t, :, t] - 1.0) > ROW_TOL) or R[t, t] != 0.0:
                raise ValueError(f"terminal state {t} must be absorbing with zero reward")

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "d0": self.initial_dist.tolist(),
            "terminal": sorted(self.terminal_states),
            "P": self.transition.tolist(),
            "R": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TabularMdp:
        mdp = cls(
            transition=np.asarray(doc["P"], dtype=float),
            reward=np.asarray(doc["R"], dtype=float),
            gamma=doc["gamma"],
            initial_dist=np.asarray(doc["d0"], dtype=float),
            r_max=doc["r_max"],
            terminal_states=frozenset(doc.get("terminal", ())),
        )
        if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
            raise ValueError("n_states/n_actions disagree with the P array")
        return mdp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> TabularMdp:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        """Stable content hash, recorded next to generated datasets."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy table must be (S, A)")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> TabularPolicy:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> TabularPolicy:
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, n_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    def mix(self, other: TabularPolicy, weight: float) -> TabularPolicy:
        """``(1 - weight) * self + weight * other``."""
        return TabularPolicy((1.0 - weight) * self.probs + weight * other.probs)

    def greedy(self) -> TabularPolicy:
        return TabularPolicy.deterministic(self.probs.argmax(axis=1), self.probs.shape[1])

    def entropy(self) -> np.ndarray:
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)


def _check_policy(mdp: TabularMdp, pi: TabularPolicy) -> None:
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")


def _iteration_cap(mdp: TabularMdp, tol: float, margin: int = 100) -> int:
    if mdp.gamma == 0.0:
        return margin
    ratio = tol * (1.0 - mdp.gamma) / max(mdp.v_max, tol)
    return int(math.ceil(math.log(ratio) / math.log(mdp.gamma))) + margin


def effective_reward(mdp: TabularMdp) -> np.ndarray:
    """Expected reward of each (s, a): sum over s' of P(s'|s,a) R(s,s')."""
    return np.einsum("sat,st->sa", mdp.transition, mdp.reward)


def state_values(pi: TabularPolicy | np.ndarray, f: np.ndarray) -> np.ndarray:
    """f(s, pi) = sum_a pi(a|s) f(s, a)."""
    probs = pi.probs if isinstance(pi, TabularPolicy) else pi
    return (probs * f).sum(axis=1)


def apply_transition_op(mdp: TabularMdp, pi: TabularPolicy, f: np.ndarray) -> np.ndarray:
    """(P^pi f)(s,a) = gamma * E_{s'~P(.|s,a)} E_{a'~pi(.|s')} f(s', a')."""
    _check_policy(mdp, pi)
    f = np.asarray(f, dtype=float)
    if f.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"critic shape {f.shape} does not match MDP")
    return mdp.gamma * mdp.transition @ state_values(pi, f)


def policy_transition(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def bellman_residual(mdp: TabularMdp, pi: TabularPolicy, q: np.ndarray) -> float:
    return float(np.max(np.abs(q - effective_reward(mdp) - apply_transition_op(mdp, pi, q))))


def policy_eval_q(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-10) -> np.ndarray:
    """Exact Q^pi. Dense solve up to DENSE_LIMIT state-actions, iteration beyond."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_policy(mdp, pi)
    rbar = effective_reward(mdp)
    S, A = rbar.shape
    if S * A <= DENSE_LIMIT:
        r_pi = state_values(pi, rbar)
        v = np.linalg.solve(np.eye(S) - mdp.gamma * policy_transition(mdp, pi), r_pi)
        q = rbar + mdp.gamma * mdp.transition @ v
    else:
        q = np.zeros((S, A))
        for _ in range(_iteration_cap(mdp, tol)):
            q_next = rbar + apply_transition_op(mdp, pi, q)
            done = np.max(np.abs(q_next - q)) * mdp.gamma / max(1.0 - mdp.gamma, 1e-300) <= tol
            q = q_next
            if done:
                break
        else:
            raise ConvergenceError("policy evaluation hit its iteration cap")
    residual = bellman_residual(mdp, pi, q)
    if residual > tol:
        # one fixed-point sweep mops up round-off from the solve
        q = rbar + apply_transition_op(mdp, pi, q)
        residual = bellman_residual(mdp, pi, q)
        if residual > tol:
            raise ConvergenceError(f"Bellman residual {residual:.3e} exceeds tol {tol:.1e}")
    return q


def greedy_actions(q: np.ndarray, tie_tol: float = 1e-8) -> np.ndarray:
    """Argmax per row, lowest index among near-ties."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol * np.maximum(1.0, np.abs(best)), axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> tuple[np.ndarray, TabularPolicy]:
    """Optimal Q* and its greedy deterministic policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    rbar = effective_reward(mdp)
    q = np.zeros_like(rbar)
    for _ in range(_iteration_cap(mdp, tol)):
        q_next = rbar + mdp.gamma * mdp.transition @ q.max(axis=1)
        delta = np.max(np.abs(q_next - q))
        q = q_next
        if delta <= tol:
            break
    else:
        raise ConvergenceError("value iteration hit its iteration cap")
    return q, TabularPolicy.deterministic(greedy_actions(q), mdp.n_actions)


def occupancy(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-10) -> np.ndarray:
    """Normalized discounted state-action occupancy d^pi(s,a)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_policy(mdp, pi)
    S = mdp.n_states
    P_pi = policy_transition(mdp, pi)
    if S * mdp.n_actions <= DENSE_LIMIT:
        d_s = (1.0 - mdp.gamma) * np.linalg.solve(np.eye(S) - mdp.gamma * P_pi.T, mdp.initial_dist)
    else:
        d_s = np.zeros(S)
        term = (1.0 - mdp.gamma) * mdp.initial_dist
        for _ in range(_iteration_cap(mdp, tol)):
            d_s += term
            term = mdp.gamma * P_pi.T @ term
            if term.sum() <= tol:
                d_s += term
                break
        else:
            raise ConvergenceError("occupancy series hit its iteration cap")
    d = np.clip(d_s, 0.0, None)[:, None] * pi.probs
    return d / d.sum()


def expected_return(mdp: TabularMdp, pi: TabularPolicy) -> float:
    """J(pi) = sum_s d0(s) sum_a pi(a|s) Q^pi(s,a)."""
    q = policy_eval_q(mdp, pi)
    return float(mdp.initial_dist @ state_values(pi, q))


def reach_probability(mdp: TabularMdp, pi: TabularPolicy, targets, horizon: int) -> float:
    """Probability of entering any of ``targets`` within ``horizon`` steps from d0."""
    targets = np.asarray(sorted(targets), dtype=int)
    P_pi = policy_transition(mdp, pi).copy()
    P_pi[targets] = 0.0
    P_pi[targets, targets] = 1.0
    dist = mdp.initial_dist.copy()
    for _ in range(horizon):
        dist = dist @ P_pi
    return float(dist[targets].sum())
