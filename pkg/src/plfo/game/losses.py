"""Minibatch losses of the MAHALO game and their exact gradients.

Critics map a state to a vector of action values, reward functions map a
state to a vector over next states, and policies map a state to action
logits. Any of them may also be given as a fixed table (ndarray), in which
case no gradient is produced for it. A reward of ``None`` means "use the
rewards observed in the batch".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datasets import Batch
from ..funcapprox import ParamFunction
from ..mdp import TabularPolicy


@dataclass(frozen=True, eq=False)
class MinOf:
    """Elementwise minimum of two functions; used for the double-Q target."""

    first: object
    second: object

    def forward(self, x) -> np.ndarray:
        return np.minimum(values(self.first, x), values(self.second, x))


def values(fn, states) -> np.ndarray:
    if isinstance(fn, ParamFunction) or isinstance(fn, MinOf):
        return fn.forward(states)
    return np.asarray(fn, dtype=float)[states]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs(pi, states) -> np.ndarray:
    if isinstance(pi, ParamFunction):
        return softmax(pi.forward(states))
    if isinstance(pi, TabularPolicy):
        return pi.probs[states]
    return np.asarray(pi, dtype=float)[states]


def policy_table(pi, n_states: int) -> TabularPolicy:
    return TabularPolicy(policy_probs(pi, np.arange(n_states)))


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=-1)


def _bootstrap_scale(batch: Batch, gamma: float, terminal) -> np.ndarray:
    if terminal is None:
        return np.full(len(batch), gamma)
    return gamma * (1.0 - np.asarray(terminal, dtype=float)[batch.sp])


def _rewards(g, batch: Batch) -> np.ndarray:
    if g is None:
        if batch.r is None:
            raise ValueError("batch carries no rewards and no reward function was given")
        return batch.r
    return values(g, batch.s)[np.arange(len(batch)), batch.sp]


def _check_nonempty(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("loss needs a nonempty batch")


def _accumulate(grads: dict, key: str, fn, x, dout) -> None:
    if not isinstance(fn, ParamFunction):
        return
    g = fn.backward(x, dout)
    grads[key] = grads[key] + g if key in grads else g


# --- pessimism ---------------------------------------------------------------------


def pessimism_loss(batch: Batch, pi, f) -> float:
    """Mean of f(s, pi) - f(s, a) over the batch."""
    _check_nonempty(batch)
    q = values(f, batch.s)
    p = policy_probs(pi, batch.s)
    return float(np.mean((p * q).sum(axis=1) - q[np.arange(len(batch)), batch.a]))


def pessimism_grad(batch: Batch, pi, f) -> tuple[float, dict]:
    """Value and gradient w.r.t. the critic (key 'f')."""
    _check_nonempty(batch)
    B = len(batch)
    q = values(f, batch.s)
    p = policy_probs(pi, batch.s)
    value = float(np.mean((p * q).sum(axis=1) - q[np.arange(B), batch.a]))
    dq = p.copy()
    dq[np.arange(B), batch.a] -= 1.0
    grads: dict = {}
    _accumulate(grads, "f", f, batch.s, dq / B)
    return value, grads


def initial_value_loss(d0: np.ndarray, gamma: float, pi, f) -> float:
    """(1 - gamma) * E_{s~d0} f(s, pi), the absolute-pessimism surrogate."""
    states = np.flatnonzero(d0)
    q = values(f, states)
    p = policy_probs(pi, states)
    return float((1.0 - gamma) * d0[states] @ (p * q).sum(axis=1))


def initial_value_grad(d0: np.ndarray, gamma: float, pi, f) -> tuple[float, dict]:
    states = np.flatnonzero(d0)
    q = values(f, states)
    p = policy_probs(pi, states)
    value = float((1.0 - gamma) * d0[states] @ (p * q).sum(axis=1))
    grads: dict = {}
    _accumulate(grads, "f", f, states, (1.0 - gamma) * d0[states, None] * p)
    return value, grads


# --- reward consistency -------------------------------------------------------------


def reward_mse_loss(batch: Batch, g) -> float:
    """Mean of (g(s, s') - r)^2."""
    _check_nonempty(batch)
    return float(np.mean((_rewards(g, batch) - batch.r) ** 2))


def reward_mse_grad(batch: Batch, g) -> tuple[float, dict]:
    _check_nonempty(batch)
    B = len(batch)
    err = _rewards(g, batch) - batch.r
    grads: dict = {}
    if isinstance(g, ParamFunction):
        dout = np.zeros((B, g.out_dim))
        dout[np.arange(B), batch.sp] = 2.0 * err / B
        _accumulate(grads, "g", g, batch.s, dout)
    return float(np.mean(err ** 2)), grads


# --- Bellman consistency ---------------------------------------------------------------


def td_loss(batch: Batch, pi, f, f_boot, g, gamma: float, terminal=None) -> float:
    """Mean of (f(s,a) - g(s,s') - gamma * f_boot(s', pi))^2."""
    return td_grad(batch, pi, f, f_boot, g, gamma, terminal, wrt=())[0]


def td_grad(batch: Batch, pi, f, f_boot, g, gamma: float, terminal=None,
            wrt=("f", "g")) -> tuple[float, dict]:
    """TD loss and gradients.

    ``wrt`` may contain 'f' (critic at (s, a); also through the bootstrap
    when ``f_boot is f``) and 'g' (reward function).
    """
    _check_nonempty(batch)
    B = len(batch)
    rows = np.arange(B)
    q = values(f, batch.s)
    q_next = values(f_boot, batch.sp)
    p_next = policy_probs(pi, batch.sp)
    scale = _bootstrap_scale(batch, gamma, terminal)
    rew = _rewards(g, batch)
    delta = q[rows, batch.a] - rew - scale * (p_next * q_next).sum(axis=1)
    grads: dict = {}
    if "f" in wrt and isinstance(f, ParamFunction):
        dq = np.zeros_like(q)
        dq[rows, batch.a] = 2.0 * delta / B
        _accumulate(grads, "f", f, batch.s, dq)
        if f_boot is f:
            _accumulate(grads, "f", f, batch.sp, (-2.0 * delta * scale / B)[:, None] * p_next)
    if "g" in wrt and isinstance(g, ParamFunction):
        dout = np.zeros((B, g.out_dim))
        dout[rows, batch.sp] = -2.0 * delta / B
        _accumulate(grads, "g", g, batch.s, dout)
    return float(np.mean(delta ** 2)), grads


def dqra_loss(batch: Batch, pi, f, targets, g, w: float, gamma: float, terminal=None) -> float:
    """(1-w) * residual TD loss + w * TD loss against the min of the two targets."""
    return dqra_grad(batch, pi, f, targets, g, w, gamma, terminal, wrt=())[0]


def dqra_grad(batch: Batch, pi, f, targets, g, w: float, gamma: float, terminal=None,
              wrt=("f", "g")) -> tuple[float, dict]:
    if not 0.0 <= w <= 1.0:
        raise ValueError("w must lie in [0, 1]")
    target_min = MinOf(*targets)
    v_res, g_res = td_grad(batch, pi, f, f, g, gamma, terminal, wrt)
    v_tgt, g_tgt = td_grad(batch, pi, f, target_min, g, gamma, terminal, wrt)
    grads = {k: (1.0 - w) * g_res.get(k, 0.0) + w * g_tgt.get(k, 0.0)
             for k in set(g_res) | set(g_tgt)}
    return (1.0 - w) * v_res + w * v_tgt, grads


# --- actor ----------------------------------------------------------------------------


def actor_loss(batch: Batch, pi, f, temperature: float) -> float:
    """-pessimism_loss - temperature * mean policy entropy at batch states."""
    return actor_grad(batch, pi, f, temperature)[0]


def actor_grad(batch: Batch, pi, f, temperature: float) -> tuple[float, dict]:
    """Actor loss and gradient w.r.t. the policy logits (key 'pi'); f is frozen."""
    if temperature < 0:
        raise ValueError("temperature must be nonnegative")
    _check_nonempty(batch)
    B = len(batch)
    q = values(f, batch.s)
    p = policy_probs(pi, batch.s)
    v = (p * q).sum(axis=1)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    ent = -(p * logp).sum(axis=1)
    value = float(-np.mean(v - q[np.arange(B), batch.a]) - temperature * ent.mean())
    grads: dict = {}
    if isinstance(pi, ParamFunction):
        dlogits = (-p * (q - v[:, None]) + temperature * p * (logp + ent[:, None])) / B
        grads["pi"] = pi.backward(batch.s, dlogits)
    return value, grads


def initial_actor_grad(d0: np.ndarray, gamma: float, pi, f, temperature: float) -> tuple[float, dict]:
    """Actor loss -(1-gamma) f(d0, pi) - temperature * d0-weighted entropy."""
    states = np.flatnonzero(d0)
    wts = d0[states]
    q = values(f, states)
    p = policy_probs(pi, states)
    v = (p * q).sum(axis=1)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    ent = -(p * logp).sum(axis=1)
    value = float(-(1.0 - gamma) * wts @ v - temperature * wts @ ent)
    grads: dict = {}
    if isinstance(pi, ParamFunction):
        dlogits = wts[:, None] * (-(1.0 - gamma) * p * (q - v[:, None]) + temperature * p * (logp + ent[:, None]))
        grads["pi"] = pi.backward(states, dlogits)
    return value, grads


def bc_grad(batch: Batch, pi) -> tuple[float, dict]:
    """Negative log-likelihood of the batch actions and its logit gradient."""
    _check_nonempty(batch)
    B = len(batch)
    p = policy_probs(pi, batch.s)
    rows = np.arange(B)
    with np.errstate(divide="ignore"):
        value = float(-np.mean(np.log(p[rows, batch.a])))
    grads: dict = {}
    if isinstance(pi, ParamFunction):
        d = p.copy()
        d[rows, batch.a] -= 1.0
        grads["pi"] = pi.backward(batch.s, d / B)
    return value, grads


def temperature_update(temperature: float, batch_entropy: float, entropy_target: float, lr: float) -> float:
    """Projected dual ascent on the minimum-entropy constraint."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    return max(0.0, temperature + lr * (entropy_target - batch_entropy))


# --- estimated Bellman error ------------------------------------------------------------------


@dataclass(frozen=True)
class BellmanErrorEstimate:
    value: float
    converged: bool = True
    inner_grad_norm: float = 0.0
    iterations: int = 0

    def __float__(self) -> float:
        return self.value


def bootstrap_targets(batch: Batch, pi, f, g, gamma: float, terminal=None) -> np.ndarray:
    """y = g(s, s') + gamma * f(s', pi) per record."""
    q_next = values(f, batch.sp)
    p_next = policy_probs(pi, batch.sp)
    return _rewards(g, batch) + _bootstrap_scale(batch, gamma, terminal) * (p_next * q_next).sum(axis=1)


def _is_tabular(f) -> bool:
    from ..funcapprox import Tabular
    return not isinstance(f, ParamFunction) or isinstance(f.arch, Tabular)


def cell_means(cells: np.ndarray, y: np.ndarray, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(cells, minlength=n_cells).astype(float)
    sums = np.bincount(cells, weights=y, minlength=n_cells)
    means = np.divide(sums, counts, out=np.zeros(n_cells), where=counts > 0)
    return means, counts


def empirical_bellman_error(data: Batch, pi, f, g, gamma: float, terminal=None, *,
                            inner_tol: float = 1e-8, max_iter: int = 20_000) -> BellmanErrorEstimate:
    """E_D[(f - y)^2] - min_{f'} E_D[(f' - y)^2] with y = g + gamma * f(s', pi).

    Tabular critics use the closed-form inner minimizer (per-cell mean of y);
    other architectures minimize by Adam until the gradient norm drops below
    ``inner_tol``.
    """
    _check_nonempty(data)
    B = len(data)
    rows = np.arange(B)
    y = bootstrap_targets(data, pi, f, g, gamma, terminal)
    q = values(f, data.s)
    first = float(np.mean((q[rows, data.a] - y) ** 2))
    if _is_tabular(f):
        n_actions = q.shape[1]
        cells = data.s * n_actions + data.a
        means, _ = cell_means(cells, y, int(cells.max()) + 1)
        inner = float(np.mean((means[cells] - y) ** 2))
        return BellmanErrorEstimate(first - inner)

    from ..funcapprox import AdamState, adam_step

    fp = f.copy()
    opt = AdamState.for_fn(fp, lr=1e-2)
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        qp = fp.forward(data.s)
        dq = np.zeros_like(qp)
        dq[rows, data.a] = 2.0 * (qp[rows, data.a] - y) / B
        grad = fp.backward(data.s, dq)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= inner_tol:
            break
        adam_step(opt, fp, grad)
    qp = fp.forward(data.s)
    inner = float(np.mean((qp[rows, data.a] - y) ** 2))
    return BellmanErrorEstimate(first - inner, grad_norm <= inner_tol, grad_norm, it)
