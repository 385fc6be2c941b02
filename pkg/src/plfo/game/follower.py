"""The follower's problem for a fixed leader: brute force over finite classes and a gradient fit."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..datasets import ConfigError, DynamicsDataset, RewardDataset
from ..mdp import TabularPolicy

MAX_PAIRS = 10 ** 6


def grid_tables(levels, shape: tuple[int, int], limit: int = MAX_PAIRS) -> np.ndarray:
    """Every table of ``shape`` whose entries take values in ``levels``, row-major enumeration."""
    levels = np.asarray(levels, dtype=float)
    n_cells = shape[0] * shape[1]
    if levels.size ** n_cells > limit:
        raise ConfigError(f"{levels.size}^{n_cells} tables exceed the enumeration limit {limit}")
    combos = np.array(list(itertools.product(range(levels.size), repeat=n_cells)), dtype=np.int64)
    return levels[combos].reshape((-1,) + shape)


@dataclass(frozen=True)
class _Compressed:
    """Unique (s, a, s') triples with their empirical weights."""

    s: np.ndarray
    a: np.ndarray
    sp: np.ndarray
    weight: np.ndarray


def _compress(data: DynamicsDataset, n_states: int, n_actions: int) -> _Compressed:
    if len(data) == 0:
        raise ConfigError("the dynamics dataset is empty")
    key = (data.s * n_actions + data.a) * n_states + data.sp
    uniq, counts = np.unique(key, return_counts=True)
    sp = uniq % n_states
    sa = uniq // n_states
    return _Compressed(sa // n_actions, sa % n_actions, sp, counts / counts.sum())


def _reward_stats(D_R: RewardDataset, n_states: int):
    """Per (s, s') weights and mean label; E_R(g) = sum w (g - rbar)^2 + const."""
    if len(D_R) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), 0.0
    key = D_R.s * n_states + D_R.sp
    uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    means = np.bincount(inv, weights=D_R.r) / counts
    weight = counts / len(D_R)
    const = float(np.mean((D_R.r - means[inv]) ** 2))
    return uniq, weight, means, const


def reward_consistency(G: np.ndarray, D_R: RewardDataset) -> np.ndarray:
    """Mean squared label error of each reward table in G (shape (n, S, S))."""
    n_states = G.shape[1]
    keys, weight, means, const = _reward_stats(D_R, n_states)
    if keys.size == 0:
        return np.zeros(G.shape[0])
    vals = G.reshape(G.shape[0], -1)[:, keys]
    return ((vals - means) ** 2) @ weight + const


def _boot(F: np.ndarray, pi: TabularPolicy, sp: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return scale * np.einsum("nba,ba->nb", F[:, sp, :], pi.probs[sp])


def follower_objective(pi: TabularPolicy, f: np.ndarray, g: np.ndarray, D_R: RewardDataset, D_A: DynamicsDataset,
                       alpha: float, beta: float, gamma: float, terminal=None) -> float:
    """L(pi, f) + alpha E_R(g) + beta E_A(pi, f, g), inner minimum over all tables."""
    S, A = f.shape
    c = _compress(D_A, S, A)
    scale = gamma * (1.0 - (np.zeros(S) if terminal is None else np.asarray(terminal, float))[c.sp])
    v = (pi.probs * f).sum(axis=1)
    pess = float(c.weight @ (v[c.s] - f[c.s, c.a]))
    y = g[c.s, c.sp] + scale * v[c.sp]
    cells = c.s * A + c.a
    ybar = np.bincount(cells, weights=c.weight * y, minlength=S * A)
    mass = np.bincount(cells, weights=c.weight, minlength=S * A)
    ybar = np.divide(ybar, mass, out=np.zeros(S * A), where=mass > 0)
    bellman = float(c.weight @ (f[c.s, c.a] - y) ** 2 - c.weight @ (ybar[cells] - y) ** 2)
    return pess + alpha * float(reward_consistency(g[None], D_R)[0]) + beta * bellman


@dataclass(frozen=True)
class FollowerSolution:
    f: np.ndarray
    g: np.ndarray
    objective: float
    index: tuple[int, int]


def exact_follower_solve(pi: TabularPolicy, F, G, D_R: RewardDataset, D_A: DynamicsDataset,
                         alpha: float, beta: float, gamma: float, terminal=None) -> FollowerSolution:
    """Global minimizer of the follower objective over F x G by enumeration.

    The Bellman term's inner minimum ranges over F as well. Ties go to the
    earliest pair, with F as the outer loop.
    """
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    total = objective_table(pi, F, G, D_R, D_A, alpha, beta, gamma, terminal)
    flat = int(np.argmin(total))
    fi, gi = divmod(flat, G.shape[0])
    return FollowerSolution(F[fi].copy(), G[gi].copy(), float(total[fi, gi]), (fi, gi))


def objective_table(pi: TabularPolicy, F, G, D_R: RewardDataset, D_A: DynamicsDataset,
                    alpha: float, beta: float, gamma: float, terminal=None) -> np.ndarray:
    """Follower objective for every pair in F x G, shape (|F|, |G|)."""
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    nF, nG = F.shape[0], G.shape[0]
    if nF == 0 or nG == 0:
        raise ConfigError("F and G must be nonempty")
    if nF * nG > MAX_PAIRS:
        raise ConfigError(f"|F|*|G| = {nF * nG} exceeds {MAX_PAIRS}")
    S, A = F.shape[1:]
    c = _compress(D_A, S, A)
    term = np.zeros(S) if terminal is None else np.asarray(terminal, float)
    scale = gamma * (1.0 - term[c.sp])

    v = np.einsum("nsa,sa->ns", F, pi.probs)
    pess = (v[:, c.s] - F[:, c.s, c.a]) @ c.weight                      # (nF,)
    e_r = reward_consistency(G, D_R)                                    # (nG,)
    fc = F[:, c.s, c.a]                                                 # (nF, T)
    boot = _boot(F, pi, c.sp, scale)                                    # (nF, T)
    gv = G[:, c.s, c.sp]                                                # (nG, T)

    total = np.empty((nF, nG))
    chunk = max(1, int(2e6 // max(1, nF * c.weight.size)))
    for i in range(0, nF, chunk):
        y = boot[i:i + chunk, None, :] + gv[None, :, :]                 # (k, nG, T)
        first = ((fc[i:i + chunk, None, :] - y) ** 2) @ c.weight        # (k, nG)
        inner = np.full(first.shape, np.inf)
        for j in range(nF):
            inner = np.minimum(inner, ((fc[j] - y) ** 2) @ c.weight)
        total[i:i + chunk] = pess[i:i + chunk, None] + alpha * e_r[None, :] + beta * (first - inner)
    return total


class _FollowerData:
    """Compressed datasets and constants shared by gradient evaluations."""

    def __init__(self, pi: TabularPolicy, D_R: RewardDataset, D_A: DynamicsDataset, gamma: float, terminal=None):
        S, A = pi.probs.shape
        self.S, self.A = S, A
        self.probs = pi.probs
        self.c = _compress(D_A, S, A)
        term = np.zeros(S) if terminal is None else np.asarray(terminal, float)
        self.scale = gamma * (1.0 - term[self.c.sp])
        self.keys, self.rw, self.rmean, _ = _reward_stats(D_R, S)
        self.cells = self.c.s * A + self.c.a
        self.mass = np.bincount(self.cells, weights=self.c.weight, minlength=S * A)

    def grad(self, ft: np.ndarray, gt: np.ndarray, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
        c, probs, scale = self.c, self.probs, self.scale
        S, A = self.S, self.A
        v = (probs * ft).sum(axis=1)
        y = gt[c.s, c.sp] + scale * v[c.sp]
        ybar = np.divide(np.bincount(self.cells, weights=c.weight * y, minlength=S * A), self.mass,
                         out=np.zeros(S * A), where=self.mass > 0)
        grad_f = np.zeros((S, A))
        grad_g = np.zeros((S, S))
        # pessimism term
        np.add.at(grad_f, c.s, c.weight[:, None] * probs[c.s])
        np.add.at(grad_f, (c.s, c.a), -c.weight)
        # Bellman term: direct part at (s, a), and through y with the inner minimizer held fixed
        np.add.at(grad_f, (c.s, c.a), beta * 2.0 * c.weight * (ft[c.s, c.a] - y))
        dy = beta * 2.0 * c.weight * (ybar[self.cells] - ft[c.s, c.a])
        np.add.at(grad_g, (c.s, c.sp), dy)
        np.add.at(grad_f, c.sp, (dy * scale)[:, None] * probs[c.sp])
        if self.keys.size:
            flat = grad_g.reshape(-1)
            flat[self.keys] += alpha * 2.0 * self.rw * (gt.reshape(-1)[self.keys] - self.rmean)
        return grad_f, grad_g


def follower_gradient(pi: TabularPolicy, f: np.ndarray, g: np.ndarray, D_R: RewardDataset, D_A: DynamicsDataset,
                      alpha: float, beta: float, gamma: float, terminal=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``follower_objective`` with respect to the f and g tables."""
    data = _FollowerData(pi, D_R, D_A, gamma, terminal)
    return data.grad(np.asarray(f, float), np.asarray(g, float), alpha, beta)


def fit_follower(pi: TabularPolicy, D_R: RewardDataset, D_A: DynamicsDataset, alpha: float, beta: float,
                 gamma: float, f_bounds: tuple[float, float], g_bounds: tuple[float, float], *, terminal=None,
                 n_steps: int = 20_000, lr: float = 0.05, seed: int = 0) -> FollowerSolution:
    """Projected Adam on the full-batch follower objective over bounded tables."""
    from ..funcapprox import AdamState, adam_step, tabular, box_project

    rng = np.random.default_rng(seed)
    data = _FollowerData(pi, D_R, D_A, gamma, terminal)
    S, A = data.S, data.A
    f = tabular(S, A, rng.uniform(*f_bounds, size=(S, A)), bounds=f_bounds)
    g = tabular(S, S, rng.uniform(*g_bounds, size=(S, S)), bounds=g_bounds)
    opt_f, opt_g = AdamState.for_fn(f, lr), AdamState.for_fn(g, lr)
    for _ in range(n_steps):
        grad_f, grad_g = data.grad(f.table, g.table, alpha, beta)
        adam_step(opt_f, f, grad_f.reshape(-1))
        adam_step(opt_g, g, grad_g.reshape(-1))
        box_project(f)
        box_project(g)
    ft, gt = f.table.copy(), g.table.copy()
    return FollowerSolution(ft, gt, follower_objective(pi, ft, gt, D_R, D_A, alpha, beta, gamma, terminal), (-1, -1))
