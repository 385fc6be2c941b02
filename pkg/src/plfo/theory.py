"""Transfer coefficients, off-support error terms and the robust-improvement audit on small MDPs."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .datasets import ConfigError, ScenarioData
from .game.follower import MAX_PAIRS, grid_tables
from .mdp import (
    TabularMdp,
    TabularPolicy,
    apply_transition_op,
    effective_reward,
    expected_return,
    occupancy,
    value_iteration,
)

ZERO_DENOMINATOR = 1e-12
AUDIT_COLUMNS = ("alpha", "beta", "seed", "J_mu", "J_hat", "gap", "pass")


@dataclass(frozen=True)
class FiniteClassSpec:
    """All tables of ``shape`` with entries drawn from ``value_grid``."""

    value_grid: tuple[float, ...]
    shape: tuple[int, int]
    cap: int = MAX_PAIRS

    def __post_init__(self) -> None:
        object.__setattr__(self, "value_grid", tuple(float(v) for v in self.value_grid))
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.value_grid:
            raise ConfigError("value grid must be nonempty")
        if len(self.value_grid) ** (self.shape[0] * self.shape[1]) > self.cap:
            raise ConfigError(f"{len(self.value_grid)}^{self.shape[0] * self.shape[1]} tables exceed the cap {self.cap}")

    def tables(self) -> np.ndarray:
        return grid_tables(self.value_grid, self.shape, self.cap)


def _as_tables(cls, shape: tuple[int, int]) -> np.ndarray:
    tables = cls.tables() if isinstance(cls, FiniteClassSpec) else np.asarray(cls, dtype=float)
    if tables.ndim == 2:
        tables = tables[None]
    if tables.shape[1:] != shape:
        raise ConfigError(f"class tables have shape {tables.shape[1:]}, expected {shape}")
    if tables.shape[0] == 0:
        raise ConfigError("function class is empty")
    return tables


@dataclass(frozen=True, eq=False)
class TransferReport:
    """Supremum of a weighted-error ratio over a finite class.

    ``witness`` holds the class indices attaining ``coefficient``. When some
    pair has a vanishing denominator but a positive numerator the coefficient
    is infinite and ``witness`` points at that pair.
    """

    coefficient: float
    witness: tuple[int, ...] | None
    skipped: int
    evaluated: int
    infinite: bool = False
    witness_tables: tuple[np.ndarray, ...] = field(default=(), repr=False)


def weighted_sq(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum over the trailing axis of weights * x**2, with the same arithmetic for one row or many."""
    return np.sum(x * x * weights, axis=-1)


def _sup_ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, tuple[int, ...] | None, int, bool]:
    """Scan a grid of numerators and denominators in C order."""
    zero = den < ZERO_DENOMINATOR
    skipped = int(zero.sum())
    blowup = zero & (num >= ZERO_DENOMINATOR)
    if blowup.any():
        first = np.unravel_index(int(np.argmax(blowup.reshape(-1))), num.shape)
        return math.inf, tuple(int(i) for i in first), skipped, True
    if skipped == num.size:
        return 1.0, None, skipped, False
    ratio = np.where(zero, -np.inf, num / np.where(zero, 1.0, den))
    best = np.unravel_index(int(np.argmax(ratio.reshape(-1))), num.shape)
    return float(ratio[best]), tuple(int(i) for i in best), skipped, False


def bellman_part(mdp: TabularMdp, pi: TabularPolicy, F: np.ndarray) -> np.ndarray:
    """f - P^pi f for each table in F."""
    return np.stack([f - apply_transition_op(mdp, pi, f) for f in F])


def expected_reward_tables(mdp: TabularMdp, G: np.ndarray) -> np.ndarray:
    """g_bar(s, a) = sum_s' P(s'|s,a) g(s, s') for each table in G."""
    return np.einsum("sat,nst->nsa", mdp.transition, G)


def bellman_pair_ratio(rho, mu, f, g, pi: TabularPolicy, mdp: TabularMdp) -> tuple[float, float]:
    """Numerator and denominator of the Bellman transfer ratio for one (f, g)."""
    resid = (bellman_part(mdp, pi, np.asarray(f, float)[None])[0]
             - expected_reward_tables(mdp, np.asarray(g, float)[None])[0]).reshape(-1)
    return float(weighted_sq(resid, np.ravel(rho))), float(weighted_sq(resid, np.ravel(mu)))


def bellman_transfer_coeff(rho, mu, F, G, pi: TabularPolicy, mdp: TabularMdp) -> TransferReport:
    """sup over F x G of ||f - g_bar - P^pi f||^2_rho / ||f - g_bar - P^pi f||^2_mu.

    Pairs whose mu-norm is below 1e-12 are skipped; if their rho-norm is not,
    the coefficient is infinite. With every pair skipped the coefficient is 1.
    """
    S, A = mdp.n_states, mdp.n_actions
    F = _as_tables(F, (S, A))
    G = _as_tables(G, (S, S))
    if F.shape[0] * G.shape[0] > MAX_PAIRS:
        raise ConfigError(f"|F|*|G| = {F.shape[0] * G.shape[0]} exceeds {MAX_PAIRS}")
    rho = np.asarray(rho, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    fp = bellman_part(mdp, pi, F).reshape(F.shape[0], -1)
    gp = expected_reward_tables(mdp, G).reshape(G.shape[0], -1)
    num = np.empty((F.shape[0], G.shape[0]))
    den = np.empty_like(num)
    for i in range(F.shape[0]):
        resid = fp[i][None, :] - gp
        num[i] = weighted_sq(resid, rho)
        den[i] = weighted_sq(resid, mu)
    coeff, witness, skipped, infinite = _sup_ratio(num, den)
    tables = (F[witness[0]].copy(), G[witness[1]].copy()) if witness is not None else ()
    return TransferReport(coeff, witness, skipped, num.size, infinite, tables)


def reward_pair_ratio(rho, nu, g, mdp: TabularMdp) -> tuple[float, float]:
    g = np.asarray(g, dtype=float)
    num_resid = (expected_reward_tables(mdp, g[None])[0] - effective_reward(mdp)).reshape(-1)
    den_resid = (g - mdp.reward).reshape(-1)
    return float(weighted_sq(num_resid, np.ravel(rho))), float(weighted_sq(den_resid, np.ravel(nu)))


def reward_transfer_coeff(rho, nu, G, mdp: TabularMdp) -> TransferReport:
    """sup over G of ||g_bar - R_bar||^2_rho / ||g - R||^2_nu with the Bellman conventions.

    ``rho`` weights (s, a) and ``nu`` weights (s, s').
    """
    S = mdp.n_states
    G = _as_tables(G, (S, S))
    rho = np.asarray(rho, dtype=float).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    num = weighted_sq((expected_reward_tables(mdp, G) - effective_reward(mdp)).reshape(G.shape[0], -1), rho)
    den = weighted_sq((G - mdp.reward).reshape(G.shape[0], -1), nu)
    coeff, witness, skipped, infinite = _sup_ratio(num, den)
    tables = (G[witness[0]].copy(),) if witness is not None else ()
    return TransferReport(coeff, witness, skipped, num.size, infinite, tables)


# --- off-support terms -------------------------------------------------------------------------------


def excess(d1, d2) -> np.ndarray:
    """Elementwise max(d1 - d2, 0)."""
    return np.maximum(np.asarray(d1, float) - np.asarray(d2, float), 0.0)


def symmetric_excess(d1, d2) -> np.ndarray:
    return excess(d1, d2) + excess(d2, d1)


def off_support_terms(pi: TabularPolicy, mu, rho, f, g, mdp: TabularMdp) -> tuple[float, float]:
    """Dynamics and reward off-support errors under relative pessimism.

    dyn = <d^pi \\ rho, g_bar + P^pi f - f> / (1 - gamma)
    reward = <(d^pi (-) mu) \\ rho, |R_bar - g_bar|> / (1 - gamma)
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    d_pi = occupancy(mdp, pi)
    gbar = expected_reward_tables(mdp, g[None])[0]
    scale = 1.0 / (1.0 - mdp.gamma)
    dyn = float(np.sum(excess(d_pi, rho) * (gbar + apply_transition_op(mdp, pi, f) - f))) * scale
    rew = float(np.sum(excess(symmetric_excess(d_pi, mu), rho) * np.abs(effective_reward(mdp) - gbar))) * scale
    return dyn, rew


def pspi_off_support_term(pi: TabularPolicy, rho, f, mdp: TabularMdp) -> float:
    """<d^pi \\ rho, R_bar + P^pi f - f> / (1 - gamma), the absolute-pessimism counterpart."""
    f = np.asarray(f, dtype=float)
    d_pi = occupancy(mdp, pi)
    integrand = effective_reward(mdp) + apply_transition_op(mdp, pi, f) - f
    return float(np.sum(excess(d_pi, rho) * integrand)) / (1.0 - mdp.gamma)


# --- robust policy improvement audit -----------------------------------------------------------------


def min_return(mdp: TabularMdp, tol: float = 1e-10) -> float:
    """Smallest J over all policies, by value iteration on the minimizing Bellman operator."""
    rbar = effective_reward(mdp)
    q = np.zeros_like(rbar)
    for _ in range(100_000):
        q_next = rbar + mdp.gamma * mdp.transition @ q.min(axis=1)
        delta = np.max(np.abs(q_next - q))
        q = q_next
        if delta <= tol:
            break
    return float(mdp.initial_dist @ q.min(axis=1))


@dataclass(frozen=True)
class AuditCell:
    alpha: float
    beta: float
    seed: int
    J_mu: float
    J_hat: float
    gap: float
    passed: bool
    error: str = ""


@dataclass(frozen=True, eq=False)
class AuditTable:
    cells: tuple[AuditCell, ...]
    epsilon: float
    J_star: float
    J_min: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cells)

    @property
    def pass_rate(self) -> float:
        return sum(c.passed for c in self.cells) / len(self.cells) if self.cells else 1.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for c in self.cells:
            writer.writerow([repr(float(c.alpha)), repr(float(c.beta)), c.seed, repr(c.J_mu), repr(c.J_hat),
                             repr(c.gap), "true" if c.passed else "false"])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


ScenarioFactory = Callable[[int], ScenarioData]
AlgoRunner = Callable[[ScenarioData, float, float, int], TabularPolicy]


def robust_improvement_audit(mdp: TabularMdp, make_data: ScenarioFactory, run_algo: AlgoRunner,
                             grid: Iterable[tuple[float, float]], seeds: Sequence[int],
                             tolerance: float = 0.05) -> AuditTable:
    """Check J(pi_hat) >= J(mu) - tolerance * (J* - J_min) for every (alpha, beta, seed).

    ``make_data(seed)`` builds the datasets whose ``held_out_eval_policy`` is
    the behavior policy mu; ``run_algo(data, alpha, beta, seed)`` returns the
    learned policy. Trainer exceptions become failing cells.
    """
    _, pi_star = value_iteration(mdp)
    j_star = expected_return(mdp, pi_star)
    j_min = min_return(mdp)
    eps = tolerance * (j_star - j_min)
    cells = []
    grid = list(grid)
    for seed in seeds:
        data = make_data(seed)
        j_mu = expected_return(mdp, data.held_out_eval_policy)
        for alpha, beta in grid:
            try:
                j_hat = expected_return(mdp, run_algo(data, alpha, beta, seed))
                error = ""
            except Exception as exc:  # recorded, not raised
                j_hat, error = math.nan, f"{type(exc).__name__}: {exc}"
            gap = j_mu - j_hat
            cells.append(AuditCell(float(alpha), float(beta), int(seed), j_mu, j_hat, gap,
                                   bool(j_hat >= j_mu - eps), error))
    return AuditTable(tuple(cells), eps, j_star, j_min)
