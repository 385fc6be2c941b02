"""Experiment driver: build data, train an algorithm per seed, evaluate, aggregate and compare."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import envs
from .baselines import BaselineKind, Kind, run_baseline
from .datasets import ConfigError, ScenarioData, ScenarioSpec, build_scenario, expert_policy, save_datasets
from .game.learner import (
    GameConfig,
    Problem,
    TrainingDiverged,
    TrainResult,
    make_eval_hook,
    train_mahalo_atac,
    train_mahalo_pspi,
)
from .mdp import TabularMdp, TabularPolicy, expected_return, value_iteration

MAHALO_ATAC = "MAHALO-ATAC"
MAHALO_PSPI = "MAHALO-PSPI"
GAME_ALGOS = (MAHALO_ATAC, MAHALO_PSPI)
ALGORITHMS = GAME_ALGOS + tuple(k.value for k in Kind)
ORACLE = Kind.OracleAtac.value
DEFAULT_HORIZON = 128
DEFAULT_EPISODES = 50
THREADS_ENV = "PLFO_THREADS"
AGGREGATE_COLUMNS = ("scenario", "mdp", "algo", "n_seeds", "n_ok", "partial", "score_mean", "score_se",
                     "success_mean", "success_se", "J_mean", "J_se")
COMPARISON_COLUMNS = ("scenario", "mdp", "algo", "n_seeds", "score_mean", "score_se", "success_mean",
                      "success_se", "best")


def parse_algo(name: str) -> str:
    key = name.replace("-", "").replace("_", "").lower()
    aliases = {"mahalo": MAHALO_ATAC, "mahaloatac": MAHALO_ATAC, "mahalopspi": MAHALO_PSPI}
    if key in aliases:
        return aliases[key]
    try:
        return Kind.parse(name).value
    except ConfigError:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {list(ALGORITHMS)}") from None


def worker_count(requested: int | None = None, jobs: int | None = None) -> int:
    """Requested workers (default: CPU count) capped by PLFO_THREADS and the number of jobs."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV, "").strip()
    if cap:
        try:
            limit = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}") from None
        if limit < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {cap!r}")
        n = min(n, limit)
    if jobs is not None:
        n = min(n, max(1, jobs))
    return max(1, n)


def load_mdp(source: str) -> TabularMdp:
    """A fixture name or a path to an MDP JSON document."""
    if source.lower() in envs.FIXTURES:
        return envs.make_fixture(source)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"{source!r} is neither a fixture ({sorted(envs.FIXTURES)}) nor an MDP file")
    return TabularMdp.load(path)


# --- evaluation --------------------------------------------------------------------------------------


def reference_returns(mdp: TabularMdp) -> tuple[float, float]:
    """Exact J of the uniform policy and of the optimal policy."""
    _, pi_star = value_iteration(mdp)
    return expected_return(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions)), expected_return(mdp, pi_star)


def normalized_score(J: float, j_random: float, j_star: float) -> float:
    """100 at the optimum, 0 at the uniform policy."""
    span = j_star - j_random
    return 100.0 * (J - j_random) / span if span > 0 else math.nan


@dataclass(frozen=True)
class EvalReport:
    """Monte-Carlo and exact evaluation of one policy.

    ``success_rate`` is the fraction of episodes entering a goal state within
    the horizon cap; MDPs without goal states report 0.
    """

    mean_return: float
    return_stderr: float
    success_rate: float
    exact_return: float
    normalized_score: float
    n_episodes: int
    horizon_cap: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> EvalReport:
        return cls(**doc)


def rollout(mdp: TabularMdp, policy: TabularPolicy, n_episodes: int, horizon_cap: int,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Discounted returns and goal flags of ``n_episodes`` episodes run side by side."""
    goals = np.zeros(mdp.n_states, dtype=bool)
    goals[list(envs.goal_states(mdp))] = True
    pi_cdf = np.cumsum(policy.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = np.minimum(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(n_episodes) * mdp.initial_dist.sum(),
                                   side="right"), mdp.n_states - 1)
    returns = np.zeros(n_episodes)
    success = goals[s].copy()
    alive = ~goals[s]
    discount = 1.0
    for _ in range(horizon_cap):
        if not alive.any():
            break
        u = rng.random((2, n_episodes))
        a = (u[0][:, None] * pi_cdf[s, -1][:, None] >= pi_cdf[s]).sum(axis=1)
        a = np.minimum(a, mdp.n_actions - 1)
        cdf = p_cdf[s, a]
        sp = np.minimum((u[1][:, None] * cdf[:, -1][:, None] >= cdf).sum(axis=1), mdp.n_states - 1)
        returns += np.where(alive, discount * mdp.reward[s, sp], 0.0)
        discount *= mdp.gamma
        entered = alive & goals[sp]
        success |= entered
        alive &= ~goals[sp]
        s = sp
    return returns, success


def evaluate_policy(mdp: TabularMdp, policy: TabularPolicy, n_episodes: int = DEFAULT_EPISODES,
                    horizon_cap: int = DEFAULT_HORIZON, seed: int = 0) -> EvalReport:
    """Monte-Carlo rollouts from d0 plus the exact return."""
    if n_episodes < 1 or horizon_cap < 1:
        raise ConfigError("n_episodes and horizon_cap must be positive")
    returns, success = rollout(mdp, policy, n_episodes, horizon_cap, np.random.default_rng(seed))
    exact = expected_return(mdp, policy)
    j_rand, j_star = reference_returns(mdp)
    stderr = float(returns.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return EvalReport(float(returns.mean()), stderr, float(success.mean()), exact,
                      normalized_score(exact, j_rand, j_star), n_episodes, horizon_cap, seed)


# --- experiments -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One algorithm on one scenario over several seeds.

    ``game`` holds GameConfig overrides (its seed is replaced per run) and
    ``baseline`` the baseline-specific settings (idm_arch, idm_steps, r_min).
    """

    scenario: ScenarioSpec
    algo: str = MAHALO_ATAC
    mdp: str = "grid5"
    game: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    n_eval_episodes: int = DEFAULT_EPISODES
    horizon_cap: int = DEFAULT_HORIZON
    seeds: tuple[int, ...] = (0,)
    out: str = "out"
    expert_epsilon: float = 0.05

    def __post_init__(self) -> None:
        scenario = self.scenario
        if isinstance(scenario, str):
            scenario = ScenarioSpec(scenario=scenario)
        elif isinstance(scenario, dict):
            scenario = ScenarioSpec.from_dict(scenario)
        object.__setattr__(self, "scenario", scenario)
        object.__setattr__(self, "algo", parse_algo(self.algo))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "game", dict(self.game))
        object.__setattr__(self, "baseline", dict(self.baseline))
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative")
        if self.n_eval_episodes < 1 or self.horizon_cap < 1:
            raise ConfigError("n_eval_episodes and horizon_cap must be positive")
        if self.mdp.lower() not in envs.FIXTURES and not Path(self.mdp).is_file():
            raise ConfigError(f"unknown MDP {self.mdp!r}")
        self.game_config(self.seeds[0])
        if self.algo in GAME_ALGOS:
            if self.baseline:
                raise ConfigError(f"baseline settings do not apply to {self.algo}")
        else:
            self.baseline_kind()

    def game_config(self, seed: int) -> GameConfig:
        return GameConfig.from_dict({**self.game, "seed": int(seed)})

    def baseline_kind(self) -> BaselineKind:
        return BaselineKind(Kind.parse(self.algo), **self.baseline)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["scenario"] = self.scenario.to_dict()
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        if "scenario" not in doc:
            raise ConfigError("experiment config needs a scenario")
        return cls(**doc)


def eval_seed(seed: int) -> int:
    """Evaluation episodes share this seed across algorithms so comparisons use common randomness."""
    return int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1)[0])


def make_data(config: ExperimentConfig, mdp: TabularMdp, seed: int) -> ScenarioData:
    spec = replace(config.scenario, seed=int(seed))
    return build_scenario(mdp, expert_policy(mdp, config.expert_epsilon), spec)


def train_algorithm(algo: str, data: ScenarioData, mdp: TabularMdp, game: GameConfig,
                    baseline: BaselineKind | None = None, *, evaluate: bool = True,
                    backend: str | None = None) -> TrainResult:
    problem = Problem.from_mdp(mdp, data.absorbing)
    if algo in GAME_ALGOS:
        hook = make_eval_hook(mdp, data.dynamics, absorbing=data.absorbing) if evaluate else None
        trainer = train_mahalo_atac if algo == MAHALO_ATAC else train_mahalo_pspi
        return trainer(problem, data.reward, data.dynamics, game, eval_hook=hook, backend=backend)
    kind = baseline if baseline is not None else BaselineKind(Kind.parse(algo))
    return run_baseline(kind, data, problem, game, mdp, evaluate=evaluate, backend=backend)


def save_checkpoint(directory: Path, result: TrainResult) -> None:
    """One funcapprox JSON per network plus the exact policy table."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "policy_table.json").write_text(json.dumps({"probs": result.policy.probs.tolist()}))
    learner = result.learner
    if learner is None:
        return
    learner.policy.save(directory / "policy.json")
    learner.reward_fn.save(directory / "reward.json")
    for i, pair in enumerate(learner.critics, start=1):
        pair.live.save(directory / f"critic{i}.json")
        pair.target.save(directory / f"critic{i}_target.json")
    (directory / "learner.json").write_text(json.dumps(learner.to_dict()))


def load_policy(path: str | Path) -> TabularPolicy:
    """A policy table from a checkpoint directory or a policy_table.json file."""
    path = Path(path)
    if path.is_dir():
        path = path / "policy_table.json"
    return TabularPolicy(np.asarray(json.loads(path.read_text())["probs"], dtype=float))


@dataclass(frozen=True)
class SeedOutcome:
    seed: int
    report: EvalReport | None
    error: str = ""


def seed_dir(out: str | Path, scenario: str, algo: str, seed: int) -> Path:
    return Path(out) / scenario / algo / str(seed)


def run_seed(config: ExperimentConfig, mdp: TabularMdp, seed: int, backend: str | None = None) -> SeedOutcome:
    """Data, training, checkpoint and evaluation for one seed; failures are written, not raised."""
    directory = seed_dir(config.out, config.scenario.scenario.value, config.algo, seed)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps({**config.to_dict(), "seed": seed}, indent=2, sort_keys=True))
    try:
        data = make_data(config, mdp, seed)
        save_datasets(directory / "data", data)
        baseline = None if config.algo in GAME_ALGOS else config.baseline_kind()
        result = train_algorithm(config.algo, data, mdp, config.game_config(seed), baseline, backend=backend)
        result.trace.save(directory / "trace.csv")
        save_checkpoint(directory / "checkpoint", result)
        report = evaluate_policy(mdp, result.policy, config.n_eval_episodes, config.horizon_cap, eval_seed(seed))
        outcome = SeedOutcome(seed, report)
    except TrainingDiverged as exc:
        exc.trace.save(directory / "trace.csv")
        outcome = SeedOutcome(seed, None, f"TrainingDiverged: {exc}")
    except (ConfigError, ValueError, RuntimeError) as exc:
        outcome = SeedOutcome(seed, None, f"{type(exc).__name__}: {exc}")
    doc = {"seed": seed, "error": outcome.error, "report": outcome.report.to_dict() if outcome.report else None}
    (directory / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return outcome


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


@dataclass(frozen=True)
class AggregateRow:
    """Mean and standard error over seeds (not episodes) of one algorithm on one scenario."""

    scenario: str
    mdp: str
    algo: str
    n_seeds: int
    n_ok: int
    partial: bool
    score_mean: float
    score_se: float
    success_mean: float
    success_se: float
    J_mean: float
    J_se: float

    @classmethod
    def from_outcomes(cls, scenario: str, mdp: str, algo: str, outcomes: Sequence[SeedOutcome]) -> AggregateRow:
        ok = [o.report for o in outcomes if o.report is not None]
        score = _mean_se([r.normalized_score for r in ok])
        success = _mean_se([r.success_rate for r in ok])
        J = _mean_se([r.exact_return for r in ok])
        return cls(scenario, mdp, algo, len(outcomes), len(ok), len(ok) < len(outcomes), *score, *success, *J)

    def values(self) -> list[str]:
        out = []
        for name in AGGREGATE_COLUMNS:
            v = getattr(self, name)
            out.append(repr(float(v)) if isinstance(v, float) else ("true" if v is True else "false" if v is False
                                                                     else str(v)))
        return out


def write_aggregate(path: Path, rows: Sequence[AggregateRow]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for row in rows:
        writer.writerow(row.values())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_outcomes(directory: str | Path) -> list[SeedOutcome]:
    """Per-seed outcomes recovered from eval.json files under an algorithm directory."""
    outcomes = []
    for path in sorted(Path(directory).glob("*/eval.json"), key=lambda p: int(p.parent.name)):
        doc = json.loads(path.read_text())
        report = EvalReport.from_dict(doc["report"]) if doc["report"] else None
        outcomes.append(SeedOutcome(doc["seed"], report, doc["error"]))
    return outcomes


@dataclass(frozen=True)
class ExperimentResult:
    row: AggregateRow
    outcomes: tuple[SeedOutcome, ...]
    directory: Path


def run_experiment(config: ExperimentConfig, threads: int | None = None, backend: str | None = None
                   ) -> ExperimentResult:
    """Run every seed (in parallel up to the worker cap), then write the aggregate row."""
    mdp = load_mdp(config.mdp)
    workers = worker_count(threads, len(config.seeds))
    if workers == 1:
        outcomes = [run_seed(config, mdp, s, backend) for s in config.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: run_seed(config, mdp, s, backend), config.seeds))
    scenario = config.scenario.scenario.value
    row = AggregateRow.from_outcomes(scenario, config.mdp, config.algo, outcomes)
    directory = Path(config.out) / scenario / config.algo
    write_aggregate(directory / "aggregate.csv", [row])
    return ExperimentResult(row, tuple(outcomes), directory)


# --- comparison tables ---------------------------------------------------------------------------------


def best_flags(rows: Sequence[AggregateRow], ratio: float = 0.9) -> list[bool]:
    """Rows scoring at least ``ratio`` of the best non-oracle score; the oracle is never flagged."""
    contenders = [r.score_mean for r in rows if r.algo != ORACLE and not math.isnan(r.score_mean)]
    if not contenders:
        return [False] * len(rows)
    best = max(contenders)
    threshold = best - (1.0 - ratio) * abs(best)
    return [r.algo != ORACLE and not math.isnan(r.score_mean) and r.score_mean >= threshold for r in rows]


def emit_comparison(rows: Sequence[AggregateRow]) -> tuple[str, str]:
    """Comparison CSV and a plain-text summary for rows sharing one scenario and MDP."""
    if not rows:
        raise ConfigError("nothing to compare")
    keys = {(r.scenario, r.mdp) for r in rows}
    if len(keys) > 1:
        raise ConfigError(f"rows mix scenarios or MDPs: {sorted(keys)}")
    flags = best_flags(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    lines = [f"{rows[0].scenario} on {rows[0].mdp} (normalized score, mean +/- s.e. over seeds; * = within 90% of best)"]
    for row, flag in zip(rows, flags):
        writer.writerow([row.scenario, row.mdp, row.algo, row.n_seeds, repr(row.score_mean), repr(row.score_se),
                         repr(row.success_mean), repr(row.success_se), "true" if flag else "false"])
        mark = "*" if flag else " "
        note = " (partial)" if row.partial else ""
        lines.append(f"{mark} {row.algo:<16} {row.score_mean:8.2f} +/- {row.score_se:6.2f}   "
                     f"success {row.success_mean:.3f}{note}")
    return buf.getvalue(), "\n".join(lines) + "\n"


def write_comparison(out: str | Path, tables: Sequence[Sequence[AggregateRow]]) -> tuple[Path, str]:
    """Top-level comparison.csv stacking one table per scenario."""
    csv_parts, summaries = [], []
    for rows in tables:
        text, summary = emit_comparison(rows)
        csv_parts.append(text if not csv_parts else text.split("\n", 1)[1])
        summaries.append(summary)
    path = Path(out) / "comparison.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(csv_parts))
    summary = "\n".join(summaries)
    (Path(out) / "comparison.txt").write_text(summary)
    return path, summary


# --- robust-improvement audit ------------------------------------------------------------------------

AUDIT_GRID = tuple((a, b) for a in (0.1, 1.0, 10.0, 100.0) for b in (0.1, 1.0, 10.0, 100.0))
# uniform-behavior trajectories needed for at least 50k transitions
AUDIT_TRAJECTORIES = {"chain2": 400, "grid5": 700, "loop1": 400}


@dataclass(frozen=True)
class AuditConfig:
    """Uniform-behavior, fully labeled data; MAHALO-ATAC per (alpha, beta, seed)."""

    mdp: str = "grid5"
    grid: tuple[tuple[float, float], ...] = AUDIT_GRID
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_trajectories: int | None = None
    n_steps: int = 30_000
    warm_steps: int = 5_000
    tolerance: float = 0.05
    game: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple((float(a), float(b)) for a, b in self.grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.grid or not self.seeds:
            raise ConfigError("audit grid and seeds must be nonempty")
        if any(a < 0 or b < 0 for a, b in self.grid):
            raise ConfigError("alpha and beta must be nonnegative")
        if self.n_trajectories is not None and self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be positive")
        load_mdp(self.mdp)

    @property
    def trajectories(self) -> int:
        if self.n_trajectories is not None:
            return self.n_trajectories
        return AUDIT_TRAJECTORIES.get(self.mdp.lower(), 700)

    @classmethod
    def from_dict(cls, doc: dict) -> AuditConfig:
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown audit keys {sorted(unknown)}")
        return cls(**doc)


def run_audit(config: AuditConfig, backend: str | None = None):
    from .theory import robust_improvement_audit

    mdp = load_mdp(config.mdp)
    expert = expert_policy(mdp)

    def make(seed: int) -> ScenarioData:
        spec = ScenarioSpec(scenario="RLSample", noise_levels=(1.0,), n_mixed_trajectories=config.trajectories,
                            label_fraction=1.0, seed=seed)
        return build_scenario(mdp, expert, spec)

    def run(data: ScenarioData, alpha: float, beta: float, seed: int) -> TabularPolicy:
        game = GameConfig.from_dict({"n_steps": config.n_steps, "warm_steps": config.warm_steps, **config.game,
                                     "alpha": alpha, "beta": beta, "seed": seed})
        problem = Problem.from_mdp(mdp, data.absorbing)
        return train_mahalo_atac(problem, data.reward, data.dynamics, game, backend=backend).policy

    return robust_improvement_audit(mdp, make, run, config.grid, config.seeds, config.tolerance)
