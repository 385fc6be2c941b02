"""Game learner state, the warm start, one game iteration, and both trainers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .. import kernels
from ..datasets import Batch, ConfigError, DynamicsDataset, RewardDataset
from ..funcapprox import (
    AdamState,
    ParamFunction,
    Tabular,
    TargetPair,
    adam_step,
    box_project,
    default_projection_radius,
    l2_project_weights,
    mlp2,
    polyak_update,
    tabular,
    linear,
)
from ..mdp import TabularMdp, TabularPolicy
from . import losses as L

PESSIMISM_MODES = ("relative", "absolute")
ACTOR_STATES = ("data", "d0")
ARCHS = ("tabular", "linear", "mlp2")

# Hyperparameters reported for the large continuous-control runs; kept for reference.
LARGE_SCALE_PRESET = {"eta_fast": 5e-4, "eta_slow": 5e-7, "tau": 0.005, "batch_size": 256, "w": 0.5}
ALPHA_BETA_RATIOS = {"metaworld": 100.0, "d4rl": 1e5, "pspi": 1e4}


class TrainingDiverged(RuntimeError):
    """Raised when parameters or losses become non-finite."""

    def __init__(self, message: str, checkpoint: GameLearner, trace: Trace) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace


@dataclass(frozen=True)
class Problem:
    """What the learner knows about the environment: no transitions, no rewards."""

    n_states: int
    n_actions: int
    gamma: float
    r_max: float
    d0: np.ndarray
    terminal: np.ndarray

    @classmethod
    def from_mdp(cls, mdp: TabularMdp, absorbing: bool = False) -> Problem:
        """With ``absorbing`` the learner bootstraps through terminal states like any other."""
        terminal = np.zeros(mdp.n_states) if absorbing else mdp.terminal_mask.astype(float)
        return cls(mdp.n_states, mdp.n_actions, mdp.gamma, mdp.r_max,
                   np.asarray(mdp.initial_dist, dtype=float), terminal)

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)


@dataclass(frozen=True)
class GameConfig:
    alpha: float = 100.0
    beta: float = 1000.0
    w: float = 0.5
    tau: float = 0.005
    eta_fast: float = 5e-4
    eta_slow: float = 5e-5
    eta_temp: float | None = None
    batch_size: int = 256
    n_steps: int = 100_000
    warm_steps: int = 5_000
    entropy_target: float | None = None
    proj_radius: float | None = None
    temperature_init: float = 0.0
    reward_init: float = 0.02
    pessimism: str = "relative"
    actor_states: str = "data"
    arch: str = "tabular"
    hidden: int = 32
    trace_interval: int = 1_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if not 0.0 <= self.w <= 1.0 or not 0.0 <= self.tau <= 1.0:
            raise ConfigError("w and tau must lie in [0, 1]")
        rates = [self.eta_fast, self.eta_slow] + ([] if self.eta_temp is None else [self.eta_temp])
        if any(r <= 0 for r in rates):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.n_steps < 0 or self.warm_steps < 0 or self.trace_interval < 1:
            raise ConfigError("batch_size and trace_interval must be positive, step counts nonnegative")
        if self.temperature_init < 0:
            raise ConfigError("temperature_init must be nonnegative")
        if not 0.0 < self.reward_init < 1.0:
            raise ConfigError("reward_init is a fraction of r_max strictly inside (0, 1)")
        if self.proj_radius is not None and self.proj_radius <= 0:
            raise ConfigError("proj_radius must be positive")
        if self.pessimism not in PESSIMISM_MODES:
            raise ConfigError(f"pessimism must be one of {PESSIMISM_MODES}")
        if self.actor_states not in ACTOR_STATES:
            raise ConfigError(f"actor_states must be one of {ACTOR_STATES}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")

    def resolved_entropy_target(self, n_actions: int) -> float:
        return 0.5 * math.log(n_actions) if self.entropy_target is None else self.entropy_target

    def resolved_eta_temp(self) -> float:
        return self.eta_fast if self.eta_temp is None else self.eta_temp

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> GameConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown game config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(eq=False)
class GameLearner:
    policy: ParamFunction
    critics: tuple[TargetPair, TargetPair]
    reward_fn: ParamFunction
    opt: dict[str, AdamState]
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.critics[0].live.arch != self.critics[1].live.arch:
            raise ValueError("critics must share an architecture")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")

    def copy(self) -> GameLearner:
        critics = tuple(TargetPair(c.live.copy(), c.target.copy(), c.tau) for c in self.critics)
        return GameLearner(self.policy.copy(), critics, self.reward_fn.copy(),
                           {k: v.copy() for k, v in self.opt.items()}, self.temperature)

    def policy_table(self, n_states: int) -> TabularPolicy:
        return L.policy_table(self.policy, n_states)

    def reward_table(self, n_states: int) -> np.ndarray:
        return self.reward_fn.forward(np.arange(n_states))

    def is_finite(self) -> bool:
        nets = [self.policy, self.reward_fn] + [n for c in self.critics for n in (c.live, c.target)]
        return all(np.isfinite(n.params).all() for n in nets) and math.isfinite(self.temperature)

    def to_dict(self) -> dict:
        return {"policy": self.policy.to_dict(),
                "critics": [{"live": c.live.to_dict(), "target": c.target.to_dict(), "tau": c.tau}
                            for c in self.critics],
                "reward_fn": self.reward_fn.to_dict(),
                "opt": {k: {"m": v.m.tolist(), "v": v.v.tolist(), "lr": v.lr, "step": v.step,
                            "beta1": v.beta1, "beta2": v.beta2, "eps": v.eps} for k, v in self.opt.items()},
                "temperature": self.temperature}

    @classmethod
    def from_dict(cls, doc: dict) -> GameLearner:
        critics = tuple(TargetPair(ParamFunction.from_dict(c["live"]), ParamFunction.from_dict(c["target"]), c["tau"])
                        for c in doc["critics"])
        opt = {k: AdamState(np.asarray(v["m"], float), np.asarray(v["v"], float), v["lr"], v["step"],
                            v["beta1"], v["beta2"], v["eps"]) for k, v in doc["opt"].items()}
        return cls(ParamFunction.from_dict(doc["policy"]), critics, ParamFunction.from_dict(doc["reward_fn"]),
                   opt, doc["temperature"])


def make_learner(problem: Problem, config: GameConfig) -> GameLearner:
    """Fresh learner: uniform policy, zero critics, reward at ``reward_init * r_max`` everywhere.

    Starting the reward low means transitions the reward data never covers
    begin as unrewarded, which is the pessimistic reading.
    """
    S, A = problem.n_states, problem.n_actions
    v_bounds = (0.0, problem.v_max)
    r_bounds = (0.0, problem.r_max)
    if config.arch == "tabular":
        policy = tabular(S, A)
        f = [tabular(S, A, bounds=v_bounds) for _ in range(2)]
        g = tabular(S, S, bounds=r_bounds, head="sigmoid")
    elif config.arch == "linear":
        policy = linear(S, A)
        f = [linear(S, A, bounds=v_bounds) for _ in range(2)]
        g = linear(S, S, bounds=r_bounds, head="sigmoid")
    else:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
        policy = mlp2(S, config.hidden, A, rng, scale=0.1)
        f = [mlp2(S, config.hidden, A, rng, bounds=v_bounds) for _ in range(2)]
        g = mlp2(S, config.hidden, S, rng, bounds=r_bounds, head="sigmoid")
        for fi in f:
            # a random output layer can start every value below the clip floor, where no gradient flows
            fi._block("W2")[:] = 0.0
            fi._block("b2")[:] = 0.0
    logit = math.log(config.reward_init / (1.0 - config.reward_init))
    if config.arch == "tabular":
        g.params[:] = logit
    else:
        g._block(g.blocks()[-1][0])[:] = logit
    critics = (TargetPair.of(f[0], config.tau), TargetPair.of(f[1], config.tau))
    opt = {"policy": AdamState.for_fn(policy, config.eta_slow),
           "f1": AdamState.for_fn(f[0], config.eta_fast),
           "f2": AdamState.for_fn(f[1], config.eta_fast),
           "reward": AdamState.for_fn(g, config.eta_fast)}
    return GameLearner(policy, critics, g, opt, config.temperature_init)


# --- training data -------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GameData:
    """Column arrays the game samples from.

    ``r_a`` holds observed rewards aligned with the dynamics data; when it is
    set the game uses them instead of the learned reward ("observed" mode).
    """

    a_s: np.ndarray
    a_a: np.ndarray
    a_sp: np.ndarray
    r_s: np.ndarray
    r_r: np.ndarray
    r_sp: np.ndarray
    r_a: np.ndarray | None = None

    @classmethod
    def build(cls, D_A: DynamicsDataset, D_R: RewardDataset | None, rewards_a=None) -> GameData:
        if len(D_A) == 0:
            raise ConfigError("the dynamics dataset is empty")
        if D_R is None:
            D_R = RewardDataset.empty()
        r_a = None if rewards_a is None else np.ascontiguousarray(rewards_a, dtype=float)
        if r_a is not None and r_a.size != len(D_A):
            raise ConfigError("observed rewards must align with the dynamics dataset")
        return cls(np.ascontiguousarray(D_A.s), np.ascontiguousarray(D_A.a), np.ascontiguousarray(D_A.sp),
                   np.ascontiguousarray(D_R.s), np.ascontiguousarray(D_R.r, dtype=float),
                   np.ascontiguousarray(D_R.sp), r_a)

    @property
    def n_a(self) -> int:
        return self.a_s.size

    @property
    def n_r(self) -> int:
        return self.r_s.size

    def batch_a(self, idx: np.ndarray) -> Batch:
        return Batch(self.a_s[idx], self.a_sp[idx], self.a_a[idx], None if self.r_a is None else self.r_a[idx])

    def batch_r(self, idx: np.ndarray) -> Batch:
        return Batch(self.r_s[idx], self.r_sp[idx], None, self.r_r[idx])


@dataclass(frozen=True)
class StepOptions:
    """Flags that select a game variant; shared by both backends."""

    relative: bool = True
    actor_on_data: bool = True
    reward_source: str = "learned"  # learned | fixed | observed

    @property
    def train_reward(self) -> bool:
        return self.reward_source == "learned"


TRACE_STEP_COLUMNS = ("l_critic1", "l_critic2", "l_reward", "l_actor", "entropy", "temperature")


# --- one iteration, generic path ------------------------------------------------------------------


def _project(fn: ParamFunction, radius: float) -> None:
    if isinstance(fn.arch, Tabular):
        box_project(fn)
    else:
        fn.params[:] = l2_project_weights(fn, radius).params


def _radius(config: GameConfig, problem: Problem, fn: ParamFunction) -> float:
    if config.proj_radius is not None:
        return config.proj_radius
    return default_projection_radius(problem.v_max, fn)


def game_step_generic(learner: GameLearner, config: GameConfig, problem: Problem, opts: StepOptions,
                      ba: Batch, br: Batch) -> np.ndarray:
    """One game iteration on fixed minibatches; returns the trace row."""
    pi = learner.policy
    f = [c.live for c in learner.critics]
    targets = (learner.critics[0].target, learner.critics[1].target)
    g = None if opts.reward_source == "observed" else learner.reward_fn
    gamma, term = problem.gamma, problem.terminal

    critic_vals, critic_grads, g_dqra = [], [], []
    for fi in f:
        if opts.relative:
            vp, gp = L.pessimism_grad(ba, pi, fi)
        else:
            vp, gp = L.initial_value_grad(problem.d0, gamma, pi, fi)
        vd, gd = L.dqra_grad(ba, pi, fi, targets, g, config.w, gamma, term,
                             wrt=("f", "g") if opts.train_reward else ("f",))
        critic_vals.append(vp + config.beta * vd)
        critic_grads.append(gp["f"] + config.beta * gd["f"])
        g_dqra.append((vd, gd.get("g")))

    if opts.train_reward and len(br):
        vr, gr = L.reward_mse_grad(br, learner.reward_fn)
        l_reward = config.alpha * vr + config.beta * sum(v for v, _ in g_dqra)
        grad_g = config.alpha * gr["g"] + config.beta * sum(gg for _, gg in g_dqra)
    elif opts.train_reward:
        l_reward = config.beta * sum(v for v, _ in g_dqra)
        grad_g = config.beta * sum(gg for _, gg in g_dqra)
    else:
        l_reward, grad_g = 0.0, None

    for i, fi in enumerate(f):
        adam_step(learner.opt[f"f{i + 1}"], fi, critic_grads[i])
        _project(fi, _radius(config, problem, fi))
    if grad_g is not None:
        adam_step(learner.opt["reward"], learner.reward_fn, grad_g)
        if not isinstance(learner.reward_fn.arch, Tabular):
            _project(learner.reward_fn, _radius(config, problem, learner.reward_fn))

    temp = learner.temperature
    if opts.actor_on_data:
        va, ga = L.actor_grad(ba, pi, f[0], temp)
        ent = float(L.entropy_rows(L.policy_probs(pi, ba.s)).mean())
    else:
        va, ga = L.initial_actor_grad(problem.d0, gamma, pi, f[0], temp)
        states = np.flatnonzero(problem.d0)
        ent = float(problem.d0[states] @ L.entropy_rows(L.policy_probs(pi, states)))
    adam_step(learner.opt["policy"], pi, ga["pi"])
    learner.temperature = L.temperature_update(temp, ent, config.resolved_entropy_target(problem.n_actions),
                                               config.resolved_eta_temp())
    for c in learner.critics:
        polyak_update(c)
    return np.array([critic_vals[0], critic_vals[1], l_reward, va, ent, learner.temperature])


def warm_step_generic(learner: GameLearner, config: GameConfig, problem: Problem, opts: StepOptions,
                      ba: Batch, br: Batch) -> np.ndarray:
    """One warm-start iteration: behavior cloning, behavioral TD, reward regression."""
    pi = learner.policy
    f = [c.live for c in learner.critics]
    targets = (learner.critics[0].target, learner.critics[1].target)
    g = None if opts.reward_source == "observed" else learner.reward_fn

    v_bc, g_bc = L.bc_grad(ba, pi)
    ent = float(L.entropy_rows(L.policy_probs(pi, ba.s)).mean())
    crit = [L.dqra_grad(ba, pi, fi, targets, g, config.w, problem.gamma, problem.terminal, wrt=("f",))
            for fi in f]
    fit_reward = opts.reward_source != "observed" and len(br) > 0
    v_r, g_r = L.reward_mse_grad(br, learner.reward_fn) if fit_reward else (0.0, {})

    adam_step(learner.opt["policy"], pi, g_bc["pi"], lr=config.eta_fast)
    for i, fi in enumerate(f):
        adam_step(learner.opt[f"f{i + 1}"], fi, crit[i][1]["f"])
        _project(fi, _radius(config, problem, fi))
    if fit_reward:
        adam_step(learner.opt["reward"], learner.reward_fn, g_r["g"])
        if not isinstance(learner.reward_fn.arch, Tabular):
            _project(learner.reward_fn, _radius(config, problem, learner.reward_fn))
    for c in learner.critics:
        polyak_update(c)
    return np.array([crit[0][0], crit[1][0], v_r, v_bc, ent, learner.temperature])


# --- sampling and chunked execution --------------------------------------------------------------


def sample_indices(rng: np.random.Generator, n: int, steps: int, batch: int) -> np.ndarray:
    if n == 0:
        return np.zeros((steps, 0), dtype=np.int64)
    return rng.integers(0, n, size=(steps, batch), dtype=np.int64)


def run_steps(learner: GameLearner, config: GameConfig, problem: Problem, opts: StepOptions, data: GameData,
              idx_a: np.ndarray, idx_r: np.ndarray, *, warm: bool, backend: str | None = None) -> np.ndarray:
    """Run one iteration per row of the index arrays; returns the (steps, 6) trace block."""
    use = kernels.select(backend)
    if use == "compiled" and kernels.supports(learner):
        return kernels.run_tabular(learner, config, problem, opts, data, idx_a, idx_r, warm)
    step = warm_step_generic if warm else game_step_generic
    out = np.empty((idx_a.shape[0], len(TRACE_STEP_COLUMNS)))
    for k in range(idx_a.shape[0]):
        out[k] = step(learner, config, problem, opts, data.batch_a(idx_a[k]), data.batch_r(idx_r[k]))
    return out


def warm_start(learner: GameLearner, problem: Problem, data: GameData, config: GameConfig, n_steps: int,
               rng: np.random.Generator, opts: StepOptions = StepOptions(), *, backend: str | None = None,
               chunk: int = 1_000) -> GameLearner:
    """Fit policy, critics and reward to the data, then sync the targets."""
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    done = 0
    while done < n_steps:
        k = min(chunk, n_steps - done)
        idx_a = sample_indices(rng, data.n_a, k, config.batch_size)
        idx_r = sample_indices(rng, data.n_r, k, config.batch_size)
        run_steps(learner, config, problem, opts, data, idx_a, idx_r, warm=True, backend=backend)
        done += k
    for c in learner.critics:
        c.sync()
    return learner


def atac_step(learner: GameLearner, problem: Problem, data: GameData, config: GameConfig,
              rng: np.random.Generator, opts: StepOptions = StepOptions(), *, backend: str | None = None) -> np.ndarray:
    """A single game iteration with freshly sampled minibatches."""
    idx_a = sample_indices(rng, data.n_a, 1, config.batch_size)
    idx_r = sample_indices(rng, data.n_r, 1, config.batch_size)
    return run_steps(learner, config, problem, opts, data, idx_a, idx_r, warm=False, backend=backend)[0]


# --- trace -----------------------------------------------------------------------------------------


TRACE_COLUMNS = ("step",) + TRACE_STEP_COLUMNS + ("J_true", "bellman_err")


@dataclass
class Trace:
    rows: list[dict] = field(default_factory=list)
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def columns(self) -> tuple[str, ...]:
        return TRACE_COLUMNS + tuple(self.extra)

    def append(self, row: dict) -> None:
        self.rows.append({**row, **self.extra})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


EvalHook = Callable[[GameLearner], dict]


def make_eval_hook(mdp: TabularMdp, D_A: DynamicsDataset, rewards_a=None, absorbing: bool = False) -> EvalHook:
    """Exact return of the current policy and the estimated Bellman error of f1."""
    from ..mdp import expected_return

    full = D_A.full_batch()
    if rewards_a is not None:
        full = Batch(full.s, full.sp, full.a, np.asarray(rewards_a, dtype=float))
    problem = Problem.from_mdp(mdp, absorbing)

    def hook(learner: GameLearner) -> dict:
        pi = learner.policy_table(mdp.n_states)
        g = None if rewards_a is not None else learner.reward_fn
        be = L.empirical_bellman_error(full, pi, learner.critics[0].live, g, problem.gamma, problem.terminal,
                                       max_iter=500)
        return {"J_true": expected_return(mdp, pi), "bellman_err": float(be)}

    return hook


class TrainResult(NamedTuple):
    policy: TabularPolicy
    trace: Trace
    learner: GameLearner


def train_game(problem: Problem, D_R: RewardDataset | None, D_A: DynamicsDataset, config: GameConfig, *,
               opts: StepOptions = StepOptions(), rewards_a=None, eval_hook: EvalHook | None = None,
               learner: GameLearner | None = None, backend: str | None = None,
               trace_extra: dict | None = None) -> TrainResult:
    """Warm start followed by ``config.n_steps`` game iterations."""
    data = GameData.build(D_A, D_R, rewards_a)
    if opts.reward_source == "observed" and data.r_a is None:
        raise ConfigError("observed reward mode needs rewards aligned with the dynamics data")
    rng = np.random.default_rng(config.seed)
    learner = make_learner(problem, config) if learner is None else learner
    trace = Trace(extra=dict(trace_extra or {}))
    warm_start(learner, problem, data, config, config.warm_steps, rng, opts, backend=backend)
    checkpoint = learner.copy()
    done = 0
    while done < config.n_steps:
        k = min(config.trace_interval, config.n_steps - done)
        idx_a = sample_indices(rng, data.n_a, k, config.batch_size)
        idx_r = sample_indices(rng, data.n_r, k, config.batch_size)
        block = run_steps(learner, config, problem, opts, data, idx_a, idx_r, warm=False, backend=backend)
        done += k
        if not (np.isfinite(block).all() and learner.is_finite()):
            raise TrainingDiverged(f"non-finite values within steps {done - k + 1}..{done}", checkpoint, trace)
        row = {"step": done, **dict(zip(TRACE_STEP_COLUMNS, block.mean(axis=0)))}
        row["temperature"] = learner.temperature
        hooked = eval_hook(learner.copy()) if eval_hook is not None else {}
        row["J_true"] = hooked.get("J_true", math.nan)
        row["bellman_err"] = hooked.get("bellman_err", math.nan)
        trace.append(row)
        checkpoint = learner.copy()
    return TrainResult(learner.policy_table(problem.n_states), trace, learner)


def train_mahalo_atac(problem: Problem, D_R: RewardDataset | None, D_A: DynamicsDataset, config: GameConfig,
                      eval_hook: EvalHook | None = None, **kwargs) -> TrainResult:
    """Relative-pessimism MAHALO."""
    config = replace(config, pessimism="relative")
    return train_game(problem, D_R, D_A, config, opts=options_for(config), eval_hook=eval_hook, **kwargs)


def train_mahalo_pspi(problem: Problem, D_R: RewardDataset | None, D_A: DynamicsDataset, config: GameConfig,
                      eval_hook: EvalHook | None = None, **kwargs) -> TrainResult:
    """Absolute-pessimism MAHALO: the critic minimizes its initial-state value."""
    config = replace(config, pessimism="absolute")
    return train_game(problem, D_R, D_A, config, opts=options_for(config), eval_hook=eval_hook, **kwargs)


def options_for(config: GameConfig, reward_source: str = "learned") -> StepOptions:
    return StepOptions(relative=config.pessimism == "relative", actor_on_data=config.actor_states == "data",
                       reward_source=reward_source)
