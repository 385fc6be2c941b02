"""The two PLfO datasets, trajectory collection, and the five data scenarios."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mdp import TabularMdp, TabularPolicy, occupancy


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


def _ints(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1)


def _opt_ints(x) -> np.ndarray | None:
    return None if x is None else _ints(x)


@dataclass(frozen=True, eq=False)
class Batch:
    """Column view of sampled records; ``a`` or ``r`` is None when absent."""

    s: np.ndarray
    sp: np.ndarray
    a: np.ndarray | None = None
    r: np.ndarray | None = None

    def __len__(self) -> int:
        return self.s.size


@dataclass(frozen=True, eq=False)
class DynamicsDataset:
    """Action-labeled transitions (s, a, s') without rewards.

    ``ids`` identify records across datasets generated from the same
    collection (the alignment metadata UDS depends on); ``episodes`` groups
    records by trajectory.
    """

    s: np.ndarray
    a: np.ndarray
    sp: np.ndarray
    tags: tuple[str, ...] | None = None
    ids: np.ndarray | None = None
    episodes: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "s", _ints(self.s))
        object.__setattr__(self, "a", _ints(self.a))
        object.__setattr__(self, "sp", _ints(self.sp))
        object.__setattr__(self, "ids", _opt_ints(self.ids))
        object.__setattr__(self, "episodes", _opt_ints(self.episodes))
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(self.tags))
        n = self.s.size
        for name in ("a", "sp", "ids", "episodes", "tags"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} entries, expected {n}")

    def __len__(self) -> int:
        return self.s.size

    @classmethod
    def empty(cls) -> DynamicsDataset:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    def records(self) -> list[tuple[int, int, int]]:
        return list(zip(self.s.tolist(), self.a.tolist(), self.sp.tolist()))

    def subset(self, index) -> DynamicsDataset:
        index = np.asarray(index, dtype=np.int64)
        return DynamicsDataset(
            self.s[index], self.a[index], self.sp[index],
            tags=None if self.tags is None else tuple(self.tags[i] for i in index.tolist()),
            ids=None if self.ids is None else self.ids[index],
            episodes=None if self.episodes is None else self.episodes[index],
        )

    def batch(self, index) -> Batch:
        return Batch(s=self.s[index], sp=self.sp[index], a=self.a[index])

    def full_batch(self) -> Batch:
        return Batch(s=self.s, sp=self.sp, a=self.a)

    def validate(self, n_states: int, n_actions: int) -> None:
        if len(self) == 0:
            return
        if self.s.min() < 0 or self.sp.min() < 0 or max(self.s.max(), self.sp.max()) >= n_states:
            raise DatasetValidationError(f"state id outside [0, {n_states})")
        if self.a.min() < 0 or self.a.max() >= n_actions:
            raise DatasetValidationError(f"action id outside [0, {n_actions})")


@dataclass(frozen=True, eq=False)
class RewardDataset:
    """Reward-labeled state transitions (s, r, s').

    Actions are carried only when the scenario reveals them (``a`` is None
    for observation-only data).
    """

    s: np.ndarray
    r: np.ndarray
    sp: np.ndarray
    a: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "s", _ints(self.s))
        object.__setattr__(self, "sp", _ints(self.sp))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(-1))
        object.__setattr__(self, "a", _opt_ints(self.a))
        object.__setattr__(self, "ids", _opt_ints(self.ids))
        n = self.s.size
        for name in ("r", "sp", "a", "ids"):
            col = getattr(self, name)
            if col is not None and col.size != n:
                raise ValueError(f"column {name!r} has {col.size} entries, expected {n}")

    def __len__(self) -> int:
        return self.s.size

    @classmethod
    def empty(cls) -> RewardDataset:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    def records(self) -> list[tuple[int, float, int]]:
        return list(zip(self.s.tolist(), self.r.tolist(), self.sp.tolist()))

    def subset(self, index) -> RewardDataset:
        index = np.asarray(index, dtype=np.int64)
        return RewardDataset(
            self.s[index], self.r[index], self.sp[index],
            a=None if self.a is None else self.a[index],
            ids=None if self.ids is None else self.ids[index],
        )

    def without_actions(self) -> RewardDataset:
        return RewardDataset(self.s, self.r, self.sp, a=None, ids=self.ids)

    def batch(self, index) -> Batch:
        return Batch(s=self.s[index], sp=self.sp[index], r=self.r[index],
                     a=None if self.a is None else self.a[index])

    def full_batch(self) -> Batch:
        return Batch(s=self.s, sp=self.sp, r=self.r, a=self.a)

    def validate(self, n_states: int, n_actions: int, r_max: float | None = None) -> None:
        if len(self) == 0:
            return
        if self.s.min() < 0 or self.sp.min() < 0 or max(self.s.max(), self.sp.max()) >= n_states:
            raise DatasetValidationError(f"state id outside [0, {n_states})")
        if self.a is not None and (self.a.min() < 0 or self.a.max() >= n_actions):
            raise DatasetValidationError(f"action id outside [0, {n_actions})")
        if not np.all(np.isfinite(self.r)):
            raise DatasetValidationError("non-finite reward")
        if r_max is not None and (self.r.min() < -1e-9 or self.r.max() > r_max + 1e-9):
            raise DatasetValidationError(f"reward outside [0, {r_max}]")


def concat_dynamics(parts: list[DynamicsDataset]) -> DynamicsDataset:
    parts = [p for p in parts if len(p)] or [DynamicsDataset.empty()]

    def cat(name):
        cols = [getattr(p, name) for p in parts]
        return None if any(c is None for c in cols) else np.concatenate(cols)

    tags = None if any(p.tags is None for p in parts) else sum((p.tags for p in parts), ())
    return DynamicsDataset(cat("s"), cat("a"), cat("sp"), tags=tags, ids=cat("ids"), episodes=cat("episodes"))


def concat_rewards(parts: list[RewardDataset]) -> RewardDataset:
    parts = [p for p in parts if len(p)] or [RewardDataset.empty()]

    def cat(name):
        cols = [getattr(p, name) for p in parts]
        return None if any(c is None for c in cols) else np.concatenate(cols)

    return RewardDataset(cat("s"), cat("r"), cat("sp"), a=cat("a"), ids=cat("ids"))


def collect_trajectories(
    mdp: TabularMdp,
    pi: TabularPolicy,
    n: int,
    horizon_cap: int,
    seed: int | np.random.Generator,
    *,
    tag: str | None = None,
    id_offset: int = 0,
    episode_offset: int = 0,
    absorbing_tail: bool = False,
) -> tuple[DynamicsDataset, RewardDataset]:
    """Roll out ``n`` episodes from d0, truncated at ``horizon_cap`` or a terminal.

    With ``absorbing_tail`` an episode that reaches a terminal state t emits
    one extra self-transition (t, a, t) before stopping. Dynamics and reward
    records are aligned one-to-one in output order.
    """
    if n < 1 or horizon_cap < 1:
        raise ValueError("need n >= 1 and horizon_cap >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pi_cdf = np.cumsum(pi.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    d0_cdf = np.cumsum(mdp.initial_dist)
    terminal = mdp.terminal_mask.astype(bool)
    A, S = mdp.n_actions, mdp.n_states

    def draw(cdf, u, size):
        return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), size - 1)

    s_col, a_col, sp_col, ep_col = [], [], [], []
    for ep in range(n):
        s = draw(d0_cdf, rng.random(), S)
        for _ in range(horizon_cap):
            if terminal[s]:
                if absorbing_tail:
                    s_col.append(s)
                    a_col.append(draw(pi_cdf[s], rng.random(), A))
                    sp_col.append(s)
                    ep_col.append(episode_offset + ep)
                break
            u = rng.random(2)
            a = draw(pi_cdf[s], u[0], A)
            sp = draw(p_cdf[s, a], u[1], S)
            s_col.append(s)
            a_col.append(a)
            sp_col.append(sp)
            ep_col.append(episode_offset + ep)
            s = sp
    s_arr, sp_arr = np.array(s_col, dtype=np.int64), np.array(sp_col, dtype=np.int64)
    ids = id_offset + np.arange(s_arr.size, dtype=np.int64)
    dyn = DynamicsDataset(
        s_arr, np.array(a_col, dtype=np.int64), sp_arr,
        tags=None if tag is None else (tag,) * s_arr.size,
        ids=ids, episodes=np.array(ep_col, dtype=np.int64),
    )
    rew = RewardDataset(s_arr, mdp.reward[s_arr, sp_arr], sp_arr, a=dyn.a, ids=ids)
    return dyn, rew


def reduce_imitation(expert_transitions, r_max: float) -> RewardDataset:
    """Label every expert (s, s') with the maximum reward."""
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    pairs = np.asarray(list(expert_transitions), dtype=np.int64).reshape(-1, 2)
    return RewardDataset(pairs[:, 0], np.full(len(pairs), float(r_max)), pairs[:, 1])


def estimate_behavior_policy(
    data: DynamicsDataset, n_states: int, n_actions: int, smoothing: float = 0.0
) -> TabularPolicy:
    """Empirical action frequencies per state; unvisited states get a uniform row."""
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (data.s, data.a), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.full((n_states, n_actions), 1.0 / n_actions)
    visited = totals[:, 0] > 0
    probs[visited] = (counts[visited] + smoothing) / (totals[visited] + smoothing * n_actions)
    return TabularPolicy(probs)


def mixture_policy(mdp: TabularMdp, policies: list[TabularPolicy], weights) -> TabularPolicy:
    """Markov policy whose occupancy is the weighted mixture of the inputs' occupancies."""
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    d = sum(w * occupancy(mdp, p) for w, p in zip(weights, policies))
    ds = d.sum(axis=1, keepdims=True)
    probs = np.full_like(d, 1.0 / mdp.n_actions)
    seen = ds[:, 0] > 0
    probs[seen] = d[seen] / ds[seen]
    return TabularPolicy(probs)


class Scenario(str, enum.Enum):
    ILfO = "ILfO"
    IL = "IL"
    RLfO = "RLfO"
    RLExpert = "RLExpert"
    RLSample = "RLSample"

    @classmethod
    def parse(cls, name: str) -> Scenario:
        key = name.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ConfigError(f"unknown scenario {name!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: Scenario
    n_mixed_trajectories: int = 300
    noise_levels: tuple[float, ...] = (0.1, 0.5, 1.0)
    n_expert_trajectories: int = 10
    label_fraction: float | None = None
    horizon_cap: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        scenario = self.scenario if isinstance(self.scenario, Scenario) else Scenario.parse(self.scenario)
        object.__setattr__(self, "scenario", scenario)
        object.__setattr__(self, "noise_levels", tuple(float(x) for x in self.noise_levels))
        if self.label_fraction is not None and scenario is not Scenario.RLSample:
            raise ConfigError(f"label_fraction only applies to RLSample, not {scenario.value}")
        if scenario is Scenario.RLSample:
            frac = 0.5 if self.label_fraction is None else float(self.label_fraction)
            if not 0.0 < frac <= 1.0:
                raise ConfigError("label_fraction must lie in (0, 1]")
            object.__setattr__(self, "label_fraction", frac)
        if self.n_mixed_trajectories < 1 or self.horizon_cap < 1:
            raise ConfigError("trajectory counts and horizon cap must be positive")
        if scenario is not Scenario.RLSample and self.n_expert_trajectories < 1:
            raise ConfigError("expert trajectory count must be positive")
        if not self.noise_levels or any(not 0.0 <= x <= 1.0 for x in self.noise_levels):
            raise ConfigError("noise levels must be nonempty probabilities")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["scenario"] = self.scenario.value
        doc["noise_levels"] = list(self.noise_levels)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> ScenarioSpec:
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class ScenarioData:
    scenario: Scenario
    dynamics: DynamicsDataset
    reward: RewardDataset
    expert_actions_included: bool
    held_out_eval_policy: TabularPolicy
    meta: dict = field(default_factory=dict)
    absorbing: bool = False


def expert_policy(mdp: TabularMdp, epsilon: float = 0.05) -> TabularPolicy:
    """Value-iteration greedy policy blended with uniform actions."""
    from .mdp import value_iteration

    _, greedy = value_iteration(mdp)
    return greedy.mix(TabularPolicy.uniform(mdp.n_states, mdp.n_actions), epsilon)


def noisy_policy(expert: TabularPolicy, noise: float) -> TabularPolicy:
    """With probability ``noise`` the expert action is replaced by a uniform one."""
    S, A = expert.probs.shape
    return expert.mix(TabularPolicy.uniform(S, A), noise)


def _split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def build_scenario(mdp: TabularMdp, expert: TabularPolicy, spec: ScenarioSpec) -> ScenarioData:
    """Mixed-quality dynamics data plus the scenario's reward data."""
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.noise_levels) + 2)
    # Imitation labels reward every expert step, so reaching a terminal would end the
    # reward stream early; absorbing tails let the goal keep its imitation reward.
    absorbing = spec.scenario in (Scenario.ILfO, Scenario.IL)
    mixed_dyn, mixed_rew, policies, weights = [], [], [], []
    next_id, next_ep = 0, 0
    for level, count, ss in zip(spec.noise_levels, _split_counts(spec.n_mixed_trajectories, len(spec.noise_levels)), seeds):
        if count == 0:
            continue
        pi = noisy_policy(expert, level)
        dyn, rew = collect_trajectories(mdp, pi, count, spec.horizon_cap, np.random.default_rng(ss),
                                        tag=f"noise={level:g}", id_offset=next_id, episode_offset=next_ep,
                                        absorbing_tail=absorbing)
        next_id += len(dyn)
        next_ep += count
        mixed_dyn.append(dyn)
        mixed_rew.append(rew)
        policies.append(pi)
        weights.append(count)
    mixed = concat_dynamics(mixed_dyn)
    mixed_labels = concat_rewards(mixed_rew)

    scenario = spec.scenario
    if scenario is Scenario.RLSample:
        rng = np.random.default_rng(seeds[-1])
        episodes = np.unique(mixed.episodes)
        n_label = int(round(spec.label_fraction * episodes.size))
        chosen = np.sort(rng.choice(episodes, size=n_label, replace=False))
        keep = np.flatnonzero(np.isin(mixed.episodes, chosen))
        reward = mixed_labels.subset(keep)
        dynamics = mixed
        actions_included = False
    else:
        exp_dyn, exp_rew = collect_trajectories(
            mdp, expert, spec.n_expert_trajectories, spec.horizon_cap,
            np.random.default_rng(seeds[-2]), tag="expert", id_offset=next_id, episode_offset=next_ep,
            absorbing_tail=absorbing)
        with_actions = scenario in (Scenario.IL, Scenario.RLExpert)
        if scenario in (Scenario.ILfO, Scenario.IL):
            reward = RewardDataset(exp_rew.s, np.full(len(exp_rew), mdp.r_max), exp_rew.sp,
                                   a=exp_rew.a, ids=exp_rew.ids)
        else:
            reward = exp_rew
        if not with_actions:
            reward = reward.without_actions()
        dynamics = concat_dynamics([mixed, exp_dyn]) if with_actions else mixed
        actions_included = with_actions
        if with_actions:
            policies.append(expert)
            weights.append(spec.n_expert_trajectories)

    behavior = mixture_policy(mdp, policies, weights)
    meta = {"spec": spec.to_dict(), "seed": spec.seed, "mdp_hash": mdp.digest(),
            "n_states": mdp.n_states, "n_actions": mdp.n_actions, "r_max": mdp.r_max,
            "absorbing_terminals": absorbing}
    return ScenarioData(scenario, dynamics, reward, actions_included, behavior, meta, absorbing)


# --- persistence --------------------------------------------------------------

DYNAMICS_FILE = "dynamics.jsonl"
REWARD_FILE = "reward.jsonl"
META_FILE = "meta.json"


def _write_dynamics(path: Path, data: DynamicsDataset) -> None:
    with path.open("w") as fh:
        for i in range(len(data)):
            rec = {"s": int(data.s[i]), "a": int(data.a[i]), "sp": int(data.sp[i])}
            if data.tags is not None:
                rec["tag"] = data.tags[i]
            if data.ids is not None:
                rec["id"] = int(data.ids[i])
            fh.write(json.dumps(rec) + "\n")


def _write_rewards(path: Path, data: RewardDataset) -> None:
    with path.open("w") as fh:
        for i in range(len(data)):
            rec = {"s": int(data.s[i]), "r": float(data.r[i]), "sp": int(data.sp[i])}
            if data.a is not None:
                rec["a"] = int(data.a[i])
            if data.ids is not None:
                rec["id"] = int(data.ids[i])
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path: Path, required: tuple[str, ...], optional: tuple[str, ...]) -> dict[str, list]:
    cols: dict[str, list] = {k: [] for k in required + optional}
    seen_optional: dict[str, int] = {k: 0 for k in optional}
    n = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"{path.name}:{lineno}: record must be an object")
            for key in required:
                if key not in rec:
                    raise DatasetFormatError(f"{path.name}:{lineno}: missing key {key!r}")
                cols[key].append(rec[key])
            for key in optional:
                if key in rec:
                    seen_optional[key] += 1
                cols[key].append(rec.get(key))
            n += 1
    for key, count in seen_optional.items():
        if count == 0:
            cols[key] = None
        elif count != n:
            raise DatasetFormatError(f"{path.name}: optional key {key!r} present on only {count}/{n} records")
    return cols


def save_datasets(path: str | Path, data: ScenarioData) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    _write_dynamics(out / DYNAMICS_FILE, data.dynamics)
    _write_rewards(out / REWARD_FILE, data.reward)
    meta = dict(data.meta)
    meta.update({
        "scenario": data.scenario.value,
        "expert_actions_included": data.expert_actions_included,
        "behavior_policy": data.held_out_eval_policy.probs.tolist(),
    })
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_datasets(path: str | Path, mdp: TabularMdp | None = None) -> ScenarioData:
    src = Path(path)
    meta = json.loads((src / META_FILE).read_text())
    dyn_cols = _read_jsonl(src / DYNAMICS_FILE, ("s", "a", "sp"), ("tag", "id"))
    rew_cols = _read_jsonl(src / REWARD_FILE, ("s", "r", "sp"), ("a", "id"))
    try:
        dynamics = DynamicsDataset(dyn_cols["s"], dyn_cols["a"], dyn_cols["sp"],
                                   tags=dyn_cols["tag"], ids=dyn_cols["id"])
        reward = RewardDataset(rew_cols["s"], rew_cols["r"], rew_cols["sp"],
                               a=rew_cols["a"], ids=rew_cols["id"])
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{src}: malformed column ({exc})") from None
    n_states = mdp.n_states if mdp is not None else meta.get("n_states")
    n_actions = mdp.n_actions if mdp is not None else meta.get("n_actions")
    if n_states is not None and n_actions is not None:
        dynamics.validate(n_states, n_actions)
        reward.validate(n_states, n_actions)
    behavior = meta.pop("behavior_policy", None)
    if behavior is None:
        behavior = estimate_behavior_policy(dynamics, n_states, n_actions).probs
    return ScenarioData(
        scenario=Scenario.parse(meta.pop("scenario")),
        dynamics=dynamics,
        reward=reward,
        expert_actions_included=bool(meta.pop("expert_actions_included")),
        held_out_eval_policy=TabularPolicy(np.asarray(behavior)),
        meta=meta,
        absorbing=bool(meta.get("absorbing_terminals", False)),
    )
