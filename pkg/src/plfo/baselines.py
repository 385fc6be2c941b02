"""Comparison algorithms: behavior cloning variants, reward/action labeling, and ATAC on relabeled data."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import ConfigError, DynamicsDataset, RewardDataset, ScenarioData, Scenario, estimate_behavior_policy
from .funcapprox import AdamState, ParamFunction, adam_step, linear, mlp2, tabular
from .game.learner import (
    GameConfig,
    Problem,
    StepOptions,
    Trace,
    TrainResult,
    make_eval_hook,
    options_for,
    train_game,
)
from .game.losses import softmax
from .mdp import TabularMdp, TabularPolicy, expected_return


class Kind(str, enum.Enum):
    BC = "BC"
    BCO = "BCO"
    RP = "RP"
    AP = "AP"
    UDS = "UDS"
    UDSA = "UDSA"
    AtacLabeledOnly = "AtacLabeledOnly"
    OracleAtac = "OracleAtac"

    @classmethod
    def parse(cls, name: str) -> Kind:
        key = name.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ConfigError(f"unknown baseline {name!r}; choose from {[m.value for m in cls]}")


IDM_KINDS = (Kind.BCO, Kind.AP)


@dataclass(frozen=True)
class BaselineKind:
    """A baseline and its kind-specific settings.

    ``idm_arch``/``idm_steps`` apply to the inverse-dynamics kinds and
    ``r_min`` to the UDS kinds; setting them for other kinds is an error.
    """

    kind: Kind
    idm_arch: str | None = None
    idm_steps: int | None = None
    r_min: float | None = None

    def __post_init__(self) -> None:
        kind = self.kind if isinstance(self.kind, Kind) else Kind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in IDM_KINDS:
            object.__setattr__(self, "idm_arch", self.idm_arch or "tabular")
            object.__setattr__(self, "idm_steps", 1_000 if self.idm_steps is None else self.idm_steps)
            if self.idm_steps < 1:
                raise ConfigError("idm_steps must be positive")
        elif self.idm_arch is not None or self.idm_steps is not None:
            raise ConfigError(f"inverse-dynamics settings do not apply to {kind.value}")
        if kind in (Kind.UDS, Kind.UDSA):
            object.__setattr__(self, "r_min", 0.0 if self.r_min is None else float(self.r_min))
        elif self.r_min is not None:
            raise ConfigError(f"r_min does not apply to {kind.value}")


# --- inverse dynamics --------------------------------------------------------------------------------


@dataclass(eq=False)
class InverseDynamicsModel:
    net: ParamFunction
    n_states: int
    n_actions: int
    loss_trace: list[float] = field(default_factory=list)

    def predict_proba(self, s, sp) -> np.ndarray:
        x = np.asarray(s, dtype=np.int64) * self.n_states + np.asarray(sp, dtype=np.int64)
        return softmax(self.net.forward(x.reshape(-1)))

    def predict(self, s, sp) -> np.ndarray:
        """Most likely action; ties go to the lowest index."""
        return np.argmax(self.predict_proba(s, sp), axis=1)


def train_inverse_dynamics(D_A: DynamicsDataset, n_states: int, n_actions: int, arch: str = "tabular",
                           steps: int = 1_000, seed: int = 0, lr: float = 0.05, hidden: int = 32) -> InverseDynamicsModel:
    """Full-batch cross-entropy fit of a | (s, s') with Adam."""
    if len(D_A) == 0:
        raise ConfigError("the dynamics dataset is empty")
    n_in = n_states * n_states
    if arch == "tabular":
        net = tabular(n_in, n_actions)
    elif arch == "linear":
        net = linear(n_in, n_actions)
    elif arch == "mlp2":
        net = mlp2(n_in, hidden, n_actions, np.random.default_rng(seed), scale=0.1)
    else:
        raise ConfigError(f"unknown inverse-dynamics arch {arch!r}")
    key = (D_A.s * n_states + D_A.sp) * n_actions + D_A.a
    uniq, counts = np.unique(key, return_counts=True)
    x = uniq // n_actions
    a = uniq % n_actions
    wts = counts / counts.sum()
    opt = AdamState.for_fn(net, lr)
    model = InverseDynamicsModel(net, n_states, n_actions)
    for _ in range(steps):
        loss, grad = idm_loss_grad(net, x, a, wts)
        model.loss_trace.append(loss)
        adam_step(opt, net, grad)
    return model


def idm_loss_grad(net: ParamFunction, x, a, wts) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy of actions given (s, s') cells, and its parameter gradient."""
    rows = np.arange(len(x))
    p = softmax(net.forward(x))
    d = p.copy()
    d[rows, a] -= 1.0
    return float(-wts @ np.log(p[rows, a])), net.backward(x, d * wts[:, None])


def ap_label_actions(D_R: RewardDataset, idm: InverseDynamicsModel) -> tuple[DynamicsDataset, np.ndarray]:
    """Attach predicted actions to reward records; rewards pass through untouched."""
    actions = idm.predict(D_R.s, D_R.sp) if len(D_R) else np.zeros(0, dtype=np.int64)
    dyn = DynamicsDataset(D_R.s, actions, D_R.sp, ids=D_R.ids)
    return dyn, np.asarray(D_R.r, dtype=float).copy()


def uds_label(D_A: DynamicsDataset, D_R: RewardDataset, r_min: float = 0.0, variant: str = "UDS"
              ) -> tuple[DynamicsDataset, np.ndarray]:
    """Fill in missing rewards with ``r_min``.

    UDS relabels D_A in place, keeping the true label of every record it can
    match to D_R by id. UDSA stacks the labeled D_R (which must carry
    actions) on top of a copy of D_A labeled ``r_min``.
    """
    if variant == "UDS":
        if D_A.ids is None or (len(D_R) and D_R.ids is None):
            raise ConfigError("UDS needs record ids aligning the dynamics and reward datasets")
        rewards = np.full(len(D_A), float(r_min))
        if len(D_R):
            order = np.argsort(D_A.ids, kind="stable")
            pos = np.searchsorted(D_A.ids[order], D_R.ids)
            pos = np.minimum(pos, len(D_A) - 1)
            hit = D_A.ids[order][pos] == D_R.ids
            idx = order[pos[hit]]
            rewards[idx] = D_R.r[hit]
        return D_A, rewards
    if variant == "UDSA":
        if len(D_R) and D_R.a is None:
            raise ConfigError("UDSA needs actions in the reward dataset")
        labeled = DynamicsDataset(D_R.s, D_R.a if D_R.a is not None else np.zeros(0, np.int64), D_R.sp)
        dyn = DynamicsDataset(np.concatenate([labeled.s, D_A.s]), np.concatenate([labeled.a, D_A.a]),
                              np.concatenate([labeled.sp, D_A.sp]))
        return dyn, np.concatenate([np.asarray(D_R.r, dtype=float), np.full(len(D_A), float(r_min))])
    raise ConfigError(f"unknown UDS variant {variant!r}")


def behavior_cloning(s, a, n_states: int, n_actions: int) -> TabularPolicy:
    """Maximum-likelihood tabular policy; unvisited states stay uniform."""
    return estimate_behavior_policy(DynamicsDataset(s, a, s), n_states, n_actions)


# --- running a baseline -----------------------------------------------------------------------------


def _expert_data(kind: Kind, scenario: ScenarioData) -> RewardDataset:
    if scenario.scenario is Scenario.RLSample:
        raise ConfigError(f"{kind.value} needs expert data, which the {scenario.scenario.value} scenario lacks")
    return scenario.reward


def _single_row_trace(kind: Kind, mdp: TabularMdp | None, policy: TabularPolicy, loss: float) -> Trace:
    trace = Trace(extra={"kind": kind.value})
    row = {"step": 0, "l_critic1": math.nan, "l_critic2": math.nan, "l_reward": math.nan, "l_actor": loss,
           "entropy": float(policy.entropy().mean()), "temperature": 0.0,
           "J_true": expected_return(mdp, policy) if mdp is not None else math.nan, "bellman_err": math.nan}
    trace.append(row)
    return trace


def _nll(policy: TabularPolicy, s, a) -> float:
    if len(s) == 0:
        return math.nan
    return float(-np.mean(np.log(np.maximum(policy.probs[s, a], 1e-300))))


def run_baseline(kind: BaselineKind | Kind | str, scenario: ScenarioData, problem: Problem, config: GameConfig,
                 mdp: TabularMdp | None = None, *, evaluate: bool = True, backend: str | None = None) -> TrainResult:
    """Train one baseline on a scenario.

    ``mdp`` is used for evaluation hooks and, for OracleAtac only, for the
    privileged reward labels.
    """
    if not isinstance(kind, BaselineKind):
        kind = BaselineKind(kind)
    k = kind.kind
    S, A = problem.n_states, problem.n_actions
    D_A, D_R = scenario.dynamics, scenario.reward
    extra = {"kind": k.value}

    if k is Kind.BC:
        expert = _expert_data(k, scenario)
        if expert.a is None:
            raise ConfigError("BC needs expert actions: the reward dataset field 'a' is missing")
        policy = behavior_cloning(expert.s, expert.a, S, A)
        return TrainResult(policy, _single_row_trace(k, mdp if evaluate else None, policy,
                                                     _nll(policy, expert.s, expert.a)), None)
    if k is Kind.BCO:
        expert = _expert_data(k, scenario)
        idm = train_inverse_dynamics(D_A, S, A, kind.idm_arch, kind.idm_steps, config.seed)
        actions = idm.predict(expert.s, expert.sp)
        policy = behavior_cloning(expert.s, actions, S, A)
        return TrainResult(policy, _single_row_trace(k, mdp if evaluate else None, policy,
                                                     _nll(policy, expert.s, actions)), None)

    def hook_for(dyn, rewards=None):
        return make_eval_hook(mdp, dyn, rewards, scenario.absorbing) if (evaluate and mdp is not None) else None

    if k is Kind.RP:
        if len(D_R) == 0:
            raise ConfigError("RP needs a nonempty reward dataset")
        opts = options_for(config, "fixed")
        return train_game(problem, D_R, D_A, config, opts=opts, eval_hook=hook_for(D_A), backend=backend,
                          trace_extra=extra)
    if k is Kind.AP:
        idm = train_inverse_dynamics(D_A, S, A, kind.idm_arch, kind.idm_steps, config.seed)
        dyn, rewards = ap_label_actions(D_R, idm)
        if len(dyn) == 0:
            raise ConfigError("AP needs a nonempty reward dataset")
    elif k in (Kind.UDS, Kind.UDSA):
        dyn, rewards = uds_label(D_A, D_R, kind.r_min, k.value)
    elif k is Kind.AtacLabeledOnly:
        if D_R.a is None:
            raise ConfigError("AtacLabeledOnly needs records with both actions and rewards: "
                              "the reward dataset field 'a' is missing")
        if len(D_R) == 0:
            raise ConfigError("AtacLabeledOnly needs a nonempty reward dataset")
        dyn, rewards = DynamicsDataset(D_R.s, D_R.a, D_R.sp, ids=D_R.ids), np.asarray(D_R.r, dtype=float)
    elif k is Kind.OracleAtac:
        if mdp is None:
            raise ConfigError("OracleAtac needs the true reward: pass the mdp")
        dyn, rewards = D_A, mdp.reward[D_A.s, D_A.sp].astype(float)
    else:  # pragma: no cover - enum is exhaustive
        raise ConfigError(f"unhandled baseline {k}")
    opts = options_for(config, "observed")
    return train_game(problem, None, dyn, config, opts=opts, rewards_a=rewards, eval_hook=hook_for(dyn, rewards),
                      backend=backend, trace_extra=extra)
