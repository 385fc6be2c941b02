"""Backend selection for the game inner loop.

The compiled extension is used when it imported successfully and the learner
is all-tabular; everything else runs the generic NumPy path. Set
``PLFO_BACKEND=python`` to force the generic path.
"""

from __future__ import annotations

import os

import numpy as np

from .funcapprox import ParamFunction, Tabular

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

BACKENDS = ("compiled", "python")


def available() -> tuple[str, ...]:
    return BACKENDS if _kernels is not None else ("python",)


def default_backend() -> str:
    env = os.environ.get("PLFO_BACKEND", "").strip().lower()
    if env:
        if env not in BACKENDS:
            raise ValueError(f"PLFO_BACKEND must be one of {BACKENDS}")
        return env if env in available() else "python"
    return "compiled" if _kernels is not None else "python"


def select(backend: str | None) -> str:
    if backend is None:
        return default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}")
    if backend == "compiled" and _kernels is None:
        raise RuntimeError("the compiled extension is not available")
    return backend


def _tabular(fn: ParamFunction) -> bool:
    return isinstance(fn.arch, Tabular)


def supports(learner) -> bool:
    """True when every network is a table with the heads the kernel implements."""
    f = [c.live for c in learner.critics] + [c.target for c in learner.critics]
    if not all(_tabular(n) for n in f + [learner.policy, learner.reward_fn]):
        return False
    if learner.policy.bounds is not None:
        return False
    if any(n.head != "clip" or n.bounds != f[0].bounds for n in f):
        return False
    return learner.reward_fn.head == "sigmoid"


def run_tabular(learner, config, problem, opts, data, idx_a, idx_r, warm: bool) -> np.ndarray:
    S, A = problem.n_states, problem.n_actions
    nets = [learner.policy, learner.critics[0].live, learner.critics[1].live, learner.reward_fn]
    states = [learner.opt[k] for k in ("policy", "f1", "f2", "reward")]
    width = max(n.params.size for n in nets)
    m = np.zeros((4, width))
    v = np.zeros((4, width))
    for i, st in enumerate(states):
        m[i, : st.m.size] = st.m
        v[i, : st.v.size] = st.v
    steps = np.array([st.step for st in states], dtype=np.int64)
    lr = np.array([st.lr for st in states])
    b1 = np.array([st.beta1 for st in states])
    b2 = np.array([st.beta2 for st in states])
    eps = np.array([st.eps for st in states])
    temperature = np.array([learner.temperature])
    bounds = learner.critics[0].live.bounds
    r_lo, r_hi = learner.reward_fn.bounds
    source = {"learned": 0, "fixed": 1, "observed": 2}[opts.reward_source]
    a_r = data.r_a if data.r_a is not None else np.zeros(0)
    out = np.empty((idx_a.shape[0], 6))
    _kernels.tabular_steps(
        learner.policy.params, nets[1].params, nets[2].params,
        learner.critics[0].target.params, learner.critics[1].target.params, learner.reward_fn.params,
        m, v, steps, lr, b1, b2, eps, temperature,
        data.a_s, data.a_a, data.a_sp, np.ascontiguousarray(a_r, dtype=float),
        data.r_s, data.r_r, data.r_sp,
        np.ascontiguousarray(idx_a, dtype=np.int64), np.ascontiguousarray(idx_r, dtype=np.int64),
        np.ascontiguousarray(problem.terminal, dtype=float), np.ascontiguousarray(problem.d0, dtype=float),
        S, A, problem.gamma, config.alpha, config.beta, config.w, config.tau,
        config.eta_fast, config.resolved_eta_temp(), config.resolved_entropy_target(A),
        int(bounds is not None), *(bounds if bounds is not None else (0.0, 0.0)), r_lo, r_hi,
        int(opts.relative), int(opts.actor_on_data), source, int(warm), out)
    for i, st in enumerate(states):
        st.m[:] = m[i, : st.m.size]
        st.v[:] = v[i, : st.v.size]
        st.step = int(steps[i])
    learner.temperature = float(temperature[0])
    return out
