"""Time the game inner loop on Grid5 with the compiled and the NumPy backends.

    python3 benchmarks/bench_kernels.py --steps 5000 --repeats 3
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from plfo import envs, kernels
from plfo.datasets import Scenario, ScenarioSpec, build_scenario, expert_policy
from plfo.game.learner import GameConfig, GameData, Problem, make_learner, options_for, run_steps, sample_indices


def time_backend(backend: str, problem, data, config, steps: int, repeats: int):
    best, learner = float("inf"), None
    for _ in range(repeats):
        learner = make_learner(problem, config)
        rng = np.random.default_rng(config.seed)
        idx_a = sample_indices(rng, data.n_a, steps, config.batch_size)
        idx_r = sample_indices(rng, data.n_r, steps, config.batch_size)
        start = time.perf_counter()
        run_steps(learner, config, problem, options_for(config), data, idx_a, idx_r, warm=False, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best, learner


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=5_000)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--batch", type=int, default=256)
    args = parser.parse_args()

    mdp = envs.grid5()
    scenario = build_scenario(mdp, expert_policy(mdp), ScenarioSpec(scenario=Scenario.RLSample, seed=0))
    problem = Problem.from_mdp(mdp)
    config = GameConfig(batch_size=args.batch, seed=0)
    data = GameData.build(scenario.dynamics, scenario.reward)

    results = {}
    for backend in ("python",) + (("compiled",) if "compiled" in kernels.available() else ()):
        results[backend] = time_backend(backend, problem, data, config, args.steps, args.repeats)
        secs = results[backend][0]
        print(f"{backend:>9}: {secs:8.3f} s for {args.steps} steps ({args.steps / secs:10.0f} steps/s)")
    if len(results) == 2:
        py, comp = results["python"], results["compiled"]
        diff = max(float(np.max(np.abs(a.params - b.params)))
                   for a, b in zip((py[1].policy, py[1].critics[0].live, py[1].critics[1].live, py[1].reward_fn),
                                   (comp[1].policy, comp[1].critics[0].live, comp[1].critics[1].live,
                                    comp[1].reward_fn)))
        print(f"  speedup: {py[0] / comp[0]:.1f}x, max parameter difference {diff:.2e}")
    else:
        print("compiled extension not built; only the NumPy backend was timed")


if __name__ == "__main__":
    main()
