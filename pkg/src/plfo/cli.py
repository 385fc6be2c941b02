"""Command-line entry point: ``plfo {gen-data,train,eval,audit,compare}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datasets import ConfigError, ScenarioSpec, save_datasets
from .harness import (
    ALGORITHMS,
    AuditConfig,
    ExperimentConfig,
    evaluate_policy,
    eval_seed,
    load_mdp,
    load_policy,
    make_data,
    parse_algo,
    run_audit,
    run_experiment,
    seed_dir,
    worker_count,
    write_comparison,
)

COMPARE_DEFAULT = ("MAHALO-ATAC", "RP", "AP", "UDS", "BC", "BCO", "OracleAtac")
U64_MAX = 2 ** 64 - 1


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _experiment(args, doc: dict | None = None, algo: str | None = None,
                scenario: str | None = None) -> ExperimentConfig:
    """Config file settings with command-line flags layered on top."""
    doc = dict(_read_config(args.config) if doc is None else doc)
    scenario = scenario or args.scenario
    if scenario:
        spec = doc.get("scenario", {})
        spec = dict(spec) if isinstance(spec, dict) else {"scenario": spec}
        spec["scenario"] = scenario
        doc["scenario"] = spec
    if algo or args.algo:
        doc["algo"] = algo or args.algo
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    if args.out is not None:
        doc["out"] = args.out
    return ExperimentConfig.from_dict(doc)


def cmd_gen_data(args) -> int:
    doc = _read_config(args.config)
    mdp_name = doc.pop("mdp", "grid5")
    spec = doc.pop("scenario", {})
    spec = dict(spec) if isinstance(spec, dict) else {"scenario": spec}
    if args.scenario:
        spec["scenario"] = args.scenario
    if "scenario" not in spec:
        raise ConfigError("gen-data needs --scenario or a scenario in the config")
    if args.seed is not None:
        spec["seed"] = args.seed
    config = ExperimentConfig(scenario=ScenarioSpec.from_dict(spec), mdp=mdp_name,
                              expert_epsilon=doc.pop("expert_epsilon", 0.05))
    mdp = load_mdp(config.mdp)
    data = make_data(config, mdp, config.scenario.seed)
    out = Path(args.out or "data")
    save_datasets(out, data)
    mdp.save(out / "mdp.json")
    print(f"wrote {len(data.dynamics)} dynamics and {len(data.reward)} reward records to {out}")
    return 0


def cmd_train(args) -> int:
    config = _experiment(args)
    result = run_experiment(config)
    for o in result.outcomes:
        if o.report is not None:
            print(f"seed {o.seed}: J={o.report.exact_return:.6f} score={o.report.normalized_score:.2f} "
                  f"success={o.report.success_rate:.3f}")
        else:
            print(f"seed {o.seed}: failed ({o.error})")
    print(f"results in {result.directory}")
    return 0 if not result.row.partial else 1


def cmd_eval(args) -> int:
    config = _experiment(args)
    mdp = load_mdp(config.mdp)
    status = 0
    for seed in config.seeds:
        directory = seed_dir(config.out, config.scenario.scenario.value, config.algo, seed) / "checkpoint"
        if not (directory / "policy_table.json").is_file():
            print(f"seed {seed}: no checkpoint under {directory}", file=sys.stderr)
            status = 1
            continue
        report = evaluate_policy(mdp, load_policy(directory), config.n_eval_episodes, config.horizon_cap,
                                 eval_seed(seed))
        print(json.dumps({"seed": seed, **report.to_dict()}, sort_keys=True))
    return status


def cmd_audit(args) -> int:
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    config = AuditConfig.from_dict(doc)
    table = run_audit(config)
    out = Path(args.out or "out")
    path = table.save(out / f"audit_{Path(config.mdp).stem}.csv")
    print(f"{sum(c.passed for c in table.cells)}/{len(table.cells)} cells pass (epsilon={table.epsilon:.6g}); {path}")
    return 0 if table.passed else 1


def cmd_compare(args) -> int:
    """Every algorithm on every scenario; ``baseline`` in the config maps algorithm names to settings."""
    doc = _read_config(args.config)
    per_algo = doc.pop("baseline", {})
    doc.pop("algo", None)
    scenarios = [s for s in (args.scenario or "").split(",") if s] or [None]
    algos = [parse_algo(a) for a in (args.algo or "").split(",") if a] or list(COMPARE_DEFAULT)
    tables = []
    for scenario in scenarios:
        rows = []
        for algo in algos:
            settings = {k: v for k, v in per_algo.items() if parse_algo(k) == algo}
            algo_doc = {**doc, "baseline": next(iter(settings.values()), {})}
            config = _experiment(args, algo_doc, algo=algo, scenario=scenario)
            rows.append(run_experiment(config).row)
        tables.append(rows)
    path, summary = write_comparison(args.out or doc.get("out", "out"), tables)
    print(summary, end="")
    print(f"table in {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plfo", description="Offline policy learning from observations.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "build a scenario's datasets"),
        "train": (cmd_train, "train one algorithm on one scenario"),
        "eval": (cmd_eval, "re-evaluate saved checkpoints"),
        "audit": (cmd_audit, "robust policy improvement audit over an (alpha, beta) grid"),
        "compare": (cmd_compare, "run several algorithms and write comparison.csv"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON document with experiment settings")
        p.add_argument("--seed", type=_u64, help="run a single seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--algo", help=f"algorithm, one of {', '.join(ALGORITHMS)}")
        p.add_argument("--scenario", help="ILfO, IL, RLfO, RLExpert or RLSample")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        worker_count()
        return args.func(args)
    except ConfigError as exc:
        print(f"plfo: configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
