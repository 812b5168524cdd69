"""Command-line entry points for scenario runs, sweeps and validation."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data_io import (ScenarioConfig, fixture_path, load_error_samples,
                      load_network_case)
from .experiments import (grid_search, player_sweep, plot_report, radius_sweep,
                          run_scenario, write_experiment)

_MODE_ALIASES = {"c1": "bonferroni-bound", "c2": "joint-bound",
                 "c3": "bayesian", "none": "no-regulation"}
_OK_STATUSES = {"optimal", "node-limit", "time-limit"}


def _add_common(p):
    p.add_argument("--case", default=None, help="network case directory "
                   "(default: bundled desk case)")
    p.add_argument("--samples", default=None, help="error sample CSV "
                   "(default: bundled desk samples)")
    p.add_argument("--config", default=None, help="scenario config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--mode", choices=sorted(_MODE_ALIASES), default=None,
                   help="c1: equal-split bound, c2: joint bound, "
                   "c3: tuned, none: no regulation")


def _load(args):
    config = ScenarioConfig.from_json(args.config or
                                      fixture_path("desk_config.json"))
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.mode is not None:
        config = config.replace(mode=_MODE_ALIASES[args.mode])
    case_dir = args.case or fixture_path("desk_case")
    samples_path = args.samples or fixture_path("desk_samples.csv")
    case = load_network_case(case_dir)
    samples = load_error_samples(samples_path)
    return case, samples, config


def _finish(results, out_dir) -> int:
    results = results if isinstance(results, list) else [results]
    path = write_experiment(results, out_dir)
    bad = [r.scenario_id for r in results if r.solver_status not in _OK_STATUSES]
    for r in results:
        print(f"{r.scenario_id}: joint_rate={r.oos.joint_rate:.4f} "
              f"eps_ind={np.mean(r.eps_ind):.4f} status={r.solver_status} "
              f"solves={r.n_model_solves}")
    print(f"results written to {path}")
    if bad:
        print(f"failed solves: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="drmarket",
        description="reserve-market game simulation with risk-aware "
                    "microgrid bidding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _add_common(p)

    p = sub.add_parser("sweep-radius", help="sweep the ambiguity radius")
    _add_common(p)
    p.add_argument("--radii", default="1e-4,1e-3,1e-2,1e-1",
                   help="comma-separated radius list")

    p = sub.add_parser("sweep-players", help="sweep the player count")
    _add_common(p)
    p.add_argument("--counts", default="2,4,6")
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("grid-search", help="exhaustive tied-rate search")
    _add_common(p)

    p = sub.add_parser("validate-vi", help="potential-problem cross checks")
    _add_common(p)

    p = sub.add_parser("report", help="render SVG figures from a results table")
    p.add_argument("results_csv")
    p.add_argument("--out", default="out")

    args = parser.parse_args(argv)

    if args.command == "report":
        written = plot_report(args.results_csv, args.out)
        for path in written:
            print(f"wrote {path}")
        return 0

    case, samples, config = _load(args)

    if args.command == "run":
        return _finish(run_scenario(case, samples, config), args.out)

    if args.command == "sweep-radius":
        radii = [float(tok) for tok in args.radii.split(",")]
        return _finish(radius_sweep(case, samples, config, radii), args.out)

    if args.command == "sweep-players":
        counts = [int(tok) for tok in args.counts.split(",")]
        return _finish(player_sweep(case, samples, config, counts,
                                    n_repeats=args.repeats), args.out)

    if args.command == "grid-search":
        return _finish(grid_search(case, samples, config), args.out)

    if args.command == "validate-vi":
        from .experiments import split_samples
        from .vi_validator import assemble_jacobian, check_uniqueness

        train, _ = split_samples(samples, config)
        game_map = assemble_jacobian(case, config, delta_t=train.delta_t)
        sym = float(np.max(np.abs(game_map.jacobian - game_map.jacobian.T)))
        eps = config.joint_rate / max(len(case.microgrids), 1)
        report = check_uniqueness(case, train, config, eps)
        rows = [("jacobian-symmetry", "PASS" if sym == 0.0 else "FAIL",
                 f"max asymmetry {sym:g}"),
                ("solution-uniqueness", "PASS" if report["passed"] else "FAIL",
                 f"max quantity deviation {report['max_deviation_mw']:.3e} MW")]
        for name, verdict, detail in rows:
            print(f"{name:24s} {verdict}  {detail}")
        if report.get("note"):
            print(f"note: {report['note']}")
        from pathlib import Path
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "vi_report.json", "w") as fh:
            json.dump({"jacobian_asymmetry": sym, **{
                k: (v if not isinstance(v, np.ndarray) else v.tolist())
                for k, v in report.items()}}, fh, indent=2, sort_keys=True)
        return 0 if all(r[1] == "PASS" for r in rows) else 1

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
