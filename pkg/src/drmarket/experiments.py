"""Scenario runs: out-of-sample validation, mode comparisons, sweeps, search.

A scenario takes a network case plus a sample file, trains the ambiguity set
on the first n_samples rows, solves the market game and validates the
equilibrium bids on the next n_oos held-out rows.  Violation-budget modes:
the two analytic bounds, the tuned mode driven by the surrogate loop, and the
unregulated benchmark.  All artifacts are deterministic for a fixed seed;
wall-clock timings go to a separate file so result tables stay byte-stable.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bayes_tuner import ObservationLog, TunerConfig, run_tuning_loop
from .data_io import (ErrorSampleMatrix, NetworkCase, ScenarioConfig,
                      write_results)
from .dro_blocks import bonferroni_bounds
from .market_mpec import Equilibrium, assemble_game, solve_market
from .solver import SolverSettings


@dataclass
class OosReport:
    under_delivered: np.ndarray      # (n_tests, n_mg) MWh
    violation: np.ndarray            # (n_tests,) any microgrid over the cap
    per_microgrid: np.ndarray        # (n_tests, n_mg) individual flags
    joint_rate: float
    individual_rates: np.ndarray

    @property
    def n_tests(self):
        return len(self.violation)


def out_of_sample(reserve_bid, oos_samples, shortfall_cap: float,
                  delta_t: float, train_samples=None) -> OosReport:
    """Count contract violations of fixed bids over held-out error rows.

    A test violates when any microgrid's under-delivered energy
    dt * <zeta, R> exceeds the contract cap; the joint rate is the exact
    violation count over the number of tests.
    """
    bids = np.atleast_2d(np.asarray(reserve_bid, dtype=float))
    zeta = oos_samples.samples if isinstance(oos_samples, ErrorSampleMatrix) \
        else np.asarray(oos_samples, dtype=float)
    if train_samples is not None:
        train = train_samples.samples if isinstance(train_samples, ErrorSampleMatrix) \
            else np.asarray(train_samples)
        fingerprints = {row.tobytes() for row in np.asarray(train)}
        overlap = sum(1 for row in zeta if row.tobytes() in fingerprints)
        if overlap:
            warnings.warn(f"{overlap} out-of-sample rows also appear in the "
                          "training set", stacklevel=2)
    under = delta_t * zeta @ bids.T
    per_mg = under > shortfall_cap
    violation = per_mg.any(axis=1)
    return OosReport(under_delivered=under, violation=violation,
                     per_microgrid=per_mg,
                     joint_rate=float(violation.sum()) / len(violation),
                     individual_rates=per_mg.mean(axis=0))


@dataclass
class ExperimentResult:
    scenario_id: str
    mode: str
    players: int
    radius: float
    eps_ind: np.ndarray
    equilibrium: Equilibrium
    oos: OosReport
    wall_seconds: float
    solver_status: str
    solver_nodes: int
    solver_gap: float
    n_model_solves: int
    observation_log: ObservationLog | None = None

    def summary_row(self) -> dict:
        eq = self.equilibrium
        return {
            "scenario": self.scenario_id,
            "mode": self.mode,
            "players": self.players,
            "radius": self.radius,
            "eps_ind_mean": float(np.mean(self.eps_ind)) if len(self.eps_ind) else 0.0,
            "joint_rate": self.oos.joint_rate,
            "under_delivered_mean": float(self.oos.under_delivered.sum(axis=1).mean()),
            "under_delivered_q20": float(np.quantile(
                self.oos.under_delivered.sum(axis=1), 0.2)),
            "under_delivered_q80": float(np.quantile(
                self.oos.under_delivered.sum(axis=1), 0.8)),
            "iso_cost": eq.iso_cost,
            "mg_cost_mean": float(eq.mg_costs.mean()) if eq.mg_costs.size else 0.0,
            "total_reserve_bid": float(eq.reserve_bid.sum()),
            "total_energy_import": float(eq.grid_import.sum()),
            "objective": eq.objective,
            "solver_status": self.solver_status,
            "n_model_solves": self.n_model_solves,
        }


def split_samples(samples: ErrorSampleMatrix, config: ScenarioConfig
                  ) -> tuple[ErrorSampleMatrix, ErrorSampleMatrix]:
    """First n_samples rows train the ambiguity set, next n_oos validate."""
    need = config.n_samples + config.n_oos
    if samples.n_samples < need:
        raise ValueError(f"sample file has {samples.n_samples} rows, "
                         f"need {need} for the train/test split")
    return (samples.rows(0, config.n_samples),
            samples.rows(config.n_samples, need))


def _solver_settings(config: ScenarioConfig) -> SolverSettings:
    return SolverSettings(feas_tol=config.feas_tol, gap_tol=config.gap_tol,
                          integer_tol=config.integer_tol,
                          node_limit=config.node_limit,
                          time_limit=config.time_limit)


def solve_once(case: NetworkCase, train: ErrorSampleMatrix,
               config: ScenarioConfig, eps_ind):
    program = assemble_game(case, train, config, eps_ind)
    result, eq = solve_market(program, _solver_settings(config))
    return program, result, eq


def run_scenario(case: NetworkCase, samples: ErrorSampleMatrix,
                 config: ScenarioConfig, scenario_id: str | None = None
                 ) -> ExperimentResult:
    t0 = time.perf_counter()
    train, oos = split_samples(samples, config)
    n_mg = len(case.microgrids)
    lo, hi = bonferroni_bounds(config.joint_rate, max(n_mg, 1))
    solves = 0
    obs_log = None

    if config.mode == "bonferroni-bound":
        eps = np.full(n_mg, lo)
    elif config.mode == "joint-bound":
        eps = np.full(n_mg, hi)
    elif config.mode == "no-regulation":
        eps = np.full(n_mg, hi)     # unused; the caps are dropped entirely
    elif config.mode == "bayesian":
        dim = 1 if config.epsilon_mode == "tied-scalar" else n_mg

        def evaluator(point):
            nonlocal solves
            eps_vec = np.full(n_mg, float(point[0])) if dim == 1 else point
            _, res, eq = solve_once(case, train, config, eps_vec)
            solves += 1
            report = out_of_sample(eq.reserve_bid, oos,
                                   config.reserve_shortfall_cap, train.delta_t,
                                   train_samples=train)
            return report.joint_rate

        tuner = TunerConfig(target=config.joint_rate,
                            box_lo=np.full(dim, lo), box_hi=np.full(dim, hi),
                            n_iterations=config.n_iterations,
                            n_init=config.n_init, stop_tol=config.stop_tol,
                            seed=config.seed)
        best, obs_log = run_tuning_loop(evaluator, tuner)
        eps = np.full(n_mg, float(best[0])) if dim == 1 else np.asarray(best)
    else:
        raise ValueError(f"unknown mode {config.mode}")

    _, result, eq = solve_once(case, train, config, eps)
    solves += 1
    report = out_of_sample(eq.reserve_bid, oos, config.reserve_shortfall_cap,
                           train.delta_t, train_samples=train)

    sid = scenario_id or f"{config.mode}-p{n_mg}-nu{config.radius:g}-s{config.seed}"
    return ExperimentResult(
        scenario_id=sid, mode=config.mode, players=n_mg, radius=config.radius,
        eps_ind=eps, equilibrium=eq, oos=report,
        wall_seconds=time.perf_counter() - t0, solver_status=result.status,
        solver_nodes=result.node_count, solver_gap=result.gap,
        n_model_solves=solves, observation_log=obs_log)


def radius_sweep(case: NetworkCase, samples: ErrorSampleMatrix,
                 config: ScenarioConfig, radius_list) -> list[ExperimentResult]:
    """One run per radius plus the unregulated benchmark."""
    results = []
    for nu in radius_list:
        cfg = config.replace(radius=float(nu),
                             mode=config.mode if config.mode != "no-regulation"
                             else "joint-bound")
        results.append(run_scenario(case, samples, cfg))
    bench = config.replace(mode="no-regulation")
    results.append(run_scenario(case, samples, bench))
    return results


def player_sweep(case: NetworkCase, samples: ErrorSampleMatrix,
                 config: ScenarioConfig, counts, n_repeats: int = 5
                 ) -> list[ExperimentResult]:
    """Tuned runs per player count, repeated over seeds.

    Hosts are drawn without replacement from the case's microgrid-capable
    buses in a seeded random order per repeat.
    """
    all_ids = [m.mg_id for m in case.microgrids]
    results = []
    for count in counts:
        if count > len(all_ids):
            raise ValueError(f"case only supports {len(all_ids)} players")
        for rep in range(n_repeats):
            rng = np.random.default_rng(config.seed + 1000 * rep)
            chosen = list(rng.permutation(all_ids)[:count])
            sub = case.with_microgrid_hosts(chosen)
            cfg = config.replace(seed=config.seed + rep)
            results.append(run_scenario(
                sub, samples, cfg,
                scenario_id=f"{cfg.mode}-p{count}-rep{rep}"))
    return results


def grid_search(case: NetworkCase, samples: ErrorSampleMatrix,
                config: ScenarioConfig) -> ExperimentResult:
    """Exhaustive tied-scalar search over the admissible interval.

    n_grid equally spaced points with spacing
    (n_players-1)*joint_rate / (n_players*(n_grid-1)); the model is solved at
    every point, so the solve count always equals n_grid.
    """
    t0 = time.perf_counter()
    train, oos = split_samples(samples, config)
    n_mg = len(case.microgrids)
    lo, hi = bonferroni_bounds(config.joint_rate, n_mg)
    points = np.linspace(lo, hi, config.n_grid)

    log = ObservationLog(target=config.joint_rate)
    best = None
    for point in points:
        eps = np.full(n_mg, float(point))
        _, result, eq = solve_once(case, train, config.replace(mode="joint-bound"),
                                   eps)
        report = out_of_sample(eq.reserve_bid, oos, config.reserve_shortfall_cap,
                               train.delta_t, train_samples=train)
        log.append(np.array([point]), report.joint_rate)
        dev = abs(report.joint_rate - config.joint_rate)
        if best is None or dev < best[0] - 1e-15:
            best = (dev, point, eq, report, result)

    _, point, eq, report, result = best
    return ExperimentResult(
        scenario_id=f"grid-p{n_mg}-s{config.seed}", mode="grid-search",
        players=n_mg, radius=config.radius, eps_ind=np.full(n_mg, point),
        equilibrium=eq, oos=report, wall_seconds=time.perf_counter() - t0,
        solver_status=result.status, solver_nodes=result.node_count,
        solver_gap=result.gap, n_model_solves=config.n_grid,
        observation_log=log)


# ---- artifact writing -----------------------------------------------------------


def write_experiment(results, out_dir, timings: bool = True):
    """Deterministic result tables plus a separate timing file."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(results, ExperimentResult):
        results = [results]
    rows = [r.summary_row() for r in results]
    write_results(pd.DataFrame(rows), out / "results.csv")
    for r in results:
        if r.observation_log is not None:
            r.observation_log.to_csv(out / f"tuner_{r.scenario_id}.csv")
        oos = pd.DataFrame({
            "test": np.arange(r.oos.n_tests),
            "under_delivered_total": r.oos.under_delivered.sum(axis=1),
            "violation": r.oos.violation.astype(int)})
        write_results(oos, out / f"oos_{r.scenario_id}.csv")
    if timings:
        timing = {r.scenario_id: {"wall_seconds": r.wall_seconds,
                                  "solver_nodes": r.solver_nodes}
                  for r in results}
        with open(out / "timing.json", "w") as fh:
            json.dump(timing, fh, indent=2, sort_keys=True)
    return out / "results.csv"


def plot_report(results_csv, out_dir):
    """Render the sweep figures from a results table to SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    plt.rcParams["svg.hashsalt"] = "drmarket"
    df = pd.read_csv(results_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    sweep = df[df["mode"] != "no-regulation"].sort_values("radius")
    if len(sweep) > 1 and sweep["radius"].nunique() > 1:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        axes[0].fill_between(sweep["radius"], sweep["under_delivered_q20"],
                             sweep["under_delivered_q80"], alpha=0.3,
                             color="tab:red")
        axes[0].plot(sweep["radius"], sweep["under_delivered_mean"],
                     color="tab:red", marker="o")
        bench = df[df["mode"] == "no-regulation"]
        if len(bench):
            axes[0].axhline(bench["under_delivered_mean"].iloc[0],
                            color="gray", ls="--", label="no reserve policy")
            axes[0].legend()
        axes[0].set_xscale("log")
        axes[0].set_xlabel("ambiguity radius")
        axes[0].set_ylabel("under-delivered reserve [MWh]")
        axes[1].plot(sweep["radius"], sweep["joint_rate"], marker="o")
        axes[1].set_xscale("log")
        axes[1].set_xlabel("ambiguity radius")
        axes[1].set_ylabel("empirical joint violation rate")
        fig.tight_layout()
        path = out / "radius_sweep.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    if df["players"].nunique() > 1:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        for mode, grp in df.groupby("mode"):
            agg = grp.groupby("players").mean(numeric_only=True)
            axes[0].plot(agg.index, agg["joint_rate"], marker="o", label=mode)
            axes[1].plot(agg.index, agg["mg_cost_mean"], marker="o", label=mode)
            axes[2].plot(agg.index, agg["iso_cost"], marker="o", label=mode)
        for ax, label in zip(axes, ("joint violation rate",
                                    "average microgrid cost [$]",
                                    "dispatch-level cost [$]")):
            ax.set_xlabel("players")
            ax.set_ylabel(label)
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / "players.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(df["scenario"], df["n_model_solves"])
    ax.set_ylabel("model solves")
    ax.tick_params(axis="x", rotation=60, labelsize=6)
    fig.tight_layout()
    path = out / "solve_counts.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    written.append(path)
    return written
