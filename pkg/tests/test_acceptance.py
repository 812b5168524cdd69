"""Acceptance gate: one test per exit criterion, tolerances pinned inline.

Every criterion runs on the bundled desk fixture (6 buses, up to 6 players,
50 training samples, 100 held-out tests, 4 half-hour periods) and prints one
pass/fail line.  The full-scale 30-bus recipe (README) is intentionally not
gated here.
"""

import time

import numpy as np
import pytest

from drmarket.bayes_tuner import ObservationLog
from drmarket.data_io import generate_skewed_samples
from drmarket.dro_blocks import emit_dro_penalty
from drmarket.experiments import (grid_search, out_of_sample, radius_sweep,
                                  run_scenario, split_samples, write_experiment)
from drmarket.market_mpec import (assemble_game, bilevel_consistency,
                                  complementarity_report, extract_equilibrium,
                                  solve_market)
from drmarket.program_ir import ConicProgram
from drmarket.solver import (SolverSettings, branch_and_bound,
                             enumerate_oracle, solve_convex)
from drmarket.vi_validator import assemble_jacobian, solve_potential

from conftest import make_two_bus_case, make_two_bus_two_mg_case
from test_solver import _toy_mpec


@pytest.fixture(scope="module")
def desk(desk_case, desk_samples, desk_config):
    train, oos = split_samples(desk_samples, desk_config)
    return desk_case, desk_samples, train, oos, desk_config


@pytest.fixture(scope="module")
def tuned_runs(desk):
    """Tuned-mode scenario runs per player count and seed (criteria 5 and 7)."""
    case, samples, _, _, config = desk
    runs = {}
    for count in (2, 4, 6):
        sub = case.with_microgrid_hosts([f"m{j}" for j in range(1, count + 1)])
        runs[count] = [run_scenario(sub, samples,
                                    config.replace(mode="bayesian", seed=seed))
                       for seed in range(5)]
    return runs


def _report(criterion, passed, detail):
    print(f"\n[criterion {criterion}] {'PASS' if passed else 'FAIL'} — {detail}")
    assert passed, detail


def test_criterion_1_saa_limit(desk):
    """Zero-radius penalty equals the empirical mean for 20 random bids."""
    _, _, train, _, _ = desk
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        bids = rng.uniform(0.0, 2.0, size=train.n_periods)
        voll = rng.uniform(0.5, 2.0)
        program = ConicProgram()
        handles = [program.add_var(f"r[{t}]", lb=float(b), ub=float(b))
                   for t, b in enumerate(bids)]
        emit_dro_penalty(program, train, handles, voll, 0.0, train.delta_t)
        sol = solve_convex(program)
        expected = voll * train.delta_t * float(np.mean(train.samples @ bids))
        rel = abs(sol.objective - expected) / max(abs(expected), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    _report(1, worst <= 1e-6 and elapsed < 10.0,
            f"worst relative error {worst:.2e} (tol 1e-6), {elapsed:.1f}s (<10s)")


def test_criterion_2_bilevel_consistency(desk):
    """Frozen-price re-solves reproduce every player's bids and cost."""
    case, samples, train, _, config = desk
    t0 = time.perf_counter()
    worst_bid, worst_cost = 0.0, 0.0
    for count, mode in ((4, "joint-bound"), (6, "joint-bound"),
                        (6, "bonferroni-bound")):
        sub = case.with_microgrid_hosts([f"m{j}" for j in range(1, count + 1)])
        program = assemble_game(sub, train, config.replace(mode=mode),
                              np.full(count, config.joint_rate
                                      / (count if mode == "bonferroni-bound"
                                         else 1)))
        result, eq = solve_market(program)
        comp = complementarity_report(program, result.solution.x, 1e-6)
        assert comp["ok"], comp
        for rep in bilevel_consistency(eq, sub, train, config):
            worst_bid = max(worst_bid, rep["bid_deviation_mw"])
            worst_cost = max(worst_cost, rep["cost_deviation_rel"])
    elapsed = time.perf_counter() - t0
    _report(2, worst_bid <= 1e-4 and worst_cost <= 1e-5 and elapsed < 120.0,
            f"worst bid dev {worst_bid:.2e} MW (tol 1e-4), cost dev "
            f"{worst_cost:.2e} (tol 1e-5), {elapsed:.0f}s (<120s)")


def test_criterion_3_oracle_equivalence():
    """Tree search equals exhaustive enumeration on 50 seeded toys."""
    t0 = time.perf_counter()
    settings = SolverSettings(gap_tol=1e-7)
    worst = 0.0
    for seed in range(50):
        n_pairs = 4 + seed % 5 if seed < 48 else 12   # up to 12 binaries
        program = _toy_mpec(seed, n_pairs=min(n_pairs, 12), n_x=3)
        bnb = branch_and_bound(program, settings)
        oracle = enumerate_oracle(program, settings)
        assert bnb.status == "optimal", seed
        rel = abs(bnb.incumbent_objective - oracle.incumbent_objective) / \
            max(1.0, abs(oracle.incumbent_objective))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    _report(3, worst <= 1e-6 and elapsed < 300.0,
            f"worst relative objective gap {worst:.2e} (tol 1e-6) over 50 "
            f"toys, {elapsed:.0f}s (<300s)")


def test_criterion_4_potential_equivalence(desk):
    """Potential-problem quantities match every game equilibrium; the game
    map is exactly symmetric and matches finite differences."""
    case, samples, train, _, config = desk
    t0 = time.perf_counter()
    worst_q = 0.0
    fixtures = [(make_two_bus_case(),
                 generate_skewed_samples(3, 5, 2), 1),
                (make_two_bus_two_mg_case(),
                 generate_skewed_samples(3, 5, 2), 2)]
    for count in (2, 4, 6):
        fixtures.append((case.with_microgrid_hosts(
            [f"m{j}" for j in range(1, count + 1)]), train, count))
    for sub, mat, count in fixtures:
        cfg = config if mat is train else config.replace(n_samples=5)
        eps = np.full(count, 0.2)
        program = assemble_game(sub, mat, cfg.replace(mode="joint-bound"), eps)
        result, eq = solve_market(program)
        _, info = solve_potential(sub, mat, cfg.replace(mode="joint-bound"), eps)
        q = info["quantities"]
        worst_q = max(
            worst_q,
            float(np.max(np.abs(q["gen_energy"] - eq.gen_energy))),
            float(np.max(np.abs(q["gen_reserve"] - eq.gen_reserve))),
            float(np.max(np.abs(q["flex_output"] - eq.flex_output))),
            float(np.max(np.abs(q["grid_import"] - eq.grid_import))),
            float(np.max(np.abs(q["reserve_bid"] - eq.reserve_bid))))

    worst_fd = 0.0
    game = assemble_jacobian(case, config, delta_t=train.delta_t)
    sym = float(np.max(np.abs(game.jacobian - game.jacobian.T)))
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=len(game.labels))
    for j in rng.choice(len(game.labels), size=12, replace=False):
        e = np.zeros_like(x0)
        e[j] = 1e-6
        column = (game.evaluate(x0 + e) - game.evaluate(x0 - e)) / 2e-6
        worst_fd = max(worst_fd, float(np.max(np.abs(column -
                                                     game.jacobian[:, j]))))
    elapsed = time.perf_counter() - t0
    _report(4, worst_q <= 1e-4 and sym == 0.0 and worst_fd <= 1e-5
            and elapsed < 120.0,
            f"worst quantity dev {worst_q:.2e} MW (tol 1e-4), asymmetry {sym}, "
            f"finite-diff dev {worst_fd:.2e} (tol 1e-5), {elapsed:.0f}s (<120s)")


def test_criterion_5_joint_rate_regulation(tuned_runs):
    """Tuned mode hits the 0.2 +- 0.05 joint-rate band on >= 4 of 5 seeds."""
    t0 = time.perf_counter()
    runs = tuned_runs[6]
    hits = sum(abs(r.oos.joint_rate - 0.2) <= 0.05 for r in runs)
    iters = [len(r.observation_log) for r in runs]
    within_cap = all(n <= 4 + 20 for n in iters)
    elapsed = time.perf_counter() - t0
    _report(5, hits >= 4 and within_cap and elapsed < 1800.0,
            f"{hits}/5 seeds within 0.05 of the 0.2 target "
            f"(evaluations per seed: {iters}), {elapsed:.0f}s (<1800s)")


def test_criterion_6_bound_ordering(desk):
    """Equal-split bound stays under the target band; the joint bound with
    >= 4 players stays above it; bids order accordingly."""
    case, samples, _, _, config = desk
    t0 = time.perf_counter()
    joint = run_scenario(case, samples, config.replace(mode="joint-bound"))
    bonf = run_scenario(case, samples, config.replace(mode="bonferroni-bound"))
    n_oos = config.n_oos
    upper = 0.2 + 2.0 * np.sqrt(0.2 * 0.8 / n_oos)
    ok = (bonf.oos.joint_rate <= upper
          and joint.players >= 4
          and joint.oos.joint_rate >= 0.2 - 0.05
          and joint.equilibrium.reserve_bid.sum()
          >= bonf.equilibrium.reserve_bid.sum() - 1e-7)
    elapsed = time.perf_counter() - t0
    _report(6, ok and elapsed < 600.0,
            f"equal-split rate {bonf.oos.joint_rate:.3f} (<= {upper:.3f}), "
            f"joint rate {joint.oos.joint_rate:.3f} (>= 0.15) at "
            f"{joint.players} players, bids {joint.equilibrium.reserve_bid.sum():.2f}"
            f" >= {bonf.equilibrium.reserve_bid.sum():.2f}, {elapsed:.0f}s (<600s)")


def test_criterion_7_monotone_tuned_rates(tuned_runs, desk_config):
    """Seed-averaged tuned budgets do not increase with the player count.

    Empirical rates quantize to one violation out of n_oos tests, so the
    tuned argmin carries one-quantum seed noise; the trend is asserted within
    that allowance (0.01, about half a search-grid spacing).
    """
    t0 = time.perf_counter()
    averages = {}
    for count, runs in tuned_runs.items():
        averages[count] = float(np.mean([np.mean(r.eps_ind) for r in runs]))
    ordered = [averages[c] for c in (2, 4, 6)]
    noise = 0.01
    monotone = all(b <= a + noise for a, b in zip(ordered, ordered[1:]))
    elapsed = time.perf_counter() - t0
    _report(7, monotone and elapsed < 600.0,
            "seed-averaged tuned budgets " +
            " -> ".join(f"{v:.4f}" for v in ordered) +
            f" over 2/4/6 players (non-increasing within {noise} seed noise), "
            f"{elapsed:.0f}s")


def test_criterion_8_radius_sweep_shape(desk):
    """Joint rate falls with the ambiguity radius; the unregulated benchmark
    dominates the under-delivered reserve."""
    case, samples, _, _, config = desk
    t0 = time.perf_counter()
    radii = [1e-4, 1e-3, 1e-2, 1e-1]
    results = radius_sweep(case, samples, config.replace(mode="joint-bound"),
                           radii)
    rates = [r.oos.joint_rate for r in results[:-1]]
    monotone = all(b <= a + 0.05 for a, b in zip(rates, rates[1:]))
    bench = results[-1].oos.under_delivered.sum(axis=1).mean()
    dominated = all(bench >= r.oos.under_delivered.sum(axis=1).mean() - 1e-9
                    for r in results[:-1])
    elapsed = time.perf_counter() - t0
    _report(8, monotone and dominated and elapsed < 900.0,
            f"rates {['%.3f' % r for r in rates]} over radii {radii}, "
            f"benchmark under-delivery {bench:.2f} MWh dominates, "
            f"{elapsed:.0f}s (<900s)")


def test_criterion_9_grid_search_parity(desk, tuned_runs):
    """Grid search lands within one spacing of the tuned optimum and spends
    at least as many model solves once early stopping triggers."""
    case, samples, _, _, config = desk
    t0 = time.perf_counter()
    grid = grid_search(case, samples, config)
    n_mg = len(case.microgrids)
    spacing = (n_mg - 1) * config.joint_rate / (n_mg * (config.n_grid - 1))
    bayes = tuned_runs[6]
    gaps = [abs(float(np.mean(r.eps_ind)) - float(np.mean(grid.eps_ind)))
            for r in bayes]
    parity = min(gaps) <= spacing + 1e-9
    early_stopped = [r for r in bayes
                     if len(r.observation_log) < config.n_init + config.n_iterations]
    fewer = all(r.n_model_solves < config.n_grid for r in early_stopped)
    elapsed = time.perf_counter() - t0
    _report(9, parity and fewer and len(early_stopped) > 0 and elapsed < 600.0,
            f"grid optimum {float(np.mean(grid.eps_ind)):.4f} vs tuned "
            f"{[f'{float(np.mean(r.eps_ind)):.4f}' for r in bayes]}, spacing "
            f"{spacing:.5f}, tuned solves "
            f"{[r.n_model_solves for r in bayes]} < grid {grid.n_model_solves}, "
            f"{elapsed:.0f}s (<600s)")


def test_criterion_10_determinism(desk, tmp_path):
    """Same-seed runs write byte-identical result tables."""
    case, samples, _, _, config = desk
    t0 = time.perf_counter()
    sub = case.with_microgrid_hosts(["m1", "m2", "m3", "m4"])
    cfg = config.replace(mode="bayesian", seed=7, n_iterations=4)
    paths = []
    for tag in ("a", "b"):
        result = run_scenario(sub, samples, cfg)
        out = tmp_path / tag
        write_experiment(result, out, timings=False)
        paths.append(out)
    files_a = sorted(p.name for p in paths[0].iterdir())
    files_b = sorted(p.name for p in paths[1].iterdir())
    same = files_a == files_b and all(
        (paths[0] / n).read_bytes() == (paths[1] / n).read_bytes()
        for n in files_a)
    elapsed = time.perf_counter() - t0
    _report(10, same, f"{len(files_a)} artifact files byte-identical across "
            f"two seeded runs, {elapsed:.0f}s")
