"""Convex engine contract, branch-and-bound, exhaustive oracle agreement."""

import numpy as np
import pytest

from drmarket.data_io import (Branch, Bus, ErrorSampleMatrix, Generator,
                              Microgrid, NetworkCase, ScenarioConfig,
                              generate_skewed_samples)
from drmarket.market_mpec import assemble_game, extract_equilibrium, solve_market
from drmarket.program_ir import BINARY, ConicProgram
from drmarket.solver import (ENUMERATION_CAP, SolverSettings, branch_and_bound,
                             enumerate_oracle, solve_convex)

from conftest import make_two_bus_case, make_two_bus_two_mg_case


def test_one_dimensional_kkt():
    program = ConicProgram()
    x = program.add_var("x")
    program.add_linear("bound", {x: 1.0}, ">=", 3.0)
    program.add_obj_quad(x, 1.0)
    sol = solve_convex(program)
    assert sol.status == "optimal"
    assert sol.x[x] == pytest.approx(3.0, abs=1e-7)
    assert sol.objective == pytest.approx(9.0, abs=1e-6)
    assert sol.duals["bound"] == pytest.approx(6.0, abs=1e-6)


def test_symmetric_cone_touch():
    program = ConicProgram()
    x = program.add_var("x")
    y = program.add_var("y")
    program.add_soc("ball", ({}, 1.0), [({x: 1.0}, 0.0), ({y: 1.0}, 0.0)])
    program.add_obj_lin(x, -1.0)
    program.add_obj_lin(y, -1.0)
    sol = solve_convex(program)
    root = np.sqrt(2.0) / 2.0
    assert sol.x[x] == pytest.approx(root, abs=1e-6)
    assert sol.x[y] == pytest.approx(root, abs=1e-6)


def test_infeasible_and_unbounded_statuses():
    program = ConicProgram()
    x = program.add_var("x")
    program.add_linear("lo", {x: 1.0}, ">=", 1.0)
    program.add_linear("hi", {x: 1.0}, "<=", 0.0)
    assert solve_convex(program).status == "infeasible"

    program = ConicProgram()
    x = program.add_var("x", ub=0.0)
    program.add_obj_lin(x, 1.0)
    assert solve_convex(program).status == "unbounded"


def test_solve_convex_rejects_binaries():
    program = ConicProgram()
    program.add_var("u", kind=BINARY)
    with pytest.raises(ValueError, match="binary"):
        solve_convex(program)


def test_standalone_bid_matches_grid_oracle():
    """Dense search over (flex output, bid) reproduces the convex optimum."""
    from drmarket.market_mpec import build_bidding_standalone

    case = make_two_bus_case(n_periods=1)
    samples = ErrorSampleMatrix(np.array([[0.8], [0.2], [0.5], [-0.1]]),
                                ["t0"], 0.5)
    price_e, price_r, radius = 1.2, 9.0, 0.03
    program, h = build_bidding_standalone(case, samples, 0, price_e, price_r, radius)
    sol = solve_convex(program)
    assert sol.status == "optimal"

    dt, voll, gamma = 0.5, 1.0, 0.5
    zeta = samples.samples[:, 0]
    best = np.inf
    for ps in np.arange(-3.0, 3.0 + 1e-12, 1e-3):
        pex = 2.0 - ps
        r_hi = gamma * ps
        if r_hi < 0:
            continue
        for r in np.arange(0.0, r_hi + 1e-12, 1e-3):
            losses = voll * dt * zeta * r
            penalty = losses.mean() + radius * np.abs(losses).max()
            cost = (1.0 * (dt * ps) ** 2 + dt * 5.0 * r + dt * price_e * pex
                    - dt * price_r * r + penalty)
            best = min(best, cost)
    assert sol.objective == pytest.approx(best, abs=1e-4)


def test_bnb_without_binaries_equals_convex():
    program = ConicProgram()
    x = program.add_var("x")
    program.add_linear("bound", {x: 1.0}, ">=", 3.0)
    program.add_obj_quad(x, 1.0)
    direct = solve_convex(program)
    result = branch_and_bound(program)
    assert result.status == "optimal"
    assert result.node_count == 1
    assert result.gap == 0.0
    assert result.incumbent_objective == pytest.approx(direct.objective)


def _toy_mpec(seed, n_pairs=4, n_x=3):
    """Random bounded QP with gated complementarity pairs."""
    from drmarket.market_mpec import apply_big_m

    rng = np.random.default_rng(seed)
    program = ConicProgram(f"toy{seed}")
    xs = [program.add_var(f"x{j}", lb=0.0, ub=3.0) for j in range(n_x)]
    ys = [program.add_var(f"y{j}", lb=0.0, ub=3.0) for j in range(n_pairs)]
    pairs = []
    for j in range(n_pairs):
        coeffs = {xs[k]: float(np.round(rng.uniform(-1.0, 1.0), 3))
                  for k in range(n_x)}
        rhs = float(np.round(rng.uniform(0.5, 2.5), 3))
        slack = {k: -c for k, c in coeffs.items()}
        program.add_linear(f"s{j}", coeffs, "<=", rhs)
        pairs.append(program.add_pair(f"pair{j}", (slack, rhs),
                                      ({ys[j]: 1.0}, 0.0)))
    for j, x in enumerate(xs):
        program.add_obj_quad(x, float(np.round(rng.uniform(0.05, 0.5), 3)))
        program.add_obj_lin(x, float(np.round(rng.uniform(-2.0, 0.5), 3)))
    for y in ys:
        program.add_obj_lin(y, float(np.round(rng.uniform(-1.5, 0.5), 3)))
    apply_big_m(program, pairs, 25.0)
    return program


def test_four_pair_toy_matches_enumeration():
    program = _toy_mpec(11, n_pairs=4)
    settings = SolverSettings(gap_tol=1e-7)
    bnb = branch_and_bound(program, settings)
    oracle = enumerate_oracle(program, settings)
    assert oracle.node_count == 2 ** 4
    assert bnb.status == "optimal"
    assert bnb.incumbent_objective == pytest.approx(
        oracle.incumbent_objective, abs=1e-6)


def test_randomized_bnb_oracle_agreement():
    settings = SolverSettings(gap_tol=1e-7)
    for seed in range(10):
        program = _toy_mpec(seed, n_pairs=6, n_x=3)
        bnb = branch_and_bound(program, settings)
        oracle = enumerate_oracle(program, settings)
        assert bnb.status == "optimal", seed
        rel = abs(bnb.incumbent_objective - oracle.incumbent_objective) / \
            max(1.0, abs(oracle.incumbent_objective))
        assert rel <= 1e-6, (seed, bnb.incumbent_objective,
                             oracle.incumbent_objective)


def test_enumeration_cap_enforced():
    program = ConicProgram()
    for j in range(ENUMERATION_CAP + 1):
        program.add_var(f"u{j}", kind=BINARY)
    with pytest.raises(ValueError, match="cap"):
        enumerate_oracle(program)


def test_enumeration_all_infeasible():
    program = ConicProgram()
    x = program.add_var("x")
    program.add_var("u", kind=BINARY)
    program.add_linear("lo", {x: 1.0}, ">=", 1.0)
    program.add_linear("hi", {x: 1.0}, "<=", 0.0)
    result = enumerate_oracle(program)
    assert result.status == "infeasible"
    assert result.node_count == 2


def test_market_game_matches_potential_problem(tiny_samples):
    """Two players, five samples, two periods: the game solve agrees with the
    potential-problem quantities to 1e-4 MW."""
    from drmarket.vi_validator import solve_potential

    case = make_two_bus_two_mg_case()
    cfg = ScenarioConfig(n_samples=5, radius=0.01, node_limit=300,
                         time_limit=120)
    program = assemble_game(case, tiny_samples, cfg, 0.2)
    result, eq = solve_market(program)
    assert result.status == "optimal"
    _, info = solve_potential(case, tiny_samples, cfg, 0.2)
    q = info["quantities"]
    for mine, theirs in ((eq.gen_energy, q["gen_energy"]),
                         (eq.gen_reserve, q["gen_reserve"]),
                         (eq.flex_output, q["flex_output"]),
                         (eq.grid_import, q["grid_import"]),
                         (eq.reserve_bid, q["reserve_bid"])):
        assert np.max(np.abs(mine - theirs)) <= 1e-4


def test_bnb_deterministic():
    program = _toy_mpec(5, n_pairs=5)
    settings = SolverSettings()
    a = branch_and_bound(program, settings)
    b = branch_and_bound(program, settings)
    assert a.node_count == b.node_count
    assert a.incumbent_objective == b.incumbent_objective
    assert np.array_equal(a.solution.x, b.solution.x)


def test_bound_never_exceeds_incumbent():
    for seed in (2, 7):
        result = branch_and_bound(_toy_mpec(seed, n_pairs=5))
        assert result.best_bound <= result.incumbent_objective + 1e-6
        assert result.gap >= 0.0


def test_limit_status_reported_honestly():
    program = _toy_mpec(3, n_pairs=6)
    settings = SolverSettings(node_limit=2, time_limit=60.0)
    result = branch_and_bound(program, settings)
    assert result.status in ("optimal", "node-limit")
    if result.status == "node-limit":
        assert result.gap > 0.0 or result.incumbent_objective == np.inf
