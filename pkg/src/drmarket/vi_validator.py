"""Game-map diagnostics: Jacobian symmetry and the equivalent convex problem.

The market game's stacked-gradient map is affine, so its Jacobian is a
constant matrix whose symmetry certifies integrability; the associated
potential problem is a single convex program over the joint primal feasible
set whose minimizer reproduces the game's quantity equilibrium.  Price
variables carry no potential terms (payments cancel between the two sides),
so prices are recovered from the potential problem's balance duals and
reported informationally only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import ErrorSampleMatrix, NetworkCase, ScenarioConfig
from .market_mpec import build_iso_model, build_microgrid_model
from .program_ir import ConicProgram, SolutionPoint, validate
from .solver import SolverSettings, solve_convex


@dataclass
class GameMap:
    """Strategy layout with the affine game map F(x) = map_const + jacobian @ x."""

    labels: list[str]
    jacobian: np.ndarray
    map_const: np.ndarray

    def evaluate(self, x) -> np.ndarray:
        return self.map_const + self.jacobian @ np.asarray(x, dtype=float)


def assemble_jacobian(case: NetworkCase, config: ScenarioConfig,
                      delta_t: float = 0.5) -> GameMap:
    """Stacked players' gradients over [dispatch | prices+bids | private vars].

    The dispatch side owns its generation variables plus the prices and the
    market quantities it clears; each microgrid owns its flexible output and
    the shortfall-penalty auxiliaries.  All cost functions are quadratic or
    linear, so F is affine and the Jacobian is constant and symmetric.
    """
    n_t = case.n_periods
    dt = delta_t
    labels: list[str] = []
    diag: list[float] = []
    const: list[float] = []

    for k, g in enumerate(case.generators):
        for t in range(n_t):
            labels.append(f"gen{k}.energy[{t}]")
            diag.append(2.0 * g.cost_energy_quad * dt * dt)
            const.append(0.0)
        for t in range(n_t):
            labels.append(f"gen{k}.reserve[{t}]")
            diag.append(0.0)
            const.append(dt * g.cost_reserve)

    cross: list[tuple[int, int, float]] = []
    for i, mg in enumerate(case.microgrids):
        for t in range(n_t):
            labels.append(f"mg{i}.price_reserve[{t}]")
            diag.append(0.0)
            const.append(0.0)
            labels.append(f"mg{i}.reserve_bid[{t}]")
            diag.append(0.0)
            const.append(0.0)
            cross.append((len(labels) - 2, len(labels) - 1, dt))
        for t in range(n_t):
            labels.append(f"mg{i}.price_energy[{t}]")
            diag.append(0.0)
            const.append(0.0)
            labels.append(f"mg{i}.grid_import[{t}]")
            diag.append(0.0)
            const.append(0.0)
            cross.append((len(labels) - 2, len(labels) - 1, -dt))
        for t in range(n_t):
            labels.append(f"mg{i}.flex_output[{t}]")
            diag.append(2.0 * mg.cost_energy_quad * dt * dt)
            const.append(0.0)
        labels.append(f"mg{i}.pen_anchor")
        diag.append(0.0)
        const.append(1.0)
        labels.append(f"mg{i}.pen_loss")
        diag.append(0.0)
        const.append(config.radius)
        for s in range(config.n_samples):
            labels.append(f"mg{i}.pen_excess[{s}]")
            diag.append(0.0)
            const.append(1.0 / config.n_samples)

    n = len(labels)
    jac = np.diag(diag)
    for r, c, w in cross:
        jac[r, c] += w
        jac[c, r] += w
    return GameMap(labels=labels, jacobian=jac, map_const=np.array(const))


def build_potential(case: NetworkCase, samples: ErrorSampleMatrix,
                config: ScenarioConfig, eps_ind) -> ConicProgram:
    """Convex potential problem over the joint primal feasible set."""
    program = ConicProgram("market-potential")
    eps_vec = np.broadcast_to(np.asarray(eps_ind, dtype=float),
                              (len(case.microgrids),))
    regulate = config.mode != "no-regulation"
    iso = build_iso_model(program, case, samples, eps_vec, config.radius,
                          reserve_in_flow=config.reserve_in_flow,
                          regulate=regulate,
                          reserve_requirement_factor=config.reserve_requirement_factor,
                          shortfall_cap=config.reserve_shortfall_cap,
                          with_prices=False)
    mgs = [build_microgrid_model(program, case, samples, i, config.radius, iso)
           for i in range(len(case.microgrids))]

    if config.potential_form == "half-linear":
        # halve the linear reserve costs and drop the penalty anchor term
        dt = samples.delta_t
        for k, g in enumerate(case.generators):
            for t in range(case.n_periods):
                program.add_obj_lin(int(iso.rg[k, t]), -0.5 * dt * g.cost_reserve)
        for h in mgs:
            for t in range(case.n_periods):
                program.add_obj_lin(int(h.rup[t]), -0.5 * dt * h.cost_reserve)
            program.add_obj_lin(h.penalty.anchor, -1.0)

    program.market_potential = {"iso": iso, "microgrids": mgs, "case": case,
                            "config": config}
    return program


def solve_potential(case: NetworkCase, samples: ErrorSampleMatrix,
                config: ScenarioConfig, eps_ind,
                settings: SolverSettings | None = None
                ) -> tuple[SolutionPoint, dict]:
    """Solve the potential problem; returns the point and extracted quantities."""
    settings = settings or SolverSettings(feas_tol=config.feas_tol,
                                          gap_tol=config.gap_tol)
    program = build_potential(case, samples, config, eps_ind)
    diags = validate(program)
    if diags:
        raise ValueError("potential problem invalid: " + "; ".join(diags[:5]))
    sol = solve_convex(program, settings)
    if sol.status not in ("optimal", "tolerance-limit"):
        families = sorted({r.split("[")[0] for r in
                           (c.name for c in program.linear)})
        raise RuntimeError(f"potential problem {sol.status}; "
                           f"constraint families: {families[:10]}")
    meta = program.market_potential
    iso, mgs = meta["iso"], meta["microgrids"]
    x = sol.x
    dt = samples.delta_t
    quantities = {
        "gen_energy": x[iso.pg],
        "gen_reserve": x[iso.rg],
        "flex_output": np.array([x[h.ps] for h in mgs]) if mgs else np.zeros((0, 0)),
        "grid_import": x[iso.pex] if mgs else np.zeros((0, 0)),
        "reserve_bid": x[iso.rup] if mgs else np.zeros((0, 0)),
    }
    # informational price recovery from the balance-row duals
    prices = {}
    for h in mgs:
        mu = np.array([sol.duals[r] for r in h.balance_rows])
        prices[h.tag] = mu / dt
    return sol, {"quantities": quantities, "recovered_prices": prices,
                 "program": program}


def check_uniqueness(case: NetworkCase, samples: ErrorSampleMatrix,
                     config: ScenarioConfig, eps_ind,
                     n_starts: int = 3, tol_mw: float = 1e-4) -> dict:
    """Solver-start invariance of the potential optimum vs the game solve.

    Perturbed starts are realized as seeded variable permutations of the same
    program (equivalent reformulations that change the interior-point
    trajectory but not the problem), plus one full game solve.
    """
    from .market_mpec import assemble_game, solve_market

    points = []
    base_sol, base_info = solve_potential(case, samples, config, eps_ind)
    points.append(_stack_quantities(base_info["quantities"]))
    rng = np.random.default_rng(config.seed)
    for _ in range(max(0, n_starts - 1)):
        program = build_potential(case, samples, config, eps_ind)
        perm = rng.permutation(program.n_vars)
        sol = solve_convex(_permuted(program, perm))
        meta = program.market_potential
        iso, mgs = meta["iso"], meta["microgrids"]
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        x = sol.x[inv]
        points.append(np.concatenate([
            x[iso.pg].ravel(), x[iso.rg].ravel(),
            np.concatenate([x[h.ps] for h in mgs]) if mgs else np.zeros(0),
            x[iso.pex].ravel() if mgs else np.zeros(0),
            x[iso.rup].ravel() if mgs else np.zeros(0)]))

    game_program = assemble_game(case, samples, config, eps_ind)
    _, eq = solve_market(game_program)
    points.append(np.concatenate([
        eq.gen_energy.ravel(), eq.gen_reserve.ravel(), eq.flex_output.ravel(),
        eq.grid_import.ravel(), eq.reserve_bid.ravel()]))

    dev = max(float(np.max(np.abs(p - points[0]))) for p in points[1:])
    strictly_convex = all(g.cost_energy_quad > 0 for g in case.generators) and \
        all(m.cost_energy_quad > 0 for m in case.microgrids)
    report = {"max_deviation_mw": dev, "passed": dev <= tol_mw,
              "strictly_convex": strictly_convex, "n_points": len(points)}
    if not strictly_convex:
        report["note"] = ("quadratic cost degenerate to zero: uniqueness of "
                          "quantities is not guaranteed and a FAIL here flags "
                          "loss of strict convexity, not an implementation error")
    return report


def _stack_quantities(q: dict) -> np.ndarray:
    return np.concatenate([q["gen_energy"].ravel(), q["gen_reserve"].ravel(),
                           q["flex_output"].ravel(), q["grid_import"].ravel(),
                           q["reserve_bid"].ravel()])


def _permuted(program: ConicProgram, perm) -> ConicProgram:
    """Reindex variables; the solved problem is identical up to ordering."""
    out = ConicProgram(program.name + "-perm")
    inv = np.empty(len(perm), dtype=int)
    inv[perm] = np.arange(len(perm))
    for new_pos in range(program.n_vars):
        v = program.variables[int(perm[new_pos])]
        out.add_var(v.name, v.kind, v.lb, v.ub)

    def remap(coeffs):
        return {int(inv[j]): c for j, c in coeffs.items()}

    for con in program.linear:
        out.add_linear(con.name, remap(con.coeffs), con.sense, con.rhs)
    for soc in program.socs:
        out.add_soc(soc.name, (remap(soc.bound[0]), soc.bound[1]),
                    [(remap(c), k) for c, k in soc.vector])
    out.obj_quad = remap(program.obj_quad)
    out.obj_lin = remap(program.obj_lin)
    out.obj_const = program.obj_const
    return out
