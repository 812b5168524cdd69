"""Conic solving: convex engine, branch-and-bound and an exhaustive oracle.

The convex engine lowers a ConicProgram to standard conic form and hands it
to Clarabel; KKT residuals are recomputed independently afterwards and the
status is downgraded to "tolerance-limit" when they miss the contract.
Branch-and-bound runs best-bound-first over the big-M binaries with
most-fractional branching and a complementarity-pattern heuristic for
incumbents.  The enumeration oracle exhausts all binary fixings and is the
ground truth for small instances.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .program_ir import (BINARY, CompiledProgram, ConicProgram, SolutionPoint,
                         compile_standard_form, relax_binaries, validate)

_INF = float("inf")


@dataclass
class SolverSettings:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-6
    integer_tol: float = 1e-5
    node_limit: int = 2000
    time_limit: float = 600.0
    branching: str = "most-fractional"
    verbose: bool = False

    def __post_init__(self):
        if min(self.feas_tol, self.gap_tol, self.integer_tol) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class BnbResult:
    solution: SolutionPoint
    node_count: int
    best_bound: float
    incumbent_objective: float
    gap: float
    status: str = "optimal"
    log: list = field(default_factory=list)


# ---- convex engine -----------------------------------------------------------


def _clarabel_settings(settings: SolverSettings):
    import clarabel

    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_feas = min(1e-8, settings.feas_tol * 1e-1)
    s.tol_gap_abs = min(1e-8, settings.gap_tol * 1e-1)
    s.tol_gap_rel = min(1e-8, settings.gap_tol * 1e-1)
    s.max_iter = 200
    return s


def _solve_compiled(comp: CompiledProgram, settings: SolverSettings,
                    b_override: np.ndarray | None = None) -> SolutionPoint:
    import clarabel

    b = comp.b if b_override is None else b_override
    solver = clarabel.DefaultSolver(comp.P, comp.q, comp.A, b, comp.cones,
                                    _clarabel_settings(settings))
    sol = solver.solve()
    name = str(sol.status)

    if name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SolutionPoint(status="infeasible", iterations=sol.iterations)
    if name in ("DualInfeasible", "AlmostDualInfeasible"):
        return SolutionPoint(status="unbounded", iterations=sol.iterations)

    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    obj = float(sol.obj_val) + comp.obj_const

    # independent residual check: primal feasibility and duality gap
    resid = comp.A @ x - b
    prim = 0.0
    if comp.n_eq:
        prim = float(np.max(np.abs(resid[: comp.n_eq])))
    if comp.n_ineq:
        prim = max(prim, float(np.max(resid[comp.n_eq: comp.n_eq + comp.n_ineq])))
    for _, sl in comp.soc_slices:
        s = b[sl] - comp.A[sl] @ x
        prim = max(prim, float(np.linalg.norm(s[1:]) - s[0]))
    gap = abs(float(sol.obj_val) - float(sol.obj_val_dual)) / max(1.0, abs(obj))
    stat = float(np.max(np.abs(comp.P @ x + comp.q + comp.A.T @ z)))

    status = "optimal"
    if name not in ("Solved",) or prim > settings.feas_tol or gap > max(
            settings.gap_tol, 1e-6):
        status = "tolerance-limit"

    duals = {nm: float(-z[r]) for nm, r in comp.eq_rows.items()}
    duals.update({nm: float(z[r]) for nm, r in comp.ineq_rows.items()})
    soc_duals = {nm: z[sl].copy() for nm, sl in comp.soc_slices}
    bound_duals = {}
    for j, (lo, hi) in comp.bound_rows.items():
        bound_duals[j] = (float(z[lo]) if lo is not None else 0.0,
                          float(z[hi]) if hi is not None else 0.0)
    return SolutionPoint(status=status, objective=obj, x=x, duals=duals,
                         soc_duals=soc_duals, bound_duals=bound_duals,
                         residuals={"primal": prim, "gap": gap, "stationarity": stat},
                         iterations=sol.iterations)


def solve_convex(program: ConicProgram, settings: SolverSettings | None = None
                 ) -> SolutionPoint:
    """Solve a continuous conic program; binaries must be absent or fixed."""
    settings = settings or SolverSettings()
    diags = validate(program)
    if diags:
        raise ValueError("invalid program: " + "; ".join(diags[:5]))
    if program.binary_indices():
        raise ValueError("program still contains binary variables; "
                         "relax or fix them first")
    return _solve_compiled(compile_standard_form(program), settings)


# ---- branch and bound -----------------------------------------------------


def _fractionality(x, binaries, integer_tol):
    """Most fractional binary, ties broken by lowest index; None if integral."""
    best, best_frac = None, integer_tol
    for j in binaries:
        frac = abs(x[j] - round(x[j]))
        if frac > best_frac + 1e-12:
            best, best_frac = j, frac
    return best


def _pattern_from_point(program: ConicProgram, x, active_tol: float = 1e-7,
                        slack_tol: float = 1e-4) -> tuple[dict[int, int], list[int]]:
    """Classify each pair's gate from the primal active set.

    Slack primal side keeps its freedom (multiplier zeroed); an active primal
    side is bound and its multiplier left free, so the convex engine can
    return strictly supporting duals.  Multiplier values are ignored: in a
    relaxation they are unconstrained and carry no information.  Gates whose
    primal slack falls between the two tolerances are reported as ambiguous
    rather than guessed.
    """
    fixing = {}
    ambiguous = []
    for p in program.pairs:
        if p.gate is None:
            continue
        a = program.eval_affine(p.side_a, x)
        if a > slack_tol:
            fixing[p.gate] = 1
        elif a < active_tol:
            fixing[p.gate] = 0
        else:
            ambiguous.append(p.gate)
    return fixing, ambiguous


def _pair_of(program: ConicProgram, gate: int):
    for p in program.pairs:
        if p.gate == gate:
            return p
    raise KeyError(gate)


def _solve_node(comp, relaxed_b, fixings, binaries, bounds_of, settings):
    """Solve with binary bounds tightened per ``fixings`` (index -> 0/1)."""
    b = relaxed_b.copy()
    for j, val in fixings.items():
        lo, hi = bounds_of[j]
        b[lo] = -float(val)
        b[hi] = float(val)
    return _solve_compiled(comp, settings, b_override=b)


def branch_and_bound(program: ConicProgram, settings: SolverSettings | None = None
                     ) -> BnbResult:
    """Minimize over the binaries; deterministic for fixed settings."""
    settings = settings or SolverSettings()
    diags = validate(program)
    if diags:
        raise ValueError("invalid program: " + "; ".join(diags[:5]))

    binaries = program.binary_indices()
    if not binaries:
        sol = solve_convex(program, settings)
        obj = sol.objective if sol.objective is not None else _INF
        return BnbResult(solution=sol, node_count=1, best_bound=obj,
                         incumbent_objective=obj, gap=0.0,
                         status=sol.status if sol.status != "optimal" else "optimal")

    relaxed = relax_binaries(program, {})
    comp = compile_standard_form(relaxed)
    bounds_of = {j: comp.bound_rows[j] for j in binaries}
    relaxed_b = comp.b

    t0 = time.monotonic()
    incumbent: SolutionPoint | None = None
    inc_obj = _INF
    node_count = 0
    log = []
    heap = []
    counter = itertools.count()

    def rel_gap(bound):
        if inc_obj is _INF:
            return _INF
        return (inc_obj - bound) / max(1.0, abs(inc_obj))

    def try_incumbent(sol):
        nonlocal incumbent, inc_obj
        if sol.status in ("optimal",) and sol.objective < inc_obj - 1e-12:
            incumbent, inc_obj = sol, sol.objective

    def force_variants(ambiguous, x):
        """Candidate classifications for gates with ambiguous primal slack."""
        if not ambiguous:
            yield {}
            return
        slacks = {j: program.eval_affine(_pair_of(program, j).side_a, x)
                  for j in ambiguous}
        yield {j: 1 if s >= 3e-6 else 0 for j, s in slacks.items()}
        yield {j: 1 for j in ambiguous}
        yield {j: 0 for j in ambiguous}

    def full_solve(fixing, x):
        nonlocal node_count
        free = [j for j in binaries if j not in fixing]
        fixing = dict(fixing)
        fixing.update({j: int(round(x[j])) for j in free})
        sol = _solve_node(comp, relaxed_b, fixing, binaries, bounds_of, settings)
        node_count += 1
        return sol

    def heuristic(from_x):
        """Iterated complementarity-pattern fixing from a relaxation point.

        Gates with ambiguous primal slack stay relaxed for refining solves;
        once the pattern stabilizes the stragglers are forced, trying the
        slack-free side first, and the first surviving full fixing becomes
        the incumbent candidate with one decisive refinement pass.
        """
        nonlocal node_count
        x = from_x
        prev_key = None
        for _ in range(3):
            fixing, ambiguous = _pattern_from_point(program, x)
            key = (tuple(sorted(fixing.items())), tuple(ambiguous))
            if not ambiguous or key == prev_key:
                break
            prev_key = key
            partial = dict(fixing)
            partial.update({j: int(round(x[j])) for j in binaries
                            if j not in partial and j not in ambiguous})
            sol = _solve_node(comp, relaxed_b, partial, binaries, bounds_of,
                              settings)
            node_count += 1
            if sol.status != "optimal":
                break
            x = sol.x

        fixing, ambiguous = _pattern_from_point(program, x)
        for variant in force_variants(ambiguous, x):
            sol = full_solve({**fixing, **variant}, x)
            if sol.status != "optimal":
                continue
            try_incumbent(sol)
            fixing2, amb2 = _pattern_from_point(program, sol.x)
            for j in amb2:
                fixing2[j] = 1 if program.eval_affine(
                    _pair_of(program, j).side_a, sol.x) >= 3e-6 else 0
            sol2 = full_solve(fixing2, sol.x)
            if sol2.status == "optimal":
                try_incumbent(sol2)
            return

    root = _solve_node(comp, relaxed_b, {}, binaries, bounds_of, settings)
    node_count += 1
    if root.status == "infeasible":
        return BnbResult(solution=root, node_count=node_count, best_bound=_INF,
                         incumbent_objective=_INF, gap=0.0, status="infeasible")
    if root.status == "unbounded":
        return BnbResult(solution=root, node_count=node_count, best_bound=-_INF,
                         incumbent_objective=_INF, gap=_INF, status="unbounded")
    root_bound = root.objective if root.status == "optimal" else -_INF
    branch_j = _fractionality(root.x, binaries, settings.integer_tol)
    if branch_j is None and root.status == "optimal":
        try_incumbent(root)
        return BnbResult(solution=incumbent, node_count=node_count,
                         best_bound=root_bound, incumbent_objective=inc_obj,
                         gap=0.0, status="optimal")
    heuristic(root.x)
    heapq.heappush(heap, (root_bound, next(counter), {}, root.x, 0))

    status = "optimal"
    best_bound = root_bound
    while heap:
        bound, _, fixing, x_parent, depth = heapq.heappop(heap)
        # pruned regions carry bounds above the incumbent at pruning time, so
        # the valid global bound is the open-node minimum capped by the
        # incumbent itself
        best_bound = min(bound, inc_obj)
        if rel_gap(best_bound) <= settings.gap_tol:
            break
        if node_count >= settings.node_limit:
            status = "node-limit"
            break
        if time.monotonic() - t0 > settings.time_limit:
            status = "time-limit"
            break
        branch_j = _fractionality(x_parent, binaries, settings.integer_tol)
        if branch_j is None:
            continue
        for val in (0, 1):
            child = dict(fixing)
            child[branch_j] = val
            sol = _solve_node(comp, relaxed_b, child, binaries, bounds_of, settings)
            node_count += 1
            if settings.verbose:
                log.append((depth + 1, sol.objective, inc_obj,
                            rel_gap(best_bound)))
            if sol.status != "optimal":
                continue
            if sol.objective >= inc_obj - settings.gap_tol * max(1.0, abs(inc_obj)):
                continue
            frac_j = _fractionality(sol.x, binaries, settings.integer_tol)
            if frac_j is None:
                try_incumbent(sol)
            else:
                heapq.heappush(heap, (sol.objective, next(counter), child, sol.x,
                                      depth + 1))
        if node_count % 20 == 0 and heap:
            heuristic(x_parent)

    if not heap and status == "optimal":
        best_bound = inc_obj if incumbent is not None else best_bound
    if incumbent is None:
        # no feasible integral point found within limits
        sol = SolutionPoint(status="infeasible" if status == "optimal"
                            else "tolerance-limit")
        return BnbResult(solution=sol, node_count=node_count, best_bound=best_bound,
                         incumbent_objective=_INF, gap=_INF,
                         status=status if status != "optimal" else "infeasible",
                         log=log)
    gap = max(0.0, rel_gap(best_bound))
    if gap <= settings.gap_tol:
        status = "optimal"

    # dual polish: re-solve on the incumbent's active set with degenerate pairs
    # bound on the primal side, so returned multipliers are strictly supporting
    if program.pairs:
        fixing, ambiguous = _pattern_from_point(program, incumbent.x)
        for j in ambiguous:
            fixing[j] = 0
        free = [j for j in binaries if j not in fixing]
        fixing.update({j: int(round(incumbent.x[j])) for j in free})
        polished = _solve_node(comp, relaxed_b, fixing, binaries, bounds_of,
                               settings)
        node_count += 1
        if polished.status == "optimal" and \
                polished.objective <= inc_obj + settings.gap_tol * max(1.0, abs(inc_obj)):
            incumbent = polished
            inc_obj = min(inc_obj, polished.objective)

    return BnbResult(solution=incumbent, node_count=node_count, best_bound=best_bound,
                     incumbent_objective=inc_obj, gap=gap, status=status, log=log)


# ---- exhaustive oracle ------------------------------------------------------

ENUMERATION_CAP = 22


def enumerate_oracle(program: ConicProgram, settings: SolverSettings | None = None
                     ) -> BnbResult:
    """Exact mixed-integer optimum by exhausting all binary fixings."""
    settings = settings or SolverSettings()
    binaries = program.binary_indices()
    if len(binaries) > ENUMERATION_CAP:
        raise ValueError(f"{len(binaries)} binaries exceed the enumeration cap "
                         f"of {ENUMERATION_CAP}")
    names = [program.variables[j].name for j in binaries]
    best: SolutionPoint | None = None
    best_obj = _INF
    count = 0
    for bits in itertools.product((0, 1), repeat=len(binaries)):
        fixed = relax_binaries(program, dict(zip(names, bits)))
        sol = solve_convex(fixed, settings)
        count += 1
        if sol.status == "optimal" and sol.objective < best_obj - 1e-12:
            best, best_obj = sol, sol.objective
    if best is None:
        return BnbResult(solution=SolutionPoint(status="infeasible"),
                         node_count=count, best_bound=_INF,
                         incumbent_objective=_INF, gap=0.0, status="infeasible")
    return BnbResult(solution=best, node_count=count, best_bound=best_obj,
                     incumbent_objective=best_obj, gap=0.0, status="optimal")
