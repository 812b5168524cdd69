"""Solver-agnostic representation of convex conic programs with binaries.

A ConicProgram holds variables, linear constraints, second-order-cone
constraints and a separable convex quadratic objective.  Market model
builders emit into a program; the solver module lowers it to standard
conic form.  Programs are mutable while being built and treated as
frozen once handed to a solver.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

CONTINUOUS = "continuous"
BINARY = "binary"

_SENSES = ("==", "<=", ">=")


@dataclass
class Variable:
    name: str
    kind: str = CONTINUOUS
    lb: float | None = None
    ub: float | None = None


@dataclass
class LinearConstraint:
    """coeffs . x  (sense)  rhs, coeffs keyed by variable index."""

    name: str
    coeffs: dict[int, float]
    sense: str
    rhs: float


@dataclass
class SocConstraint:
    """|| vector ||_2 <= bound, every entry an affine expression.

    Affine expressions are (coeffs, const) pairs.
    """

    name: str
    bound: tuple[dict[int, float], float]
    vector: list[tuple[dict[int, float], float]]


@dataclass
class ComplementarityPair:
    """0 <= a  perp  b >= 0, both sides affine; gate is the binary index
    once big-M linearization has run (None before)."""

    name: str
    side_a: tuple[dict[int, float], float]
    side_b: tuple[dict[int, float], float]
    gate: int | None = None
    big_m: float | None = None


class ConicProgram:
    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: list[Variable] = []
        self._var_index: dict[str, int] = {}
        self.linear: list[LinearConstraint] = []
        self._row_index: dict[str, int] = {}
        self.socs: list[SocConstraint] = []
        self.pairs: list[ComplementarityPair] = []
        self.obj_quad: dict[int, float] = {}
        self.obj_lin: dict[int, float] = {}
        self.obj_const: float = 0.0

    # ---- construction -------------------------------------------------

    def add_var(self, name, kind=CONTINUOUS, lb=None, ub=None) -> int:
        if name in self._var_index:
            raise ValueError(f"variable {name!r} declared twice")
        self.variables.append(Variable(name, kind, lb, ub))
        self._var_index[name] = len(self.variables) - 1
        return len(self.variables) - 1

    def add_vars(self, prefix, count, **kw) -> np.ndarray:
        return np.array([self.add_var(f"{prefix}[{j}]", **kw) for j in range(count)])

    def add_linear(self, name, coeffs, sense, rhs):
        if sense not in _SENSES:
            raise ValueError(f"bad sense {sense!r}")
        if name in self._row_index:
            raise ValueError(f"constraint {name!r} declared twice")
        self.linear.append(LinearConstraint(name, dict(coeffs), sense, float(rhs)))
        self._row_index[name] = len(self.linear) - 1

    def add_soc(self, name, bound, vector):
        self.socs.append(SocConstraint(name, bound, list(vector)))

    def add_pair(self, name, side_a, side_b):
        self.pairs.append(ComplementarityPair(name, side_a, side_b))
        return self.pairs[-1]

    def add_obj_quad(self, var, coef):
        self.obj_quad[var] = self.obj_quad.get(var, 0.0) + float(coef)

    def add_obj_lin(self, var, coef):
        self.obj_lin[var] = self.obj_lin.get(var, 0.0) + float(coef)

    # ---- queries --------------------------------------------------------

    def var(self, name) -> int:
        return self._var_index[name]

    def row(self, name) -> LinearConstraint:
        return self.linear[self._row_index[name]]

    @property
    def n_vars(self):
        return len(self.variables)

    def binary_indices(self) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.kind == BINARY]

    def copy(self) -> "ConicProgram":
        return copy.deepcopy(self)

    # ---- affine evaluation ----------------------------------------------

    @staticmethod
    def eval_affine(expr, x) -> float:
        coeffs, const = expr
        return const + sum(c * x[j] for j, c in coeffs.items())

    def row_activity(self, con: LinearConstraint, x) -> float:
        return sum(c * x[j] for j, c in con.coeffs.items())

    def objective_value(self, x) -> float:
        val = self.obj_const
        for j, c in self.obj_quad.items():
            val += c * x[j] * x[j]
        for j, c in self.obj_lin.items():
            val += c * x[j]
        return float(val)

    # ---- text dump (fixture diffing) --------------------------------------

    def dump(self) -> str:
        lines = [f"program {self.name}: {self.n_vars} vars, "
                 f"{len(self.linear)} linear, {len(self.socs)} soc, "
                 f"{len(self.pairs)} complementarity pairs"]
        for v in self.variables:
            bounds = f"[{v.lb if v.lb is not None else '-inf'}, " \
                     f"{v.ub if v.ub is not None else 'inf'}]"
            lines.append(f"var {v.name} {v.kind} {bounds}")
        obj = " + ".join(
            [f"{c:.12g}*{self.variables[j].name}^2" for j, c in sorted(self.obj_quad.items())]
            + [f"{c:.12g}*{self.variables[j].name}" for j, c in sorted(self.obj_lin.items())]
            + ([f"{self.obj_const:.12g}"] if self.obj_const else []))
        lines.append(f"min {obj if obj else '0'}")
        for con in self.linear:
            terms = " + ".join(f"{c:.12g}*{self.variables[j].name}"
                               for j, c in sorted(con.coeffs.items()))
            lines.append(f"{con.name}: {terms if terms else '0'} {con.sense} {con.rhs:.12g}")
        for soc in self.socs:
            lines.append(f"{soc.name}: ||{len(soc.vector)}-vector|| <= bound")
        for p in self.pairs:
            lines.append(f"pair {p.name}: gate="
                         f"{self.variables[p.gate].name if p.gate is not None else 'none'}")
        return "\n".join(lines) + "\n"


@dataclass
class SolutionPoint:
    """Outcome of one convex solve.

    ``duals`` holds one multiplier per named linear row under the convention
    L = f - sum mu_i g_i - sum lam_j h_j with g_i >= 0 the inequality written
    as (lhs-rhs) for ">=" rows and (rhs-lhs) for "<=" rows (so mu >= 0), and
    h_j = lhs - rhs for equalities (lam free).  ``status`` is one of
    "optimal", "infeasible", "unbounded", "tolerance-limit".
    """

    status: str
    objective: float | None = None
    x: np.ndarray | None = None
    duals: dict[str, float] = field(default_factory=dict)
    soc_duals: dict[str, np.ndarray] = field(default_factory=dict)
    bound_duals: dict[str, tuple[float, float]] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)
    iterations: int = 0

    def value(self, program: ConicProgram, name: str) -> float:
        return float(self.x[program.var(name)])

    def values(self, indices) -> np.ndarray:
        return np.asarray(self.x)[np.asarray(indices, dtype=int)]


# ---- validation ------------------------------------------------------------


def validate(program: ConicProgram) -> list[str]:
    """Structural diagnostics; empty list means the program is well formed."""
    diags = []
    n = program.n_vars
    declared = set(range(n))
    binaries = set(program.binary_indices())

    def check_expr(owner, coeffs):
        for j in coeffs:
            if j not in declared:
                diags.append(f"{owner}: references undeclared variable index {j}")

    seen = set()
    for v in program.variables:
        if v.name in seen:
            diags.append(f"variable {v.name}: declared more than once")
        seen.add(v.name)
        if v.lb is not None and v.ub is not None and v.lb > v.ub:
            diags.append(f"variable {v.name}: empty bound interval")

    for con in program.linear:
        check_expr(f"constraint {con.name}", con.coeffs)
        if con.sense not in _SENSES:
            diags.append(f"constraint {con.name}: bad sense {con.sense!r}")

    for soc in program.socs:
        check_expr(f"cone {soc.name} bound", soc.bound[0])
        if not soc.vector:
            diags.append(f"cone {soc.name}: empty vector")
        for k, expr in enumerate(soc.vector):
            check_expr(f"cone {soc.name}[{k}]", expr[0])
        for k, expr in enumerate(soc.vector):
            for j in expr[0]:
                if j in binaries:
                    diags.append(f"cone {soc.name}: binary {program.variables[j].name} "
                                 "appears nonlinearly")

    for j, c in program.obj_quad.items():
        if j not in declared:
            diags.append(f"objective: undeclared variable index {j}")
        elif c < 0:
            diags.append(f"objective: negative quadratic coefficient on "
                         f"{program.variables[j].name} breaks convexity")
        elif j in binaries:
            diags.append(f"objective: binary {program.variables[j].name} appears quadratically")
    for j in program.obj_lin:
        if j not in declared:
            diags.append(f"objective: undeclared variable index {j}")

    for p in program.pairs:
        check_expr(f"pair {p.name} side a", p.side_a[0])
        check_expr(f"pair {p.name} side b", p.side_b[0])
    return diags


def relax_binaries(program: ConicProgram, fixings: dict[str, object] | None = None
                   ) -> ConicProgram:
    """Fix or free binary variables.

    fixings maps variable name -> 0, 1 or "free".  Fixed binaries become
    constants (lb=ub), free binaries become continuous in [0, 1]; binaries
    not mentioned are also freed.  Fixing a continuous variable is an error.
    """
    fixings = fixings or {}
    out = program.copy()
    binary_names = {out.variables[j].name for j in out.binary_indices()}
    for name in fixings:
        if name not in binary_names:
            raise ValueError(f"cannot fix non-binary variable {name!r}")
    for j in out.binary_indices():
        v = out.variables[j]
        choice = fixings.get(v.name, "free")
        v.kind = CONTINUOUS
        if choice == "free":
            v.lb, v.ub = 0.0, 1.0
        elif choice in (0, 1, 0.0, 1.0):
            v.lb = v.ub = float(choice)
        else:
            raise ValueError(f"bad fixing {choice!r} for {v.name}")
    return out


# ---- standard-form compilation ---------------------------------------------


@dataclass
class CompiledProgram:
    """Conic standard form  min 1/2 x'Px + q'x  s.t.  Ax + s = b, s in K.

    Rows are ordered: equalities, inequalities, variable bounds, soc blocks.
    ``bound_rows`` maps variable index -> (lb_row, ub_row) positions in b so
    branch-and-bound can retighten bounds by mutating b alone.
    """

    P: sparse.csc_matrix
    q: np.ndarray
    A: sparse.csc_matrix
    b: np.ndarray
    cones: list
    obj_const: float
    n_eq: int
    n_ineq: int
    row_names: list[str]
    eq_rows: dict[str, int]
    ineq_rows: dict[str, int]
    bound_rows: dict[int, tuple[int | None, int | None]]
    soc_slices: list[tuple[str, slice]]


def compile_standard_form(program: ConicProgram) -> CompiledProgram:
    import clarabel

    n = program.n_vars
    P = sparse.diags([2.0 * program.obj_quad.get(j, 0.0) for j in range(n)],
                     format="csc", shape=(n, n))
    q = np.zeros(n)
    for j, c in program.obj_lin.items():
        q[j] = c

    rows, data, cols, b, names = [], [], [], [], []

    def push(coeffs, rhs, name):
        r = len(b)
        for j, c in coeffs.items():
            if c != 0.0:
                rows.append(r)
                cols.append(j)
                data.append(c)
        b.append(rhs)
        names.append(name)
        return r

    eq_rows, ineq_rows = {}, {}
    for con in program.linear:
        if con.sense == "==":
            eq_rows[con.name] = push(con.coeffs, con.rhs, con.name)
    n_eq = len(b)

    for con in program.linear:
        if con.sense == "<=":
            ineq_rows[con.name] = push(con.coeffs, con.rhs, con.name)
        elif con.sense == ">=":
            ineq_rows[con.name] = push({j: -c for j, c in con.coeffs.items()},
                                       -con.rhs, con.name)

    bound_rows = {}
    for j, v in enumerate(program.variables):
        lo = hi = None
        lb = 0.0 if v.kind == BINARY and v.lb is None else v.lb
        ub = 1.0 if v.kind == BINARY and v.ub is None else v.ub
        if lb is not None:
            lo = push({j: -1.0}, -lb, f"_lb[{v.name}]")
        if ub is not None:
            hi = push({j: 1.0}, ub, f"_ub[{v.name}]")
        if lo is not None or hi is not None:
            bound_rows[j] = (lo, hi)
    n_ineq = len(b) - n_eq

    soc_slices = []
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    for soc in program.socs:
        start = len(b)
        coeffs, const = soc.bound
        push({j: -c for j, c in coeffs.items()}, const, f"{soc.name}[t]")
        for k, (vc, vconst) in enumerate(soc.vector):
            push({j: -c for j, c in vc.items()}, vconst, f"{soc.name}[{k}]")
        cones.append(clarabel.SecondOrderConeT(len(soc.vector) + 1))
        soc_slices.append((soc.name, slice(start, len(b))))

    A = sparse.csc_matrix((data, (rows, cols)), shape=(len(b), n))
    return CompiledProgram(P=P, q=q, A=A, b=np.array(b), cones=cones,
                           obj_const=program.obj_const, n_eq=n_eq, n_ineq=n_ineq,
                           row_names=names, eq_rows=eq_rows, ineq_rows=ineq_rows,
                           bound_rows=bound_rows, soc_slices=soc_slices)
