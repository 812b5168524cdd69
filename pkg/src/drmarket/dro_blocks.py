"""Wasserstein-ball risk blocks emitted into a conic program.

Two constraint families are emitted per microgrid: the worst-case expected
shortfall penalty priced into its bidding objective, and the worst-case CVaR
constraint that caps the chance of breaching the reserve contract.  The
exact optimal-transport distance lives here as well; it is a test oracle and
never sits on the solve path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data_io import ErrorSampleMatrix
from .program_ir import ConicProgram


@dataclass
class AmbiguitySet:
    center: ErrorSampleMatrix
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ambiguity radius must be non-negative")
        if self.center.n_samples < 1:
            raise ValueError("ambiguity set needs at least one sample")


@dataclass
class DroPenaltyBlock:
    """Handles for one microgrid's worst-case expected shortfall penalty."""

    tag: str
    index: int
    anchor: int                 # threshold variable in the expectation epigraph
    loss_bound: int             # per-sample loss magnitude bound
    excess: np.ndarray          # per-sample excess-over-anchor variables
    epi_rows: list[str]
    wpos_rows: list[str]
    loss_lo_rows: list[str]
    loss_hi_rows: list[str]

    def contribution(self, program: ConicProgram, x, radius: float) -> float:
        w = float(np.mean([x[j] for j in self.excess]))
        return float(x[self.anchor]) + radius * float(x[self.loss_bound]) + w


@dataclass
class DrccBlock:
    """Handles for one microgrid's worst-case CVaR contract constraint."""

    tag: str
    index: int
    eps_ind: float
    shortfall_cap: float
    anchor: int
    loss_bound: int
    excess: np.ndarray
    budget_row: str
    epi_rows: list[str]
    cone_name: str


def _shortfall_coeffs(samples, rup_handles, delta_t, scale=1.0):
    """Affine coefficient rows of scale * dt * <zeta_s, R> per sample s.

    Handles may repeat (a single scalar bid spanning all periods); repeated
    entries accumulate.
    """
    mat = samples.samples if isinstance(samples, ErrorSampleMatrix) else np.asarray(samples)
    rows = []
    for s in range(mat.shape[0]):
        coeffs: dict[int, float] = {}
        for t, j in enumerate(rup_handles):
            if mat[s, t] != 0.0:
                j = int(j)
                coeffs[j] = coeffs.get(j, 0.0) + scale * delta_t * float(mat[s, t])
        rows.append(coeffs)
    return rows


def emit_dro_penalty(program: ConicProgram, samples, rup_handles, voll: float,
                     radius: float, delta_t: float, tag: str = "mg",
                     index: int = 0) -> DroPenaltyBlock:
    """Worst-case expected shortfall cost of holding reserve bids R.

    Adds objective term  anchor + radius*loss_bound + mean(excess)  and the
    per-sample epigraph/magnitude rows.  At radius 0 the block's optimum is
    exactly the empirical mean of  dt * zeta . R * voll.
    """
    if radius < 0:
        raise ValueError("ambiguity radius must be non-negative")
    rup_handles = np.asarray(rup_handles, dtype=int)
    n_s = samples.n_samples if isinstance(samples, ErrorSampleMatrix) \
        else np.asarray(samples).shape[0]

    anchor = program.add_var(f"{tag}.pen_anchor")
    loss_bound = program.add_var(f"{tag}.pen_loss")
    excess = program.add_vars(f"{tag}.pen_excess", n_s)

    program.add_obj_lin(anchor, 1.0)
    program.add_obj_lin(loss_bound, radius)
    for j in excess:
        program.add_obj_lin(int(j), 1.0 / n_s)

    loss = _shortfall_coeffs(samples, rup_handles, delta_t, scale=voll)
    epi_rows, wpos_rows, lo_rows, hi_rows = [], [], [], []
    for s in range(n_s):
        name = f"{tag}.pen_epi[{s}]"
        coeffs = {int(excess[s]): 1.0, anchor: 1.0}
        for j, c in loss[s].items():
            coeffs[j] = coeffs.get(j, 0.0) - c
        program.add_linear(name, coeffs, ">=", 0.0)
        epi_rows.append(name)

        name = f"{tag}.pen_wpos[{s}]"
        program.add_linear(name, {int(excess[s]): 1.0}, ">=", 0.0)
        wpos_rows.append(name)

        name = f"{tag}.pen_lo[{s}]"
        coeffs = dict(loss[s])
        coeffs[loss_bound] = coeffs.get(loss_bound, 0.0) + 1.0
        program.add_linear(name, coeffs, ">=", 0.0)
        lo_rows.append(name)

        name = f"{tag}.pen_hi[{s}]"
        coeffs = {j: -c for j, c in loss[s].items()}
        coeffs[loss_bound] = coeffs.get(loss_bound, 0.0) + 1.0
        program.add_linear(name, coeffs, ">=", 0.0)
        hi_rows.append(name)

    return DroPenaltyBlock(tag=tag, index=index, anchor=anchor,
                           loss_bound=loss_bound, excess=excess,
                           epi_rows=epi_rows, wpos_rows=wpos_rows,
                           loss_lo_rows=lo_rows, loss_hi_rows=hi_rows)


def emit_drcc(program: ConicProgram, samples, rup_handles, eps_ind: float,
              shortfall_cap: float, radius: float, delta_t: float,
              tag: str = "mg", index: int = 0) -> DrccBlock:
    """Worst-case CVaR cap on the chance that shortfall exceeds the contract.

    Rejects eps_ind outside (0, 1): the budget row divides by it.
    """
    if not 0.0 < eps_ind < 1.0:
        raise ValueError(f"individual violation rate {eps_ind} outside (0, 1)")
    if radius < 0:
        raise ValueError("ambiguity radius must be non-negative")
    rup_handles = np.asarray(rup_handles, dtype=int)
    n_s = samples.n_samples if isinstance(samples, ErrorSampleMatrix) \
        else np.asarray(samples).shape[0]

    anchor = program.add_var(f"{tag}.cvar_anchor")
    loss_bound = program.add_var(f"{tag}.cvar_loss")
    excess = program.add_vars(f"{tag}.cvar_excess", n_s, lb=0.0)

    budget = f"{tag}.cvar_budget"
    coeffs = {anchor: -1.0, loss_bound: -radius / eps_ind}
    for j in excess:
        coeffs[int(j)] = -1.0 / (eps_ind * n_s)
    program.add_linear(budget, coeffs, ">=", 0.0)

    loss = _shortfall_coeffs(samples, rup_handles, delta_t)
    epi_rows = []
    for s in range(n_s):
        name = f"{tag}.cvar_epi[{s}]"
        coeffs = {int(excess[s]): 1.0, anchor: 1.0}
        for j, c in loss[s].items():
            coeffs[j] = coeffs.get(j, 0.0) - c
        program.add_linear(name, coeffs, ">=", -shortfall_cap)
        epi_rows.append(name)

    cone = f"{tag}.cvar_cone"
    program.add_soc(cone, ({loss_bound: 1.0}, 0.0),
                    [(dict(loss[s]), 0.0) for s in range(n_s)])

    return DrccBlock(tag=tag, index=index, eps_ind=eps_ind,
                     shortfall_cap=shortfall_cap, anchor=anchor,
                     loss_bound=loss_bound, excess=excess, budget_row=budget,
                     epi_rows=epi_rows, cone_name=cone)


def bonferroni_bounds(joint_rate: float, n_players: int) -> tuple[float, float]:
    """Admissible interval for each player's violation budget.

    The lower end splits the joint budget equally (fully independent events,
    the most conservative reading); the upper end assumes full correlation.
    """
    if not 0.0 < joint_rate < 1.0:
        raise ValueError("joint violation rate must lie in (0, 1)")
    if n_players < 1:
        raise ValueError("need at least one player")
    return joint_rate / n_players, joint_rate


def wasserstein_distance(samples_a, samples_b) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions.

    Uniform weights, Euclidean ground metric; solved as a transport LP.
    Symmetric, and zero exactly when the two multisets coincide.
    """
    a = samples_a.samples if isinstance(samples_a, ErrorSampleMatrix) else \
        np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = samples_b.samples if isinstance(samples_b, ErrorSampleMatrix) else \
        np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    m, n = a.shape[0], b.shape[0]
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    if m == n and np.allclose(np.sort(cost.min(axis=1)), 0.0, atol=0.0):
        # cheap exit for identical multisets
        if cost.min(axis=1).max() == 0.0 and cost.min(axis=0).max() == 0.0:
            perm_cost = _assignment_cost(cost)
            if perm_cost == 0.0:
                return 0.0

    rows_a = np.repeat(np.arange(m), n)
    rows_b = np.tile(np.arange(n), m)
    data = np.ones(m * n)
    from scipy import sparse
    A_eq = sparse.vstack([
        sparse.csr_matrix((data, (rows_a, np.arange(m * n))), shape=(m, m * n)),
        sparse.csr_matrix((data, (rows_b, np.arange(m * n))), shape=(n, m * n)),
    ])
    b_eq = np.concatenate([np.full(m, 1.0 / m), np.full(n, 1.0 / n)])
    res = optimize.linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None),
                           method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _assignment_cost(cost: np.ndarray) -> float:
    from scipy.optimize import linear_sum_assignment

    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum()) / cost.shape[0]
