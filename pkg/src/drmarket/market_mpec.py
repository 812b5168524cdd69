"""Market game assembly: dispatch level, bidding level, KKT embedding.

The upper level clears energy and reserve over a DC network and carries the
contract-violation caps; each microgrid's bidding problem is embedded through
its stationarity and complementarity conditions, the latter linearized with
gated big-M rows.  The single-level objective replaces the bilinear
price-times-quantity payments with their strong-duality equivalent, so the
assembled program is a mixed-binary convex QP with one second-order cone per
contract cap.

Stationarity rows are derived from the bidding problem's Lagrangian; the
multiplier convention is fixed so that the energy-exchange row reads
dt*price_e + mu_balance = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import ErrorSampleMatrix, NetworkCase, ScenarioConfig
from .dro_blocks import DrccBlock, DroPenaltyBlock, emit_drcc, emit_dro_penalty
from .program_ir import BINARY, ConicProgram, SolutionPoint
from .solver import BnbResult, SolverSettings, solve_convex


class NetworkStructureError(ValueError):
    """Raised when the reduced susceptance matrix cannot be inverted."""


# ---- DC flow map -------------------------------------------------------------


def dc_flow_map(case: NetworkCase) -> tuple[np.ndarray, list[str]]:
    """Branch-flow sensitivities to non-slack bus injections.

    Returns (ptdf, non_slack_bus_ids); flows = ptdf @ injections.  The slack
    bus absorbs the injection residual.
    """
    idx = case.bus_index()
    n = len(case.buses)
    slack = next(j for j, b in enumerate(case.buses) if b.is_slack)

    b_bus = np.zeros((n, n))
    b_line = np.zeros((len(case.branches), n))
    for ln, br in enumerate(case.branches):
        f, t = idx[br.from_bus], idx[br.to_bus]
        b = br.susceptance
        b_bus[f, f] += b
        b_bus[t, t] += b
        b_bus[f, t] -= b
        b_bus[t, f] -= b
        b_line[ln, f] = b
        b_line[ln, t] = -b

    keep = [j for j in range(n) if j != slack]
    reduced = b_bus[np.ix_(keep, keep)]
    try:
        inv = np.linalg.inv(reduced)
        if not np.all(np.isfinite(inv)) or np.linalg.cond(reduced) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        disconnected = _disconnected_buses(case, slack)
        raise NetworkStructureError(
            "singular reduced susceptance matrix; disconnected buses: "
            f"{sorted(disconnected) if disconnected else 'none found'}") from None
    ptdf = b_line[:, keep] @ inv
    return ptdf, [case.buses[j].bus_id for j in keep]


def _disconnected_buses(case: NetworkCase, slack: int) -> set[str]:
    adj: dict[str, set[str]] = {b.bus_id: set() for b in case.buses}
    for br in case.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    seen, stack = set(), [case.buses[slack].bus_id]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(adj[b] - seen)
    return {b.bus_id for b in case.buses} - seen


# ---- handle containers ---------------------------------------------------------


@dataclass
class IsoModelHandles:
    pg: np.ndarray            # (n_gen, n_periods) variable indices
    rg: np.ndarray
    price_e: np.ndarray       # (n_mg,) or empty when prices are not modelled
    price_r: np.ndarray
    rup: np.ndarray           # (n_mg, n_periods), shared with the bidding level
    pex: np.ndarray
    balance_rows: list[str]
    reserve_rows: list[str]
    cap_rows: list[str]
    flow_rows: list[str]
    drcc_blocks: list[DrccBlock]
    ptdf: np.ndarray
    flow_bus_ids: list[str]
    delta_t: float


@dataclass
class MicrogridModelHandles:
    index: int
    tag: str
    ps: np.ndarray
    rup: np.ndarray
    pex: np.ndarray
    penalty: DroPenaltyBlock
    load: np.ndarray
    balance_rows: list[str]
    flex_lo_rows: list[str]
    flex_hi_rows: list[str]
    bid_lo_rows: list[str]
    bid_hi_rows: list[str]
    # dual variable indices, populated by derive_kkt
    mu_balance: np.ndarray | None = None
    mu_flex_lo: np.ndarray | None = None
    mu_flex_hi: np.ndarray | None = None
    mu_bid_lo: np.ndarray | None = None
    mu_bid_hi: np.ndarray | None = None
    mu_epi: np.ndarray | None = None
    mu_wpos: np.ndarray | None = None
    mu_loss_lo: np.ndarray | None = None
    mu_loss_hi: np.ndarray | None = None
    pair_names: list[str] = field(default_factory=list)
    # model data needed to derive stationarity
    voll: float = 1.0
    gamma: float = 0.5
    flex_max: float = 0.0
    flex_min: float = 0.0
    cost_quad: float = 0.0
    cost_reserve: float = 0.0
    samples: np.ndarray | None = None
    delta_t: float = 0.5
    radius: float = 0.0
    price_e: np.ndarray | None = None   # per-period indices
    price_r: np.ndarray | None = None


@dataclass
class MarketModel:
    program: ConicProgram
    iso: IsoModelHandles
    microgrids: list[MicrogridModelHandles]
    binaries: list[int]
    case: NetworkCase
    samples: ErrorSampleMatrix
    config: ScenarioConfig
    eps_ind: np.ndarray


# ---- equilibrium ---------------------------------------------------------------


@dataclass
class Equilibrium:
    gen_energy: np.ndarray
    gen_reserve: np.ndarray
    flex_output: np.ndarray
    grid_import: np.ndarray
    reserve_bid: np.ndarray
    price_energy: np.ndarray
    price_reserve: np.ndarray
    flows: np.ndarray
    iso_cost: float
    mg_costs: np.ndarray
    objective: float
    duals: dict[str, np.ndarray] = field(default_factory=dict)
    auxiliaries: dict[str, np.ndarray] = field(default_factory=dict)


# ---- builders -------------------------------------------------------------------


def build_iso_model(program: ConicProgram, case: NetworkCase,
                    samples: ErrorSampleMatrix, eps_ind, radius: float,
                    price_cap: float = 200.0, reserve_in_flow: bool = True,
                    regulate: bool = True, reserve_requirement_factor: float = 0.1,
                    shortfall_cap: float = 1.5, with_prices: bool = True
                    ) -> IsoModelHandles:
    """Dispatch-level variables, network constraints and contract caps."""
    n_t = case.n_periods
    if samples.n_periods != n_t:
        raise ValueError(f"sample matrix has {samples.n_periods} periods, "
                         f"case has {n_t}")
    dt = samples.delta_t
    eps_ind = np.broadcast_to(np.asarray(eps_ind, dtype=float),
                              (len(case.microgrids),))

    pg = np.empty((len(case.generators), n_t), dtype=int)
    rg = np.empty_like(pg)
    for k, g in enumerate(case.generators):
        for t in range(n_t):
            pg[k, t] = program.add_var(f"gen{k}.energy[{t}]", lb=0.0)
            rg[k, t] = program.add_var(f"gen{k}.reserve[{t}]", lb=0.0)
            program.add_obj_quad(int(pg[k, t]), g.cost_energy_quad * dt * dt)
            program.add_obj_lin(int(rg[k, t]), dt * g.cost_reserve)

    n_mg = len(case.microgrids)
    price_e = np.empty((n_mg, n_t), dtype=int)
    price_r = np.empty((n_mg, n_t), dtype=int)
    rup = np.empty((n_mg, n_t), dtype=int)
    pex = np.empty((n_mg, n_t), dtype=int)
    for i in range(n_mg):
        for t in range(n_t):
            if with_prices:
                price_e[i, t] = program.add_var(f"mg{i}.price_energy[{t}]",
                                                lb=0.0, ub=price_cap)
                price_r[i, t] = program.add_var(f"mg{i}.price_reserve[{t}]",
                                                lb=0.0, ub=price_cap)
            rup[i, t] = program.add_var(f"mg{i}.reserve_bid[{t}]")
            pex[i, t] = program.add_var(f"mg{i}.grid_import[{t}]")
    if not with_prices:
        price_e = np.empty((0, n_t), dtype=int)
        price_r = np.empty((0, n_t), dtype=int)

    passive = case.passive_load()
    balance_rows, reserve_rows, cap_rows = [], [], []
    for t in range(n_t):
        name = f"iso.balance[{t}]"
        coeffs = {int(pg[k, t]): 1.0 for k in range(len(case.generators))}
        for i in range(n_mg):
            coeffs[int(pex[i, t])] = -1.0
        program.add_linear(name, coeffs, "==", float(passive[t]))
        balance_rows.append(name)

        name = f"iso.reserve[{t}]"
        coeffs = {int(rg[k, t]): 1.0 for k in range(len(case.generators))}
        for i in range(n_mg):
            coeffs[int(rup[i, t])] = 1.0
        rreq = case.reserve_requirement(reserve_requirement_factor)
        program.add_linear(name, coeffs, ">=", float(rreq[t]))
        reserve_rows.append(name)

    for k, g in enumerate(case.generators):
        for t in range(n_t):
            name = f"gen{k}.cap[{t}]"
            program.add_linear(name, {int(pg[k, t]): 1.0, int(rg[k, t]): 1.0},
                               "<=", g.capacity_mw)
            cap_rows.append(name)

    ptdf, flow_bus_ids = dc_flow_map(case)
    bus_pos = {b: j for j, b in enumerate(flow_bus_ids)}
    hosts = case.microgrid_buses()
    flow_rows = []
    for ln, br in enumerate(case.branches):
        for t in range(n_t):
            coeffs: dict[int, float] = {}
            const = 0.0
            for k, g in enumerate(case.generators):
                if g.bus in bus_pos:
                    w = ptdf[ln, bus_pos[g.bus]]
                    coeffs[int(pg[k, t])] = coeffs.get(int(pg[k, t]), 0.0) + w
                    if reserve_in_flow:
                        coeffs[int(rg[k, t])] = coeffs.get(int(rg[k, t]), 0.0) + w
            for i, m in enumerate(case.microgrids):
                if m.bus in bus_pos:
                    w = ptdf[ln, bus_pos[m.bus]]
                    coeffs[int(pex[i, t])] = coeffs.get(int(pex[i, t]), 0.0) - w
                    if reserve_in_flow:
                        coeffs[int(rup[i, t])] = coeffs.get(int(rup[i, t]), 0.0) + w
            for bus_id, profile in case.load_mw.items():
                if bus_id in bus_pos and bus_id not in hosts:
                    const -= ptdf[ln, bus_pos[bus_id]] * float(profile[t])
            up = f"line{ln}.flow_hi[{t}]"
            dn = f"line{ln}.flow_lo[{t}]"
            program.add_linear(up, coeffs, "<=", br.flow_limit_mw - const)
            program.add_linear(dn, coeffs, ">=", -br.flow_limit_mw - const)
            flow_rows.extend([up, dn])

    drcc_blocks = []
    if regulate:
        for i in range(n_mg):
            drcc_blocks.append(emit_drcc(program, samples, rup[i], float(eps_ind[i]),
                                         shortfall_cap, radius, dt,
                                         tag=f"mg{i}", index=i))

    return IsoModelHandles(pg=pg, rg=rg, price_e=price_e, price_r=price_r,
                           rup=rup, pex=pex, balance_rows=balance_rows,
                           reserve_rows=reserve_rows, cap_rows=cap_rows,
                           flow_rows=flow_rows, drcc_blocks=drcc_blocks,
                           ptdf=ptdf, flow_bus_ids=flow_bus_ids, delta_t=dt)


def build_microgrid_model(program: ConicProgram, case: NetworkCase,
                          samples: ErrorSampleMatrix, i: int, radius: float,
                          iso: IsoModelHandles, first_stage_cost: bool = True
                          ) -> MicrogridModelHandles:
    """One microgrid's primal bidding structure and its shortfall penalty."""
    mg = case.microgrids[i]
    if not 0.0 <= mg.reserve_fraction <= 1.0:
        raise ValueError(f"microgrid {mg.mg_id}: reserve fraction outside [0, 1]")
    n_t = case.n_periods
    dt = samples.delta_t
    tag = f"mg{i}"
    load = case.microgrid_load(mg)

    ps = np.array([program.add_var(f"{tag}.flex_output[{t}]") for t in range(n_t)])
    rup, pex = iso.rup[i], iso.pex[i]

    if first_stage_cost:
        for t in range(n_t):
            program.add_obj_quad(int(ps[t]), mg.cost_energy_quad * dt * dt)
            program.add_obj_lin(int(rup[t]), dt * mg.cost_reserve)

    balance_rows, flex_lo, flex_hi, bid_lo, bid_hi = [], [], [], [], []
    for t in range(n_t):
        name = f"{tag}.balance[{t}]"
        program.add_linear(name, {int(pex[t]): 1.0, int(ps[t]): 1.0}, "==",
                           float(load[t]))
        balance_rows.append(name)

        name = f"{tag}.flex_lo[{t}]"
        program.add_linear(name, {int(ps[t]): 1.0}, ">=", -mg.flex_min_mw)
        flex_lo.append(name)
        name = f"{tag}.flex_hi[{t}]"
        program.add_linear(name, {int(ps[t]): -1.0}, ">=", -mg.flex_max_mw)
        flex_hi.append(name)
        name = f"{tag}.bid_lo[{t}]"
        program.add_linear(name, {int(rup[t]): 1.0}, ">=", 0.0)
        bid_lo.append(name)
        name = f"{tag}.bid_hi[{t}]"
        program.add_linear(name, {int(ps[t]): mg.reserve_fraction,
                                  int(rup[t]): -1.0}, ">=", 0.0)
        bid_hi.append(name)

    penalty = emit_dro_penalty(program, samples, rup, mg.voll, radius, dt,
                               tag=tag, index=i)

    return MicrogridModelHandles(
        index=i, tag=tag, ps=ps, rup=rup, pex=pex, penalty=penalty, load=load,
        balance_rows=balance_rows, flex_lo_rows=flex_lo, flex_hi_rows=flex_hi,
        bid_lo_rows=bid_lo, bid_hi_rows=bid_hi, voll=mg.voll,
        gamma=mg.reserve_fraction, flex_max=mg.flex_max_mw,
        flex_min=mg.flex_min_mw, cost_quad=mg.cost_energy_quad,
        cost_reserve=mg.cost_reserve, samples=np.asarray(samples.samples),
        delta_t=dt, radius=radius,
        price_e=iso.price_e[i] if iso.price_e.size else None,
        price_r=iso.price_r[i] if iso.price_r.size else None)


def derive_kkt(program: ConicProgram, h: MicrogridModelHandles) -> None:
    """Stationarity equalities and complementarity pairs for one microgrid.

    Multiplier convention: L = f - sum mu*g + mu_balance*(import + output - load)
    with every inequality written as g >= 0 and mu >= 0.
    """
    if h.price_e is None or h.price_r is None:
        raise ValueError("prices must be modelled before the KKT system")
    n_t = len(h.ps)
    zeta = h.samples
    n_s = zeta.shape[0]
    tag = h.tag
    dt, v = h.delta_t, h.voll

    h.mu_balance = program.add_vars(f"{tag}.mu_balance", n_t)
    h.mu_flex_lo = program.add_vars(f"{tag}.mu_flex_lo", n_t, lb=0.0)
    h.mu_flex_hi = program.add_vars(f"{tag}.mu_flex_hi", n_t, lb=0.0)
    h.mu_bid_lo = program.add_vars(f"{tag}.mu_bid_lo", n_t, lb=0.0)
    h.mu_bid_hi = program.add_vars(f"{tag}.mu_bid_hi", n_t, lb=0.0)
    h.mu_epi = program.add_vars(f"{tag}.mu_epi", n_s, lb=0.0)
    h.mu_wpos = program.add_vars(f"{tag}.mu_wpos", n_s, lb=0.0)
    h.mu_loss_lo = program.add_vars(f"{tag}.mu_loss_lo", n_s, lb=0.0)
    h.mu_loss_hi = program.add_vars(f"{tag}.mu_loss_hi", n_s, lb=0.0)

    for t in range(n_t):
        program.add_linear(
            f"{tag}.stat_flex[{t}]",
            {int(h.ps[t]): 2.0 * h.cost_quad * dt * dt,
             int(h.mu_balance[t]): 1.0, int(h.mu_flex_lo[t]): -1.0,
             int(h.mu_flex_hi[t]): 1.0, int(h.mu_bid_hi[t]): -h.gamma},
            "==", 0.0)
        program.add_linear(
            f"{tag}.stat_import[{t}]",
            {int(h.price_e[t]): dt, int(h.mu_balance[t]): 1.0}, "==", 0.0)
        coeffs = {int(h.price_r[t]): -dt, int(h.mu_bid_lo[t]): -1.0,
                  int(h.mu_bid_hi[t]): 1.0}
        for s in range(n_s):
            w = v * dt * float(zeta[s, t])
            if w != 0.0:
                coeffs[int(h.mu_epi[s])] = coeffs.get(int(h.mu_epi[s]), 0.0) + w
                coeffs[int(h.mu_loss_lo[s])] = coeffs.get(int(h.mu_loss_lo[s]), 0.0) - w
                coeffs[int(h.mu_loss_hi[s])] = coeffs.get(int(h.mu_loss_hi[s]), 0.0) + w
        program.add_linear(f"{tag}.stat_bid[{t}]", coeffs, "==",
                           -dt * h.cost_reserve)

    for s in range(n_s):
        program.add_linear(f"{tag}.stat_excess[{s}]",
                           {int(h.mu_epi[s]): -1.0, int(h.mu_wpos[s]): -1.0},
                           "==", -1.0 / n_s)
    program.add_linear(f"{tag}.stat_loss",
                       {**{int(j): -1.0 for j in h.mu_loss_lo},
                        **{int(j): -1.0 for j in h.mu_loss_hi}},
                       "==", -h.radius)
    program.add_linear(f"{tag}.stat_anchor",
                       {int(j): -1.0 for j in h.mu_epi}, "==", -1.0)

    # complementarity pairs: (constraint slack, its multiplier)
    pen = h.penalty
    pairs = []
    for s in range(n_s):
        epi = {int(pen.excess[s]): 1.0, pen.anchor: 1.0}
        for t in range(n_t):
            w = v * dt * float(zeta[s, t])
            if w != 0.0:
                epi[int(h.rup[t])] = epi.get(int(h.rup[t]), 0.0) - w
        loss = {int(h.rup[t]): v * dt * float(zeta[s, t]) for t in range(n_t)
                if zeta[s, t] != 0.0}
        pairs.append(program.add_pair(f"{tag}.pair_epi[{s}]", (epi, 0.0),
                                      ({int(h.mu_epi[s]): 1.0}, 0.0)))
        pairs.append(program.add_pair(f"{tag}.pair_wpos[{s}]",
                                      ({int(pen.excess[s]): 1.0}, 0.0),
                                      ({int(h.mu_wpos[s]): 1.0}, 0.0)))
        lo = dict(loss)
        lo[pen.loss_bound] = lo.get(pen.loss_bound, 0.0) + 1.0
        pairs.append(program.add_pair(f"{tag}.pair_loss_lo[{s}]", (lo, 0.0),
                                      ({int(h.mu_loss_lo[s]): 1.0}, 0.0)))
        hi = {j: -c for j, c in loss.items()}
        hi[pen.loss_bound] = hi.get(pen.loss_bound, 0.0) + 1.0
        pairs.append(program.add_pair(f"{tag}.pair_loss_hi[{s}]", (hi, 0.0),
                                      ({int(h.mu_loss_hi[s]): 1.0}, 0.0)))
    for t in range(n_t):
        pairs.append(program.add_pair(f"{tag}.pair_flex_hi[{t}]",
                                      ({int(h.ps[t]): -1.0}, h.flex_max),
                                      ({int(h.mu_flex_hi[t]): 1.0}, 0.0)))
        pairs.append(program.add_pair(f"{tag}.pair_flex_lo[{t}]",
                                      ({int(h.ps[t]): 1.0}, h.flex_min),
                                      ({int(h.mu_flex_lo[t]): 1.0}, 0.0)))
        pairs.append(program.add_pair(f"{tag}.pair_bid_lo[{t}]",
                                      ({int(h.rup[t]): 1.0}, 0.0),
                                      ({int(h.mu_bid_lo[t]): 1.0}, 0.0)))
        pairs.append(program.add_pair(f"{tag}.pair_bid_hi[{t}]",
                                      ({int(h.ps[t]): h.gamma,
                                        int(h.rup[t]): -1.0}, 0.0),
                                      ({int(h.mu_bid_hi[t]): 1.0}, 0.0)))
    h.pair_names = [p.name for p in pairs]


def apply_big_m(program: ConicProgram, pairs, big_m: float,
                add_nonneg: bool = False) -> list[int]:
    """Gate each complementarity pair with a fresh binary.

    a <= M*U and b <= M*(1-U); with add_nonneg the a >= 0 / b >= 0 rows are
    emitted too (builders that already carry them skip that).
    """
    if big_m <= 0:
        raise ValueError("big-M must be positive")
    gates = []
    for p in pairs:
        u = program.add_var(f"U[{p.name}]", kind=BINARY)
        p.gate, p.big_m = u, big_m
        a_coeffs, a_const = p.side_a
        b_coeffs, b_const = p.side_b
        if add_nonneg:
            program.add_linear(f"{p.name}.a_nonneg", dict(a_coeffs), ">=", -a_const)
            program.add_linear(f"{p.name}.b_nonneg", dict(b_coeffs), ">=", -b_const)
        coeffs = dict(a_coeffs)
        coeffs[u] = coeffs.get(u, 0.0) - big_m
        program.add_linear(f"{p.name}.a_gate", coeffs, "<=", -a_const)
        coeffs = dict(b_coeffs)
        coeffs[u] = coeffs.get(u, 0.0) + big_m
        program.add_linear(f"{p.name}.b_gate", coeffs, "<=", big_m - b_const)
        gates.append(u)
    return gates


def assemble_game(case: NetworkCase, samples: ErrorSampleMatrix,
                config: ScenarioConfig, eps_ind) -> ConicProgram:
    """Single-level market game; handles attached as ``program.market``."""
    program = ConicProgram("market-game")
    regulate = config.mode != "no-regulation"
    eps_vec = np.broadcast_to(np.asarray(eps_ind, dtype=float),
                              (len(case.microgrids),)).copy()

    iso = build_iso_model(program, case, samples, eps_vec, config.radius,
                          price_cap=config.price_cap,
                          reserve_in_flow=config.reserve_in_flow,
                          regulate=regulate,
                          reserve_requirement_factor=config.reserve_requirement_factor,
                          shortfall_cap=config.reserve_shortfall_cap)

    mgs = []
    for i in range(len(case.microgrids)):
        h = build_microgrid_model(program, case, samples, i, config.radius, iso)
        derive_kkt(program, h)
        mgs.append(h)

    dt = samples.delta_t
    for h in mgs:
        # The builders already emitted the cleared-market objective: generator
        # costs, bidding first-stage costs and the shortfall penalties.  The
        # payment terms cancel against the bidding duals by strong duality, so
        # the default "social" form adds nothing.  The other forms keep the
        # explicit duality substitution of the payments for study.
        if config.game_objective == "social":
            continue
        if config.game_objective == "strong-duality":
            # leader's own cost: doubles the bidding quadratic and prices the
            # balance/bound multipliers at their right-hand sides
            for t in range(len(h.ps)):
                program.add_obj_quad(int(h.ps[t]), h.cost_quad * dt * dt)
                program.add_obj_lin(int(h.mu_balance[t]), -float(h.load[t]))
                program.add_obj_lin(int(h.mu_flex_lo[t]), h.flex_min)
                program.add_obj_lin(int(h.mu_flex_hi[t]), h.flex_max)
        else:  # "scaled-duals": per-period scaled multiplier terms, no anchor
            program.add_obj_lin(h.penalty.anchor, -1.0)
            for t in range(len(h.ps)):
                program.add_obj_lin(int(h.mu_balance[t]), -dt * float(h.load[t]))
                program.add_obj_lin(int(h.mu_flex_lo[t]), dt * h.flex_min)
                program.add_obj_lin(int(h.mu_flex_hi[t]), dt * h.flex_max)

    binaries = apply_big_m(program, program.pairs, config.big_m)
    program.market = MarketModel(program=program, iso=iso, microgrids=mgs,
                                 binaries=binaries, case=case, samples=samples,
                                 config=config, eps_ind=eps_vec)
    return program


# ---- equilibrium extraction and checks ----------------------------------------


def extract_equilibrium(program: ConicProgram, sol: SolutionPoint) -> Equilibrium:
    m: MarketModel = program.market
    x = sol.x
    iso = m.iso
    dt = iso.delta_t
    case = m.case

    gen_energy = x[iso.pg]
    gen_reserve = x[iso.rg]
    n_mg = len(m.microgrids)
    flex = np.array([x[h.ps] for h in m.microgrids]) if n_mg else np.zeros((0, 0))
    imp = x[iso.pex] if n_mg else np.zeros((0, 0))
    bid = x[iso.rup] if n_mg else np.zeros((0, 0))
    pe = x[iso.price_e] if iso.price_e.size else np.zeros((0, case.n_periods))
    pr = x[iso.price_r] if iso.price_r.size else np.zeros((0, case.n_periods))

    flows = _flows_from_point(m, x)

    gen_cost = float(np.sum([g.cost_energy_quad * (dt * gen_energy[k]) ** 2
                             + dt * g.cost_reserve * gen_reserve[k]
                             for k, g in enumerate(case.generators)]))
    transfers = float(np.sum([dt * (pr[i] * bid[i] - pe[i] * imp[i])
                              for i in range(n_mg)])) if n_mg else 0.0
    mg_costs = np.zeros(n_mg)
    aux = {}
    duals = {}
    for i, h in enumerate(m.microgrids):
        pen_val = h.penalty.contribution(program, x, h.radius)
        first = float(np.sum(h.cost_quad * (dt * flex[i]) ** 2
                             + dt * h.cost_reserve * bid[i]
                             + dt * pe[i] * imp[i] - dt * pr[i] * bid[i]))
        mg_costs[i] = first + pen_val
        aux[f"{h.tag}.penalty"] = np.array([pen_val])
        aux[f"{h.tag}.anchor"] = np.array([x[h.penalty.anchor]])
        aux[f"{h.tag}.loss_bound"] = np.array([x[h.penalty.loss_bound]])
        aux[f"{h.tag}.excess"] = x[h.penalty.excess]
        if h.mu_balance is not None:
            duals[f"{h.tag}.mu_balance"] = x[h.mu_balance]
            duals[f"{h.tag}.mu_flex_lo"] = x[h.mu_flex_lo]
            duals[f"{h.tag}.mu_flex_hi"] = x[h.mu_flex_hi]
            duals[f"{h.tag}.mu_bid_lo"] = x[h.mu_bid_lo]
            duals[f"{h.tag}.mu_bid_hi"] = x[h.mu_bid_hi]
            duals[f"{h.tag}.mu_epi"] = x[h.mu_epi]
            duals[f"{h.tag}.mu_wpos"] = x[h.mu_wpos]
            duals[f"{h.tag}.mu_loss_lo"] = x[h.mu_loss_lo]
            duals[f"{h.tag}.mu_loss_hi"] = x[h.mu_loss_hi]

    return Equilibrium(gen_energy=gen_energy, gen_reserve=gen_reserve,
                       flex_output=flex, grid_import=imp, reserve_bid=bid,
                       price_energy=pe, price_reserve=pr, flows=flows,
                       iso_cost=gen_cost + transfers, mg_costs=mg_costs,
                       objective=float(sol.objective), duals=duals,
                       auxiliaries=aux)


def _flows_from_point(m: MarketModel, x) -> np.ndarray:
    iso, case = m.iso, m.case
    n_t = case.n_periods
    reserve_in = m.config.reserve_in_flow
    pos = {b: j for j, b in enumerate(iso.flow_bus_ids)}
    hosts = case.microgrid_buses()
    inj = np.zeros((len(iso.flow_bus_ids), n_t))
    for k, g in enumerate(case.generators):
        if g.bus in pos:
            inj[pos[g.bus]] += x[iso.pg[k]] + (x[iso.rg[k]] if reserve_in else 0.0)
    for i, mg in enumerate(case.microgrids):
        if mg.bus in pos:
            inj[pos[mg.bus]] -= x[iso.pex[i]] - (x[iso.rup[i]] if reserve_in else 0.0)
    for bus_id, profile in case.load_mw.items():
        if bus_id in pos and bus_id not in hosts:
            inj[pos[bus_id]] -= np.asarray(profile, dtype=float)
    return iso.ptdf @ inj


def complementarity_report(program: ConicProgram, x, feas_tol: float = 1e-6
                           ) -> dict:
    """Residuals min(a, b) per pair plus the binding-at-M diagnostic."""
    worst = 0.0
    near_m = []
    for p in program.pairs:
        a = program.eval_affine(p.side_a, x)
        b = program.eval_affine(p.side_b, x)
        worst = max(worst, min(a, b))
        if p.big_m is not None and max(a, b) > 0.9 * p.big_m:
            near_m.append(p.name)
    report = {"max_residual": worst, "near_big_m": near_m,
              "ok": worst <= feas_tol and not near_m}
    if near_m:
        report["diagnostic"] = ("complementarity sides within 10% of the big-M "
                                "constant; increase big_m: " + ", ".join(near_m[:5]))
    return report


# ---- standalone bidding problem -------------------------------------------------


def build_bidding_standalone(case: NetworkCase, samples: ErrorSampleMatrix, i: int,
                        price_energy, price_reserve, radius: float
                        ) -> tuple[ConicProgram, MicrogridModelHandles]:
    """One microgrid's convex bidding problem under frozen per-period prices."""
    program = ConicProgram(f"mg{i}-standalone")
    n_t = case.n_periods
    dt = samples.delta_t
    pe = np.broadcast_to(np.asarray(price_energy, dtype=float), (n_t,))
    pr = np.broadcast_to(np.asarray(price_reserve, dtype=float), (n_t,))

    iso_stub = IsoModelHandles(
        pg=np.empty((0, n_t), dtype=int), rg=np.empty((0, n_t), dtype=int),
        price_e=np.empty((0, n_t), dtype=int), price_r=np.empty((0, n_t), dtype=int),
        rup=np.empty((len(case.microgrids), n_t), dtype=int),
        pex=np.empty((len(case.microgrids), n_t), dtype=int),
        balance_rows=[], reserve_rows=[], cap_rows=[], flow_rows=[],
        drcc_blocks=[], ptdf=np.zeros((0, 0)), flow_bus_ids=[], delta_t=dt)
    for t in range(n_t):
        iso_stub.rup[i, t] = program.add_var(f"mg{i}.reserve_bid[{t}]")
        iso_stub.pex[i, t] = program.add_var(f"mg{i}.grid_import[{t}]")

    h = build_microgrid_model(program, case, samples, i, radius, iso_stub)
    for t in range(n_t):
        program.add_obj_lin(int(h.pex[t]), dt * float(pe[t]))
        program.add_obj_lin(int(h.rup[t]), -dt * float(pr[t]))
    return program, h


def bilevel_consistency(eq: Equilibrium, case: NetworkCase,
                        samples: ErrorSampleMatrix, config: ScenarioConfig,
                        settings: SolverSettings | None = None) -> list[dict]:
    """Re-solve every bidding problem under the equilibrium prices.

    The bidding objective is piecewise linear in the reserve direction, so
    the standalone optimum can be a flat face when the supporting price sits
    on a segment slope; the bid deviation is therefore measured against the
    nearest point of the standalone optimal set (a second solve restricted to
    that face), which is zero exactly when the embedded bids are a rational
    response to the equilibrium prices.
    """
    settings = settings or SolverSettings()
    reports = []
    for i in range(len(case.microgrids)):
        program, h = build_bidding_standalone(case, samples, i, eq.price_energy[i],
                                         eq.price_reserve[i], config.radius)
        sol = solve_convex(program, settings)
        cost = float(sol.objective)
        cost_dev = abs(cost - eq.mg_costs[i]) / max(1.0, abs(cost))

        nearest = _nearest_optimal_response(program, h, sol, eq, i, settings)
        flex_dev = float(np.max(np.abs(sol.x[h.ps] - eq.flex_output[i])))
        imp_dev = float(np.max(np.abs(sol.x[h.pex] - eq.grid_import[i])))
        reports.append({"microgrid": i, "status": sol.status,
                        "bid_deviation_mw": nearest,
                        "flex_deviation_mw": flex_dev,
                        "import_deviation_mw": imp_dev,
                        "standalone_cost": cost,
                        "equilibrium_cost": float(eq.mg_costs[i]),
                        "cost_deviation_rel": cost_dev})
    return reports


def _nearest_optimal_response(program: ConicProgram, h: MicrogridModelHandles,
                              sol: SolutionPoint, eq: Equilibrium, i: int,
                              settings: SolverSettings) -> float:
    """Distance from the equilibrium bids to the standalone optimal face.

    The flexible output is strictly convex hence unique; pinning it reduces
    the optimal face to the linear directions, where the face membership is a
    linear cost equality.
    """
    face = program.copy()
    ps_star = sol.x[h.ps]
    for t, j in enumerate(h.ps):
        face.add_linear(f"face_ps_lo[{t}]", {int(j): 1.0}, ">=",
                        float(ps_star[t]) - 1e-6)
        face.add_linear(f"face_ps_hi[{t}]", {int(j): 1.0}, "<=",
                        float(ps_star[t]) + 1e-6)
    lin_cost = {j: c for j, c in face.obj_lin.items()}
    lin_value = sum(c * sol.x[j] for j, c in lin_cost.items())
    face.add_linear("face_cost", lin_cost, "<=",
                    lin_value + 1e-7 * max(1.0, abs(lin_value)))
    face.obj_quad = {}
    face.obj_lin = {}
    face.obj_const = 0.0
    for t, j in enumerate(h.rup):
        target = float(eq.reserve_bid[i][t])
        face.add_obj_quad(int(j), 1.0)
        face.add_obj_lin(int(j), -2.0 * target)
        face.obj_const += target * target
    near = solve_convex(face, settings)
    if near.status != "optimal":
        return float(np.max(np.abs(sol.x[h.rup] - eq.reserve_bid[i])))
    return float(np.sqrt(max(near.objective, 0.0)))


def solve_market(program: ConicProgram, settings: SolverSettings | None = None
                 ) -> tuple[BnbResult, Equilibrium]:
    from .solver import branch_and_bound

    m: MarketModel = program.market
    settings = settings or SolverSettings(
        feas_tol=m.config.feas_tol, gap_tol=m.config.gap_tol,
        integer_tol=m.config.integer_tol, node_limit=m.config.node_limit,
        time_limit=m.config.time_limit)
    result = branch_and_bound(program, settings)
    if result.solution.x is None:
        raise RuntimeError(f"market solve failed: {result.status}")
    return result, extract_equilibrium(program, result.solution)


def model_map(program: ConicProgram) -> str:
    """Constraint-family map of an assembled market program."""
    families: dict[str, int] = {}
    for con in program.linear:
        fam = con.name.split("[")[0]
        families[fam] = families.get(fam, 0) + 1
    for soc in program.socs:
        fam = soc.name.split("[")[0]
        families[fam] = families.get(fam, 0) + 1
    lines = ["family,rows,role"]
    roles = {
        "iso.balance": "energy balance across the network",
        "iso.reserve": "reserve adequacy per period",
        "gen": "generator capacity and cost structure",
        "line": "DC flow limits via injection sensitivities",
    }
    for fam in sorted(families):
        role = next((r for k, r in roles.items() if fam.startswith(k)), "")
        if ".cvar" in fam:
            role = "worst-case CVaR contract cap"
        elif ".pen" in fam:
            role = "worst-case expected shortfall penalty"
        elif ".stat" in fam:
            role = "bidding-level stationarity"
        elif ".pair" in fam:
            role = "complementarity gating (big-M)"
        elif ".balance" in fam:
            role = "microgrid internal balance"
        elif ".flex" in fam or ".bid" in fam:
            role = "bid capacity ranges"
        lines.append(f"{fam},{families[fam]},{role}")
    return "\n".join(lines) + "\n"
