"""Data ingestion and generation: error samples, network cases, result tables.

All file formats are plain CSV with one header row.  A network case is a
directory of four entity tables (buses, branches, generators, microgrids)
plus profiles.csv carrying per-period net load for every bus and, optionally,
the per-period reserve requirement.  Numeric I/O uses %.17g so write/load
round-trips are bit exact.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

_FLOAT_FMT = "%.17g"


class FormatError(ValueError):
    """Malformed input file (ragged rows, bad cross references, ...)."""


# ---- error samples ---------------------------------------------------------


@dataclass
class ErrorSampleMatrix:
    """Per-unit forecast-error multipliers, one row per historical sample."""

    samples: np.ndarray
    timestamps: list[str]
    delta_t: float = 0.5

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise FormatError("sample matrix must be 2-d and non-empty")
        if not np.all(np.isfinite(self.samples)):
            raise FormatError("sample matrix contains non-finite entries")
        if len(self.timestamps) != self.samples.shape[1]:
            raise FormatError("one timestamp per column required")
        if self.delta_t <= 0:
            raise FormatError("delta_t must be positive")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def n_periods(self):
        return self.samples.shape[1]

    def rows(self, start, stop) -> "ErrorSampleMatrix":
        return ErrorSampleMatrix(self.samples[start:stop].copy(), list(self.timestamps),
                                 self.delta_t)


def load_error_samples(path, delta_t: float = 0.5) -> ErrorSampleMatrix:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    width = len(header)
    rows = []
    for r, ln in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != width:
            raise FormatError(f"{path}: row {r} has {len(cells)} cells, expected {width}")
        parsed = []
        for c, cell in enumerate(cells, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell at row {r}, column {c}: "
                                  f"{cell!r}") from None
        rows.append(parsed)
    if not rows:
        raise FormatError(f"{path}: no sample rows")
    return ErrorSampleMatrix(np.array(rows), header, delta_t)


def save_error_samples(samples: ErrorSampleMatrix, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(samples.timestamps) + "\n")
        for row in samples.samples:
            fh.write(",".join(_FLOAT_FMT % v for v in row) + "\n")


def generate_synthetic_samples(seed: int, n_samples: int, n_periods: int,
                               spread: float) -> ErrorSampleMatrix:
    """Zero-centred clipped normal multipliers; pure function of its arguments."""
    if n_samples < 1 or n_periods < 1:
        raise ValueError("n_samples and n_periods must be >= 1")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, spread, size=(n_samples, n_periods)) if spread > 0 else \
        np.zeros((n_samples, n_periods))
    mat = np.clip(raw, -1.0, 1.0)
    labels = [f"t{j}" for j in range(n_periods)]
    return ErrorSampleMatrix(mat, labels)


def generate_skewed_samples(seed: int, n_samples: int, n_periods: int,
                            shortfall_weight: float = 0.30,
                            severity_range: tuple[float, float] = (0.5, 1.0),
                            concentration: float = 0.8) -> ErrorSampleMatrix:
    """Right-skewed multipliers for the bundled fixtures.

    Convention: one multiplier per market period, positive values meaning
    reserve shortfall.  Most rows are mild, truncated shifted-Beta errors; a
    ``shortfall_weight`` fraction are shortfall days with severity drawn from
    a thin-tailed Beta over ``severity_range`` and the shortfall concentrated
    in one or two periods (Gamma-weighted shape, smaller ``concentration``
    meaning spikier days), so different bid profiles are exposed to different
    days.  Everything is clipped to [-1, 1].
    """
    rng = np.random.default_rng(seed)
    bulk = 0.8 * rng.beta(2.0, 3.0, size=(n_samples, n_periods)) - 0.05
    lo, hi = severity_range
    severity = lo + (hi - lo) * rng.beta(1.1, 2.0, size=(n_samples, 1))
    g = rng.gamma(concentration, size=(n_samples, n_periods))
    shape = 0.25 + 0.75 * n_periods * g / g.sum(axis=1, keepdims=True)
    pick = rng.random(n_samples) < shortfall_weight
    mat = np.clip(np.where(pick[:, None], severity * shape, bulk), -1.0, 1.0)
    labels = [f"t{j}" for j in range(n_periods)]
    return ErrorSampleMatrix(mat, labels)


# ---- network case -----------------------------------------------------------


@dataclass
class Bus:
    bus_id: str
    is_slack: bool


@dataclass
class Branch:
    branch_id: str
    from_bus: str
    to_bus: str
    susceptance: float
    flow_limit_mw: float


@dataclass
class Generator:
    gen_id: str
    bus: str
    cost_energy_quad: float   # $/(MWh)^2 on dispatched energy
    cost_reserve: float       # $/MWh of reserve capacity
    capacity_mw: float


@dataclass
class Microgrid:
    mg_id: str
    bus: str
    cost_energy_quad: float
    cost_reserve: float
    flex_max_mw: float
    flex_min_mw: float        # magnitude of the downward range
    reserve_fraction: float
    voll: float


@dataclass
class NetworkCase:
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    microgrids: list[Microgrid]
    load_mw: dict[str, np.ndarray]          # bus id -> per-period net load
    reserve_requirement_mw: np.ndarray | None = None
    period_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        problems = self.diagnostics()
        if problems:
            raise FormatError("; ".join(problems))

    def diagnostics(self) -> list[str]:
        out = []
        ids = [b.bus_id for b in self.buses]
        bus_set = set(ids)
        if len(bus_set) != len(ids):
            out.append("duplicate bus ids")
        slacks = [b.bus_id for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            out.append(f"exactly one slack bus required, found {len(slacks)}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in bus_set:
                    out.append(f"branch {br.branch_id}: dangling bus reference {end}")
            if br.susceptance == 0:
                out.append(f"branch {br.branch_id}: zero susceptance")
            if br.flow_limit_mw <= 0:
                out.append(f"branch {br.branch_id}: non-positive flow limit")
        for g in self.generators:
            if g.bus not in bus_set:
                out.append(f"generator {g.gen_id}: dangling bus reference {g.bus}")
            if g.capacity_mw <= 0:
                out.append(f"generator {g.gen_id}: non-positive capacity")
        for m in self.microgrids:
            if m.bus not in bus_set:
                out.append(f"microgrid {m.mg_id}: dangling bus reference {m.bus}")
            if m.flex_max_mw <= 0:
                out.append(f"microgrid {m.mg_id}: non-positive flexible range")
            if not 0.0 <= m.reserve_fraction <= 1.0:
                out.append(f"microgrid {m.mg_id}: reserve fraction outside [0, 1]")
            if m.voll < 0:
                out.append(f"microgrid {m.mg_id}: negative value of lost load")
        for b in self.buses:
            if b.bus_id not in self.load_mw:
                out.append(f"bus {b.bus_id}: missing profile column")
        lengths = {len(v) for v in self.load_mw.values()}
        if len(lengths) > 1:
            out.append("profile columns have inconsistent lengths")
        return out

    @property
    def n_periods(self):
        return len(next(iter(self.load_mw.values())))

    def bus_index(self) -> dict[str, int]:
        return {b.bus_id: j for j, b in enumerate(self.buses)}

    def microgrid_buses(self) -> set[str]:
        return {m.bus for m in self.microgrids}

    def microgrid_load(self, mg: Microgrid) -> np.ndarray:
        """Bus load served behind the microgrid, split if the bus is shared."""
        sharing = sum(1 for m in self.microgrids if m.bus == mg.bus)
        return np.asarray(self.load_mw[mg.bus], dtype=float) / sharing

    def passive_load(self) -> np.ndarray:
        """Total per-period load at buses not hosting a microgrid."""
        hosts = self.microgrid_buses()
        total = np.zeros(self.n_periods)
        for bus_id, profile in self.load_mw.items():
            if bus_id not in hosts:
                total += np.asarray(profile, dtype=float)
        return total

    def reserve_requirement(self, factor: float = 0.1) -> np.ndarray:
        if self.reserve_requirement_mw is not None:
            return np.asarray(self.reserve_requirement_mw, dtype=float)
        total = np.zeros(self.n_periods)
        for profile in self.load_mw.values():
            total += np.asarray(profile, dtype=float)
        return factor * total

    def with_microgrid_hosts(self, mg_ids: list[str]) -> "NetworkCase":
        """Restrict the player set to the named microgrids (others go passive)."""
        keep = [m for m in self.microgrids if m.mg_id in set(mg_ids)]
        if len(keep) != len(mg_ids):
            missing = set(mg_ids) - {m.mg_id for m in keep}
            raise KeyError(f"unknown microgrids: {sorted(missing)}")
        return NetworkCase(self.buses, self.branches, self.generators, keep,
                           self.load_mw, self.reserve_requirement_mw,
                           self.period_labels)


def load_network_case(directory) -> NetworkCase:
    directory = Path(directory)
    tables = {}
    for name in ("buses", "branches", "generators", "microgrids", "profiles"):
        path = directory / f"{name}.csv"
        if not path.exists():
            raise FormatError(f"{directory}: missing {name}.csv")
        tables[name] = pd.read_csv(path, dtype={0: str})

    buses = [Bus(str(r.bus_id), bool(int(r.is_slack)))
             for r in tables["buses"].itertuples()]
    branches = [Branch(str(r.branch_id), str(r.from_bus), str(r.to_bus),
                       float(r.susceptance), float(r.flow_limit_mw))
                for r in tables["branches"].itertuples()]
    generators = [Generator(str(r.gen_id), str(r.bus), float(r.cost_energy_quad),
                            float(r.cost_reserve), float(r.capacity_mw))
                  for r in tables["generators"].itertuples()]
    microgrids = [Microgrid(str(r.mg_id), str(r.bus), float(r.cost_energy_quad),
                            float(r.cost_reserve), float(r.flex_max_mw),
                            float(r.flex_min_mw), float(r.reserve_fraction),
                            float(r.voll))
                  for r in tables["microgrids"].itertuples()]

    prof = tables["profiles"]
    period_labels = [str(p) for p in prof["period"]]
    load = {}
    for col in prof.columns:
        if col.startswith("load_"):
            load[col[len("load_"):]] = prof[col].to_numpy(dtype=float)
    rreq = prof["reserve_req"].to_numpy(dtype=float) if "reserve_req" in prof.columns \
        else None
    return NetworkCase(buses, branches, generators, microgrids, load, rreq,
                       period_labels)


def save_network_case(case: NetworkCase, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([{"bus_id": b.bus_id, "is_slack": int(b.is_slack)}
                  for b in case.buses]).to_csv(directory / "buses.csv", index=False)
    pd.DataFrame([asdict(b) for b in case.branches]).to_csv(
        directory / "branches.csv", index=False, float_format=_FLOAT_FMT)
    pd.DataFrame([asdict(g) for g in case.generators]).to_csv(
        directory / "generators.csv", index=False, float_format=_FLOAT_FMT)
    pd.DataFrame([asdict(m) for m in case.microgrids]).to_csv(
        directory / "microgrids.csv", index=False, float_format=_FLOAT_FMT)
    prof = {"period": case.period_labels or
            [f"t{j}" for j in range(case.n_periods)]}
    for b in case.buses:
        prof[f"load_{b.bus_id}"] = case.load_mw[b.bus_id]
    if case.reserve_requirement_mw is not None:
        prof["reserve_req"] = case.reserve_requirement_mw
    pd.DataFrame(prof).to_csv(directory / "profiles.csv", index=False,
                              float_format=_FLOAT_FMT)


# ---- result tables -----------------------------------------------------------


def write_results(table: pd.DataFrame, path):
    """Write a result table; column order is preserved exactly as given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=_FLOAT_FMT)


def load_results(path) -> pd.DataFrame:
    return pd.read_csv(path)


# ---- scenario configuration ---------------------------------------------------

MODES = ("bonferroni-bound", "joint-bound", "bayesian", "no-regulation")
EPSILON_MODES = ("tied-scalar", "per-player")


@dataclass
class ScenarioConfig:
    radius: float = 0.035
    joint_rate: float = 0.2
    reserve_shortfall_cap: float = 1.5
    n_periods: int = 4
    n_samples: int = 50
    n_oos: int = 100
    n_iterations: int = 20
    n_grid: int = 20
    big_m: float = 1e4
    mode: str = "bayesian"
    epsilon_mode: str = "tied-scalar"
    seed: int = 0
    feas_tol: float = 1e-7
    gap_tol: float = 1e-6
    integer_tol: float = 1e-5
    price_cap: float = 200.0
    reserve_in_flow: bool = True
    game_objective: str = "social"
    potential_form: str = "full"
    stop_tol: float = 0.05
    n_init: int = 4
    node_limit: int = 60
    time_limit: float = 300.0
    reserve_requirement_factor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.joint_rate < 1.0:
            raise ValueError("joint violation rate must lie in (0, 1)")
        if self.radius < 0:
            raise ValueError("ambiguity radius must be non-negative")
        if min(self.n_oos, self.n_iterations, self.n_grid) < 1:
            raise ValueError("test/iteration/grid counts must be >= 1")
        if self.big_m <= 0:
            raise ValueError("big-M must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epsilon_mode not in EPSILON_MODES:
            raise ValueError(f"epsilon_mode must be one of {EPSILON_MODES}")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def replace(self, **kw) -> "ScenarioConfig":
        data = asdict(self)
        data.update(kw)
        return ScenarioConfig(**data)


# ---- bundled fixtures ----------------------------------------------------------


def fixture_path(name: str) -> Path:
    root = importlib.resources.files("drmarket") / "fixtures"
    path = Path(str(root / name))
    if not path.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return path
