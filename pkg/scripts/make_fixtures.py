"""Regenerate the bundled fixtures (desk case, 30-bus case, sample files).

Run from the repository root:  python scripts/make_fixtures.py
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from drmarket.data_io import (Branch, Bus, Generator, Microgrid, NetworkCase,
                              generate_skewed_samples, save_error_samples,
                              save_network_case)

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "drmarket" / "fixtures"


def desk_case() -> NetworkCase:
    buses = [Bus("b1", True)] + [Bus(f"b{j}", False) for j in range(2, 7)]
    # limits sized to the ~2-4 MW flow scale so some lines congest and buses
    # see different marginal prices (keeps the players heterogeneous)
    branches = [
        Branch("l1", "b1", "b2", 10.0, 0.2),
        Branch("l2", "b2", "b3", 9.0, 0.18),
        Branch("l3", "b3", "b4", 11.0, 0.2),
        Branch("l4", "b4", "b5", 10.0, 0.18),
        Branch("l5", "b5", "b6", 9.5, 0.18),
        Branch("l6", "b6", "b1", 10.5, 0.2),
        Branch("l7", "b2", "b5", 8.0, 0.15),
    ]
    reserve_costs = [15.0, 14.2, 15.8, 14.6, 15.4, 16.2]
    generators = [Generator(f"g{j}", f"b{j}", 1.0, reserve_costs[j - 1], 40.0)
                  for j in range(1, 7)]
    # hosts ordered so the default 4-player game sits at pure load buses;
    # flexible ranges differ per player so bid profiles (and therefore
    # violation events) stay heterogeneous across the fleet
    microgrids = [
        Microgrid("m1", "b2", 1.0, 5.0, 3.2, 3.2, 0.5, 1.0),
        Microgrid("m2", "b3", 1.0, 5.0, 3.0, 3.0, 0.5, 1.2),
        Microgrid("m3", "b5", 1.0, 5.0, 3.1, 3.1, 0.5, 0.9),
        Microgrid("m4", "b6", 1.0, 5.0, 3.4, 3.4, 0.5, 1.4),
        Microgrid("m5", "b2", 1.0, 5.0, 3.0, 3.0, 0.5, 1.1),
        Microgrid("m6", "b3", 1.0, 5.0, 3.3, 3.3, 0.5, 1.3),
    ]
    load = {
        "b1": np.array([2.6, 1.4, 2.0, 2.0]),
        "b2": np.array([1.0, 2.9, 2.1, 2.0]),
        "b3": np.array([2.1, 1.0, 2.9, 2.0]),
        "b4": np.array([2.0, 2.0, 1.3, 2.7]),
        "b5": np.array([2.9, 2.0, 1.1, 2.0]),
        "b6": np.array([1.1, 2.1, 1.9, 2.9]),
    }
    reserve_req = np.array([5.5, 4.5, 5.5, 5.0])
    return NetworkCase(buses, branches, generators, microgrids, load,
                       reserve_req, ["t0", "t1", "t2", "t3"])


# 41 branch endpoints of the standard 30-bus test network
_EDGES_30 = [
    (1, 2), (1, 3), (2, 4), (3, 4), (2, 5), (2, 6), (4, 6), (5, 7), (6, 7),
    (6, 8), (6, 9), (6, 10), (9, 11), (9, 10), (4, 12), (12, 13), (12, 14),
    (12, 15), (12, 16), (14, 15), (16, 17), (15, 18), (18, 19), (19, 20),
    (10, 20), (10, 17), (10, 21), (10, 22), (21, 22), (15, 23), (22, 24),
    (23, 24), (24, 25), (25, 26), (25, 27), (28, 27), (27, 29), (27, 30),
    (29, 30), (8, 28), (6, 28),
]
_GEN_BUSES_30 = (1, 2, 5, 8, 11, 13)


def case30() -> NetworkCase:
    rng = np.random.default_rng(30)
    buses = [Bus(f"b{j}", j == 1) for j in range(1, 31)]
    branches = [Branch(f"l{k}", f"b{f}", f"b{t}",
                       float(np.round(1.0 / rng.uniform(0.05, 0.4), 4)), 32.0)
                for k, (f, t) in enumerate(_EDGES_30, start=1)]
    generators = [Generator(f"g{k}", f"b{b}", 1.0,
                             float(np.round(15.0 + 0.4 * k - 1.4, 4)), 80.0)
                  for k, b in enumerate(_GEN_BUSES_30, start=1)]
    # microgrid-capable load buses: the 24 buses without a plant, 2 MW average
    load_buses = [j for j in range(1, 31) if j not in _GEN_BUSES_30]
    n_t = 12
    load = {}
    for j in range(1, 31):
        if j in _GEN_BUSES_30:
            load[f"b{j}"] = np.zeros(n_t)
        else:
            shape = 1.0 + 0.25 * np.sin(np.linspace(0, 2 * np.pi, n_t,
                                                    endpoint=False)
                                        + rng.uniform(0, 2 * np.pi))
            profile = 2.0 * shape / shape.mean()
            load[f"b{j}"] = np.round(profile, 6)
    microgrids = [Microgrid(f"m{k}", f"b{b}", 1.0, 5.0, 3.0, 3.0, 0.5, 1.0)
                  for k, b in enumerate(load_buses, start=1)]
    total = np.sum([load[f"b{j}"] for j in load_buses], axis=0)
    reserve_req = np.round(0.35 * total, 6)
    return NetworkCase(buses, branches, generators, microgrids, load,
                       reserve_req, [f"t{j}" for j in range(n_t)])


def desk_config():
    from drmarket.data_io import ScenarioConfig

    # contract cap and radius sized to the desk fixture's exposure scale
    return ScenarioConfig(radius=0.002, reserve_shortfall_cap=0.45,
                          reserve_in_flow=False, n_periods=4, n_samples=50,
                          n_oos=100)


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    save_network_case(desk_case(), FIXTURES / "desk_case")
    save_network_case(case30(), FIXTURES / "case30")
    save_error_samples(generate_skewed_samples(20240817, 200, 4),
                       FIXTURES / "desk_samples.csv")
    save_error_samples(generate_skewed_samples(20240818, 360, 12),
                       FIXTURES / "samples30.csv")
    desk_config().to_json(FIXTURES / "desk_config.json")
    print(f"fixtures written under {FIXTURES}")


if __name__ == "__main__":
    main()
