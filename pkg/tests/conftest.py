import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from drmarket.data_io import (Branch, Bus, Generator, Microgrid, NetworkCase,
                              ScenarioConfig, fixture_path,
                              generate_skewed_samples, load_error_samples,
                              load_network_case)


@pytest.fixture(scope="session")
def desk_case():
    return load_network_case(fixture_path("desk_case"))


@pytest.fixture(scope="session")
def desk_samples():
    return load_error_samples(fixture_path("desk_samples.csv"))


@pytest.fixture(scope="session")
def desk_config():
    return ScenarioConfig.from_json(fixture_path("desk_config.json"))


def make_two_bus_case(n_periods=2, gen_cost=1.0, gen_reserve_cost=15.0,
                      mg_voll=1.0, flow_limit=25.0, reserve_req=2.0,
                      load_b1=2.0, load_b2=2.0, flex=3.0, gamma=0.5,
                      mg_quad=1.0, mg_reserve_cost=5.0):
    """Minimal case: slack generator bus plus one microgrid bus."""
    ones = np.ones(n_periods)
    return NetworkCase(
        buses=[Bus("b1", True), Bus("b2", False)],
        branches=[Branch("l1", "b1", "b2", 10.0, flow_limit)],
        generators=[Generator("g1", "b1", gen_cost, gen_reserve_cost, 40.0)],
        microgrids=[Microgrid("m1", "b2", mg_quad, mg_reserve_cost, flex, flex,
                              gamma, mg_voll)],
        load_mw={"b1": load_b1 * ones, "b2": load_b2 * ones},
        reserve_requirement_mw=reserve_req * ones,
        period_labels=[f"t{j}" for j in range(n_periods)])


def make_two_bus_two_mg_case(n_periods=2, reserve_req=1.5):
    """Two microgrids sharing the load bus, heterogeneous risk and range."""
    ones = np.ones(n_periods)
    return NetworkCase(
        buses=[Bus("b1", True), Bus("b2", False)],
        branches=[Branch("l1", "b1", "b2", 10.0, 25.0)],
        generators=[Generator("g1", "b1", 1.0, 15.0, 40.0)],
        microgrids=[
            Microgrid("m1", "b2", 1.0, 5.0, 3.0, 3.0, 0.5, 1.0),
            Microgrid("m2", "b2", 1.2, 5.0, 2.5, 2.5, 0.5, 1.4),
        ],
        load_mw={"b1": 2.0 * ones, "b2": 2.0 * ones},
        reserve_requirement_mw=reserve_req * ones,
        period_labels=[f"t{j}" for j in range(n_periods)])


@pytest.fixture
def two_bus_case():
    return make_two_bus_case()


@pytest.fixture
def tiny_samples():
    return generate_skewed_samples(3, 5, 2)
