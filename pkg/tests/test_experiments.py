"""Out-of-sample counting, scenario modes, sweeps and artifacts."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from drmarket.data_io import (ErrorSampleMatrix, ScenarioConfig,
                              generate_skewed_samples)
from drmarket.experiments import (grid_search, out_of_sample, player_sweep,
                                  plot_report, radius_sweep, run_scenario,
                                  split_samples, write_experiment)

from conftest import make_two_bus_two_mg_case


def _fast_cfg(desk_config, **kw):
    base = dict(n_samples=30, n_oos=60, node_limit=40, n_iterations=6, n_init=3)
    base.update(kw)
    return desk_config.replace(**base)


# ---- counting ---------------------------------------------------------------


def test_oos_zero_bids_zero_rate(tiny_samples):
    report = out_of_sample(np.zeros((2, tiny_samples.n_periods)), tiny_samples,
                           1.5, 0.5)
    assert report.joint_rate == 0.0
    assert np.all(report.individual_rates == 0.0)


def test_oos_saturated_rate():
    samples = ErrorSampleMatrix(np.full((6, 2), 0.9), ["a", "b"], 0.5)
    report = out_of_sample(np.full((3, 2), 5.0), samples, 1.5, 0.5)
    assert report.joint_rate == 1.0


def test_oos_hand_count():
    # single microgrid, three tests with shortfalls {1.4, 1.6, 1.51} vs 1.5
    bids = np.array([[1.0, 1.0]])
    zeta = np.array([[1.4, 1.4], [1.6, 1.6], [1.51, 1.51]]) / 2.0
    samples = ErrorSampleMatrix(zeta, ["a", "b"], 1.0)
    report = out_of_sample(bids, samples, 1.5, 1.0)
    np.testing.assert_allclose(report.under_delivered[:, 0],
                               [1.4, 1.6, 1.51])
    assert report.joint_rate == pytest.approx(2.0 / 3.0)


def test_oos_exact_integer_recount():
    rng = np.random.default_rng(0)
    samples = ErrorSampleMatrix(rng.uniform(-0.5, 1.0, (37, 3)), list("abc"), 0.5)
    bids = rng.uniform(0, 2, (4, 3))
    report = out_of_sample(bids, samples, 1.0, 0.5)
    recount = report.per_microgrid.any(axis=1).sum() / report.n_tests
    assert report.joint_rate == recount


def test_oos_overlap_fingerprint_warns(tiny_samples):
    with pytest.warns(UserWarning, match="training"):
        out_of_sample(np.ones((1, tiny_samples.n_periods)), tiny_samples, 1.5,
                      0.5, train_samples=tiny_samples)


def test_split_requires_enough_rows(desk_config):
    small = generate_skewed_samples(0, 10, 4)
    with pytest.raises(ValueError, match="rows"):
        split_samples(small, desk_config)


# ---- scenario modes ----------------------------------------------------------


def test_single_player_bounds_coincide(desk_config):
    # one player: the decomposition interval collapses and both bound modes
    # solve the identical model
    case = make_two_bus_two_mg_case().with_microgrid_hosts(["m1"])
    samples = generate_skewed_samples(12, 120, case.n_periods)
    cfg = _fast_cfg(desk_config)
    a = run_scenario(case, samples, cfg.replace(mode="joint-bound"))
    b = run_scenario(case, samples, cfg.replace(mode="bonferroni-bound"))
    assert a.eps_ind == pytest.approx(b.eps_ind)
    np.testing.assert_allclose(a.equilibrium.reserve_bid,
                               b.equilibrium.reserve_bid, atol=1e-9)
    assert a.oos.joint_rate == b.oos.joint_rate


def test_bound_mode_ordering(desk_case, desk_samples, desk_config):
    cfg = desk_config
    joint = run_scenario(desk_case, desk_samples, cfg.replace(mode="joint-bound"))
    bonf = run_scenario(desk_case, desk_samples,
                        cfg.replace(mode="bonferroni-bound"))
    assert joint.equilibrium.reserve_bid.sum() >= \
        bonf.equilibrium.reserve_bid.sum() - 1e-7
    assert joint.oos.joint_rate >= bonf.oos.joint_rate - 0.05


def test_scenario_determinism(desk_case, desk_samples, desk_config, tmp_path):
    case = desk_case.with_microgrid_hosts(["m1", "m2"])
    cfg = _fast_cfg(desk_config, mode="bayesian", seed=11, n_iterations=3)
    a = run_scenario(case, desk_samples, cfg)
    b = run_scenario(case, desk_samples, cfg)
    assert np.array_equal(a.eps_ind, b.eps_ind)
    assert a.oos.joint_rate == b.oos.joint_rate
    np.testing.assert_array_equal(a.equilibrium.reserve_bid,
                                  b.equilibrium.reserve_bid)
    pa = write_experiment(a, tmp_path / "runA")
    pb = write_experiment(b, tmp_path / "runB")
    assert pa.read_bytes() == pb.read_bytes()


# ---- sweeps -------------------------------------------------------------------


def test_radius_sweep_shape(desk_case, desk_samples, desk_config):
    case = desk_case.with_microgrid_hosts(["m1", "m2", "m3", "m4"])
    cfg = _fast_cfg(desk_config, mode="joint-bound")
    results = radius_sweep(case, desk_samples, cfg, [1e-4, 1e-2, 1e-1])
    rates = [r.oos.joint_rate for r in results[:-1]]
    assert all(b <= a + 0.05 for a, b in zip(rates, rates[1:]))
    bench = results[-1]
    assert bench.mode == "no-regulation"
    bench_under = bench.oos.under_delivered.sum(axis=1).mean()
    for r in results[:-1]:
        assert bench_under >= r.oos.under_delivered.sum(axis=1).mean() - 1e-9


def test_player_sweep_runs_and_orders(desk_case, desk_samples, desk_config):
    cfg = _fast_cfg(desk_config, mode="joint-bound", seed=1)
    results = player_sweep(desk_case, desk_samples, cfg, [2, 4], n_repeats=1)
    assert [r.players for r in results] == [2, 4]
    for r in results:
        assert r.solver_status in ("optimal", "node-limit", "time-limit")


def test_player_sweep_rejects_excess(desk_case, desk_samples, desk_config):
    with pytest.raises(ValueError, match="players"):
        player_sweep(desk_case, desk_samples, desk_config, [8], n_repeats=1)


def test_grid_search_spacing_and_count(desk_case, desk_samples, desk_config):
    case = desk_case.with_microgrid_hosts(["m1", "m2", "m3", "m4"])
    cfg = _fast_cfg(desk_config, n_grid=5)
    result = grid_search(case, desk_samples, cfg)
    assert result.n_model_solves == 5
    log = result.observation_log
    points = np.array([p[0] for p in log.points])
    spacing = np.diff(points)
    expected = (4 - 1) * 0.2 / (4 * (5 - 1))
    np.testing.assert_allclose(spacing, expected, rtol=1e-9)
    assert points[0] == pytest.approx(0.05)
    assert points[-1] == pytest.approx(0.2)


# ---- artifacts -----------------------------------------------------------------


def test_write_experiment_files(desk_case, desk_samples, desk_config, tmp_path):
    case = desk_case.with_microgrid_hosts(["m1", "m2"])
    result = run_scenario(case, desk_samples,
                          _fast_cfg(desk_config, mode="joint-bound"))
    out = tmp_path / "exp"
    write_experiment(result, out)
    table = pd.read_csv(out / "results.csv")
    assert table.loc[0, "players"] == 2
    assert (out / f"oos_{result.scenario_id}.csv").exists()
    assert (out / "timing.json").exists()


def test_plot_report_writes_svgs(tmp_path):
    df = pd.DataFrame({
        "scenario": [f"s{j}" for j in range(4)],
        "mode": ["joint-bound"] * 3 + ["no-regulation"],
        "players": [4, 4, 4, 4],
        "radius": [1e-4, 1e-2, 1e-1, 1e-2],
        "joint_rate": [0.3, 0.2, 0.05, 0.4],
        "under_delivered_mean": [1.0, 0.8, 0.2, 1.5],
        "under_delivered_q20": [0.5, 0.4, 0.1, 0.7],
        "under_delivered_q80": [1.5, 1.2, 0.3, 2.2],
        "iso_cost": [10.0, 11.0, 12.0, 9.0],
        "mg_cost_mean": [1.0, 1.1, 1.2, 0.9],
        "n_model_solves": [1, 1, 1, 1],
    })
    csv = tmp_path / "results.csv"
    df.to_csv(csv, index=False)
    written = plot_report(csv, tmp_path / "figs")
    assert any(p.name == "radius_sweep.svg" for p in written)
    assert all(p.exists() for p in written)


def test_cli_run_smoke(tmp_path):
    from drmarket.cli import main

    out = tmp_path / "out"
    code = main(["run", "--mode", "c2", "--out", str(out)])
    assert code == 0
    assert (out / "results.csv").exists()


def test_cli_grid_and_report(tmp_path, desk_config):
    from drmarket.cli import main

    cfg = desk_config.replace(n_grid=4, n_samples=30, n_oos=40)
    cfg_path = tmp_path / "cfg.json"
    cfg.to_json(cfg_path)
    out = tmp_path / "out"
    assert main(["grid-search", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    assert main(["report", str(out / "results.csv"),
                 "--out", str(out / "figs")]) == 0


def test_cli_validate_vi(tmp_path, desk_config):
    from drmarket.cli import main

    cfg = desk_config.replace(n_samples=20, n_oos=20)
    cfg_path = tmp_path / "cfg.json"
    cfg.to_json(cfg_path)
    assert main(["validate-vi", "--config", str(cfg_path),
                 "--out", str(tmp_path / "vi")]) == 0
