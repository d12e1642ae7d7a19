import csv
import json
import math
import os
from importlib.resources import files

import numpy as np
import pytest

from hydrocascade import cli, harness
from hydrocascade.harness import (
    RunConfig, TruthPlant, baseline_policy, bound_violations, build_topology, load_config, profit_of,
    run_closed_loop,
)
from hydrocascade.hydro import ContractError
from hydrocascade.uncertainty import ForecastModel, SignalModel

CONFIGS = files("hydrocascade") / "configs"
QUICK = str(CONFIGS / "quick.yaml")


def quick(**kw):
    cfg = load_config(QUICK)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# ----------------------------------------------------------------------------
# configuration


def test_shipped_configs_load():
    for name in ("nominal.yaml", "no_opportunity.yaml", "quick.yaml"):
        cfg = load_config(str(CONFIGS / name))
        assert cfg.meso_interval % cfg.rt_interval == 0


@pytest.mark.parametrize("doc", [
    {"seed": 1},
    {"schema_version": 2},
    {"schema_version": 1, "bogus": {}},
    {"schema_version": 1, "cadence": {"rt_interval": 70.0, "meso_interval": 600.0}},
    {"schema_version": 1, "meso": {"P": 3}},
    {"schema_version": 1, "meso": {"tol": 0.0}},
    {"schema_version": 1, "realtime": {"horizon": "five"}},
])
def test_bad_configs_are_contract_errors(doc):
    with pytest.raises(ContractError):
        RunConfig.from_dict(doc)


def test_coarsening_must_divide_cell_counts():
    with pytest.raises(ContractError):
        build_topology(RunConfig(topology={"demo": {"n_cells": 9}}))


# ----------------------------------------------------------------------------
# plant and baseline


def test_baseline_is_finite_valid_and_repeatable(tmp_path):
    cfg = quick()
    a = baseline_policy(cfg, str(tmp_path / "a"))
    b = baseline_policy(cfg, str(tmp_path / "b"))
    assert math.isfinite(a.profit) and a.violations == 0
    assert a.deterministic() == b.deterministic()
    assert a.steps == cfg.ticks * cfg.rt_per_meso
    assert a.switch_counts == [0, 0]


def test_plant_never_goes_negative():
    cfg = quick(ticks=3)
    fine, coarse, levels = build_topology(cfg)
    plant, _, _ = harness._make_plant(cfg)
    for _ in range(cfg.ticks * cfg.rt_per_meso):
        plant.apply([(d.max_opening, 1.0) for d in fine.dams])
    assert all(s.A.min() >= 0 for snap in plant.snapshots for s in snap)


def test_plant_sanitizes_controls():
    plant, _, _ = harness._make_plant(quick())
    ctrl = plant.apply([(math.nan, 0.7), (99.0, 0.2)])
    vmax = plant.vmax
    assert ctrl == [(0.5 * vmax[0], 1.0), (vmax[1], 0.0)]


def test_observer_hides_the_future():
    path = harness._realized_path(quick())
    obs = harness.Observer(path)
    p = obs.prefix(240.0)
    assert p.times[-1] == 240.0 and len(p) == 3
    assert np.array_equal(p.inflow, path.inflow[:3])


def test_violation_count_example():
    fine, _, levels = build_topology(quick())
    from hydrocascade.cases import lake_states
    snap = lake_states(fine, levels)
    snap[0].A[2] = 0.05 * fine.reaches[0].width  # 5 cm deep, below h_min = 0.1
    n, worst = bound_violations(fine, [snap], quick().params)
    assert n == 1 and worst == pytest.approx(0.05)


# ----------------------------------------------------------------------------
# closed loop


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    res = run_closed_loop(quick(), str(out))
    return res, out


def test_closed_loop_outputs_and_metric_shapes(quick_run):
    res, out = quick_run
    for name in ("metrics.json", "timing.json", "plant_steps.csv", "plant_states.csv", "rt_log.csv",
                 "rt_latency.csv", "meso_log.csv"):
        assert (out / name).exists()
    m = json.loads((out / "metrics.json").read_text())
    assert m["violations"] >= 0 and m["steps"] == 10
    lat = json.loads((out / "timing.json").read_text())["latency"]
    assert lat["p50"] <= lat["p95"] <= lat["p99"] <= lat["max"]


def test_closed_loop_rerun_is_bit_identical(quick_run, tmp_path):
    _, out = quick_run
    run_closed_loop(quick(), str(tmp_path))
    for name in ("metrics.json", "plant_steps.csv", "plant_states.csv", "meso_log.csv", "rt_log.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_profit_recomputed_from_exported_csv(quick_run):
    res, out = quick_run
    with open(out / "plant_steps.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert abs(cli.recompute_profit(rows) - res.metrics.profit) <= 1e-10 * max(1.0, abs(res.metrics.profit))
    assert res.metrics.profit == profit_of(res.plant.steps)


def test_violations_recomputed_from_exported_states(quick_run):
    res, out = quick_run
    p = quick().params
    count = 0
    with open(out / "plant_states.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            A, Q, W = float(r["A"]), float(r["Q"]), float(r["width"])
            h = A / W
            u = Q / A if A > 0 else 0.0
            if h < p.h_min or h > p.h_max or abs(u) > p.u_max:
                count += 1
    assert count == res.metrics.violations


def test_no_opportunity_profits_match_the_baseline():
    cfg = load_config(str(CONFIGS / "no_opportunity.yaml"))
    loop = run_closed_loop(cfg).metrics
    base = baseline_policy(cfg)
    assert abs(loop.profit - base.profit) <= 0.01 * max(1.0, abs(base.profit))


def test_meso_failure_degrades_to_hold_last(monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("meso layer down")

    monkeypatch.setattr(harness, "meso_iterate", broken)
    res = run_closed_loop(quick())
    m = res.metrics
    assert m.degraded and m.degraded_steps == m.steps
    assert all(s.controls == res.plant.steps[0].controls for s in res.plant.steps)


def test_realtime_failure_degrades_only_the_rest_of_the_tick(monkeypatch):
    real = harness.run_realtime_segment

    def half(plant, lin, steps, *a, **k):
        real(plant, lin, 2, *a, **k)
        raise ArithmeticError("QP blew up")

    monkeypatch.setattr(harness, "run_realtime_segment", half)
    m = run_closed_loop(quick()).metrics
    assert m.degraded_steps == m.steps - 2 * quick().ticks


# ----------------------------------------------------------------------------
# command line


def run_cli(*argv):
    return cli.main(list(argv))


def test_unknown_command_and_bad_config_exit_2(tmp_path, capsys):
    assert run_cli("frobnicate") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 7\n")
    assert run_cli("--config", str(bad), "simulate") == 2
    assert run_cli("--config", str(tmp_path / "missing.yaml"), "simulate") == 2
    assert run_cli("--out", str(tmp_path / "none"), "report") == 2


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(harness, "run_fixed_policy", boom)
    assert run_cli("--config", QUICK, "--out", str(tmp_path), "simulate") == 3


def test_closed_loop_cli_twice_is_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("--config", QUICK, "--seed", "1", "--out", str(a), "closed-loop") == 0
    assert run_cli("closed-loop", "--config", QUICK, "--seed", "1", "--out", str(b)) == 0
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "plant_steps.csv").read_bytes() == (b / "plant_steps.csv").read_bytes()


def test_report_has_one_row_per_layer(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("--config", QUICK, "--out", str(out), "closed-loop") == 0
    assert run_cli("--config", QUICK, "--out", str(out), "report") == 0
    rows = cli.report_rows(str(out))
    assert [r[0] for r in rows] == ["meso", "realtime", "plant"]
    text = (out / "report.txt").read_text().splitlines()
    assert text[0].split() == ["layer", "items", "headline", "detail"]
    assert len(text) == 2 + len(rows)


def test_mlmc_with_zero_levels_is_plain_mc(tmp_path, capsys):
    from hydrocascade.uncertainty import cascade_level_solvers, mc_estimate
    from hydrocascade.hydro.core import total_volume

    assert run_cli("--config", QUICK, "--out", str(tmp_path), "mlmc", "--levels", "0", "--samples", "3") == 0
    printed = capsys.readouterr().out
    assert printed.startswith("plain MC estimate")
    cfg = quick()
    fine, _, levels = build_topology(cfg)
    solvers = cascade_level_solvers(fine, levels, [(0.5 * d.max_opening, 1.0) for d in fine.dams], 300.0, 1)
    est, _ = mc_estimate(solvers[0][0], 3, lambda s: total_volume(fine, s), cfg.forecast, cfg.seed, 300.0,
                         cfg.rt_interval)
    assert repr(est) in printed
    with open(tmp_path / "mlmc.csv") as fh:
        assert next(fh).strip() == "level,samples,mean_correction,variance,failures"


def test_simulate_and_meso_run_write_their_files(tmp_path):
    assert run_cli("--config", QUICK, "--out", str(tmp_path / "s"), "simulate") == 0
    assert (tmp_path / "s" / "plant_steps.csv").exists()
    assert run_cli("--config", QUICK, "--out", str(tmp_path / "m"), "meso-run", "--generations", "1") == 0
    plan = json.loads((tmp_path / "m" / "best_plan.json").read_text())
    assert len(plan["grid"]) == len(plan["v"][0]) + 1


def test_offline_build_cli(tmp_path):
    out = tmp_path / "o"
    assert run_cli("--config", QUICK, "--out", str(out), "offline-build", "--budget", "1") == 0
    assert (out / "catalog.jsonl").exists() and (out / "build_report.txt").exists()
    assert run_cli("--config", QUICK, "--out", str(out), "report") == 0
    assert cli.report_rows(str(out))[0][0] == "offline"
