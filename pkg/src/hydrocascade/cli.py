"""Command line entry point.

    hydrocascade [--config PATH] [--seed N] [--out DIR] COMMAND [options]

Commands: simulate, offline-build, meso-run, closed-loop, mlmc, report.
Exit status: 0 on success, 2 on a configuration error (or bad usage),
3 on a numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from .hydro.core import ContractError, DefectError, DryCellError
from .plsi import NonconvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

NUMERICAL = (NonconvergenceError, DefectError, DryCellError, FloatingPointError, ArithmeticError)


def _common():
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="hydrocascade", parents=[common],
                                     description="Three-tier control of a river/dam cascade.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    sub.add_parser("simulate", parents=[common], help="plain forward run of the plant with fixed controls")
    p = sub.add_parser("offline-build", parents=[common], help="build a schedule catalog")
    p.add_argument("--budget", type=int, help="number of lattice points")
    p = sub.add_parser("meso-run", parents=[common], help="evolve the meso ensemble for one window")
    p.add_argument("--generations", type=int, default=3)
    p = sub.add_parser("closed-loop", parents=[common], help="three-tier closed loop against the plant")
    p.add_argument("--baseline", action="store_true", help="also run the constant baseline into OUT/baseline")
    p = sub.add_parser("mlmc", parents=[common], help="multilevel Monte Carlo estimate of stored volume")
    p.add_argument("--levels", type=int, help="index of the finest level (0 gives plain Monte Carlo)")
    p.add_argument("--samples", help="comma separated sample counts, coarse to fine")
    sub.add_parser("report", parents=[common], help="summarise the logs of a finished run")
    return parser


def _config(args):
    from .harness import RunConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = int(args.seed)
    out = getattr(args, "out", None) or cfg.out or os.path.join("runs", args.command)
    cfg.out = out
    return cfg


# ----------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    from .harness import build_topology, run_fixed_policy

    fine, _, _ = build_topology(cfg)
    frac = float(cfg.simulate.get("opening_fraction", 0.5))
    z = float(cfg.simulate.get("z", 1.0))
    if not 0 <= frac <= 1 or z not in (0.0, 1.0):
        raise ContractError("simulate needs opening_fraction in [0, 1] and z in {0, 1}")
    m = run_fixed_policy(cfg, [(frac * d.max_opening, z) for d in fine.dams], cfg.out)
    print(f"simulate: {m.steps} steps, profit {m.profit:.6g}, violations {m.violations}")


def cmd_offline_build(cfg, args):
    from .harness import OFFLINE_STREAM, build_topology
    from .ocp import SolverChoice
    from .offline import CatalogBuildConfig, build_catalog
    from .uncertainty import derive_seed

    _, coarse, levels = build_topology(cfg)
    budget = args.budget if getattr(args, "budget", None) is not None else max(cfg.offline_budget, 1)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "catalog.jsonl")
    if os.path.exists(path):
        os.remove(path)
    bc = CatalogBuildConfig(
        topology=coarse, base_levels=levels, forecast=cfg.forecast, params=cfg.params,
        solver=SolverChoice(dt=cfg.meso_dt, substeps=cfg.substeps), n_intervals=cfg.meso_horizon + 1,
        interval=cfg.meso_interval, n_scenarios=cfg.meso_fan_size, node_budget=cfg.offline_node_budget,
    )
    store, report = build_catalog(bc, budget, derive_seed(cfg.seed, OFFLINE_STREAM), path)
    lines = report.lines()
    with open(os.path.join(cfg.out, "build_report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_meso_run(cfg, args):
    from .harness import ENSEMBLE_STREAM, FAN_STREAM, _make_plant, offline_catalog
    from .meso import MesoConfig, MesoContext, init_ensemble, meso_iterate, write_generation_log
    from .ocp import SolverChoice
    from .offline import value_function
    from .uncertainty import build_scenario_fan, derive_seed

    plant, observer, coarse = _make_plant(cfg)
    catalog = offline_catalog(cfg, coarse)
    grid = cfg.meso_interval * np.arange(cfg.meso_horizon + 1, dtype=float)
    ctx = MesoContext(coarse, plant.coarse_states(), grid, cfg.params,
                      SolverChoice(dt=cfg.meso_dt, substeps=cfg.substeps),
                      max_iter=cfg.meso_max_iter, tol=cfg.meso_tol)
    fan = build_scenario_fan(cfg.forecast, observer.prefix(0.0), cfg.meso_fan_size, grid[-1],
                             dt=cfg.rt_interval, seed=derive_seed(cfg.seed, FAN_STREAM, 0))
    ens = init_ensemble(ctx, cfg.meso_P, derive_seed(cfg.seed, ENSEMBLE_STREAM), catalog)
    vf = value_function(catalog) if catalog is not None and len(catalog) else None
    rows = []
    best = None
    for _ in range(args.generations):
        ens, best, row, _ = meso_iterate(ens, fan, catalog, ctx, MesoConfig(P=cfg.meso_P, workers=cfg.meso_workers), vf)
        rows.append(row)
        print(f"generation {row.generation}: best J {row.best_J:.6g}, median J {row.median_J:.6g}")
    os.makedirs(cfg.out, exist_ok=True)
    write_generation_log(os.path.join(cfg.out, "meso_log.csv"), rows)
    with open(os.path.join(cfg.out, "best_plan.json"), "w") as fh:
        json.dump({"J": best.J, "v": best.v.tolist(), "z": best.z.tolist(), "grid": grid.tolist()},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_closed_loop(cfg, args):
    from .harness import baseline_policy, run_closed_loop

    res = run_closed_loop(cfg, cfg.out)
    m = res.metrics
    print(f"closed loop: profit {m.profit:.6g}, violations {m.violations}, "
          f"degraded steps {m.degraded_steps}, switches {m.switch_counts}")
    if getattr(args, "baseline", False):
        b = baseline_policy(cfg, os.path.join(cfg.out, "baseline"))
        print(f"baseline:    profit {b.profit:.6g}, violations {b.violations}")


def cmd_mlmc(cfg, args):
    from .harness import build_topology
    from .hydro.core import total_volume
    from .uncertainty import cascade_level_solvers, mlmc_estimate

    fine, _, levels = build_topology(cfg)
    opts = cfg.mlmc
    L = args.levels if getattr(args, "levels", None) is not None else int(opts.get("levels", 1))
    if L < 0:
        raise ContractError("levels must be non-negative")
    if getattr(args, "samples", None):
        M = [int(s) for s in args.samples.split(",")]
    else:
        M = [int(m) for m in opts.get("samples", [max(2, 8 >> l) for l in range(L + 1)])]
    if len(M) != L + 1:
        raise ContractError("one sample count per level required")
    horizon = float(opts.get("horizon", cfg.meso_interval))
    controls = [(0.5 * d.max_opening, 1.0) for d in fine.dams]
    solvers = cascade_level_solvers(fine, levels, controls, horizon, L + 1)
    # stored volume, measured on whichever grid produced the states
    by_cells = {}
    for l in range(L + 1):
        topo = fine.coarsened(2 ** (L - l)) if L - l else fine
        by_cells[topo.reaches[0].bathymetry.n_cells] = topo

    def qoi_for(states):
        return total_volume(by_cells[states[0].A.size], states)

    res = mlmc_estimate(solvers, M, qoi_for, cfg.forecast, cfg.seed, horizon, cfg.rt_interval)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "mlmc.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "samples", "mean_correction", "variance", "failures"])
        for l in range(L + 1):
            w.writerow([l, int(res.samples[l]), repr(float(res.level_means[l])),
                        repr(float(res.variances[l])), int(res.failures[l])])
    kind = "plain MC" if L == 0 else f"MLMC, {L + 1} levels"
    print(f"{kind} estimate of stored volume at t={horizon:g} s: {res.estimate!r} "
          f"(standard error {res.standard_error:.3g})")


def _read_csv(path):
    if not os.path.exists(path):
        return None
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_rows(out):
    """One row per layer: (layer, items, headline, detail)."""
    rows = []
    cat = os.path.join(out, "catalog.jsonl")
    if os.path.exists(cat):
        from .offline import CatalogStore

        store = CatalogStore.load(cat)
        best = min((e.J for e in store.entries), default=math.nan)
        rows.append(("offline", f"{len(store)} entries", f"best J {best:.6g}", ""))
    meso = _read_csv(os.path.join(out, "meso_log.csv"))
    if meso is not None:
        J = [float(r["best_J"]) for r in meso]
        fin = [j for j in J if math.isfinite(j)]
        rows.append(("meso", f"{len(meso)} generations",
                     f"last best J {J[-1]:.6g}" if J else "no generations",
                     f"{len(J) - len(fin)} without a finite value"))
    rt = _read_csv(os.path.join(out, "rt_log.csv"))
    if rt is not None:
        it = [int(r["qp_iterations"]) for r in rt]
        fb = sum(int(r["fallback"]) for r in rt)
        lat = _read_csv(os.path.join(out, "rt_latency.csv")) or []
        t = [float(r["solve_time"]) for r in lat]
        p95 = f"p95 latency {np.percentile(t, 95) * 1e3:.3g} ms" if t else ""
        rows.append(("realtime", f"{len(rt)} steps",
                     f"median QP iterations {np.median(it) if it else math.nan:g}",
                     f"{fb} fallbacks" + (f", {p95}" if p95 else "")))
    steps = _read_csv(os.path.join(out, "plant_steps.csv"))
    if steps is not None:
        metrics = {}
        mpath = os.path.join(out, "metrics.json")
        if os.path.exists(mpath):
            with open(mpath) as fh:
                metrics = json.load(fh)
        profit = recompute_profit(steps)
        rows.append(("plant", f"{len(steps)} steps", f"profit {profit:.6g}",
                     f"{metrics.get('violations', '?')} violations"))
    return rows


def recompute_profit(step_rows):
    """Profit from plant_steps.csv rows: sum of price times total energy."""
    total = 0.0
    for r in step_rows:
        e = [float(v) for k, v in r.items() if k.startswith("energy")]
        total += float(r["price"]) * float(np.sum(e))
    return total


def format_table(rows, header=("layer", "items", "headline", "detail")):
    cols = list(zip(header, *rows)) if rows else [(h,) for h in header]
    widths = [max(len(str(c)) for c in col) for col in cols]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def cmd_report(cfg, args):
    if not os.path.isdir(cfg.out):
        raise ContractError(f"no run directory {cfg.out!r}")
    rows = report_rows(cfg.out)
    if not rows:
        raise ContractError(f"no logs found in {cfg.out!r}")
    text = format_table(rows)
    with open(os.path.join(cfg.out, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)


COMMANDS = {
    "simulate": cmd_simulate,
    "offline-build": cmd_offline_build,
    "meso-run": cmd_meso_run,
    "closed-loop": cmd_closed_loop,
    "mlmc": cmd_mlmc,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, KeyError, OSError, ValueError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
