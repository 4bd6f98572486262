#!/usr/bin/env python3
"""
qubit-bath unified runner

Subcommands
- fit-bath:    bath config -> exponential kernel fit (JSON)
- equilibrate: fit -> correlated equilibrium snapshot {"A": ...}
- evolve:      scenario -> TimeSeries CSV (per-kind observables + pairwise trace distances)
- prepare:     pulse from Initial-A / Initial-C -> snapshots A, A1, C, C1, D
- bounds:      two snapshots -> D / F / I bounds CSV with witness flags
- scan:        (Omega_R x xi) grid -> preparation-error table

Design
- Central defaults live in run_utils.DEFAULTS (env overrides), scenario values in TOML
- Every run logs its active parameters and writes run_meta.json beside its output
- Exit codes: 0 ok, 2 config error, 3 numerical failure
"""

from __future__ import annotations
import argparse
import sys
import time
from pathlib import Path

# peer imports when run as a script
sys.path.insert(0, str(Path(__file__).parent))

from bath_fit import CorrelationFit  # noqa: E402
from bounds import log_report, witness_report  # noqa: E402
from dynamics import load_snapshots, save_snapshots  # noqa: E402
from run_utils import (RESULTS, STATE_DIR, ConfigError, NumericalFailure, dump_params,  # noqa: E402
                       make_log, timed, write_meta)
from scenarios import (Scenario, equilibrium_for, load_scenario, prepare_and_store, resolve_fit,  # noqa: E402
                       run_bounds, run_scan, run_scenario)

log = make_log("pipeline")

DEFAULT_OUT = {
    "fit-bath": STATE_DIR / "fit.json",
    "equilibrate": STATE_DIR / "equilibrium.json",
    "evolve": RESULTS / "evolve.csv",
    "prepare": STATE_DIR / "prepared.json",
    "bounds": RESULTS / "bounds.csv",
    "scan": RESULTS / "scan.csv",
}

# --------------------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------------------
def get_fit(args, scenario: Scenario) -> CorrelationFit:
    with timed(log, "kernel fit" if args.fit is None else f"load fit {args.fit}"):
        return resolve_fit(scenario, args.fit)

def snapshots_from(args, fit: CorrelationFit, required: bool = False) -> dict:
    if args.snapshot is None:
        if required:
            raise ConfigError("--snapshot: this subcommand needs a snapshot file")
        return {}
    return load_snapshots(args.snapshot, fit)

def stored_equilibrium(scenario: Scenario, snaps: dict):
    """An equilibrium snapshot ("A" at t = 0) reused for built A/B kinds."""
    eq = snaps.get("A")
    if eq is not None and eq.t == 0.0 and not scenario.from_snapshot:
        return eq
    return None

# --------------------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------------------
def cmd_fit_bath(args, scenario: Scenario, out: Path) -> dict:
    fit = resolve_fit(scenario)
    fit.save(out)
    return {"n_terms": fit.n_terms, "residual": fit.residual, "fingerprint": fit.fingerprint()}

def cmd_equilibrate(args, scenario: Scenario, out: Path) -> dict:
    fit = get_fit(args, scenario)
    with timed(log, "equilibration"):
        eq = equilibrium_for(scenario, fit)
    save_snapshots(out, {"A": eq}, fit)
    return {"fingerprint": fit.fingerprint()}

def cmd_evolve(args, scenario: Scenario, out: Path) -> dict:
    fit = get_fit(args, scenario)
    snaps = snapshots_from(args, fit, required=scenario.from_snapshot)
    with timed(log, "evolution"):
        ts = run_scenario(scenario, fit, snapshots=snaps, equilibrium=stored_equilibrium(scenario, snaps))
    ts.to_csv(out)
    log(f"{len(ts)} rows, columns {list(ts.columns)} → {out}")
    return {"rows": len(ts)}

def cmd_prepare(args, scenario: Scenario, out: Path) -> dict:
    fit = get_fit(args, scenario)
    snaps = snapshots_from(args, fit)
    with timed(log, "preparation"):
        prepared = prepare_and_store(scenario, fit, equilibrium=stored_equilibrium(scenario, snaps))
    save_snapshots(out, prepared, fit)
    return {"t_off": prepared["A"].t}

def cmd_bounds(args, scenario: Scenario, out: Path) -> dict:
    fit = get_fit(args, scenario)
    snaps = snapshots_from(args, fit, required=True)
    pair = tuple(p.upper() for p in args.pair) if args.pair else None
    with timed(log, "bounds"):
        series = run_bounds(scenario, fit, snaps, pair)
    report = witness_report(series)
    series.to_csv(out)
    log_report(report)
    return {"pair": list(pair or scenario.bounds.pair), "witness": report.summary()}

def cmd_scan(args, scenario: Scenario, out: Path) -> dict:
    fit = get_fit(args, scenario) if args.fit else None
    with timed(log, "scan"):
        grid = run_scan(scenario, fit, threads=args.threads)
    grid.to_csv(out)
    log(f"{len(grid.cells)} cells → {out}")
    return {"cells": len(grid.cells), "failed": int((grid.cells["status"] != "ok").sum())}

COMMANDS = {
    "fit-bath": cmd_fit_bath,
    "equilibrate": cmd_equilibrate,
    "evolve": cmd_evolve,
    "prepare": cmd_prepare,
    "bounds": cmd_bounds,
    "scan": cmd_scan,
}

# --------------------------------------------------------------------------------------
# Main
# --------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="qubit-bath unified pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="scenario TOML")
        p.add_argument("--out", type=Path, default=None, help=f"default {DEFAULT_OUT[name].relative_to(DEFAULT_OUT[name].parents[1])}")
        p.add_argument("--fit", type=Path, default=None, help="stored kernel fit JSON")
        p.add_argument("--snapshot", type=Path, default=None, help="snapshot JSON")
        p.add_argument("--threads", type=int, default=1, help="worker processes for scans")
        p.add_argument("--seed", type=int, default=None, help="multi-start seed of the kernel fit")
        if name == "bounds":
            p.add_argument("--pair", nargs=2, metavar=("X", "Y"), default=None)
    return parser

def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else DEFAULT_OUT[args.command]
    meta = out.parent / "run_meta.json"

    t0 = time.time()
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        scenario = load_scenario(args.config).with_seed(args.seed)
        dump_params(log, {**scenario.describe(), "command": args.command, "threads": args.threads})
        extra = COMMANDS[args.command](args, scenario, out)
        elapsed = round(time.time() - t0, 1)
        write_meta(meta, args.command, status="ok",
                   extra={"elapsed_sec": elapsed, "config": str(args.config), "out": str(out), **extra})
        log("ALL GOOD.")
        return 0
    except ConfigError as e:
        write_meta(meta, args.command, status="error", extra={"error": str(e), "kind": "config"})
        log(f"FATAL (config): {e}")
        return 2
    except NumericalFailure as e:
        write_meta(meta, args.command, status="error", extra={"error": str(e), "kind": "numerical"})
        log(f"FATAL (numerical): {e}")
        return 3
    except Exception as e:
        write_meta(meta, args.command, status="error", extra={"error": str(e)})
        log(f"FATAL: {e}")
        raise

if __name__ == "__main__":
    sys.exit(main())
