#!/usr/bin/env python3
"""
results/scan.csv -> reports/scan_summary_latest.{csv,md}

One markdown pivot (xi rows x Omega_R columns) per error column, plus the cell table.
"""
import argparse
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).parent))

from run_utils import REPO_ROOT, RESULTS, ConfigError, make_log  # noqa: E402

log = make_log("report")

COLS = ["xi", "amplitude", "status",
        "duration_unitary_ref", "error_unitary_ref", "error_unitary_ref_rwa", "diff_rwa",
        "duration_open_opt", "error_open_opt", "error_initial_c", "diff_initial_c", "distance_initial_c",
        "boundary_unitary_ref", "boundary_open_opt"]
PANELS = {
    "error_unitary_ref": "Preparation error, unitary-reference duration",
    "diff_rwa": "RWA minus full-drive error",
    "error_open_opt": "Preparation error, open-system duration",
    "diff_initial_c": "Initial-A minus Initial-C error",
}

def _markdown(df: pd.DataFrame, **kw) -> str:
    try:
        return df.to_markdown(**kw)
    except ImportError:
        return "```\n" + df.to_string(index=kw.get("index", True)) + "\n```"

def load_scan(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise ConfigError(f"--input: missing {path}. Run the scan first.")
    df = pd.read_csv(path)
    missing = {"xi", "amplitude"} - set(df.columns)
    if missing:
        raise ConfigError(f"--input: {path} has no {sorted(missing)[0]!r} column")
    return df[[c for c in COLS if c in df.columns]].sort_values(["xi", "amplitude"])

def build_report(df: pd.DataFrame) -> str:
    parts = ["# Preparation-error scan: latest summary\n"]
    ok = df[df["status"] == "ok"] if "status" in df.columns else df
    for col, title in PANELS.items():
        if col not in ok.columns or ok[col].isna().all():
            continue
        pivot = ok.pivot(index="xi", columns="amplitude", values=col)
        parts.append(f"## {title} (`{col}`)\n\n" + _markdown(pivot, floatfmt=".3e") + "\n")
    skipped = df[df["status"] != "ok"] if "status" in df.columns else df.iloc[0:0]
    if len(skipped):
        parts.append(f"## Cells not evaluated ({len(skipped)})\n\n"
                     + _markdown(skipped[["xi", "amplitude", "status"]], index=False) + "\n")
    return "\n".join(parts)

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description="scan CSV to markdown summary")
    ap.add_argument("--input", type=Path, default=RESULTS / "scan.csv")
    ap.add_argument("--outdir", type=Path, default=REPO_ROOT / "reports")
    return ap

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    try:
        df = load_scan(args.input)
    except ConfigError as e:
        log(f"FATAL (config): {e}")
        return 2

    args.outdir.mkdir(parents=True, exist_ok=True)
    csv_out = args.outdir / "scan_summary_latest.csv"
    md_out = args.outdir / "scan_summary_latest.md"
    df.to_csv(csv_out, index=False)
    md_out.write_text(build_report(df), encoding="utf-8")
    log(f"wrote {csv_out} and {md_out}")
    return 0

if __name__ == "__main__":
    sys.exit(main())
