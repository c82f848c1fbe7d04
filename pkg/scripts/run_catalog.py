#!/usr/bin/env python3
"""Run every built-in scenario and print a one-line summary per scenario."""

import sys
import time
from pathlib import Path

from sdelab import cli


def main() -> int:
    out_root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out")
    worst = 0
    for name in cli.BUILTIN_NAMES:
        cfg = cli.load_config(name)
        t0 = time.perf_counter()
        report = cli.run_scenario(cfg, out_root / name)
        dt = time.perf_counter() - t0
        code = report["status"]["exit_code"]
        worst = max(worst, code)
        verdicts = report["stages"].get("criteria", [])
        summary = ", ".join(f"{v['id']}={v['verdict']}" for v in verdicts) or "no criteria"
        print(f"{name:24s} exit={code} ({dt:5.1f}s)  {summary}")
        for note in report["status"]["notes"]:
            print(f"{'':24s}  - {note}")
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
