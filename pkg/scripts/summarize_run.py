#!/usr/bin/env python3
"""Print a digest of one experiment output directory: manifest, reports, diagnostics.

Usage: python scripts/summarize_run.py runs/moons_demo
"""

import json
import sys
from pathlib import Path


def main():
    if len(sys.argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    out = Path(sys.argv[1])
    manifest_path = out / "manifest.json"
    if not manifest_path.is_file():
        print(f"no manifest.json under {out}", file=sys.stderr)
        return 2
    manifest = json.loads(manifest_path.read_text())
    print(f"run: {out}  ({manifest['version']})")
    print(f"experiment: {manifest['config']['kind']}  seed: {manifest['config']['seed']}")
    for phase, seconds in manifest["timings"].items():
        print(f"  {phase:<14s} {seconds:8.3f} s")
    if manifest["counters"]:
        print("counters:")
        for key, value in manifest["counters"].items():
            print(f"  {key} = {value}")
    for warning in manifest.get("warnings", []):
        print(f"warning: {warning}")
    print("outputs:")
    for entry in manifest["outputs"]:
        print(f"  {entry['path']:<24s} {entry['bytes']:>10d} bytes  sha256 {entry['sha256'][:12]}...")
    report_path = out / "report.json"
    if report_path.is_file():
        print("report.json:")
        print(json.dumps(json.loads(report_path.read_text()), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
