#!/usr/bin/env python3
"""Run the bundled desk-scale experiments end to end.

Stages (in dependency order):
  train          train the two-moons prior        -> runs/two_moons_train/
  sample         conjugate-Gaussian sampling      -> runs/conjugate_sample/
  oracle         chain-vs-grid-oracle comparison  -> runs/conjugate_oracle/
  multifidelity  coarse chain + reweighting       -> runs/two_moons_multifidelity/
  moons          trapping demo, 200 paired trials -> runs/moons_demo/

Training takes a minute or two; the moons demo a few minutes. Pass stage
names to run a subset, e.g. `python scripts/run_experiments.py train moons`.
"""

import argparse
import sys
from pathlib import Path

from sliceflow import cli

REPO = Path(__file__).resolve().parent.parent

STAGES = {
    "train": ("train-prior", "configs/two_moons_train.ini"),
    "sample": ("sample", "configs/conjugate_sample.ini"),
    "oracle": ("oracle-compare", "configs/conjugate_oracle_compare.ini"),
    "multifidelity": ("multifidelity", "configs/two_moons_multifidelity.ini"),
    "moons": ("moons-demo", "configs/moons_demo.ini"),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("stages", nargs="*", help="stages to run (default: all, in order)")
    parser.add_argument("--seed", type=int, default=None, help="override every config seed")
    args = parser.parse_args()

    stages = args.stages or list(STAGES)
    unknown = set(stages) - set(STAGES)
    if unknown:
        print(f"error: unknown stage(s) {sorted(unknown)}; choose from {list(STAGES)}",
              file=sys.stderr)
        return 2
    model = REPO / "runs/two_moons_train/model.efvf"
    needs_model = {"multifidelity", "moons"}
    if needs_model & set(stages) and "train" not in stages and not model.is_file():
        print(f"error: {model} missing; run the train stage first", file=sys.stderr)
        return 2

    for stage in STAGES:
        if stage not in stages:
            continue
        command, config = STAGES[stage]
        argv = [command, "--config", str(REPO / config)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        print(f"=== {stage}: sliceflow {' '.join(argv)}")
        rc = cli.main(argv)
        if rc != 0:
            print(f"stage {stage} failed with exit code {rc}", file=sys.stderr)
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
