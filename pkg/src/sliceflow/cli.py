"""Config-driven experiment runner.

Subcommands: train-prior, sample, oracle-compare, multifidelity, moons-demo.
Each invocation runs one experiment from an INI config, writes CSV/JSON
artifacts plus a manifest with checksums, and exits 0 on success, 2 on
validation errors, 3 on numeric failures, 4 on file I/O problems. Reruns
with identical config and seed reproduce byte-identical sample files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import ess_sampler as ess
from . import flow_training as ft
from . import multifidelity as mf
from . import oracle as orc
from . import potentials as pot
from . import transport as tr
from .config import (
    ExperimentConfig,
    build_potential,
    build_transport_map,
    build_velocity_field,
    load_config,
)
from .errors import (
    FieldFileError,
    NumericError,
    SliceflowError,
    ValidationError,
)

VERSION_STRING = f"sliceflow-{__version__}"


@dataclass
class RunManifest:
    config: dict
    version: str = VERSION_STRING
    timings: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def add_output(self, path):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.outputs.append(
            {"path": path.name, "sha256": digest, "bytes": path.stat().st_size}
        )

    def write(self, out_dir):
        payload = {
            "config": self.config,
            "version": self.version,
            "timings": self.timings,
            "counters": self.counters,
            "outputs": self.outputs,
            "warnings": self.warnings,
        }
        target = out_dir / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".manifest.tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return target


class _Phases:
    """Wall-clock bookkeeping for the manifest."""

    def __init__(self, quiet):
        self.timings = {}
        self.quiet = quiet

    def run(self, name, fn):
        if not self.quiet:
            print(f"[sliceflow] {name} ...", flush=True)
        start = time.perf_counter()
        result = fn()
        self.timings[name] = round(time.perf_counter() - start, 3)
        return result


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _chain_counter_totals(sets, ode_steps_per_eval):
    evals = sum(s.counters.evaluations for s in sets)
    return {
        "chain_steps": sum(s.counters.steps for s in sets),
        "potential_evaluations": evals,
        "bracket_shrinks": sum(s.counters.shrinks for s in sets),
        "diverged_proposals": sum(s.counters.diverged_proposals for s in sets),
        "ode_steps": evals * ode_steps_per_eval,
    }


# --- subcommands ------------------------------------------------------------------


def cmd_train_prior(config: ExperimentConfig, quiet=False) -> RunManifest:
    phases = _Phases(quiet)
    manifest = RunManifest(config.echo())
    out = config.output_dir

    ds_spec = config.dataset
    dataset = phases.run(
        "dataset", lambda: ft.make_dataset(ds_spec.name, ds_spec.size, ds_spec.noise, ds_spec.seed)
    )
    result = phases.run("train", lambda: ft.train(dataset, config.train))

    model_path = out / "model.efvf"
    trace_path = out / "loss_trace.csv"

    def write_outputs():
        tr.save_field(result.field, model_path)
        with open(trace_path, "w") as fh:
            fh.write("iteration,loss\n")
            for i, loss in enumerate(result.loss_trace):
                fh.write(f"{i},{loss!r}\n")

    phases.run("write", write_outputs)
    manifest.add_output(model_path)
    manifest.add_output(trace_path)
    manifest.timings = phases.timings
    manifest.counters = {
        "train_iterations": config.train.iterations,
        "final_loss": float(result.loss_trace[-1]),
    }
    manifest.write(out)
    return manifest


def _build_pullback(config: ExperimentConfig, steps=None):
    tmap = build_transport_map(config.transport_spec, steps=steps)
    potential = build_potential(config.potential_spec)
    return pot.PullbackPotential(potential, tmap)


def cmd_sample(config: ExperimentConfig, quiet=False) -> RunManifest:
    phases = _Phases(quiet)
    manifest = RunManifest(config.echo())
    out = config.output_dir
    pullback = phases.run("build", lambda: _build_pullback(config))
    sets, diagnostics = phases.run(
        "chains", lambda: ess.run_parallel_chains(pullback, config.chain)
    )

    def write_outputs():
        for idx, s in enumerate(sets):
            csv_path = out / f"chain_{idx:02d}.csv"
            meta_path = out / f"chain_{idx:02d}.meta.json"
            s.write_csv(csv_path)
            s.write_metadata(meta_path)
            manifest.add_output(csv_path)
            manifest.add_output(meta_path)
        diag_path = out / "diagnostics.json"
        _write_json(diag_path, diagnostics)
        manifest.add_output(diag_path)

    phases.run("write", write_outputs)
    manifest.timings = phases.timings
    manifest.counters = _chain_counter_totals(sets, config.transport_spec.steps)
    manifest.write(out)
    return manifest


def cmd_oracle_compare(config: ExperimentConfig, quiet=False) -> RunManifest:
    phases = _Phases(quiet)
    manifest = RunManifest(config.echo())
    out = config.output_dir
    ospec = config.oracle
    lengths = list(ospec.lengths)
    if config.chain.retained < max(lengths):
        raise ValidationError(
            f"chain retains {config.chain.retained} samples but oracle lengths "
            f"require {max(lengths)}"
        )
    pullback = phases.run("build", lambda: _build_pullback(config))
    grid = phases.run(
        "grid", lambda: orc.grid_posterior(pullback, ospec.range_lo, ospec.range_hi, ospec.resolution)
    )
    sets, diagnostics = phases.run(
        "chains", lambda: ess.run_parallel_chains(pullback, config.chain)
    )

    def compare():
        grid_mean = grid.cell_masses().ravel() @ grid.center_points()
        tv_by_length = []
        for n in lengths:
            pooled = np.concatenate([s.z[:n] for s in sets])
            tv_by_length.append({"length": n, "tv": float(orc.tv_distance(pooled, grid))})
        pooled = np.concatenate([s.z for s in sets])
        rep = orc.moment_report(pooled)
        return {
            "tv_by_length": tv_by_length,
            "moments": {
                "mean": rep.mean.tolist(),
                "variance": rep.variance.tolist(),
                "mean_se": rep.mean_se.tolist(),
                "oracle_mean": grid_mean.tolist(),
                "mean_delta": (rep.mean - grid_mean).tolist(),
            },
            "diagnostics": diagnostics,
        }

    report = phases.run("compare", compare)

    def write_outputs():
        grid_path = out / "grid.csv"
        with open(grid_path, "w") as fh:
            fh.write("z1,z2,density\n")
            pts = grid.center_points()
            dens = np.exp(grid.log_density).ravel()
            for (z1, z2), dv in zip(pts, dens):
                fh.write(f"{z1!r},{z2!r},{dv!r}\n")
        report_path = out / "report.json"
        _write_json(report_path, report)
        manifest.add_output(grid_path)
        manifest.add_output(report_path)

    phases.run("write", write_outputs)
    manifest.timings = phases.timings
    manifest.counters = _chain_counter_totals(sets, config.transport_spec.steps)
    manifest.write(out)
    return manifest


def cmd_multifidelity(config: ExperimentConfig, quiet=False) -> RunManifest:
    phases = _Phases(quiet)
    manifest = RunManifest(config.echo())
    out = config.output_dir
    mspec = config.multifidelity
    field_obj = build_velocity_field(config.transport_spec)
    pair = mf.make_fidelity_pair(
        field_obj, config.transport_spec.scheme, mspec.coarse_steps, mspec.fine_steps
    )
    potential = build_potential(config.potential_spec)
    coarse_pullback = pot.PullbackPotential(potential, pair.coarse)

    sets, diagnostics = phases.run(
        "coarse-chains", lambda: ess.run_parallel_chains(coarse_pullback, config.chain)
    )
    pooled = ess.SampleSet(
        z=np.concatenate([s.z for s in sets]),
        x=np.concatenate([s.x for s in sets]),
        log_g=np.concatenate([s.log_g for s in sets]),
        step_indices=np.concatenate([s.step_indices for s in sets]),
        counters=sets[0].counters,
    )
    weighted = phases.run("reweight", lambda: mf.reweight(pooled, pair, potential))
    kish = weighted.kish_fraction
    if weighted.degenerate:
        manifest.warnings.append(
            f"kish effective sample fraction {kish:.4f} below "
            f"{mf.DEGENERACY_WARNING_THRESHOLD}: weights are degenerate"
        )

    report = {
        "kish_ess_fraction": kish,
        "coarse_steps": mspec.coarse_steps,
        "fine_steps": mspec.fine_steps,
        "retained": weighted.size,
        "diagnostics": diagnostics,
    }
    if config.oracle is not None:
        ospec = config.oracle

        def oracle_compare():
            fine_pullback = pot.PullbackPotential(potential, pair.fine)
            grid = orc.grid_posterior(fine_pullback, ospec.range_lo, ospec.range_hi, ospec.resolution)
            grid_mean_x = grid.cell_masses().ravel() @ tr.integrate(pair.fine, grid.center_points())
            est, se = mf.weighted_estimate(weighted, "mean")
            return {
                "weighted_mean_fine_image": est.tolist(),
                "bootstrap_se": se.tolist(),
                "oracle_mean_fine_image": grid_mean_x.tolist(),
                "weighted_tv_source": float(orc.tv_distance(weighted.z, grid, weights=weighted.weights)),
            }

        report["oracle_comparison"] = phases.run("oracle", oracle_compare)

    def write_outputs():
        weighted_path = out / "weighted.csv"
        weighted.write_csv(weighted_path)
        manifest.add_output(weighted_path)
        report_path = out / "report.json"
        _write_json(report_path, report)
        manifest.add_output(report_path)

    phases.run("write", write_outputs)
    manifest.timings = phases.timings
    counters = _chain_counter_totals(sets, mspec.coarse_steps)
    counters["fine_map_evaluations"] = weighted.size
    counters["kish_ess_fraction"] = kish
    manifest.counters = counters
    manifest.write(out)
    return manifest


def cmd_moons_demo(config: ExperimentConfig, quiet=False) -> RunManifest:
    phases = _Phases(quiet)
    manifest = RunManifest(config.echo())
    out = config.output_dir
    mspec = config.moons
    ds_spec = config.dataset
    dataset = phases.run(
        "dataset", lambda: ft.make_dataset(ds_spec.name, ds_spec.size, ds_spec.noise, ds_spec.seed)
    )
    if dataset.name != "two-moons":
        raise ValidationError("moons demo requires the two-moons dataset")
    pullback = phases.run("build", lambda: _build_pullback(config))
    tmap = pullback.transport

    ospec = config.oracle
    lo, hi, res = (-5.0, 5.0, 64) if ospec is None else (ospec.range_lo, ospec.range_hi, ospec.resolution)

    def oracle_masses():
        grid = orc.grid_posterior(pullback, lo, hi, res)
        images = tr.integrate(tmap, grid.center_points())
        labels = ft.nearest_moon_branch(images)
        masses = grid.cell_masses().ravel()
        frac = np.array([masses[labels == 0].sum(), masses[labels == 1].sum()])
        return grid, frac

    grid, oracle_frac = phases.run("oracle-grid", oracle_masses)

    seeds = np.random.SeedSequence(config.seed).spawn(mspec.trials + 1)
    init_rng = np.random.default_rng(seeds[0])
    scatter_rows = []
    failures = []
    base_switch = 0
    ess_switch = 0
    pooled_z = []
    pooled_x = []

    def draw_clear_init():
        while True:
            z0 = init_rng.standard_normal(2)
            dists = ft.moon_arc_distances(tr.integrate(tmap, z0))[0]
            if abs(dists[0] - dists[1]) >= mspec.min_branch_gap:
                return z0, int(dists[0] > dists[1])

    def run_trials():
        nonlocal base_switch, ess_switch
        for trial in range(mspec.trials):
            z0, branch0 = draw_clear_init()
            try:
                trace = ess.baseline_gradient_ascent(
                    z0, pullback, mspec.baseline_step_size,
                    mspec.baseline_iterations, mspec.baseline_stencil,
                )
                x_base = tr.integrate(tmap, trace[-1])
                b_base = int(ft.nearest_moon_branch(x_base)[0])
                base_switch += int(b_base != branch0)
                scatter_rows.append(("baseline", trial, x_base[0], x_base[1], b_base))
            except NumericError as err:
                failures.append({"method": "baseline", "trial": trial, "error": str(err)})
            try:
                chain_cfg = ess.ChainConfig(
                    steps=mspec.trial_steps, burn_in=mspec.trial_burn_in,
                    thinning=1, seed=config.seed, max_shrinks=config.chain.max_shrinks,
                )
                s = ess.run_chain(
                    pullback, chain_cfg, rng=np.random.default_rng(seeds[trial + 1]), z0=z0
                )
                labels = ft.nearest_moon_branch(s.x)
                ess_switch += int(labels[-1] != branch0)
                pooled_z.append(s.z)
                pooled_x.append(s.x)
                for k in range(0, s.size, max(1, s.size // 10)):
                    scatter_rows.append(("ess", trial, s.x[k, 0], s.x[k, 1], int(labels[k])))
            except NumericError as err:
                failures.append({"method": "ess", "trial": trial, "error": str(err)})

    phases.run("trials", run_trials)

    def summarize():
        z_all = np.concatenate(pooled_z) if pooled_z else np.empty((0, 2))
        x_all = np.concatenate(pooled_x) if pooled_x else np.empty((0, 2))
        labels = ft.nearest_moon_branch(x_all) if len(x_all) else np.empty(0, dtype=int)
        ess_frac = (
            np.bincount(labels, minlength=2) / len(labels) if len(labels) else np.zeros(2)
        )
        prior_rng = np.random.default_rng(seeds[0].spawn(1)[0])
        prior_z = prior_rng.standard_normal((2000, 2))
        prior_x = tr.integrate(tmap, prior_z)
        prior_labels = ft.nearest_moon_branch(prior_x)
        for k in range(prior_x.shape[0]):
            scatter_rows.append(("prior", -1, prior_x[k, 0], prior_x[k, 1], int(prior_labels[k])))
        return {
            "trials": mspec.trials,
            "baseline_switch_fraction": base_switch / mspec.trials,
            "ess_switch_fraction": ess_switch / mspec.trials,
            "oracle_branch_fractions": oracle_frac.tolist(),
            "ess_branch_fractions": ess_frac.tolist(),
            "branch_fraction_max_delta": float(np.abs(ess_frac - oracle_frac).max()),
            "pooled_samples": int(len(x_all)),
            "tv_pooled_vs_oracle": float(orc.tv_distance(z_all, grid)) if len(z_all) else None,
            "failures": failures,
        }

    report = phases.run("summarize", summarize)

    def write_outputs():
        scatter_path = out / "scatter.csv"
        with open(scatter_path, "w") as fh:
            fh.write("method,trial,x1,x2,branch\n")
            for method, trial, x1, x2, branch in scatter_rows:
                fh.write(f"{method},{trial},{x1!r},{x2!r},{branch}\n")
        report_path = out / "report.json"
        _write_json(report_path, report)
        manifest.add_output(scatter_path)
        manifest.add_output(report_path)

    phases.run("write", write_outputs)
    manifest.timings = phases.timings
    manifest.counters = {
        "trials": mspec.trials,
        "pooled_samples": report["pooled_samples"],
        "trial_failures": len(failures),
    }
    manifest.write(out)
    return manifest


_COMMANDS = {
    "train-prior": cmd_train_prior,
    "sample": cmd_sample,
    "oracle-compare": cmd_oracle_compare,
    "multifidelity": cmd_multifidelity,
    "moons-demo": cmd_moons_demo,
}


def run_experiment(config: ExperimentConfig, quiet=False) -> RunManifest:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    return _COMMANDS[config.kind](config, quiet=quiet)


def build_arg_parser():
    parser = argparse.ArgumentParser(
        prog="sliceflow",
        description="Gradient-free conditional sampling under flow-based priors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if config.kind != args.command:
            raise ValidationError(
                f"config is for {config.kind!r} but the {args.command!r} subcommand was invoked"
            )
        manifest = run_experiment(config, quiet=args.quiet)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except (FieldFileError, OSError) as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 4
    except SliceflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(f"[sliceflow] wrote {len(manifest.outputs)} file(s) to {config.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
