"""Experiment configuration: flat INI-style files, one section per module.

Unknown sections or keys are hard errors so typos cannot silently fall back
to defaults, and every numeric field is validated against its module's
preconditions before any compute starts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flow_training, potentials, transport
from .errors import ValidationError
from .ess_sampler import ChainConfig
from .flow_training import TrainConfig

EXPERIMENT_KINDS = ("train-prior", "sample", "oracle-compare", "multifidelity", "moons-demo")

_SECTION_KEYS = {
    "experiment": {"kind", "seed", "output_dir"},
    "dataset": {"name", "size", "noise", "seed"},
    "train": {"hidden_sizes", "batch_size", "iterations", "learning_rate", "beta1", "beta2"},
    "transport": {"field", "dimension", "affine_mu", "affine_sigma", "scheme", "steps"},
    "potential": {"kind", "y", "sigma_y", "operator", "quant_grid", "coords", "matrix",
                  "pairs", "point_dim", "scalar_property"},
    "chain": {"steps", "burn_in", "thinning", "chains", "max_shrinks", "init"},
    "multifidelity": {"coarse_steps", "fine_steps"},
    "oracle": {"range_lo", "range_hi", "resolution", "lengths"},
    "moons": {"trials", "trial_steps", "trial_burn_in", "baseline_step_size",
              "baseline_iterations", "baseline_stencil", "min_branch_gap"},
}

_REQUIRED_SECTIONS = {
    "train-prior": ("experiment", "dataset", "train"),
    "sample": ("experiment", "transport", "potential", "chain"),
    "oracle-compare": ("experiment", "transport", "potential", "chain", "oracle"),
    "multifidelity": ("experiment", "transport", "potential", "chain", "multifidelity"),
    "moons-demo": ("experiment", "dataset", "transport", "potential", "chain", "moons"),
}

_OPTIONAL_SECTIONS = {
    "train-prior": (),
    "sample": (),
    "oracle-compare": (),
    "multifidelity": ("oracle",),
    "moons-demo": ("oracle",),
}


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "two-moons"
    size: int = 20_000
    noise: float = 0.15
    seed: int = 42

    def __post_init__(self):
        if self.name not in flow_training.DATASET_NAMES:
            raise ValidationError(f"unknown dataset {self.name!r}")
        if self.size < 1:
            raise ValidationError("dataset size must be positive")
        if self.noise < 0:
            raise ValidationError("dataset noise must be nonnegative")


@dataclass(frozen=True)
class TransportSpec:
    field: str = "zero"  # "zero", "affine", or a model file path
    dimension: int = 2
    affine_mu: tuple = ()
    affine_sigma: float = 1.0
    scheme: str = "rk4"
    steps: int = 50

    def __post_init__(self):
        if self.scheme not in transport.SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.steps < 1:
            raise ValidationError("transport steps must be >= 1")
        if self.field == "affine":
            if len(self.affine_mu) != self.dimension:
                raise ValidationError("affine_mu length must equal dimension")
            if not self.affine_sigma > 0:
                raise ValidationError("affine_sigma must be positive")


@dataclass(frozen=True)
class PotentialSpec:
    kind: str = "gaussian-observation"
    y: tuple = ()
    sigma_y: float = 1.0
    operator: str = "identity"
    quant_grid: float = None
    coords: tuple = ()
    matrix: tuple = ()
    pairs: tuple = ()
    point_dim: int = 0
    scalar_property: str = "norm"


@dataclass(frozen=True)
class MultifidelitySpec:
    coarse_steps: int = 5
    fine_steps: int = 100

    def __post_init__(self):
        # equal steps are allowed: they give uniform weights and 100% ESS
        if not 1 <= self.coarse_steps <= self.fine_steps:
            raise ValidationError("need 1 <= coarse_steps <= fine_steps")


@dataclass(frozen=True)
class OracleSpec:
    range_lo: float = -5.0
    range_hi: float = 5.0
    resolution: int = 64
    lengths: tuple = (250, 500, 1000, 2000, 4000)

    def __post_init__(self):
        if not self.range_lo < self.range_hi:
            raise ValidationError("oracle range_lo must be below range_hi")
        if self.resolution < 32:
            raise ValidationError("oracle resolution must be >= 32")
        if len(self.lengths) == 0 or any(n < 1 for n in self.lengths):
            raise ValidationError("oracle lengths must be positive")
        if tuple(sorted(self.lengths)) != tuple(self.lengths):
            raise ValidationError("oracle lengths must be increasing")


@dataclass(frozen=True)
class MoonsSpec:
    trials: int = 200
    trial_steps: int = 300
    trial_burn_in: int = 50
    baseline_step_size: float = 5e-4
    baseline_iterations: int = 100
    baseline_stencil: float = 1e-4
    min_branch_gap: float = 0.15

    def __post_init__(self):
        if self.trials < 1:
            raise ValidationError("moons demo needs at least one trial")
        if not 0 <= self.trial_burn_in < self.trial_steps:
            raise ValidationError("trial burn-in must lie in [0, trial_steps)")
        if not self.baseline_step_size > 0:
            raise ValidationError("baseline step size must be positive")
        if self.baseline_iterations < 1:
            raise ValidationError("baseline iterations must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    output_dir: Path
    dataset: DatasetSpec = None
    train: TrainConfig = None
    transport_spec: TransportSpec = None
    potential_spec: PotentialSpec = None
    chain: ChainConfig = None
    multifidelity: MultifidelitySpec = None
    oracle: OracleSpec = None
    moons: MoonsSpec = None
    source_path: Path = None

    def echo(self) -> dict:
        """Plain dict of every configured value, for the run manifest."""
        out = {"kind": self.kind, "seed": self.seed, "output_dir": str(self.output_dir)}
        for name in ("dataset", "train", "transport_spec", "potential_spec", "chain",
                     "multifidelity", "oracle", "moons"):
            spec = getattr(self, name)
            if spec is not None:
                out[name] = {
                    k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in vars(spec).items()
                }
        return out


def _parse_scalar(section, key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None
    return raw


def _parse_tuple(section, key, raw, kind):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_parse_scalar(section, key, part.strip(), kind) for part in raw.split(","))


class _Section:
    def __init__(self, name, items):
        self.name = name
        self.items = dict(items)

    def get(self, key, kind=str, default=None, required=False):
        if key not in self.items:
            if required:
                raise ValidationError(f"missing required key {key!r} in [{self.name}]")
            return default
        raw = self.items[key]
        if kind in (int, float, str):
            return _parse_scalar(self.name, key, raw, kind)
        raise ValidationError(f"unsupported kind for {key}")

    def get_tuple(self, key, kind=float, default=()):
        if key not in self.items:
            return default
        return _parse_tuple(self.name, key, self.items[key], kind)


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    """Parse and validate an experiment file; raises ValidationError on any problem."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ValidationError(f"cannot parse {path}: {err}") from None

    sections = {name: _Section(name, parser.items(name)) for name in parser.sections()}
    for name, sec in sections.items():
        if name not in _SECTION_KEYS:
            raise ValidationError(f"unknown section [{name}] in {path}")
        unknown = set(sec.items) - _SECTION_KEYS[name]
        if unknown:
            raise ValidationError(
                f"unknown key(s) {sorted(unknown)} in [{name}] of {path}"
            )

    if "experiment" not in sections:
        raise ValidationError("missing [experiment] section")
    exp = sections["experiment"]
    kind = exp.get("kind", str, required=True)
    if kind not in EXPERIMENT_KINDS:
        raise ValidationError(f"unknown experiment kind {kind!r}, expected one of {EXPERIMENT_KINDS}")

    required = set(_REQUIRED_SECTIONS[kind])
    allowed = required | set(_OPTIONAL_SECTIONS[kind])
    missing = required - set(sections)
    if missing:
        raise ValidationError(f"{kind} config needs section(s): {sorted(missing)}")
    extra = set(sections) - allowed
    if extra:
        raise ValidationError(f"section(s) {sorted(extra)} do not apply to {kind}")

    seed = exp.get("seed", int, default=0)
    if seed_override is not None:
        seed = int(seed_override)
    if seed < 0:
        raise ValidationError("seed must be nonnegative")
    output_dir = Path(out_override) if out_override is not None else Path(
        exp.get("output_dir", str, default="runs/latest")
    )

    cfg = {"kind": kind, "seed": seed, "output_dir": output_dir, "source_path": path}

    if "dataset" in sections:
        sec = sections["dataset"]
        cfg["dataset"] = DatasetSpec(
            name=sec.get("name", str, default="two-moons"),
            size=sec.get("size", int, default=20_000),
            noise=sec.get("noise", float, default=0.15),
            seed=sec.get("seed", int, default=42),
        )
    if "train" in sections:
        sec = sections["train"]
        cfg["train"] = TrainConfig(
            hidden_sizes=sec.get_tuple("hidden_sizes", int, default=(64, 64)),
            batch_size=sec.get("batch_size", int, default=256),
            iterations=sec.get("iterations", int, default=20_000),
            learning_rate=sec.get("learning_rate", float, default=1e-3),
            beta1=sec.get("beta1", float, default=0.9),
            beta2=sec.get("beta2", float, default=0.999),
            seed=seed,
        )
    if "transport" in sections:
        sec = sections["transport"]
        cfg["transport_spec"] = TransportSpec(
            field=sec.get("field", str, required=True),
            dimension=sec.get("dimension", int, default=2),
            affine_mu=sec.get_tuple("affine_mu", float),
            affine_sigma=sec.get("affine_sigma", float, default=1.0),
            scheme=sec.get("scheme", str, default="rk4"),
            steps=sec.get("steps", int, default=50),
        )
    if "potential" in sections:
        sec = sections["potential"]
        cfg["potential_spec"] = PotentialSpec(
            kind=sec.get("kind", str, required=True),
            y=sec.get_tuple("y", float),
            sigma_y=sec.get("sigma_y", float, default=1.0),
            operator=sec.get("operator", str, default="identity"),
            quant_grid=sec.get("quant_grid", float, default=None),
            coords=sec.get_tuple("coords", int),
            matrix=tuple(
                tuple(float(v) for v in row.split(",")) for row in
                sec.get("matrix", str, default="").split(";") if row.strip()
            ),
            pairs=tuple(
                tuple(int(v) for v in pair.split("-")) for pair in
                sec.get_tuple("pairs", str)
            ),
            point_dim=sec.get("point_dim", int, default=0),
            scalar_property=sec.get("scalar_property", str, default="norm"),
        )
    if "chain" in sections:
        sec = sections["chain"]
        cfg["chain"] = ChainConfig(
            steps=sec.get("steps", int, default=1200),
            burn_in=sec.get("burn_in", int, default=200),
            thinning=sec.get("thinning", int, default=10),
            chains=sec.get("chains", int, default=1),
            max_shrinks=sec.get("max_shrinks", int, default=1000),
            seed=seed,
        )
    if "multifidelity" in sections:
        sec = sections["multifidelity"]
        cfg["multifidelity"] = MultifidelitySpec(
            coarse_steps=sec.get("coarse_steps", int, required=True),
            fine_steps=sec.get("fine_steps", int, required=True),
        )
    if "oracle" in sections:
        sec = sections["oracle"]
        cfg["oracle"] = OracleSpec(
            range_lo=sec.get("range_lo", float, default=-5.0),
            range_hi=sec.get("range_hi", float, default=5.0),
            resolution=sec.get("resolution", int, default=64),
            lengths=sec.get_tuple("lengths", int, default=(250, 500, 1000, 2000, 4000)),
        )
    if "moons" in sections:
        sec = sections["moons"]
        cfg["moons"] = MoonsSpec(
            trials=sec.get("trials", int, default=200),
            trial_steps=sec.get("trial_steps", int, default=300),
            trial_burn_in=sec.get("trial_burn_in", int, default=50),
            baseline_step_size=sec.get("baseline_step_size", float, default=5e-4),
            baseline_iterations=sec.get("baseline_iterations", int, default=100),
            baseline_stencil=sec.get("baseline_stencil", float, default=1e-4),
            min_branch_gap=sec.get("min_branch_gap", float, default=0.15),
        )

    config = ExperimentConfig(**cfg)
    _validate_cross_section(config)
    return config


def _validate_cross_section(config: ExperimentConfig):
    ts = config.transport_spec
    if ts is not None and ts.field not in ("zero", "affine"):
        model_path = Path(ts.field)
        if not model_path.is_file():
            raise ValidationError(f"model file not found: {model_path}")
    ps = config.potential_spec
    if ps is not None:
        build_potential(ps)  # surfaces bad potential specs before compute
    if config.kind == "multifidelity" and config.multifidelity is None:
        raise ValidationError("multifidelity experiment needs [multifidelity]")


def build_velocity_field(spec: TransportSpec) -> transport.VelocityField:
    if spec.field == "zero":
        return transport.zero_velocity(spec.dimension)
    if spec.field == "affine":
        return transport.affine_velocity(np.array(spec.affine_mu), spec.affine_sigma)
    return transport.load_field(spec.field)


def build_transport_map(spec: TransportSpec, steps=None) -> transport.TransportMap:
    return transport.TransportMap(build_velocity_field(spec), spec.scheme, steps or spec.steps)


def build_operator(spec: PotentialSpec):
    if spec.operator == "identity":
        return potentials.IdentityObservation()
    if spec.operator == "coords":
        return potentials.CoordinateProjection(spec.coords)
    if spec.operator == "linear":
        return potentials.LinearMap([list(r) for r in spec.matrix])
    if spec.operator == "scalar":
        return potentials.ScalarProperty(spec.scalar_property)
    if spec.operator == "pairdist":
        if spec.point_dim < 1:
            raise ValidationError("pairdist operator needs point_dim >= 1")
        n_points = 1 + max(max(i, j) for i, j in spec.pairs) if spec.pairs else 0
        if n_points == 0:
            raise ValidationError("pairdist operator needs at least one pair")
        return potentials.PairwiseDistances(spec.pairs, n_points, spec.point_dim)
    raise ValidationError(f"unknown operator {spec.operator!r}")


def build_potential(spec: PotentialSpec) -> potentials.Potential:
    operator = build_operator(spec)
    if spec.kind == "constant":
        return potentials.constant_potential()
    if spec.kind == "gaussian-observation":
        return potentials.gaussian_observation(np.array(spec.y), spec.sigma_y, operator)
    if spec.kind == "exponential-tilt":
        return potentials.exponential_tilt(spec.sigma_y, operator)
    if spec.kind == "quantized-observation":
        return potentials.quantized_observation(
            np.array(spec.y), spec.sigma_y, spec.quant_grid, operator
        )
    raise ValidationError(f"unknown potential kind {spec.kind!r}")
