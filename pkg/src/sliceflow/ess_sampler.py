"""Elliptical slice sampling in the Gaussian source space of a transport map.

One step proposes along the ellipse z cos(theta) + nu sin(theta) spanned by
the current state and a fresh prior draw nu, accepting the first angle whose
pulled-back log potential beats log g(current) + log u, and shrinking the
angular bracket toward zero after every rejection. Because shrinking always
keeps the current state (angle zero) inside the bracket, the loop terminates
whenever the pullback is continuous; a safeguard cap converts pathological
near-manifold targets into a structured error instead of an endless loop.

Also provides chain driving with burn-in / thinning / parallel chains,
split-Rhat and autocorrelation diagnostics, CSV/JSON serialization, and a
finite-difference gradient-ascent baseline used to demonstrate how
gradient-following gets trapped in disconnected modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BaselineDivergedError,
    EssStalledError,
    IntegrationDivergedError,
    NumericError,
    ValidationError,
)
from .potentials import PullbackPotential

_INIT_RETRIES = 100


@dataclass(frozen=True)
class ChainConfig:
    steps: int = 1200
    burn_in: int = 200
    thinning: int = 10
    chains: int = 1
    max_shrinks: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be positive")
        if not 0 <= self.burn_in < self.steps:
            raise ValidationError(
                f"burn-in must lie in [0, steps), got {self.burn_in} of {self.steps}"
            )
        if self.thinning < 1:
            raise ValidationError("thinning factor must be >= 1")
        if self.chains < 1:
            raise ValidationError("chain count must be >= 1")
        if self.max_shrinks < 16:
            raise ValidationError("max shrink safeguard must be >= 16")
        if self.retained < 1:
            raise ValidationError(
                f"no samples retained: thinning {self.thinning} exceeds the "
                f"{self.steps - self.burn_in} post-burn-in steps"
            )

    @property
    def retained(self) -> int:
        return (self.steps - self.burn_in) // self.thinning


@dataclass(frozen=True)
class Counters:
    steps: int = 0
    evaluations: int = 0
    shrinks: int = 0
    diverged_proposals: int = 0
    max_step_shrinks: int = 0  # worst single-step shrink count seen so far

    def as_dict(self):
        return {
            "steps": self.steps,
            "potential_evaluations": self.evaluations,
            "bracket_shrinks": self.shrinks,
            "diverged_proposals": self.diverged_proposals,
            "max_step_shrinks": self.max_step_shrinks,
        }


@dataclass(frozen=True)
class ChainState:
    """Current source point with its cached pullback value and data image."""

    z: np.ndarray
    log_g: float
    x: np.ndarray
    rng: np.random.Generator
    counters: Counters = field(default_factory=Counters)


def shrink_bracket(theta, theta_l, theta_u):
    """Contract the bracket toward zero at the rejected angle theta.

    Zero (the current state) always stays inside; shrinking at exactly zero
    would exclude it and is an error.
    """
    if theta == 0.0:
        raise ValidationError("cannot shrink bracket at theta = 0 (current state)")
    if not theta_l <= theta <= theta_u:
        raise ValidationError(
            f"theta {theta} outside bracket [{theta_l}, {theta_u}]"
        )
    if theta < 0.0:
        return theta, theta_u
    return theta_l, theta


def init_state(pullback: PullbackPotential, rng, z0=None) -> ChainState:
    """Starting state; draws z0 from N(0, I) until the pullback is finite."""
    d = pullback.transport.dimension
    if z0 is not None:
        z0 = np.asarray(z0, dtype=float)
        log_g, x = pullback.log_value_and_image(z0)
        if not np.isfinite(log_g):
            raise ValidationError("pinned initial point has non-finite log potential")
        return ChainState(z0, log_g, x, rng, Counters(evaluations=1))
    for _ in range(_INIT_RETRIES):
        z0 = rng.standard_normal(d)
        try:
            log_g, x = pullback.log_value_and_image(z0)
        except IntegrationDivergedError:
            continue
        if np.isfinite(log_g):
            return ChainState(z0, log_g, x, rng, Counters(evaluations=1))
    raise NumericError(
        f"no finite log potential found in {_INIT_RETRIES} prior draws; "
        "the potential may exclude essentially all prior mass"
    )


def ess_step(state: ChainState, pullback: PullbackPotential, max_shrinks: int = 1000) -> ChainState:
    """One slice-sampling transition; only forward evaluations, no gradients.

    A proposal that fails to integrate is treated as a rejection and the
    bracket shrinks past it.
    """
    if not np.isfinite(state.log_g):
        raise ValidationError("current state has non-finite cached log potential")
    rng = state.rng
    nu = rng.standard_normal(state.z.shape[0])
    log_u = np.log(rng.uniform())
    threshold = state.log_g + log_u
    theta = rng.uniform(0.0, 2.0 * np.pi)
    theta_l, theta_u = theta - 2.0 * np.pi, theta

    evals = 0
    shrinks = 0
    diverged = 0
    while True:
        z_new = state.z * np.cos(theta) + nu * np.sin(theta)
        try:
            log_g_new, x_new = pullback.log_value_and_image(z_new)
            evals += 1
        except IntegrationDivergedError:
            evals += 1
            diverged += 1
            log_g_new = -np.inf
        if log_g_new > threshold:
            c = state.counters
            return ChainState(
                z_new,
                log_g_new,
                x_new,
                rng,
                Counters(
                    c.steps + 1,
                    c.evaluations + evals,
                    c.shrinks + shrinks,
                    c.diverged_proposals + diverged,
                    max(c.max_step_shrinks, shrinks),
                ),
            )
        if shrinks >= max_shrinks:
            raise EssStalledError(theta_u - theta_l, threshold - log_g_new)
        theta_l, theta_u = shrink_bracket(theta, theta_l, theta_u)
        shrinks += 1
        theta = rng.uniform(theta_l, theta_u)


@dataclass(frozen=True)
class SampleSet:
    """Retained chain states: source points, data images, log potentials."""

    z: np.ndarray
    x: np.ndarray
    log_g: np.ndarray
    step_indices: np.ndarray
    counters: Counters
    seed: object = None
    config: ChainConfig = None

    @property
    def size(self) -> int:
        return self.z.shape[0]

    def write_csv(self, path):
        d = self.z.shape[1]
        header = (
            ["step"]
            + [f"z{i + 1}" for i in range(d)]
            + [f"x{i + 1}" for i in range(d)]
            + ["log_potential"]
        )
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(self.size):
                row = [str(int(self.step_indices[k]))]
                row += [repr(float(v)) for v in self.z[k]]
                row += [repr(float(v)) for v in self.x[k]]
                row.append(repr(float(self.log_g[k])))
                fh.write(",".join(row) + "\n")

    def write_metadata(self, path, extra=None):
        meta = {
            "seed": self.seed,
            "counters": self.counters.as_dict(),
            "retained": self.size,
        }
        if self.config is not None:
            meta["chain_config"] = {
                "steps": self.config.steps,
                "burn_in": self.config.burn_in,
                "thinning": self.config.thinning,
                "chains": self.config.chains,
                "max_shrinks": self.config.max_shrinks,
                "seed": self.config.seed,
            }
        if extra:
            meta.update(extra)
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_chain(pullback: PullbackPotential, config: ChainConfig, rng=None, z0=None) -> SampleSet:
    """Drive one chain; retains states at step indices burn_in + k * thinning."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    state = init_state(pullback, rng, z0=z0)
    d = state.z.shape[0]
    n_keep = config.retained
    zs = np.empty((n_keep, d))
    xs = np.empty((n_keep, d))
    lgs = np.empty(n_keep)
    idxs = np.empty(n_keep, dtype=np.int64)
    kept = 0
    for step in range(1, config.steps + 1):
        try:
            state = ess_step(state, pullback, max_shrinks=config.max_shrinks)
        except EssStalledError as err:
            raise EssStalledError(err.bracket_width, err.log_gap, step) from None
        if step > config.burn_in and (step - config.burn_in) % config.thinning == 0:
            zs[kept] = state.z
            xs[kept] = state.x
            lgs[kept] = state.log_g
            idxs[kept] = step
            kept += 1
    return SampleSet(
        zs[:kept], xs[:kept], lgs[:kept], idxs[:kept], state.counters, config=config
    )


def run_parallel_chains(pullback: PullbackPotential, config: ChainConfig):
    """Independent chains seeded from the root seed by chain index.

    Returns (list of SampleSet, diagnostics dict) with per-dimension
    split-Rhat (None for a single chain) and pooled integrated
    autocorrelation time.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    sets = []
    for idx, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        sample_set = run_chain(pullback, config, rng=rng)
        sets.append(replace(sample_set, seed=f"{config.seed}/chain{idx}"))
    # Rhat needs at least two chains and enough samples to split in half
    rhat_applicable = config.chains >= 2 and min(s.size for s in sets) >= 4
    diagnostics = {
        "split_rhat": split_rhat([s.z for s in sets]).tolist() if rhat_applicable else None,
        "pooled_iact": pooled_autocorrelation_time([s.z for s in sets]).tolist(),
    }
    return sets, diagnostics


# --- diagnostics ---------------------------------------------------------------


def split_rhat(chain_arrays):
    """Per-dimension split-Rhat: halve every chain, compare within/between variance."""
    if len(chain_arrays) < 2:
        raise ValidationError("split-Rhat needs at least two chains")
    halves = []
    for arr in chain_arrays:
        arr = np.asarray(arr, dtype=float)
        n = arr.shape[0] // 2
        if n < 2:
            raise ValidationError("chains too short to split for Rhat")
        halves.append(arr[:n])
        halves.append(arr[n : 2 * n])
    seqs = np.stack(halves)  # (m, n, d)
    m, n, _ = seqs.shape
    means = seqs.mean(axis=1)
    within = seqs.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return np.sqrt(var_plus / within)


def _autocorrelation(series):
    series = np.asarray(series, dtype=float)
    n = series.shape[0]
    centered = series - series.mean()
    full = np.correlate(centered, centered, mode="full")[n - 1 :]
    if full[0] <= 0:
        return np.zeros(1)
    return full / full[0]


def pooled_autocorrelation_time(chain_arrays):
    """Per-dimension integrated autocorrelation time, chain-averaged.

    Uses the initial-positive-sequence truncation on pair sums of lags.
    """
    arrays = [np.atleast_2d(np.asarray(a, dtype=float)) for a in chain_arrays]
    d = arrays[0].shape[1]
    out = np.empty(d)
    for dim in range(d):
        rhos = [_autocorrelation(a[:, dim]) for a in arrays]
        length = min(len(r) for r in rhos)
        rho = np.mean([r[:length] for r in rhos], axis=0)
        tau = 1.0
        k = 1
        while k + 1 < length:
            pair = rho[k] + rho[k + 1]
            if pair <= 0:
                break
            tau += 2.0 * pair
            k += 2
        out[dim] = tau
    return out


# --- gradient-ascent baseline ---------------------------------------------------


def baseline_gradient_ascent(
    z0,
    pullback: PullbackPotential,
    step_size: float,
    iterations: int,
    stencil: float = 1e-4,
):
    """Ascend log g(T(z)) with central finite differences (2d evaluations per step).

    The stencil evaluations are batched through the transport map. Returns the
    full iterate trace of shape (iterations + 1, d). On a piecewise-constant
    potential the estimated gradient is exactly zero whenever the stencil
    stays inside one cell, so the iterate never moves: following gradients
    cannot leave the mode it starts in.
    """
    if not step_size > 0:
        raise ValidationError("step size must be positive")
    z = np.asarray(z0, dtype=float).copy()
    d = z.shape[0]
    eye = np.eye(d)
    trace = np.empty((iterations + 1, d))
    trace[0] = z
    for it in range(iterations):
        probes = np.concatenate([z + stencil * eye, z - stencil * eye], axis=0)
        vals = pullback.log_value(probes)
        grad = (vals[:d] - vals[d:]) / (2.0 * stencil)
        if not np.all(np.isfinite(grad)):
            raise BaselineDivergedError(
                f"non-finite finite-difference gradient at iteration {it}"
            )
        z = z + step_size * grad
        trace[it + 1] = z
    return trace
