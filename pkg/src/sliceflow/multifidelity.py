"""Importance-weight correction from a coarse-discretization chain to a fine target.

Chains are cheap to run against a coarsely discretized transport map; the
retained (thinned) samples are then re-weighted toward the finely
discretized model with self-normalized weights proportional to
g(T_fine(z)) / g(T_coarse(z)). The fine map is evaluated exactly once per
retained sample and never inside the MCMC loop. All weight arithmetic stays
in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightsError, ValidationError
from .ess_sampler import SampleSet
from .potentials import Potential, log_potential
from .transport import TransportMap, integrate

DEGENERACY_WARNING_THRESHOLD = 0.01


@dataclass(frozen=True)
class FidelityPair:
    """Coarse and fine transport maps wrapping the identical field and scheme."""

    coarse: TransportMap
    fine: TransportMap

    def __post_init__(self):
        if self.coarse.velocity_field is not self.fine.velocity_field:
            raise ValidationError("fidelity pair must share one velocity field object")
        if self.coarse.scheme != self.fine.scheme:
            raise ValidationError("fidelity pair must share the integration scheme")
        # equal step counts are allowed so the identity-weight case is expressible
        if self.fine.steps < self.coarse.steps:
            raise ValidationError(
                f"fine steps ({self.fine.steps}) must be >= coarse steps ({self.coarse.steps})"
            )


def make_fidelity_pair(field, scheme, coarse_steps, fine_steps) -> FidelityPair:
    return FidelityPair(
        TransportMap(field, scheme, coarse_steps), TransportMap(field, scheme, fine_steps)
    )


@dataclass(frozen=True)
class WeightedSampleSet:
    z: np.ndarray
    coarse_x: np.ndarray
    fine_x: np.ndarray
    raw_log_weights: np.ndarray
    weights: np.ndarray  # self-normalized, sum to one
    coarse_steps: int
    fine_steps: int
    step_indices: np.ndarray = None  # carried over when built from a SampleSet

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def kish_fraction(self) -> float:
        return kish_ess(self.weights)

    @property
    def degenerate(self) -> bool:
        return self.kish_fraction < DEGENERACY_WARNING_THRESHOLD

    def write_csv(self, path):
        """Sample-set CSV layout extended with the weight columns."""
        d = self.z.shape[1]
        header = (
            (["step"] if self.step_indices is not None else [])
            + [f"z{i + 1}" for i in range(d)]
            + [f"x{i + 1}" for i in range(d)]
            + [f"fine_x{i + 1}" for i in range(d)]
            + ["raw_log_weight", "weight"]
        )
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(self.size):
                row = []
                if self.step_indices is not None:
                    row.append(str(int(self.step_indices[k])))
                row += [repr(float(v)) for v in self.z[k]]
                row += [repr(float(v)) for v in self.coarse_x[k]]
                row += [repr(float(v)) for v in self.fine_x[k]]
                row.append(repr(float(self.raw_log_weights[k])))
                row.append(repr(float(self.weights[k])))
                fh.write(",".join(row) + "\n")


def reweight(samples, pair: FidelityPair, potential: Potential) -> WeightedSampleSet:
    """Self-normalized importance weights from the coarse chain toward the fine target.

    `samples` must come from a chain targeting the coarse pullback; either a
    SampleSet or a plain (n, d) array of retained source points is accepted.
    """
    steps = None
    if isinstance(samples, SampleSet):
        z = samples.z
        coarse_x = samples.x
        log_g_coarse = samples.log_g
        steps = samples.step_indices
    else:
        z = np.atleast_2d(np.asarray(samples, dtype=float))
        coarse_x = integrate(pair.coarse, z)
        log_g_coarse = log_potential(potential, coarse_x)
    fine_x = integrate(pair.fine, z)
    log_g_fine = log_potential(potential, fine_x)
    raw = log_g_fine - log_g_coarse
    finite = np.isfinite(raw)
    if not np.any(finite):
        raise DegenerateWeightsError("every raw log weight is -inf")
    shifted = np.exp(raw - raw[finite].max())
    weights = shifted / shifted.sum()
    return WeightedSampleSet(
        z, coarse_x, fine_x, raw, weights, pair.coarse.steps, pair.fine.steps,
        step_indices=steps,
    )


def kish_ess(weights) -> float:
    """(sum w)^2 / sum(w^2) as a fraction of the sample count.

    Scale-invariant, so weights are first divided by their maximum; equal
    weights give exactly 1.0.
    """
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValidationError("empty weight vector")
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    top = w.max()
    if top == 0:
        raise ValidationError("all weights are zero")
    r = w / top
    s = r.sum()
    return float(s * s / (r @ r) / w.size)


def weighted_estimate(wset: WeightedSampleSet, statistic="mean", grid_edges=None,
                      use_fine_images=True, bootstrap=1000, seed=0):
    """Self-normalized estimator with bootstrap standard errors.

    statistic: 'mean', 'variance', or 'histogram' (needs grid_edges, a pair
    of edge arrays). Estimates are over the fine-map data images by default.
    Returns (estimate, standard_error) arrays of matching shape.
    """
    values = wset.fine_x if use_fine_images else wset.z
    return weighted_statistic(values, wset.weights, statistic, grid_edges, bootstrap, seed)


def weighted_statistic(values, weights, statistic="mean", grid_edges=None,
                       bootstrap=1000, seed=0):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    weights = np.asarray(weights, dtype=float)
    n = values.shape[0]
    if weights.shape != (n,):
        raise ValidationError("weights must match the sample count")

    def compute(vals, w):
        w = w / w.sum()
        if statistic == "mean":
            return w @ vals
        if statistic == "variance":
            mu = w @ vals
            return w @ (vals - mu) ** 2
        if statistic == "histogram":
            if grid_edges is None:
                raise ValidationError("histogram statistic needs grid_edges")
            h, _, _ = np.histogram2d(
                vals[:, 0], vals[:, 1], bins=list(grid_edges), weights=w
            )
            return h.ravel()
        raise ValidationError(f"unknown statistic {statistic!r}")

    estimate = compute(values, weights)
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(bootstrap):
        idx = rng.integers(0, n, size=n)
        w_rep = weights[idx]
        if w_rep.sum() == 0:  # replicate missed every weighted sample
            continue
        reps.append(compute(values[idx], w_rep))
    if len(reps) < 2:
        return estimate, np.full(np.shape(estimate), np.inf)
    return estimate, np.std(np.stack(reps), axis=0, ddof=1)
