"""Nonnegative potential functions on data space and their source-space pullbacks.

A potential g scores how well a data point matches a target observation or
property; the sampler only ever sees log g composed with a transport map,
so everything here works in log space and never exponentiates. No shipped
kind can return -inf for finite input: hard equality constraints would
collapse the target onto a lower-dimensional set where bracket shrinking
is not guaranteed to terminate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError
from .transport import TransportMap, integrate

POTENTIAL_KINDS = (
    "gaussian-observation",
    "exponential-tilt",
    "quantized-observation",
    "constant",
)


# --- observation operators ----------------------------------------------------


class ObservationOperator:
    """Maps a data point to the observed quantity; vectorized over rows."""

    def __call__(self, x):
        raise NotImplementedError


class IdentityObservation(ObservationOperator):
    def __call__(self, x):
        return np.asarray(x, dtype=float)


class CoordinateProjection(ObservationOperator):
    def __init__(self, indices):
        self.indices = tuple(int(i) for i in indices)
        if len(self.indices) == 0:
            raise ValidationError("coordinate projection needs at least one index")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if max(self.indices) >= x.shape[-1] or min(self.indices) < 0:
            raise ValidationError(
                f"projection indices {self.indices} out of range for dimension {x.shape[-1]}"
            )
        return x[..., self.indices]


class LinearMap(ObservationOperator):
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T


class ScalarProperty(ObservationOperator):
    """Fixed analytic scalar property of x; stands in for learned predictors."""

    NAMES = ("norm", "sum", "sqnorm")

    def __init__(self, name):
        if name not in self.NAMES:
            raise ValidationError(f"unknown scalar property {name!r}, expected one of {self.NAMES}")
        self.name = name

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "norm":
            out = np.linalg.norm(x, axis=-1)
        elif self.name == "sqnorm":
            out = np.sum(x * x, axis=-1)
        else:
            out = np.sum(x, axis=-1)
        return out[..., np.newaxis]


class PairwiseDistances(ObservationOperator):
    """Euclidean distances between indexed point pairs of a stacked coordinate array."""

    def __init__(self, pairs, n_points, point_dim):
        self.pairs = tuple((int(i), int(j)) for i, j in pairs)
        self.n_points = int(n_points)
        self.point_dim = int(point_dim)
        if self.n_points < 1 or self.point_dim < 1:
            raise ValidationError("pairwise distances need a positive coordinate shape")
        for i, j in self.pairs:
            if not (0 <= i < self.n_points and 0 <= j < self.n_points):
                raise ValidationError(
                    f"pair ({i}, {j}) out of range for {self.n_points} points"
                )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat_dim = self.n_points * self.point_dim
        if x.shape[-1] != flat_dim:
            raise ValidationError(
                f"expected flattened shape {flat_dim} for {self.n_points}x{self.point_dim} points"
            )
        coords = x.reshape(x.shape[:-1] + (self.n_points, self.point_dim))
        out = np.empty(x.shape[:-1] + (len(self.pairs),))
        for k, (i, j) in enumerate(self.pairs):
            out[..., k] = np.linalg.norm(coords[..., i, :] - coords[..., j, :], axis=-1)
        return out


def pairwise_distance_observation(pairs, coords_shape) -> PairwiseDistances:
    """Operator returning distances for the given (i, j) pairs; coords_shape = (n_points, point_dim)."""
    n_points, point_dim = coords_shape
    return PairwiseDistances(pairs, n_points, point_dim)


# --- potentials ---------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """Immutable log-potential specification; evaluation is pure and thread-safe.

    kinds:
      gaussian-observation   -||h(x) - y||^2 / (2 sigma_y^2)
      exponential-tilt       -h(x) / sigma_y            (scalar h, lower is better)
      quantized-observation  gaussian form after rounding h(x) to a grid of width quant_grid
      constant               0
    """

    kind: str
    y: np.ndarray = None
    sigma_y: float = 1.0
    operator: ObservationOperator = None
    quant_grid: float = None

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValidationError(f"unknown potential kind {self.kind!r}")
        if self.kind == "constant":
            return
        if not self.sigma_y > 0:
            raise ValidationError(
                f"sigma_y must be strictly positive (hard constraints are not supported), got {self.sigma_y}"
            )
        if self.operator is None:
            object.__setattr__(self, "operator", IdentityObservation())
        if self.kind == "quantized-observation":
            if self.quant_grid is None or not self.quant_grid > 0:
                raise ValidationError("quantized-observation needs a positive quant_grid")
        if self.kind != "exponential-tilt":
            if self.y is None:
                raise ValidationError(f"{self.kind} needs an observation vector y")
            object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))


def constant_potential() -> Potential:
    return Potential(kind="constant")


def gaussian_observation(y, sigma_y, operator=None) -> Potential:
    return Potential(kind="gaussian-observation", y=y, sigma_y=sigma_y, operator=operator)


def exponential_tilt(sigma_y, operator) -> Potential:
    return Potential(kind="exponential-tilt", sigma_y=sigma_y, operator=operator)


def quantized_observation(y, sigma_y, quant_grid, operator=None) -> Potential:
    return Potential(
        kind="quantized-observation", y=y, sigma_y=sigma_y, operator=operator, quant_grid=quant_grid
    )


def log_potential(potential: Potential, x):
    """log g(x) for x of shape (d,) or (n, d); returns a scalar or (n,) array."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if not np.all(np.isfinite(x)):
        raise DomainError("data point has non-finite entries")
    if potential.kind == "constant":
        out = np.zeros(() if single else x.shape[0])
        return float(out) if single else out
    h = potential.operator(x)
    if potential.kind == "exponential-tilt":
        if h.shape[-1] != 1:
            raise ValidationError("exponential-tilt needs a scalar observation operator")
        out = -h[..., 0] / potential.sigma_y
        return float(out) if single else out
    if potential.kind == "quantized-observation":
        h = np.round(h / potential.quant_grid) * potential.quant_grid
    resid = h - potential.y
    out = -np.sum(resid * resid, axis=-1) / (2.0 * potential.sigma_y**2)
    return float(out) if single else out


@dataclass(frozen=True)
class PullbackPotential:
    """The potential composed with a transport map: log g(T(z)) on source points."""

    potential: Potential
    transport: TransportMap

    def log_value_and_image(self, z):
        """(log g(T(z)), T(z)); the image is returned so callers can reuse it."""
        x = integrate(self.transport, z)
        return log_potential(self.potential, x), x

    def log_value(self, z):
        return self.log_value_and_image(z)[0]


def log_pullback(pullback: PullbackPotential, z):
    """log g(T(z)); equals log_potential of the integrated image by definition."""
    return pullback.log_value(z)
