"""Exact desk-scale reference machinery for validating the sampler.

Builds the source posterior density(z) ~ potential(T(z)) * normal(z) on a
2D grid by exhaustive evaluation, draws exact samples from the gridded
density, estimates transport-map Jacobians by central differences, checks
the two change-of-variables routes against each other, and scores sample
sets against the grid with total variation distance and moment reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from .errors import EmptyPosteriorError, ValidationError
from .potentials import PullbackPotential, log_potential
from .transport import TransportMap, integrate

_LOG_2PI = np.log(2.0 * np.pi)


def standard_normal_logpdf(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * _LOG_2PI


@dataclass(frozen=True)
class GridPosterior:
    """Normalized cell-center log densities of the source posterior on a square grid."""

    lo: float
    hi: float
    resolution: int
    log_density: np.ndarray  # (resolution, resolution), cell centers
    log_norm: float
    cell_area: float

    @property
    def edges(self):
        return np.linspace(self.lo, self.hi, self.resolution + 1)

    @property
    def centers(self):
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def cell_masses(self):
        return np.exp(self.log_density) * self.cell_area

    def center_points(self):
        c = self.centers
        gx, gy = np.meshgrid(c, c, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def grid_posterior(pullback: PullbackPotential, lo=-5.0, hi=5.0, resolution=64) -> GridPosterior:
    """Exhaustive evaluation of log g(T(z)) + log p(z) at cell centers, normalized.

    The default range keeps at least 1 - 1e-4 of the prior mass inside the
    grid; narrower ranges are rejected so the oracle cannot silently drop
    posterior mass the prior supports.
    """
    if pullback.transport.dimension != 2:
        raise ValidationError("grid oracle supports 2D source spaces only")
    if resolution < 32:
        raise ValidationError("grid resolution must be at least 32")
    if not lo < hi:
        raise ValidationError(f"bad grid range [{lo}, {hi}]")
    covered = (ndtr(hi) - ndtr(lo)) ** 2
    if covered < 1.0 - 1e-4:
        raise ValidationError(
            f"grid range [{lo}, {hi}] covers only {covered:.6f} of the prior mass"
        )
    edges = np.linspace(lo, hi, resolution + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    log_g = pullback.log_value(pts)
    raw = log_g + standard_normal_logpdf(pts)
    if not np.any(np.isfinite(raw)):
        raise EmptyPosteriorError("all grid cells have -inf log density")
    cell_area = ((hi - lo) / resolution) ** 2
    log_norm = logsumexp(raw) + np.log(cell_area)
    return GridPosterior(
        float(lo),
        float(hi),
        int(resolution),
        (raw - log_norm).reshape(resolution, resolution),
        float(log_norm),
        float(cell_area),
    )


def rejection_sample(grid: GridPosterior, n: int, seed) -> np.ndarray:
    """Exact draws from the gridded density: categorical over cells, uniform within."""
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(seed)
    masses = grid.cell_masses().ravel()
    masses = masses / masses.sum()
    idx = rng.choice(masses.size, size=n, p=masses)
    rows, cols = np.unravel_index(idx, (grid.resolution, grid.resolution))
    width = (grid.hi - grid.lo) / grid.resolution
    edges = grid.edges
    u = rng.uniform(0.0, 1.0, size=(n, 2))
    return np.stack(
        [edges[rows] + width * u[:, 0], edges[cols] + width * u[:, 1]], axis=1
    )


@dataclass(frozen=True)
class JacobianEstimate:
    matrix: np.ndarray
    stencil: float
    log_abs_det: float
    singular: bool


def fd_jacobian(tmap: TransportMap, z, stencil: float = 1e-4) -> JacobianEstimate:
    """Central-difference Jacobian of the transport map, all probes in one batch."""
    if not stencil > 0:
        raise ValidationError("stencil must be positive")
    z = np.asarray(z, dtype=float)
    d = z.shape[0]
    eye = np.eye(d)
    probes = np.concatenate([z + stencil * eye, z - stencil * eye], axis=0)
    images = integrate(tmap, probes)
    jac = (images[:d] - images[d:]).T / (2.0 * stencil)
    sign, logdet = np.linalg.slogdet(jac)
    singular = sign == 0 or not np.isfinite(logdet)
    return JacobianEstimate(jac, float(stencil), float(logdet), bool(singular))


def verify_change_of_variables(tmap: TransportMap, potential, z_batch, stencil: float = 1e-4):
    """Max discrepancy between the two density routes over a batch of source points.

    Route one evaluates the source-space form log g(T(z)) + log p(z) directly.
    Route two goes through data space: the model's data-space log density is
    log p(z) - log|det J| with J estimated at `stencil`, and pulling the
    product g(x) * p_model(x) back to the source multiplies by |det J|
    re-estimated at stencil/2. Exact cancellation of the Jacobian terms
    would make the routes equal; the returned discrepancy is dominated by
    the finite-difference error of the two determinant estimates. Points
    with a singular Jacobian are skipped and reported.
    """
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=float))
    discrepancies = []
    skipped = 0
    for z in z_batch:
        coarse = fd_jacobian(tmap, z, stencil)
        fine = fd_jacobian(tmap, z, stencil / 2.0)
        if coarse.singular or fine.singular:
            skipped += 1
            continue
        x = integrate(tmap, z)
        log_prior = standard_normal_logpdf(z)
        source_route = log_potential(potential, x) + log_prior
        data_space_density = log_prior - coarse.log_abs_det
        data_route = (log_potential(potential, x) + data_space_density) + fine.log_abs_det
        discrepancies.append(abs(source_route - data_route))
    if not discrepancies:
        raise ValidationError("all Jacobians in the batch were singular")
    return max(discrepancies), skipped


def tv_distance(samples, grid: GridPosterior, weights=None) -> float:
    """Half the L1 distance between the sample histogram and the grid masses.

    Sample mass falling outside the grid range counts fully toward the
    discrepancy, so escaping the grid cannot reduce the distance.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if weights is None:
        weights = np.full(samples.shape[0], 1.0 / samples.shape[0])
    else:
        weights = np.asarray(weights, dtype=float)
    edges = grid.edges
    hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[edges, edges], weights=weights)
    inside = hist.sum()
    outside = weights.sum() - inside
    return 0.5 * (np.abs(hist - grid.cell_masses()).sum() + outside)


def histogram_tv(samples_a, samples_b, lo, hi, resolution, weights_a=None, weights_b=None):
    """TV between two empirical histograms on a shared square grid."""
    edges = np.linspace(lo, hi, resolution + 1)

    def hist_of(samples, weights):
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if weights is None:
            weights = np.full(samples.shape[0], 1.0 / samples.shape[0])
        h, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[edges, edges], weights=weights)
        return h, weights.sum() - h.sum()

    ha, outa = hist_of(samples_a, weights_a)
    hb, outb = hist_of(samples_b, weights_b)
    return 0.5 * (np.abs(ha - hb).sum() + outa + outb)


@dataclass(frozen=True)
class MomentReport:
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray
    effective_n: float


def moment_report(samples, weights=None) -> MomentReport:
    """Per-dimension mean/variance and cross-covariance with Monte Carlo errors.

    Weighted variants use self-normalized weights; standard errors scale with
    the Kish effective count rather than the raw sample count.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = samples.shape
    if n < 2:
        raise ValidationError("moment report needs at least two samples")
    if weights is None:
        # unweighted path keeps constant samples at exactly zero variance
        mean = samples.mean(axis=0)
        centered = samples - mean
        n_eff = float(n)
        cov = centered.T @ centered / (n - 1.0)
        var = np.diag(cov).copy()
        m4 = (centered**4).mean(axis=0)
        return MomentReport(
            mean,
            var,
            cov,
            np.sqrt(var / n),
            np.sqrt(np.maximum(m4 - var**2, 0.0) / n),
            n_eff,
        )
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    n_eff = float(1.0 / np.sum(w * w))
    mean = w @ samples
    centered = samples - mean
    cov = (centered * w[:, None]).T @ centered * (n_eff / max(n_eff - 1.0, 1.0))
    var = np.diag(cov).copy()
    m4 = w @ centered**4
    mean_se = np.sqrt(var / n_eff)
    var_se = np.sqrt(np.maximum(m4 - var**2, 0.0) / n_eff)
    return MomentReport(mean, var, cov, mean_se, var_se, n_eff)
