"""Desk-scale velocity-field training on synthetic 2D datasets.

Trains the tanh MLP fields of :mod:`sliceflow.transport` with the
independent-coupling flow matching objective: regress u(t, x_t) onto the
straight-line target x1 - z along x_t = (1-t) z + t x1. Gradients are
accumulated by hand with reverse-mode passes through the network only;
nothing here (or anywhere else in the package) differentiates through the
ODE solver. This module is the only place gradients exist at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingDivergedError, ValidationError
from .transport import MlpVelocityField, mlp_param_count

DATASET_NAMES = ("two-moons", "gaussian-mixture-ring", "checkerboard")

UPPER_ARC_CENTER = np.array([0.0, 0.0])
LOWER_ARC_CENTER = np.array([1.0, 0.5])


@dataclass(frozen=True)
class ToyDataset:
    name: str
    points: np.ndarray
    noise: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("dataset contains non-finite points")

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple = (64, 64)
    batch_size: int = 256
    iterations: int = 20_000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden_sizes) == 0 or any(h < 1 for h in self.hidden_sizes):
            raise ValidationError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        for name in ("batch_size", "iterations"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("moment parameters must lie in [0, 1)")


# --- datasets ----------------------------------------------------------------


def sample_two_moons(n: int, noise: float, seed: int) -> ToyDataset:
    """Two interleaving half-circles: upper arc centered (0,0), reflected
    lower arc centered (1, 0.5), both radius 1, plus isotropic noise."""
    if n < 1:
        raise ValidationError("need at least one point")
    rng = np.random.default_rng(seed)
    branch = rng.integers(0, 2, size=n)
    angle = rng.uniform(0.0, np.pi, size=n)
    pts = np.empty((n, 2))
    upper = branch == 0
    pts[upper, 0] = np.cos(angle[upper])
    pts[upper, 1] = np.sin(angle[upper])
    pts[~upper, 0] = 1.0 - np.cos(angle[~upper])
    pts[~upper, 1] = 0.5 - np.sin(angle[~upper])
    pts += noise * rng.standard_normal((n, 2))
    return ToyDataset("two-moons", pts, float(noise))


def sample_gaussian_mixture_ring(n: int, noise: float, seed: int, modes: int = 8) -> ToyDataset:
    """Equal-weight Gaussians centered on a radius-2 ring."""
    if n < 1:
        raise ValidationError("need at least one point")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(modes) / modes
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, modes, size=n)
    pts = centers[which] + noise * rng.standard_normal((n, 2))
    return ToyDataset("gaussian-mixture-ring", pts, float(noise))


def sample_checkerboard(n: int, noise: float, seed: int) -> ToyDataset:
    """Uniform mass on the eight dark cells of a 4x4 board over [-2, 2]^2."""
    if n < 1:
        raise ValidationError("need at least one point")
    rng = np.random.default_rng(seed)
    col = rng.integers(0, 4, size=n)
    row_parity = rng.integers(0, 2, size=n)
    row = 2 * row_parity + (col % 2)
    lo = np.stack([col, row], axis=1) - 2.0
    pts = lo + rng.uniform(0.0, 1.0, size=(n, 2))
    pts += noise * rng.standard_normal((n, 2))
    return ToyDataset("checkerboard", pts, float(noise))


def make_dataset(name: str, n: int, noise: float, seed: int) -> ToyDataset:
    if name == "two-moons":
        return sample_two_moons(n, noise, seed)
    if name == "gaussian-mixture-ring":
        return sample_gaussian_mixture_ring(n, noise, seed)
    if name == "checkerboard":
        return sample_checkerboard(n, noise, seed)
    raise ValidationError(f"unknown dataset {name!r}, expected one of {DATASET_NAMES}")


def _arc_distance(points, center, keep_lower_half):
    v = points - center
    phi = np.arctan2(v[:, 1], v[:, 0])
    in_arc = phi <= 0 if keep_lower_half else phi >= 0
    radial = np.abs(np.linalg.norm(v, axis=1) - 1.0)
    ends = center + np.array([[1.0, 0.0], [-1.0, 0.0]])
    end_d = np.minimum(
        np.linalg.norm(points - ends[0], axis=1), np.linalg.norm(points - ends[1], axis=1)
    )
    return np.where(in_arc, radial, end_d)


def moon_arc_distances(points):
    """Distance of each point to the noiseless upper and lower arcs, shape (n, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    d_up = _arc_distance(points, UPPER_ARC_CENTER, keep_lower_half=False)
    d_lo = _arc_distance(points, LOWER_ARC_CENTER, keep_lower_half=True)
    return np.stack([d_up, d_lo], axis=1)


def nearest_moon_branch(points):
    """Branch labels by nearest noiseless arc: 0 = upper moon, 1 = lower moon."""
    return np.argmin(moon_arc_distances(points), axis=1)


# --- network initialization and backprop -------------------------------------


def init_mlp(dimension: int, hidden_sizes, rng) -> MlpVelocityField:
    """Glorot-normal weights, zero biases; input is (x, t) concatenated."""
    sizes = (dimension + 1, *[int(h) for h in hidden_sizes], dimension)
    params = np.zeros(mlp_param_count(sizes))
    offset = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (n_in + n_out))
        params[offset : offset + n_in * n_out] = scale * rng.standard_normal(n_in * n_out)
        offset += n_in * n_out + n_out
    return MlpVelocityField(sizes, params)


def _forward_cached(field: MlpVelocityField, inputs):
    activations = [inputs]
    a = inputs
    layers = field._layers
    for w, b in layers[:-1]:
        a = np.tanh(a @ w.T + b)
        activations.append(a)
    w, b = layers[-1]
    return activations, a @ w.T + b


def _backward(field: MlpVelocityField, activations, delta):
    """Reverse-mode pass; delta is dLoss/dOutput. Returns the flat gradient."""
    grad = np.empty_like(field.params)
    layers = field._layers
    offset = len(field.params)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a = activations[idx]
        n_out, n_in = w.shape
        offset -= n_out
        grad[offset : offset + n_out] = delta.sum(axis=0)
        offset -= n_in * n_out
        grad[offset : offset + n_in * n_out] = (delta.T @ a).ravel()
        if idx > 0:
            delta = (delta @ w) * (1.0 - a * a)
    return grad


def cfm_loss(field: MlpVelocityField, z, x1, t):
    """Flow matching loss and its parameter gradient on one batch.

    Loss is the mean squared entry-wise error between the field evaluated at
    (t, (1-t) z + t x1) and the straight-line target x1 - z.
    """
    z = np.asarray(z, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    t = np.asarray(t, dtype=float)
    n, d = z.shape
    tcol = t.reshape(n, 1)
    xt = (1.0 - tcol) * z + tcol * x1
    inputs = np.concatenate([xt, tcol], axis=1)
    target = x1 - z
    activations, out = _forward_cached(field, inputs)
    resid = out - target
    with np.errstate(over="ignore"):  # overflow to inf is the detected failure
        loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise TrainingDivergedError(iteration=None, trace=None)
    grad = _backward(field, activations, (2.0 / resid.size) * resid)
    return loss, grad


@dataclass(frozen=True)
class TrainResult:
    field: MlpVelocityField
    loss_trace: np.ndarray


def train(dataset: ToyDataset, config: TrainConfig) -> TrainResult:
    """Adaptive-moment gradient descent on the flow matching objective.

    One seeded generator drives initialization, batch selection, and the
    (z, t) draws, so the entire trajectory is reproducible from the seed.
    """
    if dataset.size < 1000:
        raise ValidationError(f"training needs >= 1000 points, dataset has {dataset.size}")
    d = dataset.points.shape[1]
    rng = np.random.default_rng(config.seed)
    field = init_mlp(d, config.hidden_sizes, rng)
    params = field.params
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    eps = 1e-8
    trace = np.empty(config.iterations)
    for it in range(config.iterations):
        idx = rng.integers(0, dataset.size, size=config.batch_size)
        x1 = dataset.points[idx]
        z = rng.standard_normal((config.batch_size, d))
        t = rng.uniform(size=config.batch_size)
        try:
            loss, grad = cfm_loss(field, z, x1, t)
        except TrainingDivergedError:
            raise TrainingDivergedError(it, trace[:it].copy()) from None
        trace[it] = loss
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
        mhat = m / (1.0 - config.beta1 ** (it + 1))
        vhat = v / (1.0 - config.beta2 ** (it + 1))
        params -= config.learning_rate * mhat / (np.sqrt(vhat) + eps)
    return TrainResult(field, trace)
