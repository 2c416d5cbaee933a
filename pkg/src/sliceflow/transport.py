"""Velocity fields and deterministic fixed-step ODE transport from source to data space.

A transport map pushes a source point z through dx/dt = u(t, x) from t=0 to
t=1 with a fixed uniform time grid, so the discretization level is exactly
1/steps and every evaluation is bitwise reproducible. Also provides
elementwise gaussianization between non-Gaussian source marginals and the
standard normal, and a self-contained binary file format for fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import (
    ChecksumMismatchError,
    DimensionMismatchError,
    DomainError,
    IntegrationDivergedError,
    MalformedHeaderError,
    TruncatedPayloadError,
    ValidationError,
)

SCHEMES = ("euler", "midpoint", "rk4")

KIND_AFFINE = "analytic-affine"
KIND_MLP = "trained-mlp"


class VelocityField:
    """Base class: a deterministic, finite u(t, x) on t in [0,1].

    Subclasses set ``kind``, ``dimension`` and implement ``__call__`` for x of
    shape (d,) or (n, d), returning the same shape.
    """

    kind: str
    dimension: int

    def __call__(self, t, x):
        raise NotImplementedError


class AffineVelocityField(VelocityField):
    """Analytic field whose exact transport map is T(z) = mu + sigma * z.

    The flow path is x_t = (1 + t(sigma-1)) z + t mu, giving the velocity
    u(t, x) = (sigma-1)(x - t mu) / (1 + t(sigma-1)) + mu. Used as the
    closed-form fixture for integrator-order and Jacobian tests.
    """

    kind = KIND_AFFINE

    def __init__(self, mu, sigma):
        mu = np.asarray(mu, dtype=float)
        if mu.ndim != 1 or mu.size == 0:
            raise ValidationError("affine field needs a 1-d mean vector")
        sigma = float(sigma)
        if not sigma > 0:
            raise ValidationError(f"affine field scale must be positive, got {sigma}")
        self.mu = mu
        self.sigma = sigma
        self.dimension = mu.size

    def __call__(self, t, x):
        s = self.sigma - 1.0
        return s * (x - t * self.mu) / (1.0 + t * s) + self.mu

    def exact_map(self, z):
        """Closed-form endpoint T(z) = mu + sigma z."""
        return self.mu + self.sigma * np.asarray(z, dtype=float)

    def exact_path(self, t, z):
        """Closed-form intermediate state x_t = (1 + t(sigma-1)) z + t mu."""
        return (1.0 + t * (self.sigma - 1.0)) * np.asarray(z, dtype=float) + t * self.mu


def affine_velocity(mu, sigma) -> AffineVelocityField:
    """Analytic field transporting N(0, I) to N(mu, sigma^2 I)."""
    return AffineVelocityField(mu, sigma)


def zero_velocity(dimension: int) -> AffineVelocityField:
    """Field with u = 0 everywhere; the transport map is the identity."""
    return AffineVelocityField(np.zeros(dimension), 1.0)


class MlpVelocityField(VelocityField):
    """Fully connected tanh network u(t, x) with time appended as an input.

    ``layer_sizes`` runs (d+1, hidden..., d); parameters live in one flat
    float64 array (per layer: weight matrix row-major, then bias) and the
    weight/bias views share its memory, so in-place updates of ``params``
    are visible to evaluation. Smooth activations keep the transport map
    continuously differentiable.
    """

    kind = KIND_MLP

    def __init__(self, layer_sizes, params):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2:
            raise ValidationError("MLP needs at least input and output layers")
        if any(s < 1 for s in layer_sizes):
            raise ValidationError(f"layer sizes must be positive, got {layer_sizes}")
        if layer_sizes[0] != layer_sizes[-1] + 1:
            raise ValidationError(
                f"input width must be output width + 1 (time input), got {layer_sizes}"
            )
        expected = mlp_param_count(layer_sizes)
        params = np.asarray(params, dtype=float)
        if params.shape != (expected,):
            raise ValidationError(
                f"layer sizes {layer_sizes} imply {expected} parameters, got {params.size}"
            )
        self.layer_sizes = layer_sizes
        self.params = params
        self.dimension = layer_sizes[-1]
        self._layers = []
        offset = 0
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = params[offset : offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = params[offset : offset + n_out]
            offset += n_out
            self._layers.append((w, b))

    def __call__(self, t, x):
        if x.ndim == 1:
            a = np.empty(x.size + 1)
            a[:-1] = x
            a[-1] = t
            for w, b in self._layers[:-1]:
                a = np.tanh(w @ a + b)
            w, b = self._layers[-1]
            return w @ a + b
        n = x.shape[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=float), (n,)).reshape(n, 1)
        a = np.concatenate([x, tcol], axis=1)
        for w, b in self._layers[:-1]:
            a = np.tanh(a @ w.T + b)
        w, b = self._layers[-1]
        return a @ w.T + b


def mlp_param_count(layer_sizes) -> int:
    return sum(
        n_in * n_out + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:])
    )


@dataclass(frozen=True)
class TransportMap:
    """A velocity field plus a fixed-step scheme; immutable and thread-safe."""

    velocity_field: VelocityField
    scheme: str = "rk4"
    steps: int = 50

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if int(self.steps) < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")

    @property
    def dimension(self) -> int:
        return self.velocity_field.dimension


def _check_input(tmap: TransportMap, z):
    z = np.asarray(z, dtype=float)
    d = tmap.dimension
    if z.shape[-1:] != (d,) or z.ndim not in (1, 2):
        raise ValidationError(f"point shape {z.shape} incompatible with dimension {d}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("source point has non-finite entries")
    return z


def _advance(tmap: TransportMap, x, k: int):
    """One step of the chosen scheme from t = k/N. Stage times are exact grid fractions."""
    u = tmap.velocity_field
    n = tmap.steps
    h = 1.0 / n
    t0 = k / n
    if tmap.scheme == "euler":
        return x + h * u(t0, x)
    t_half = (2 * k + 1) / (2 * n)
    if tmap.scheme == "midpoint":
        k1 = u(t0, x)
        return x + h * u(t_half, x + (h / 2.0) * k1)
    t1 = (k + 1) / n
    k1 = u(t0, x)
    k2 = u(t_half, x + (h / 2.0) * k1)
    k3 = u(t_half, x + (h / 2.0) * k2)
    k4 = u(t1, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(tmap: TransportMap, z):
    """Transport z (shape (d,) or (n, d)) through the flow ODE to its data image.

    Pure and deterministic; fails fast with the step index if any state
    entry becomes non-finite.
    """
    x = _check_input(tmap, z).copy()
    for k in range(tmap.steps):
        x = _advance(tmap, x, k)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(k)
    return x


def integrate_trajectory(tmap: TransportMap, z):
    """All N+1 states [(t_k, x_k)] along the flow; the endpoint equals integrate()."""
    x = _check_input(tmap, z).copy()
    out = [(0.0, x.copy())]
    for k in range(tmap.steps):
        x = _advance(tmap, x, k)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(k)
        out.append(((k + 1) / tmap.steps, x.copy()))
    return out


# --- elementwise source gaussianization -------------------------------------


class StandardNormalMarginal:
    """Identity transform; the native marginal is already standard normal."""

    name = "standard-normal"

    def to_gauss(self, v):
        return np.asarray(v, dtype=float)

    def from_gauss(self, z):
        return np.asarray(z, dtype=float)

    def in_support(self, v):
        return np.isfinite(v)


class UniformMarginal:
    name = "uniform"

    def __init__(self, a, b):
        if not float(a) < float(b):
            raise ValidationError(f"uniform marginal needs a < b, got [{a}, {b}]")
        self.a = float(a)
        self.b = float(b)

    def to_gauss(self, v):
        return ndtri((np.asarray(v, dtype=float) - self.a) / (self.b - self.a))

    def from_gauss(self, z):
        return self.a + (self.b - self.a) * ndtr(np.asarray(z, dtype=float))

    def in_support(self, v):
        return (v > self.a) & (v < self.b)


class LogNormalMarginal:
    """Native marginal exp(mu + sigma * Z); both directions are exact in log space."""

    name = "log-normal"

    def __init__(self, mu, sigma):
        if not float(sigma) > 0:
            raise ValidationError(f"log-normal marginal needs sigma > 0, got {sigma}")
        self.mu = float(mu)
        self.sigma = float(sigma)

    def to_gauss(self, v):
        return (np.log(np.asarray(v, dtype=float)) - self.mu) / self.sigma

    def from_gauss(self, z):
        return np.exp(self.mu + self.sigma * np.asarray(z, dtype=float))

    def in_support(self, v):
        return np.isfinite(v) & (v > 0)


@dataclass(frozen=True)
class SourceTransform:
    """Per-dimension change of variables between native marginals and N(0, 1)."""

    marginals: tuple = field(default_factory=tuple)

    @property
    def dimension(self) -> int:
        return len(self.marginals)

    def _check_shape(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1:] != (self.dimension,) or v.ndim not in (1, 2):
            raise ValidationError(
                f"vector shape {v.shape} incompatible with {self.dimension} marginals"
            )
        return v


def gaussianize(transform: SourceTransform, v):
    """Map native-space v to standard-normal space, dimension by dimension."""
    v = transform._check_shape(v)
    out = np.empty_like(v)
    for i, m in enumerate(transform.marginals):
        col = v[..., i]
        ok = m.in_support(col)
        if not np.all(ok):
            raise DomainError(f"entry outside {m.name} support in dimension {i}")
        out[..., i] = m.to_gauss(col)
    return out


def degaussianize(transform: SourceTransform, z):
    """Map standard-normal space z back to native space (inverse of gaussianize)."""
    z = transform._check_shape(z)
    if not np.all(np.isfinite(z)):
        raise DomainError("standard-normal-space vector has non-finite entries")
    out = np.empty_like(z)
    for i, m in enumerate(transform.marginals):
        out[..., i] = m.from_gauss(z[..., i])
    return out


# --- velocity-field files ----------------------------------------------------

_MAGIC = b"EFVF"
_FORMAT_VERSION = 1
_KIND_TAGS = {KIND_AFFINE: 0, KIND_MLP: 1}
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_field(field_obj: VelocityField, path):
    """Write a field as magic, version, kind tag, dimension, layer sizes, f64 payload, checksum."""
    if isinstance(field_obj, AffineVelocityField):
        sizes = ()
        payload = np.concatenate([field_obj.mu, [field_obj.sigma]])
    elif isinstance(field_obj, MlpVelocityField):
        sizes = field_obj.layer_sizes
        payload = field_obj.params
    else:
        raise ValidationError(f"cannot serialize field of type {type(field_obj).__name__}")
    raw = payload.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HBI", _FORMAT_VERSION, _KIND_TAGS[field_obj.kind], field_obj.dimension))
        fh.write(struct.pack("<I", len(sizes)))
        for s in sizes:
            fh.write(struct.pack("<I", s))
        fh.write(raw)
        fh.write(struct.pack("<Q", _fnv1a64(raw)))


def load_field(path) -> VelocityField:
    """Read a field file; load(save(f)) evaluates bit-identically to f."""
    with open(path, "rb") as fh:
        data = fh.read()

    def take(n, what):
        nonlocal pos
        if len(data) - pos < n:
            raise TruncatedPayloadError(f"file ends inside {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != _MAGIC:
        raise MalformedHeaderError(f"bad magic bytes in {path}")
    version, kind_tag, dim = struct.unpack("<HBI", take(7, "header"))
    if version != _FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format version {version}")
    if kind_tag not in (0, 1):
        raise MalformedHeaderError(f"unknown kind tag {kind_tag}")
    if dim < 1:
        raise MalformedHeaderError(f"non-positive dimension {dim}")
    (n_sizes,) = struct.unpack("<I", take(4, "layer-size count"))
    sizes = [struct.unpack("<I", take(4, "layer-size list"))[0] for _ in range(n_sizes)]

    if kind_tag == 0:
        if sizes:
            raise DimensionMismatchError("affine field must have an empty layer-size list")
        n_params = dim + 1
    else:
        if len(sizes) < 2:
            raise DimensionMismatchError("MLP field needs at least two layer sizes")
        if sizes[0] != dim + 1 or sizes[-1] != dim:
            raise DimensionMismatchError(
                f"layer sizes {sizes} inconsistent with dimension {dim}"
            )
        n_params = mlp_param_count(sizes)

    raw = take(8 * n_params, "parameter payload")
    (stored,) = struct.unpack("<Q", take(8, "checksum"))
    if pos != len(data):
        raise MalformedHeaderError(f"{len(data) - pos} trailing bytes after checksum")
    if _fnv1a64(raw) != stored:
        raise ChecksumMismatchError(f"payload checksum mismatch in {path}")
    params = np.frombuffer(raw, dtype="<f8").astype(float)

    if kind_tag == 0:
        return AffineVelocityField(params[:dim], params[dim])
    return MlpVelocityField(sizes, params)
