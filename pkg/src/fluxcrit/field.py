"""Steady 3D vector fields on D minus the origin.

Every field evaluates in batch through :meth:`Field.evaluate`, which takes an
``(N, 3)`` array of points and returns an ``(N, 3)`` array of values. Points
where the field is undefined (inside the singular cutoff, outside a grid box,
inside a masked grid region) come back as rows of NaN so that batched
consumers such as the streamline tracer can react per point. The scalar
:func:`eval` raises instead.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    EvalAtSingularity,
    GridFormatError,
    NonPositiveSpacing,
    OutOfBounds,
    TruncatedPayload,
)

FOUR_PI = 4.0 * math.pi
SINGULAR_CUTOFF = 1e-12

FLXF_MAGIC = b"FLXF0001"
_FLXF_HEADER = struct.Struct("<3Q3d3d")


def norm2(x):
    """Row-wise squared norm with a fixed summation order."""
    return x[:, 0] * x[:, 0] + x[:, 1] * x[:, 1] + x[:, 2] * x[:, 2]


def as_points(x):
    pts = np.ascontiguousarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {pts.shape}")
    return pts


class Field:
    """Base class. Subclasses implement ``evaluate``."""

    #: exception raised by :func:`eval` when a point is not evaluable
    eval_error = EvalAtSingularity

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return eval(self, x)

    def __add__(self, other):
        return superpose(1.0, self, 1.0, other)

    def __rmul__(self, a):
        return Superposition(((float(a), self),))

    def _classify_failure(self, x: np.ndarray) -> type:
        return self.eval_error


def eval(field: Field, x) -> np.ndarray:
    """Evaluate ``field`` at a single point, raising when it is undefined there."""
    pts = as_points(x)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite evaluation point")
    u = field.evaluate(pts)[0]
    if not np.all(np.isfinite(u)):
        exc = field._classify_failure(pts[0])
        raise exc(f"{field.describe()} is not evaluable at {tuple(pts[0])}")
    return u


def _singular_mask(r2: np.ndarray, cutoff: float) -> np.ndarray:
    return r2 < cutoff * cutoff


@dataclass(frozen=True)
class Sink(Field):
    """Point sink ``u = -strength * x / (4 pi |x|^3)``; total flux ``-strength``."""

    strength: float = 1.0
    cutoff: float = SINGULAR_CUTOFF

    def evaluate(self, points):
        x = as_points(points)
        r2 = norm2(x)
        bad = _singular_mask(r2, self.cutoff)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = -self.strength / (FOUR_PI * r2 * np.sqrt(r2))
        scale[bad] = np.nan
        return x * scale[:, None]

    def describe(self):
        return f"sink:strength={self.strength!r}"


@dataclass(frozen=True)
class Uniform(Field):
    direction: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def __post_init__(self):
        d = tuple(float(c) for c in self.direction)
        if len(d) != 3 or not all(math.isfinite(c) for c in d):
            raise ConfigError(f"uniform direction must be 3 finite numbers, got {self.direction}")
        object.__setattr__(self, "direction", d)

    def evaluate(self, points):
        x = as_points(points)
        return np.broadcast_to(np.asarray(self.direction), x.shape).copy()

    def describe(self):
        return "uniform:dir=" + ",".join(repr(c) for c in self.direction)


@dataclass(frozen=True)
class Rotating(Field):
    """Swirl about the z axis, ``u = (x2, -x1, 0) / |x|^gamma``.

    Tangent to every sphere centred at the origin, so no streamline ever
    reaches a smaller sphere.
    """

    gamma: float = 1.0
    cutoff: float = SINGULAR_CUTOFF

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ConfigError("rotating gamma must be finite")

    def evaluate(self, points):
        x = as_points(points)
        r2 = norm2(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.power(r2, -0.5 * self.gamma)
        if self.gamma > 0:
            scale[_singular_mask(r2, self.cutoff)] = np.nan
        out = np.empty_like(x)
        out[:, 0] = x[:, 1] * scale
        out[:, 1] = -x[:, 0] * scale
        out[:, 2] = 0.0 * scale
        return out

    def describe(self):
        return f"rotating:gamma={self.gamma!r}"


@dataclass(frozen=True)
class RadialPower(Field):
    """Radial field ``sign * x/|x| * |x|^-beta``.

    Divergence-free only for ``beta == 2`` (where it is a sink/source of
    total flux ``sign * 4 pi``). Other exponents are deliberate negative
    controls: the flux through ``dB_r`` is ``sign * 4 pi r^(2-beta)``.
    """

    beta: float = 2.0
    sign: float = -1.0
    cutoff: float = SINGULAR_CUTOFF

    def __post_init__(self):
        if self.sign not in (1.0, -1.0):
            raise ConfigError("radialpower sign must be +1 or -1")

    def evaluate(self, points):
        x = as_points(points)
        r2 = norm2(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = self.sign * np.power(r2, -0.5 * (self.beta + 1.0))
        scale[_singular_mask(r2, self.cutoff)] = np.nan
        return x * scale[:, None]

    def describe(self):
        return f"radialpower:beta={self.beta!r},sign={int(self.sign)}"


@dataclass(frozen=True)
class Superposition(Field):
    terms: tuple = ()

    def __post_init__(self):
        if not self.terms:
            raise ConfigError("superposition needs at least one term")
        object.__setattr__(self, "terms", tuple((float(a), f) for a, f in self.terms))

    def evaluate(self, points):
        x = as_points(points)
        out = np.zeros_like(x)
        for a, f in self.terms:
            if a == 0.0:
                continue
            out += a * f.evaluate(x)
        return out

    def _classify_failure(self, x):
        for a, f in self.terms:
            if a != 0.0 and not np.all(np.isfinite(f.evaluate(x[None, :]))):
                return f._classify_failure(x)
        return self.eval_error

    def describe(self):
        return "+".join(f"{a!r}*{f.describe()}" for a, f in self.terms)


def superpose(a: float, f: Field, b: float, g: Field) -> Field:
    """Pointwise ``a*f + b*g``; divergence-free fields stay divergence-free."""
    return Superposition(((a, f), (b, g)))


@dataclass(frozen=True, eq=False)
class GridField(Field):
    """Trilinear interpolation of samples on a regular box.

    ``samples`` has shape ``(nz, ny, nx, 3)`` so that C order matches the
    x-fastest file layout. NaN components mark masked points; any query whose
    interpolation stencil touches one is out of bounds.
    """

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    samples: np.ndarray = dc_field(repr=False)
    path: str | None = None

    eval_error = OutOfBounds

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if any(n < 2 for n in dims):
            raise GridFormatError(f"grid needs at least 2 samples per axis, got {dims}")
        spacing = tuple(float(h) for h in self.spacing)
        if not all(h > 0 for h in spacing):
            raise NonPositiveSpacing(f"grid spacing must be positive, got {spacing}")
        nx, ny, nz = dims
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.size != nx * ny * nz * 3:
            raise TruncatedPayload(
                f"expected {nx * ny * nz} samples, got {samples.size / 3:g}")
        samples = samples.reshape(nz, ny, nx, 3)
        samples.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "samples", samples)

    @property
    def upper(self):
        return tuple(o + (n - 1) * h for o, n, h in zip(self.origin, self.dims, self.spacing))

    def evaluate(self, points):
        x = as_points(points)
        nx, ny, nz = self.dims
        n = np.array(self.dims, dtype=np.float64)
        f = (x - np.asarray(self.origin)) / np.asarray(self.spacing)
        inside = np.all((f >= -1e-9) & (f <= n - 1 + 1e-9), axis=1)
        f = np.clip(np.nan_to_num(f), 0.0, n - 1)
        i0 = np.minimum(np.floor(f), n - 2).astype(np.int64)
        t = f - i0
        flat = self.samples.reshape(-1, 3)
        out = np.zeros_like(x)
        for di in (0, 1):
            wx = t[:, 0] if di else 1.0 - t[:, 0]
            for dj in (0, 1):
                wy = t[:, 1] if dj else 1.0 - t[:, 1]
                for dk in (0, 1):
                    wz = t[:, 2] if dk else 1.0 - t[:, 2]
                    idx = (i0[:, 0] + di) + nx * ((i0[:, 1] + dj) + ny * (i0[:, 2] + dk))
                    out += (wx * wy * wz)[:, None] * flat[idx]
        out[~inside] = np.nan
        return out

    def describe(self):
        return f"grid:path={self.path}" if self.path else f"grid:dims={self.dims}"

    def to_bytes(self) -> bytes:
        header = _FLXF_HEADER.pack(*self.dims, *self.origin, *self.spacing)
        return FLXF_MAGIC + header + self.samples.astype("<f8").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def grid_from_bytes(data: bytes, path: str | None = None) -> GridField:
    if len(data) < 8 or data[:8] != FLXF_MAGIC:
        raise BadMagic(f"not an FLXF file (magic {data[:8]!r})")
    if len(data) < 8 + _FLXF_HEADER.size:
        raise TruncatedPayload("FLXF header truncated")
    vals = _FLXF_HEADER.unpack_from(data, 8)
    dims, origin, spacing = vals[0:3], vals[3:6], vals[6:9]
    if not all(h > 0 for h in spacing):
        raise NonPositiveSpacing(f"grid spacing must be positive, got {spacing}")
    payload = data[8 + _FLXF_HEADER.size:]
    expected = dims[0] * dims[1] * dims[2] * 3 * 8
    if len(payload) != expected:
        raise TruncatedPayload(f"expected {expected} payload bytes, got {len(payload)}")
    samples = np.frombuffer(payload, dtype="<f8")
    return GridField(dims=dims, origin=origin, spacing=spacing, samples=samples, path=path)


def load_grid(path) -> GridField:
    return grid_from_bytes(Path(path).read_bytes(), path=str(path))


def sample_to_grid(field: Field, dims, lower, upper) -> GridField:
    """Sample an analytic field on a regular box; unevaluable nodes become NaN."""
    dims = tuple(int(n) for n in dims)
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(lower, upper, dims)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    spacing = tuple((hi - lo) / (n - 1) for lo, hi, n in zip(lower, upper, dims))
    return GridField(dims=dims, origin=tuple(lower), spacing=spacing, samples=field.evaluate(pts))


def _d4(f_m2, f_m1, f_p1, f_p2, h):
    # fourth-order central difference
    return (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * h)


def divergence_residual(field: Field, x, h: float) -> float:
    """Central-difference estimate of div u at ``x`` (fourth-order stencil)."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        vals = [eval(field, x + k * e)[i] for k in (-2, -1, 1, 2)]
        total += _d4(*vals, h)
    return float(total)


def divergence_residuals(field: Field, points, h: float) -> np.ndarray:
    """Vectorised :func:`divergence_residual`; NaN where a stencil is unevaluable."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = as_points(points)
    total = np.zeros(len(x))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        vals = [field.evaluate(x + k * e)[:, i] for k in (-2, -1, 1, 2)]
        total += _d4(*vals, h)
    return total


def max_divergence_residual(field: Field, r_min: float, r_max: float, n: int = 100,
                            h: float = 1e-4, seed: int = 0) -> float:
    """Largest |div u| estimate over random points in an annulus."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.sqrt(norm2(d))[:, None]
    rad = rng.uniform(r_min, r_max, size=n)
    res = divergence_residuals(field, d * rad[:, None], h)
    return float(np.nanmax(np.abs(res)))


# -- mini-language ---------------------------------------------------------

_TERM_SPLIT = re.compile(r"\s*\+\s*(?=(?:[0-9.eE+-]+\s*\*\s*)?[A-Za-z])")


def parse_params(text: str) -> dict[str, str]:
    """Parse ``k=v,k2=a,b,c`` where bare tokens extend the previous value."""
    params: dict[str, str] = {}
    last = None
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if "=" in tok:
            k, v = tok.split("=", 1)
            last = k.strip().lower()
            params[last] = v.strip()
        elif last is None:
            raise ConfigError(f"malformed parameter list {text!r}")
        else:
            params[last] += "," + tok
    return params


def _floats(text: str, n: int) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected {n} numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {text!r}")
    return vals


def _build_term(name: str, params: dict[str, str]) -> Field:
    if name == "sink":
        return Sink(strength=float(params.pop("strength", 1.0)))
    if name == "uniform":
        d = params.pop("dir", params.pop("direction", "0,0,-1"))
        return Uniform(direction=_floats(d, 3))
    if name == "rotating":
        return Rotating(gamma=float(params.pop("gamma", 1.0)))
    if name == "radialpower":
        return RadialPower(beta=float(params.pop("beta", 2.0)), sign=float(params.pop("sign", -1)))
    if name == "grid":
        if "path" not in params:
            raise ConfigError("grid field needs path=")
        return load_grid(params.pop("path"))
    raise ConfigError(f"unknown field kind {name!r}")


def _parse_term(text: str) -> Field:
    name, _, rest = text.partition(":")
    name = name.strip().lower()
    params = parse_params(rest)
    try:
        f = _build_term(name, params)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad parameters for {name!r}: {exc}") from None
    if params:
        raise ConfigError(f"unknown parameters for {name}: {sorted(params)}")
    return f


def parse_field(text: str) -> Field:
    """Build a field from ``name:key=value,...`` terms joined by ``+``.

    Terms may carry a coefficient, e.g. ``2*sink:strength=1+rotating:gamma=2``.
    """
    parts = [p.strip() for p in _TERM_SPLIT.split(text.strip()) if p.strip()]
    if not parts:
        raise ConfigError("empty field specification")
    terms = []
    for part in parts:
        coef = 1.0
        m = re.match(r"^([-+]?[0-9.]+(?:[eE][-+]?\d+)?)\s*\*\s*(.*)$", part)
        if m:
            coef, part = float(m.group(1)), m.group(2)
        terms.append((coef, _parse_term(part)))
    if len(terms) == 1 and terms[0][0] == 1.0:
        return terms[0][1]
    return Superposition(tuple(terms))
