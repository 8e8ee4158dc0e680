"""Domains, sampled fields, norms and derivative stencils.

Two domain kinds are supported:

* ``torus`` -- periodic cell ``[0, L_1) x ... x [0, L_n)``; derivatives are
  spectral.
* ``box`` -- truncated cube ``[-a_1, a_1] x ... x [-a_n, a_n]`` sampled at cell
  centres; fields are assumed to decay towards the faces.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Domain",
    "Field",
    "derivative",
    "norm",
    "divergence",
    "gradient",
    "multi_indices",
    "save_field",
    "load_field",
]


@dataclass(frozen=True)
class Domain:
    """Rectangular sampling domain.

    Parameters
    ----------
    kind : {"torus", "box"}
    shape : tuple of int
        Grid points per axis.
    extent : tuple of float
        Period per axis (torus) or half-width per axis (box).
    """

    kind: str
    shape: tuple
    extent: tuple

    def __post_init__(self):
        if self.kind not in ("torus", "box"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        shape = tuple(int(s) for s in self.shape)
        extent = tuple(float(e) for e in self.extent)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "extent", extent)
        if len(shape) != len(extent):
            raise ValueError("shape and extent must have the same length")
        if len(shape) < 2:
            raise ValueError("dimension must be at least 2")
        for s in shape:
            if s < 8:
                raise ValueError("every axis needs at least 8 points")
            if self.kind == "torus" and s & (s - 1):
                raise ValueError("torus axes must be powers of two")
        if any(e <= 0 for e in extent):
            raise ValueError("extent must be positive")

    @classmethod
    def torus(cls, shape, period=2 * np.pi):
        shape = tuple(shape)
        if np.isscalar(period):
            period = (period,) * len(shape)
        return cls("torus", shape, tuple(period))

    @classmethod
    def box(cls, shape, half_width):
        shape = tuple(shape)
        if np.isscalar(half_width):
            half_width = (half_width,) * len(shape)
        return cls("box", shape, tuple(half_width))

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple:
        if self.kind == "torus":
            return tuple(L / s for L, s in zip(self.extent, self.shape))
        return tuple(2.0 * a / s for a, s in zip(self.extent, self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, i: int) -> np.ndarray:
        h = self.spacing[i]
        idx = np.arange(self.shape[i], dtype=float)
        if self.kind == "torus":
            return idx * h
        return -self.extent[i] + (idx + 0.5) * h

    def coords(self) -> list:
        """Coordinate arrays, one per axis, each of the full grid shape."""
        return np.meshgrid(*[self.axis(i) for i in range(self.n)], indexing="ij")

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c**2 for c in self.coords()))

    def wavenumbers(self) -> list:
        """Angular wavenumbers ``2*pi*xi`` per axis, broadcastable to the grid."""
        ks = []
        for i in range(self.n):
            k = 2 * np.pi * np.fft.fftfreq(self.shape[i], d=self.spacing[i])
            sl = [None] * self.n
            sl[i] = slice(None)
            ks.append(k[tuple(sl)])
        return ks

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "shape": list(self.shape), "extent": list(self.extent)}


@dataclass(frozen=True)
class Field:
    """Scalar or vector samples on a :class:`Domain`.

    ``data`` has shape ``(components, *domain.shape)`` and is stored read-only.
    """

    domain: Domain
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.shape == self.domain.shape:
            arr = arr[None]
        if arr.shape[1:] != self.domain.shape:
            raise ValueError(f"data shape {arr.shape} does not match domain {self.domain.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def components(self) -> int:
        return self.data.shape[0]

    @property
    def is_scalar(self) -> bool:
        return self.components == 1

    def component(self, i: int) -> "Field":
        return Field(self.domain, self.data[i : i + 1])

    @classmethod
    def zeros(cls, domain: Domain, components: int = 1) -> "Field":
        return cls(domain, np.zeros((components, *domain.shape)))

    @classmethod
    def from_function(cls, domain: Domain, func) -> "Field":
        """Sample ``func(*coords)``; a tuple return value gives a vector field."""
        out = func(*domain.coords())
        if isinstance(out, (tuple, list)):
            out = np.stack([np.broadcast_to(np.asarray(o, float), domain.shape) for o in out])
        else:
            out = np.broadcast_to(np.asarray(out, float), domain.shape)[None]
        return cls(domain, out)

    def _check(self, other: "Field"):
        if other.domain != self.domain or other.components != self.components:
            raise ValueError("fields live on different domains or have different component counts")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.domain, self.data + other.data)
        return Field(self.domain, self.data + other)

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.domain, self.data - other.data)
        return Field(self.domain, self.data - other)

    def __mul__(self, scalar):
        return Field(self.domain, self.data * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.domain, -self.data)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data)))


# --- derivatives -----------------------------------------------------------


def _spectral_derivative(arr: np.ndarray, domain: Domain, axis: int, order: int) -> np.ndarray:
    # arr has the domain shape; the transform is taken along one axis only
    N = domain.shape[axis]
    k = 2 * np.pi * np.fft.fftfreq(N, d=domain.spacing[axis])
    if order % 2 == 1 and N % 2 == 0:
        k[N // 2] = 0.0
    mult = (1j * k) ** order
    sl = [None] * arr.ndim
    sl[axis] = slice(None)
    out = np.fft.ifft(np.fft.fft(arr, axis=axis) * mult[tuple(sl)], axis=axis)
    return out.real


def _stencil_derivative(arr: np.ndarray, h: float, axis: int, order: int) -> np.ndarray:
    a = np.moveaxis(arr, axis, 0)
    out = np.empty_like(a)
    if order == 1:
        out[2:-2] = (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / (12 * h)
        out[1] = (a[2] - a[0]) / (2 * h)
        out[-2] = (a[-1] - a[-3]) / (2 * h)
        out[0] = (-3 * a[0] + 4 * a[1] - a[2]) / (2 * h)
        out[-1] = (3 * a[-1] - 4 * a[-2] + a[-3]) / (2 * h)
    else:
        h2 = h * h
        out[2:-2] = (-a[:-4] + 16 * a[1:-3] - 30 * a[2:-2] + 16 * a[3:-1] - a[4:]) / (12 * h2)
        out[1] = (a[0] - 2 * a[1] + a[2]) / h2
        out[-2] = (a[-3] - 2 * a[-2] + a[-1]) / h2
        out[0] = (2 * a[0] - 5 * a[1] + 4 * a[2] - a[3]) / h2
        out[-1] = (2 * a[-1] - 5 * a[-2] + 4 * a[-3] - a[-4]) / h2
    return np.moveaxis(out, 0, axis)


def derivative_array(arr: np.ndarray, domain: Domain, axis: int, order: int = 1) -> np.ndarray:
    """Derivative of a bare array with the domain's grid shape (no Field wrapper)."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if not 0 <= axis < domain.n:
        raise IndexError(f"axis {axis} out of range for n={domain.n}")
    if domain.kind == "torus":
        return _spectral_derivative(arr, domain, axis, order)
    return _stencil_derivative(arr, domain.spacing[axis], axis, order)


def derivative(f: Field, axis: int, order: int = 1) -> Field:
    """Partial derivative of every component along ``axis``.

    Spectral on the torus; fourth-order centred differences in the interior of
    a box with second-order one-sided stencils at the faces.
    """
    if not 0 <= axis < f.domain.n:
        raise IndexError(f"axis {axis} out of range for n={f.domain.n}")
    out = np.stack([derivative_array(c, f.domain, axis, order) for c in f.data])
    return Field(f.domain, out)


def gradient(f: Field) -> Field:
    if not f.is_scalar:
        raise ValueError("gradient expects a scalar field")
    return Field(f.domain, np.stack([derivative_array(f.data[0], f.domain, a) for a in range(f.domain.n)]))


def divergence(v: Field) -> Field:
    """Sum of ``d v_j / d x_j``."""
    n = v.domain.n
    if v.components != n:
        raise ValueError(f"divergence needs an {n}-vector field, got {v.components} components")
    out = sum(derivative_array(v.data[j], v.domain, j) for j in range(n))
    return Field(v.domain, out[None])


# --- norms -----------------------------------------------------------------


def multi_indices(n: int, max_order: int):
    """All multi-indices ``alpha`` in N^n with ``|alpha| <= max_order``."""
    return [a for a in itertools.product(range(max_order + 1), repeat=n) if sum(a) <= max_order]


def _quadrature_weights(domain: Domain) -> np.ndarray | float:
    if domain.kind == "torus":
        return domain.cell_volume
    w = np.ones(domain.shape)
    for i in range(domain.n):
        sl = [slice(None)] * domain.n
        sl[i] = 0
        w[tuple(sl)] *= 0.5
        sl[i] = -1
        w[tuple(sl)] *= 0.5
    return w * domain.cell_volume


def _l2_squared(arr: np.ndarray, domain: Domain) -> float:
    w = _quadrature_weights(domain)
    return float(np.sum(w * arr * arr))


def _partial(arr: np.ndarray, domain: Domain, alpha) -> np.ndarray:
    out = arr
    for axis, a in enumerate(alpha):
        while a >= 2:
            out = derivative_array(out, domain, axis, 2)
            a -= 2
        if a == 1:
            out = derivative_array(out, domain, axis, 1)
    return out


def _sobolev_squared_torus(arr: np.ndarray, domain: Domain, m: int) -> float:
    ks = domain.wavenumbers()
    weight = np.zeros(domain.shape)
    for alpha in multi_indices(domain.n, m):
        term = np.ones(domain.shape)
        for k, a in zip(ks, alpha):
            term = term * k ** (2 * a)
        weight += term
    fh = np.fft.fftn(arr)
    total = np.prod(domain.shape)
    return float(np.sum(weight * np.abs(fh) ** 2)) * domain.cell_volume / total


def norm(f: Field, kind: str = "L2", m: int = 2, q: float = 0.0) -> float:
    """Norm of a field (all components together).

    Parameters
    ----------
    kind : {"L2", "Linf", "Hm", "weighted_Linf"}
    m : int
        Sobolev order for ``Hm`` (at most 4).
    q : float
        Polynomial weight exponent for ``weighted_Linf``: ``sup (1+|x|^q)|f|``.
    """
    d = f.domain
    if kind == "L2":
        return float(np.sqrt(sum(_l2_squared(c, d) for c in f.data)))
    if kind == "Linf":
        return f.max_abs()
    if kind == "Hm":
        if not 0 <= m <= 4:
            raise ValueError("Sobolev order must be in 0..4")
        if d.kind == "torus":
            s = sum(_sobolev_squared_torus(c, d, m) for c in f.data)
        else:
            s = sum(_l2_squared(_partial(c, d, alpha), d) for c in f.data for alpha in multi_indices(d.n, m))
        return float(np.sqrt(s))
    if kind == "weighted_Linf":
        if d.kind != "box":
            raise ValueError("weighted norms require a box domain")
        w = 1.0 + d.radius() ** q
        return float(np.max(w * np.max(np.abs(f.data), axis=0)))
    raise ValueError(f"unknown norm kind {kind!r}")


# --- snapshots -------------------------------------------------------------


def save_field(f: Field, path) -> tuple:
    """Write ``<path>.bin`` (little-endian f64, row-major) and ``<path>.json``."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    meta_path = path.with_suffix(".json")
    bin_path.write_bytes(f.data.astype("<f8").tobytes(order="C"))
    meta = f.domain.to_dict()
    meta.update(components=f.components, dtype="f64le", order="row-major")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path, meta_path


def load_field(path) -> Field:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dtype") != "f64le" or meta.get("order") != "row-major":
        raise ValueError("unsupported snapshot encoding")
    domain = Domain(meta["kind"], tuple(meta["shape"]), tuple(meta["extent"]))
    if meta["n"] != domain.n:
        raise ValueError("snapshot dimension does not match its shape")
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    expected = meta["components"] * int(np.prod(domain.shape))
    if raw.size != expected:
        raise ValueError(f"snapshot holds {raw.size} values, expected {expected}")
    return Field(domain, raw.reshape((meta["components"], *domain.shape)).astype(np.float64))
