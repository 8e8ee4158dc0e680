"""Poisson and heat kernels, the Leray source term and estimation constants.

Transform convention: ``F(f)(xi) = int exp(2 pi i xi.x) f(x) dx``.  With this
convention the heat semigroup for ``du/dtau = kappa Laplace u`` has symbol
``exp(-4 pi^2 |xi|^2 kappa tau)``; on the grid the angular wavenumber
``k = 2 pi xi`` is used throughout.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import gamma, pi

import numpy as np
from scipy.signal import fftconvolve

from .grid import Domain, Field, derivative_array

__all__ = [
    "sphere_area",
    "poisson_kernel",
    "EllipticKernel",
    "heat_convolve",
    "leray_source",
    "recover_pressure",
    "leray_project",
    "CKEstimate",
    "estimate_CK",
    "ck_origin_exact",
    "estimate_Cs",
    "leray_from_source",
    "leray_array",
    "velocity_gradient",
]


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere in R^n (``omega_3 = 4 pi``)."""
    return 2 * pi ** (n / 2) / gamma(n / 2)


def poisson_kernel(x, n: int | None = None):
    """Fundamental solution of the Laplacian, ``Laplace K_n = delta``.

    ``(1/2pi) ln|x|`` for n = 2 and ``|x|^(2-n) / ((2-n) omega_n)`` for n >= 3.
    ``x`` may be a single point or an array of points with the last axis of
    length n.
    """
    x = np.asarray(x, dtype=float)
    if n is None:
        n = x.shape[-1]
    if n < 2:
        raise ValueError("the Poisson kernel is defined here for n >= 2")
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r == 0):
        raise ValueError("the Poisson kernel is singular at x = 0")
    if n == 2:
        return np.log(r) / (2 * pi)
    return r ** (2 - n) / ((2 - n) * sphere_area(n))


def _poisson_gradient(x: np.ndarray, n: int) -> np.ndarray:
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / (sphere_area(n) * r**n)


@dataclass(frozen=True)
class EllipticKernel:
    """Kernel ``K(x - y)`` with ``|K| <= c|x|^(2-n)`` and ``|grad K| <= c|x|^(1-n)``.

    The default instance is the Poisson kernel multiplied by ``scale``.  The
    bound constants are measured on ``sample_radius`` at construction.
    """

    n: int
    scale: float = 1.0
    sample_radius: float = 10.0
    bound_value: float = field(init=False, default=0.0)
    bound_gradient: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("kernels are defined for n >= 2")
        rng = np.random.default_rng(12345)
        dirs = rng.normal(size=(256, self.n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = self.sample_radius * np.geomspace(1e-3, 1.0, 64)
        pts = (radii[:, None, None] * dirs[None]).reshape(-1, self.n)
        r = np.linalg.norm(pts, axis=1)
        val = np.abs(self.evaluate(pts))
        grad = np.linalg.norm(self.gradient(pts), axis=1)
        if self.n == 2:
            # log kernel: compare against |ln r| + 1 instead of r^0
            cv = np.max(val / (np.abs(np.log(r)) + 1.0))
        else:
            cv = np.max(val / r ** (2 - self.n))
        cg = np.max(grad / r ** (1 - self.n))
        if not (np.isfinite(cv) and np.isfinite(cg)):
            raise ValueError("kernel is not finite off the diagonal")
        object.__setattr__(self, "bound_value", float(cv))
        object.__setattr__(self, "bound_gradient", float(cg))

    @property
    def singularity_orders(self) -> tuple:
        return (2 - self.n, 1 - self.n)

    def evaluate(self, x):
        return self.scale * poisson_kernel(x, self.n)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * _poisson_gradient(x, self.n)


# --- heat semigroup --------------------------------------------------------


def _heat_array(arr: np.ndarray, domain: Domain, kt: float) -> np.ndarray:
    """Apply ``exp(kt Laplace)`` to an array of shape ``(c, *domain.shape)``."""
    if kt == 0.0:
        return arr.copy()
    n = domain.n
    axes = tuple(range(1, n + 1))
    if domain.kind == "torus":
        k2 = sum(k**2 for k in domain.wavenumbers())
        mult = np.exp(-k2 * kt)
        return np.fft.ifftn(np.fft.fftn(arr, axes=axes) * mult, axes=axes).real
    # box: zero padding by 8 standard deviations (capped at one box length)
    sigma = np.sqrt(2.0 * kt)
    padded = []
    for i in range(n):
        p = min(domain.shape[i], int(np.ceil(8 * sigma / domain.spacing[i])) + 1)
        padded.append(domain.shape[i] + p)
    k2 = 0.0
    for i in range(n):
        k = 2 * np.pi * np.fft.fftfreq(padded[i], d=domain.spacing[i])
        sl = [None] * n
        sl[i] = slice(None)
        k2 = k2 + k[tuple(sl)] ** 2
    mult = np.exp(-k2 * kt)
    out = np.fft.ifftn(np.fft.fftn(arr, s=padded, axes=axes) * mult, axes=axes).real
    return out[(slice(None),) + tuple(slice(0, s) for s in domain.shape)]


def heat_convolve(f: Field, kappa: float, tau: float) -> Field:
    """Heat semigroup ``exp(kappa tau Laplace) f`` (Gaussian of variance ``2 kappa tau``)."""
    kt = kappa * tau
    if kt < 0:
        raise ValueError("kappa * tau must be non-negative")
    return Field(f.domain, _heat_array(f.data, f.domain, kt))


# --- Leray term and pressure -----------------------------------------------


def _unit_cell_face_integral(func, n: int, order: int = 24) -> float:
    """Sum over the 2n faces of the unit cube ``[-1/2, 1/2]^n`` of ``int func dA``."""
    x, w = np.polynomial.legendre.leggauss(order)
    x, w = x / 2, w / 2
    grids = np.meshgrid(*([x] * (n - 1)), indexing="ij")
    wts = np.prod(np.meshgrid(*([w] * (n - 1)), indexing="ij"), axis=0).ravel()
    total = 0.0
    for axis in range(n):
        for side in (-0.5, 0.5):
            cols = [g.ravel() for g in grids]
            cols.insert(axis, np.full(wts.shape, side))
            total += float(np.sum(wts * func(np.stack(cols, axis=-1))))
    return total


@lru_cache(maxsize=None)
def _cell_average_abs_gradient(n: int, i: int) -> float:
    # |K_{n,i}| is homogeneous of degree 1-n; pyramid decomposition of the cell
    g = lambda y: np.abs(_poisson_gradient(y, n)[..., i])
    return _unit_cell_face_integral(g, n) / 2.0


@lru_cache(maxsize=None)
def _cell_average_poisson(n: int, h: float) -> float:
    if n == 2:
        # int_cell ln|z| = ln h + (1/2) sum_faces int (ln|y|/2 - 1/4) dA
        face = lambda y: 0.5 * np.log(np.linalg.norm(y, axis=-1)) - 0.25
        return (np.log(h) + 0.5 * _unit_cell_face_integral(face, n)) / (2 * pi)
    face = lambda y: np.linalg.norm(y, axis=-1) ** (2 - n)
    avg = _unit_cell_face_integral(face, n) / 4.0
    return h ** (2 - n) * avg / ((2 - n) * sphere_area(n))


def _offset_points(domain: Domain) -> np.ndarray:
    """Offsets ``j*h`` for ``j in [-(N-1), N-1]`` per axis, shape ``(*, n)``."""
    axes = [np.arange(-(s - 1), s) * h for s, h in zip(domain.shape, domain.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _singular_index(domain: Domain) -> tuple:
    return tuple(s - 1 for s in domain.shape)


def _box_gradient_kernels(domain: Domain, kernel: EllipticKernel) -> list:
    key = (domain, kernel.n, kernel.scale)
    cached = _BOX_CACHE.get(key)
    if cached is not None:
        return cached
    z = _offset_points(domain)
    c = _singular_index(domain)
    z[c] = 1.0  # placeholder, overwritten below
    g = kernel.gradient(z)
    out = []
    for i in range(domain.n):
        k = np.array(g[..., i])
        # odd kernel: the cell average over the singular cell vanishes
        k[c] = 0.0
        k.setflags(write=False)
        out.append(k)
    _BOX_CACHE[key] = out
    return out


def _box_poisson_kernel(domain: Domain, kernel: EllipticKernel) -> np.ndarray:
    key = ("K", domain, kernel.n, kernel.scale)
    cached = _BOX_CACHE.get(key)
    if cached is not None:
        return cached
    z = _offset_points(domain)
    c = _singular_index(domain)
    z[c] = 1.0
    k = np.array(kernel.evaluate(z))
    if len(set(domain.spacing)) != 1:
        raise ValueError("box pressure recovery needs a uniform spacing")
    k[c] = kernel.scale * _cell_average_poisson(domain.n, domain.spacing[0])
    k.setflags(write=False)
    _BOX_CACHE[key] = k
    return k


_BOX_CACHE: dict = {}


def _box_convolve(src: np.ndarray, kern: np.ndarray, domain: Domain) -> np.ndarray:
    full = fftconvolve(src, kern, mode="full")
    sl = tuple(slice(s - 1, 2 * s - 1) for s in domain.shape)
    return full[sl] * domain.cell_volume


def velocity_gradient(arr: np.ndarray, domain: Domain) -> np.ndarray:
    """``J[k, j] = d v_k / d x_j`` for an array of shape ``(n, *shape)``."""
    n = domain.n
    return np.stack([np.stack([derivative_array(arr[k], domain, j) for j in range(n)]) for k in range(n)])


def _bracket(Ja: np.ndarray, Jb: np.ndarray, c) -> np.ndarray:
    """``sum_{j,k} c_jk (d a_k/d x_j)(d b_j/d x_k)``."""
    n = Ja.shape[0]
    out = 0.0
    for j in range(n):
        for k in range(n):
            cjk = c[j][k]
            if np.isscalar(cjk) and cjk == 0:
                continue
            out = out + cjk * Ja[k, j] * Jb[j, k]
    return np.broadcast_to(out, Ja.shape[2:]).astype(float)


def _gradient_of_inverse_laplacian(src: np.ndarray, domain: Domain, kernel: EllipticKernel, i: int) -> np.ndarray:
    """``int K_{n,i}(x - y) src(y) dy`` for one scalar source."""
    if domain.kind == "torus":
        if kernel.n != domain.n:
            raise ValueError("kernel dimension does not match the domain")
        ks = domain.wavenumbers()
        k2 = sum(k**2 for k in ks)
        ki = ks[i] * np.ones(domain.shape)
        N = domain.shape[i]
        if N % 2 == 0:
            idx = [slice(None)] * domain.n
            idx[i] = N // 2
            ki[tuple(idx)] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            mult = np.where(k2 > 0, -1j * ki / k2, 0.0)
        return kernel.scale * np.fft.ifftn(np.fft.fftn(src) * mult).real
    return _box_convolve(src, _box_gradient_kernels(domain, kernel)[i], domain)


def leray_array(
    v: np.ndarray,
    domain: Domain,
    couplings=None,
    linear=None,
    w: np.ndarray | None = None,
    kernel: EllipticKernel | None = None,
    Jv: np.ndarray | None = None,
    Jw: np.ndarray | None = None,
) -> np.ndarray:
    """Array-level Leray source; see :func:`leray_source`."""
    n = domain.n
    if n < 2:
        raise ValueError("n must be at least 2")
    if kernel is None:
        kernel = EllipticKernel(n) if n not in _DEFAULT_KERNELS else _DEFAULT_KERNELS[n]
    if couplings is None:
        couplings = np.ones((n, n))
    if Jv is None:
        Jv = velocity_gradient(v, domain)
    if w is None:
        Jw = Jv
    elif Jw is None:
        Jw = velocity_gradient(w, domain)
    base = _bracket(Jv, Jw, couplings)
    out = np.empty((n, *domain.shape))
    has_linear = linear is not None and not all(np.isscalar(d) and d == 0 for d in linear)
    for i in range(n):
        src = base
        if has_linear:
            src = base + sum(linear[k] * Jw[i, k] for k in range(n))
        out[i] = _gradient_of_inverse_laplacian(src, domain, kernel, i)
    return out


_DEFAULT_KERNELS = {n: EllipticKernel(n) for n in (2, 3, 4)}


def leray_source(v: Field, couplings=None, linear=None, kernel: EllipticKernel | None = None, w: Field | None = None) -> Field:
    """Leray source term.

    Component ``i`` is ``int K_{n,i}(x-y) [sum_{jk} c_jk v_{k,j} w_{j,k} +
    sum_k d_k w_{i,k}](y) dy`` with ``w = v`` unless given, where
    ``v_{k,j} = d v_k / d x_j``.  The coupling enters entrywise, so the
    classical term ``-grad p`` corresponds to ``c_jk = 1`` for all j, k, which
    is the default when ``couplings`` is None.

    On the torus the kernel acts as the multiplier ``-i k_i / |k|^2`` with the
    zero mode removed; on a box it is a zero-padded direct convolution.
    """
    n = v.domain.n
    if n < 2:
        raise ValueError("n must be at least 2")
    if v.components != n:
        raise ValueError("leray_source needs an n-vector field")
    wa = None if w is None else w.data
    return Field(v.domain, leray_array(v.data, v.domain, couplings, linear, wa, kernel))


def recover_pressure(v: Field, kernel: EllipticKernel | None = None) -> Field:
    """Pressure ``p = -int K_n(x-y) sum v_{k,j} v_{j,k}(y) dy`` (mean zero on the torus)."""
    d = v.domain
    if v.components != d.n:
        raise ValueError("recover_pressure needs an n-vector field")
    kernel = kernel or _DEFAULT_KERNELS.get(d.n) or EllipticKernel(d.n)
    J = velocity_gradient(v.data, d)
    src = _bracket(J, J, np.ones((d.n, d.n)))
    if d.kind == "torus":
        k2 = sum(k**2 for k in d.wavenumbers())
        with np.errstate(divide="ignore"):
            mult = np.where(k2 > 0, 1.0 / k2, 0.0)
        p = kernel.scale * np.fft.ifftn(np.fft.fftn(src) * mult).real
    else:
        p = -_box_convolve(src, _box_poisson_kernel(d, kernel), d)
    return Field(d, p[None])


def leray_project(v: Field) -> Field:
    """Divergence-free part of ``v`` (idempotent on the torus)."""
    d = v.domain
    n = d.n
    if v.components != n:
        raise ValueError("leray_project needs an n-vector field")
    if d.kind == "torus":
        # the Nyquist wavenumber is dropped, as in the spectral first derivative,
        # so the result is divergence-free for the grid divergence
        ks = []
        for i, k in enumerate(d.wavenumbers()):
            k = k.copy()
            if d.shape[i] % 2 == 0:
                k[(slice(None),) * 0 + tuple(d.shape[i] // 2 if a == i else slice(None) for a in range(n))] = 0.0
            ks.append(k)
        k2 = sum(k**2 for k in ks)
        vh = np.fft.fftn(v.data, axes=tuple(range(1, n + 1)))
        kdotv = sum(ks[i] * vh[i] for i in range(n))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(k2 > 0, kdotv / k2, 0.0)
        ph = np.stack([vh[i] - ks[i] * fac for i in range(n)])
        return Field(d, np.fft.ifftn(ph, axes=tuple(range(1, n + 1))).real)
    kernel = _DEFAULT_KERNELS.get(n) or EllipticKernel(n)
    div = sum(derivative_array(v.data[j], d, j) for j in range(n))
    grad_phi = np.stack([_box_convolve(div, _box_gradient_kernels(d, kernel)[i], d) for i in range(n)])
    return Field(d, v.data - grad_phi)


# --- estimation constants --------------------------------------------------


@dataclass(frozen=True)
class CKEstimate:
    value: float
    tail: float
    at_origin: float
    points: tuple

    @property
    def total(self) -> float:
        return self.value + self.tail


def _abs_sphere_moment(n: int) -> float:
    # int_{S^{n-1}} |theta_1| dOmega
    return 2 * pi ** ((n - 1) / 2) / gamma((n + 1) / 2)


def ck_origin_exact(n: int) -> float:
    """Closed form of ``int |K_{n,i}(y)| / (1+|y|^n) dy`` (whole space, x = 0)."""
    radial = (pi / n) / np.sin(pi / n)
    return _abs_sphere_moment(n) / sphere_area(n) * radial


def _sphere_rule(n: int, m: int):
    """Product quadrature on S^{n-1}: unit directions and weights.

    Polar angles use Gauss-Legendre split at pi/2 (where the first
    coordinates change sign); the azimuth uses Gauss-Legendre on each of the
    four quarter turns.
    """
    x, w = np.polynomial.legendre.leggauss(m)
    theta = np.concatenate([(x + 1) * pi / 4, (x + 3) * pi / 4])
    wt = np.concatenate([w, w]) * pi / 4
    # Gauss-Legendre on each quarter turn: |cos| and |sin| have their kinks there
    phi = np.concatenate([(x + 1 + 2 * q) * pi / 4 for q in range(4)])
    wphi = np.concatenate([w * pi / 4] * 4)
    grids = np.meshgrid(*([theta] * (n - 2) + [phi]), indexing="ij")
    wgrid = np.meshgrid(*([wt] * (n - 2) + [wphi]), indexing="ij")
    weight = np.prod(wgrid, axis=0)
    dirs = []
    prod_sin = np.ones_like(grids[0])
    for a in range(n - 2):
        dirs.append(prod_sin * np.cos(grids[a]))
        weight = weight * np.sin(grids[a]) ** (n - 2 - a)
        prod_sin = prod_sin * np.sin(grids[a])
    dirs.append(prod_sin * np.cos(grids[-1]))
    dirs.append(prod_sin * np.sin(grids[-1]))
    return np.stack([d.ravel() for d in dirs], axis=-1), weight.ravel()


def estimate_CK(domain: Domain, kernel: EllipticKernel | None = None, n_random: int = 8, seed: int = 0) -> CKEstimate:
    """Quadrature for ``max_i int |K_{n,i}(x-y)| (1+|y|^n)^-1 dy``.

    The integral is taken in spherical coordinates around ``x``, where the
    ``|z|^(1-n)`` singularity of the kernel gradient cancels against the volume
    element.  The radius runs up to the box half-width with Gauss-Legendre
    panels one grid spacing wide, so the domain's resolution sets the accuracy.
    Evaluated at ``x = 0`` and ``n_random`` random points of the inner half of
    the box; the maximum is returned together with an upper bound for the
    part of the integral outside the ball.
    """
    if domain.kind != "box":
        raise ValueError("estimate_CK integrates over R^n and needs a box domain")
    n = domain.n
    kernel = kernel or EllipticKernel(n)
    R = min(domain.extent)
    h = min(domain.spacing)
    panels = max(1, int(round(R / h)))
    gx, gw = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(0.0, R, panels + 1)
    mid, half = (edges[1:] + edges[:-1]) / 2, (edges[1:] - edges[:-1]) / 2
    r = (mid[:, None] + half[:, None] * gx[None]).ravel()
    wr = (half[:, None] * gw[None]).ravel()
    dirs, wd = _sphere_rule(n, max(8, min(domain.shape) // 8))
    # |K_i(r theta)| r^(n-1) = |theta_i| / omega_n (times the kernel scale)
    radial_free = np.abs(kernel.gradient(dirs)) * 1.0  # |z| = 1
    rng = np.random.default_rng(seed)
    pts = [np.zeros(n)] + [rng.uniform(-0.25, 0.25, size=n) * 2 * np.array(domain.extent) for _ in range(n_random)]
    values, tails = [], []
    moment = abs(kernel.scale) * _abs_sphere_moment(n) / sphere_area(n)
    for x in pts:
        y = x[None, None, :] - r[:, None, None] * dirs[None, :, :]
        wgt = 1.0 / (1.0 + np.linalg.norm(y, axis=-1) ** n)
        inner = wr @ wgt  # integrate over r first, one value per direction
        values.append(float(np.max(np.einsum("d,di,d->i", wd, radial_free, inner))))
        gap = max(R - float(np.linalg.norm(x)), h)
        tails.append(moment * gap ** (1 - n) / (n - 1))
    best = int(np.argmax(values))
    return CKEstimate(value=values[best], tail=float(tails[best]), at_origin=values[0], points=tuple(tuple(float(c) for c in p) for p in pts))


def estimate_Cs(n: int, s: float, trials: int = 32, seed: int = 0, points: int = 32, half_width: float = 6.0) -> float:
    """Empirical lower estimate of the weighted product constant ``C_s``.

    ``u = int (1+|y|^2)^(-s/2) v(x-y) w(y) dy``; returns the largest observed
    ``|u|_2 / (|v|_2 |w|_2)`` over a single-cell spike pair and ``trials - 1``
    random Gaussian bump pairs, clamped below by 1.
    """
    if s <= n / 2:
        raise ValueError("need s > n/2")
    h = 2 * half_width / points
    axis = np.arange(-points // 2, points // 2) * h
    coords = np.meshgrid(*([axis] * n), indexing="ij")
    r2 = sum(c**2 for c in coords)
    weight = (1.0 + r2) ** (-s / 2)
    vol = h**n
    rng = np.random.default_rng(seed)

    def l2(a):
        return np.sqrt(np.sum(a * a) * vol)

    best = 0.0
    for t in range(max(trials, 1)):
        if t == 0:
            v = (r2 == 0).astype(float)
            w = v.copy()
        else:
            c1, c2 = rng.uniform(-2, 2, size=(2, n))
            s1, s2 = rng.uniform(0.3, 2.0, size=2)
            v = np.exp(-sum((c - a) ** 2 for c, a in zip(coords, c1)) / (2 * s1**2))
            w = np.exp(-sum((c - a) ** 2 for c, a in zip(coords, c2)) / (2 * s2**2))
        u = fftconvolve(v, weight * w, mode="full") * vol
        ratio = l2(u) / (l2(v) * l2(w))
        best = max(best, ratio)
    return max(1.0, float(best))


def leray_from_source(src: np.ndarray, domain: Domain, kernel: EllipticKernel | None = None) -> np.ndarray:
    """Apply ``int K_{n,i}(x-y) src(y) dy`` for every component ``i``.

    ``src`` is either one scalar source shared by all components or an array
    of shape ``(n, *domain.shape)`` with one source per component.
    """
    n = domain.n
    kernel = kernel or _DEFAULT_KERNELS.get(n) or EllipticKernel(n)
    src = np.asarray(src, dtype=float)
    shared = src.shape == tuple(domain.shape)
    return np.stack([_gradient_of_inverse_laplacian(src if shared else src[i], domain, kernel, i) for i in range(n)])
