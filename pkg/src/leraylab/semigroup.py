"""Diffusion semigroups, Monte Carlo sampling and density envelopes.

The generator of a system is ``L = (1/2) sum_i V_i^2 + V_0``.  Expanding
``V_i(V_i u)`` gives the non-divergence form

    L u = sum_ab A_ab d_a d_b u + sum_b beta_b d_b u,

with ``A = (1/2) sum_i V_i V_i^T`` and ``beta = V_0 + (1/2) sum_i (DV_i) V_i``.
``beta`` is also the Itô drift of the diffusion sampled by
:func:`euler_maruyama_sample`, so the PDE and Monte Carlo sides describe the
same process.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import sympy as sp

from .grid import Domain, Field, derivative_array
from .hoermander import HormanderSystem, _lambdify
from .kernels import _heat_array

__all__ = [
    "apply_semigroup",
    "semigroup_array",
    "euler_maruyama_sample",
    "estimate_density",
    "DensityEstimate",
    "KSEnvelope",
    "fit_ks_envelope",
    "envelope_regression",
    "gaussian_density",
    "kolmogorov_density",
    "kolmogorov_covariance",
    "exact_gaussian_law",
    "relative_density_error",
    "CHUNK",
]

CHUNK = 4096
"""Samples per random stream; the partition is fixed so results never depend on threads."""

STABILITY = 0.2


# --- operator coefficients ---------------------------------------------------


def _operator_coefficients(sys: HormanderSystem, domain: Domain):
    cache = sys.__dict__.setdefault("_op_cache", {})
    if domain in cache:
        return cache[domain]
    a = sys.diffusion_matrix
    n = sys.n
    A = {}
    for i in range(n):
        for j in range(i, n):
            e = a[i, j] if i == j else 2 * a[i, j]
            if e != 0:
                A[(i, j)] = sys.evaluate([e], domain)[0]
    beta = {}
    for b, e in enumerate(sys.ito_drift):
        if e != 0:
            beta[b] = sys.evaluate([e], domain)[0]
    diag = sum((np.max(np.abs(A[(i, i)])) if (i, i) in A else 0.0) for i in range(n))
    drift = max((np.max(np.abs(v)) for v in beta.values()), default=0.0)
    cache[domain] = (A, beta, float(diag), float(drift))
    return cache[domain]


def _apply_generator(u: np.ndarray, domain: Domain, A: dict, beta: dict) -> np.ndarray:
    n = domain.n
    first = [derivative_array(u, domain, a) for a in range(n)]
    out = np.zeros(domain.shape)
    for (i, j), coef in A.items():
        if i == j:
            out += coef * derivative_array(u, domain, i, 2)
        else:
            out += coef * derivative_array(first[i], domain, j)
    for b, coef in beta.items():
        out += coef * first[b]
    return out


def _substeps(domain: Domain, tau: float, diag: float, drift: float) -> int:
    h = min(domain.spacing)
    limit = math.inf
    if diag > 0:
        limit = min(limit, STABILITY * h * h / diag)
    if drift > 0:
        limit = min(limit, STABILITY * h / drift)
    if not math.isfinite(limit):
        return 1
    return max(1, int(math.ceil(tau / limit)))


def semigroup_array(sys: HormanderSystem, arr: np.ndarray, domain: Domain, tau: float, backend: str = "spectral") -> np.ndarray:
    """Array version of :func:`apply_semigroup` for shape ``(c, *domain.shape)``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if tau == 0:
        return arr.copy()
    if backend == "spectral":
        kappa = sys.heat_diffusivity()
        if kappa is None:
            raise ValueError("the spectral backend needs constant isotropic coefficients and no drift")
        # array level: non-finite values must reach the caller's own check
        return _heat_array(arr, domain, kappa * tau)
    if backend != "fd_substep":
        raise ValueError(f"unknown backend {backend!r}")
    A, beta, diag, drift = _operator_coefficients(sys, domain)
    steps = _substeps(domain, tau, diag, drift)
    dt = tau / steps
    out = np.empty_like(arr)
    for c, u in enumerate(arr):
        u = u.copy()
        for _ in range(steps):
            # classical fourth-order Runge-Kutta; explicit Euler is unstable
            # for centred advection stencils
            k1 = _apply_generator(u, domain, A, beta)
            k2 = _apply_generator(u + 0.5 * dt * k1, domain, A, beta)
            k3 = _apply_generator(u + 0.5 * dt * k2, domain, A, beta)
            k4 = _apply_generator(u + dt * k3, domain, A, beta)
            u = u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[c] = u
    return out


def apply_semigroup(sys: HormanderSystem, f: Field, tau: float, backend: str = "spectral") -> Field:
    """Solve ``du/dtau = L u`` for time ``tau`` starting from ``f``.

    Parameters
    ----------
    backend : {"spectral", "fd_substep"}
        ``spectral`` is the exact heat multiplier and is only valid when
        ``L = kappa * Laplace``.  ``fd_substep`` works for any system: grid
        stencils for the spatial operator and fourth-order Runge-Kutta
        sub-steps obeying ``sum_a max A_aa * dtau / h^2 <= 0.2`` and
        ``max |beta| * dtau / h <= 0.2``.
    """
    if f.domain.n != sys.n:
        raise ValueError("field and system dimensions differ")
    return Field(f.domain, semigroup_array(sys, f.data, f.domain, tau, backend))


# --- sampling ------------------------------------------------------------------


def _chunk_generator(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))


def euler_maruyama_sample(
    sys: HormanderSystem,
    x0,
    tau: float,
    steps: int = 64,
    N: int = 10_000,
    seed: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Endpoints of ``N`` Euler-Maruyama paths of ``dX = beta dt + sum_i V_i dW_i``.

    Samples are processed in fixed chunks of :data:`CHUNK`, chunk ``c`` drawing
    its noise from a Philox stream keyed by ``(seed, c)``.  The output is
    therefore bit-identical for any ``threads`` value.

    Returns
    -------
    ndarray of shape ``(N, n)``
    """
    if steps < 16:
        raise ValueError("steps must be >= 16")
    if N < 0:
        raise ValueError("N must be non-negative")
    n = sys.n
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have length {n}")
    out = np.empty((N, n))
    if N == 0:
        return out
    drift = _lambdify(sys.ito_drift, sys.symbols)
    has_drift = any(e != 0 for e in sys.ito_drift)
    sigma_exprs = [e for V in sys.diffusion for e in V]
    noisy = any(e != 0 for e in sigma_exprs)
    sigma = _lambdify(sigma_exprs, sys.symbols)
    m = sys.m
    dt = tau / steps
    sq = math.sqrt(dt)

    def run(c: int):
        lo, hi = c * CHUNK, min(N, (c + 1) * CHUNK)
        X = np.broadcast_to(x0, (hi - lo, n)).copy()
        rng = _chunk_generator(seed, c)
        for _ in range(steps):
            incr = np.zeros_like(X)
            if has_drift:
                incr += drift(X).T * dt
            if noisy:
                dW = rng.standard_normal((hi - lo, m)) * sq
                S = sigma(X).reshape(m, n, hi - lo)
                incr += np.einsum("mnk,km->kn", S, dW)
            X = X + incr
        out[lo:hi] = X

    chunks = range((N + CHUNK - 1) // CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    else:
        for c in chunks:
            run(c)
    return out


# --- densities -------------------------------------------------------------------


@dataclass(frozen=True)
class DensityEstimate:
    """Kernel density estimate on a box grid.

    ``bandwidth`` holds the per-axis kernel widths and ``bandwidth_matrix``
    the full kernel covariance (diagonal unless the ``scott`` rule is used).
    """

    density: Field
    N: int
    bandwidth: tuple
    x0: tuple = None
    tau: float = None
    bandwidth_matrix: np.ndarray = field(default=None, repr=False)
    order: int = 2

    @property
    def mass(self) -> float:
        return float(np.sum(self.density.data) * self.density.domain.cell_volume)

    @property
    def noise_floor(self) -> float:
        """Density produced by a single sample, a natural KDE resolution limit."""
        H = self.bandwidth_matrix if self.bandwidth_matrix is not None else np.diag(np.square(self.bandwidth))
        n = H.shape[0]
        return 1.0 / (self.N * math.sqrt((2 * math.pi) ** n * np.linalg.det(H)))


def _linear_binning(samples: np.ndarray, grid: Domain) -> np.ndarray:
    n = grid.n
    h = np.asarray(grid.spacing)
    lo = -np.asarray(grid.extent, dtype=float) + h / 2
    u = (samples - lo) / h
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    counts = np.zeros(int(np.prod(grid.shape)))
    shape = np.asarray(grid.shape)
    strides = np.array([int(np.prod(grid.shape[a + 1 :])) for a in range(n)])
    for corner in np.ndindex(*([2] * n)):
        corner = np.asarray(corner)
        idx = i0 + corner
        w = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        counts += np.bincount(idx[ok] @ strides, weights=w[ok], minlength=counts.size)
    return counts.reshape(grid.shape)


def _gaussian_smooth(arr: np.ndarray, grid: Domain, cov: np.ndarray) -> np.ndarray:
    """Convolve with a centred Gaussian of covariance ``cov`` (zero padded)."""
    n = grid.n
    padded = []
    for a in range(n):
        width = math.sqrt(max(cov[a, a], 0.0))
        p = min(grid.shape[a], int(np.ceil(8 * width / grid.spacing[a])) + 1)
        padded.append(grid.shape[a] + p)
    ks = []
    for a in range(n):
        k = 2 * np.pi * np.fft.fftfreq(padded[a], d=grid.spacing[a])
        sl = [None] * n
        sl[a] = slice(None)
        ks.append(k[tuple(sl)])
    quad = sum(cov[a, b] * ks[a] * ks[b] for a in range(n) for b in range(n))
    out = np.fft.ifftn(np.fft.fftn(arr, s=padded, axes=tuple(range(n))) * np.exp(-0.5 * quad), axes=tuple(range(n))).real
    return out[tuple(slice(0, s) for s in grid.shape)]


def estimate_density(samples, grid: Domain, bandwidth="auto", x0=None, tau=None, order: int = 2) -> DensityEstimate:
    """Gaussian kernel density estimate of ``samples`` on a box grid.

    Samples are linearly binned onto the grid and the histogram is smoothed
    with a Gaussian whose covariance is reduced by ``h_grid^2 / 6`` per axis to
    compensate the variance added by the binning.

    Parameters
    ----------
    bandwidth : "auto", "scott", float or sequence
        ``auto`` uses ``N^(-1/(n+2*order))`` times the per-axis sample
        standard deviation (``N^(-1/(n+4))`` for the default order).
        ``scott`` scales the full sample covariance by the same factor
        squared, which follows correlated clouds.  Both need ``N >= 10^4``.
    order : {2, 4}
        ``4`` combines two Gaussian estimates as ``2 p_H - p_(2H)``, which
        cancels the ``O(h^2)`` bias; small negative values are clipped.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    samples = np.asarray(samples, dtype=float)
    if grid.kind != "box":
        raise ValueError("densities are estimated on a box grid")
    if samples.ndim != 2 or samples.shape[1] != grid.n:
        raise ValueError(f"samples must have shape (N, {grid.n})")
    N = samples.shape[0]
    if N == 0:
        raise ValueError("no samples")
    if isinstance(bandwidth, str):
        if bandwidth not in ("auto", "scott"):
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        if N < 10_000:
            raise ValueError("automatic bandwidths need at least 10^4 samples")
        std = samples.std(axis=0, ddof=1)
        if np.any(std == 0):
            raise ValueError("degenerate sample cloud: zero variance along an axis")
        factor = N ** (-1.0 / (grid.n + 2 * order))
        if bandwidth == "auto":
            H = np.diag((factor * std) ** 2)
        else:
            H = factor**2 * np.atleast_2d(np.cov(samples.T))
    else:
        widths = np.broadcast_to(np.asarray(bandwidth, dtype=float), (grid.n,)).copy()
        if np.any(widths <= 0):
            raise ValueError("bandwidth must be positive")
        H = np.diag(widths**2)
    counts = _linear_binning(samples, grid)
    binvar = np.diag(np.asarray(grid.spacing) ** 2 / 6.0)
    dens = _gaussian_smooth(counts, grid, H - binvar)
    if order == 4:
        dens = 2 * dens - _gaussian_smooth(counts, grid, 2 * H - binvar)
    dens = dens / (N * grid.cell_volume)
    dens = np.maximum(dens, 0.0)  # clip transform round-off and order-4 undershoot
    widths = tuple(float(w) for w in np.sqrt(np.diag(H)))
    return DensityEstimate(
        Field(grid, dens), N, widths, None if x0 is None else tuple(map(float, x0)), tau, bandwidth_matrix=H, order=order
    )


def gaussian_density(points, mean, cov) -> np.ndarray:
    """Multivariate normal density at ``points`` (last axis = coordinates)."""
    pts = np.asarray(points, dtype=float) - np.asarray(mean, dtype=float)
    cov = np.atleast_2d(cov)
    inv = np.linalg.inv(cov)
    q = np.einsum("...i,ij,...j->...", pts, inv, pts)
    n = cov.shape[0]
    return np.exp(-q / 2) / np.sqrt((2 * np.pi) ** n * np.linalg.det(cov))


def kolmogorov_covariance(t: float) -> np.ndarray:
    """Covariance of ``(W_t, int_0^t W_s ds)``."""
    return np.array([[t, t**2 / 2], [t**2 / 2, t**3 / 3]])


def kolmogorov_density(points, x0, t: float) -> np.ndarray:
    """Transition density of ``dX1 = dW, dX2 = X1 dt`` (generator ``(1/2)d_xx + x d_y``)."""
    x0 = np.asarray(x0, dtype=float)
    mean = np.array([x0[0], x0[1] + x0[0] * t])
    return gaussian_density(points, mean, kolmogorov_covariance(t))


def exact_gaussian_law(sys: HormanderSystem, x0, t: float):
    """Mean and covariance of the exact Gaussian law, or None.

    Available for constant diffusion without drift (covariance ``2 a t``)
    and for the Kolmogorov system ``dX1 = dW, dX2 = X1 dt``.
    """
    x0 = np.asarray(x0, dtype=float)
    if sys.heat_diffusivity() is not None:
        a = np.array(sys.diffusion_matrix.tolist(), dtype=float)
        return x0, 2.0 * a * t
    if sys.name == "kolmogorov":
        return np.array([x0[0], x0[1] + x0[0] * t]), kolmogorov_covariance(t)
    return None


def relative_density_error(est: DensityEstimate, mean, cov, radius: float = 2.0) -> float:
    """Sup of ``|p_est - p| / p`` over the Mahalanobis ball of the given radius.

    For an isotropic covariance this ball is the ``radius``-sigma ball; for
    the Kolmogorov kernel it is the bulk ellipse of the law.
    """
    grid = est.density.domain
    pts = np.stack(grid.coords(), axis=-1)
    exact = gaussian_density(pts, mean, cov)
    diff = pts - np.asarray(mean)
    maha = np.sqrt(np.einsum("...i,ij,...j->...", diff, np.linalg.inv(cov), diff))
    mask = maha <= radius
    if not mask.any():
        raise ValueError("the comparison region holds no grid points")
    return float(np.max(np.abs(est.density.data[0][mask] - exact[mask]) / exact[mask]))


# --- envelopes ---------------------------------------------------------------------


@dataclass(frozen=True)
class KSEnvelope:
    """Fitted ``p(t,x,y) <= A (1+|x|)^m t^(-n) exp(-B |x-y|^2 / t)``.

    ``x`` is the base point of the diffusion and ``y`` the density argument.
    Only the density level ``j = 0``, ``alpha = beta = 0`` is fitted.
    """

    A: float
    B: float
    m_exp: float
    n_exp: float
    fit_residual: float
    j: int = 0
    alpha: tuple = (0, 0)
    N: int = 0
    taus: tuple = ()
    base_points: tuple = ()
    seed: int = 0
    points_used: int = 0

    def __post_init__(self):
        if not (self.A > 0 and np.isfinite(self.fit_residual)):
            raise ValueError("envelope fit produced a non-positive amplitude or an invalid residual")

    def __call__(self, t, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        d2 = np.sum((x - y) ** 2, axis=-1)
        return self.A * (1 + r) ** self.m_exp * t ** (-self.n_exp) * np.exp(-self.B * d2 / t)

    def to_dict(self) -> dict:
        return {
            "A": self.A,
            "B": self.B,
            "m_exp": self.m_exp,
            "n_exp": self.n_exp,
            "residual": self.fit_residual,
            "N": self.N,
            "taus": list(self.taus),
            "base_points": [list(p) for p in self.base_points],
            "seed": self.seed,
            "points_used": self.points_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def envelope_regression(records) -> tuple:
    """Least squares for ``log p = a + m log(1+|x|) - n log t - B |x-y|^2/t``.

    ``records`` is an iterable of ``(t, x, ys, ps)`` with ``ys`` of shape
    ``(k, dim)`` and ``ps`` the positive density values there.

    Returns ``(A, B, m, n, rms_residual, count)``.
    """
    rows, rhs = [], []
    for t, x, ys, ps in records:
        x = np.asarray(x, dtype=float)
        d2 = np.sum((ys - x) ** 2, axis=1) / t
        k = len(ps)
        rows.append(np.column_stack([np.ones(k), np.full(k, np.log1p(np.linalg.norm(x))), np.full(k, -np.log(t)), -d2]))
        rhs.append(np.log(ps))
    if not rows:
        raise ValueError("insufficient usable density mass")
    M = np.concatenate(rows)
    y = np.concatenate(rhs)
    if M.shape[0] < 8:
        raise ValueError("insufficient usable density mass")
    coef, *_ = np.linalg.lstsq(M, y, rcond=None)
    resid = float(np.sqrt(np.mean((M @ coef - y) ** 2)))
    a, m, nexp, B = coef
    return float(np.exp(a)), float(B), float(m), float(nexp), resid, int(M.shape[0])


def _probe_grid(sys: HormanderSystem, taus, base_points, resolution: int) -> Domain:
    # a centred box wide enough for every base point and the largest time
    reach = max(np.max(np.abs(p)) for p in base_points)
    kappa_scale = max(1.0, float(max(taus)) ** 1.5)
    half = float(np.ceil(reach * (1 + max(taus)) + 6 * math.sqrt(kappa_scale) + 1))
    return Domain.box((resolution,) * sys.n, half)


def fit_ks_envelope(
    sys: HormanderSystem,
    taus,
    base_points,
    N: int = 100_000,
    seed: int = 0,
    steps: int = 64,
    resolution: int = 128,
    threads: int = 1,
    density=None,
    bandwidth="scott",
) -> KSEnvelope:
    """Fit the Kusuoka-Stroock envelope to Monte Carlo density estimates.

    For every ``(tau, x)`` pair, ``N`` Euler-Maruyama samples are turned into
    a kernel density estimate; grid values above ten times the estimate's
    noise floor enter a log-linear least-squares fit.  The polynomial factor
    is read as ``(1+|x|)^m``.

    ``density`` may be a callable ``density(points, x, t)`` that replaces the
    Monte Carlo estimate (used to fit exact kernels); the same threshold
    relative to ``N`` applies.
    """
    taus = [float(t) for t in taus]
    base_points = [tuple(float(c) for c in p) for p in base_points]
    if len(set(taus)) < 3 or len(set(base_points)) < 3:
        raise ValueError("need at least 3 distinct taus and 3 base points")
    grid = _probe_grid(sys, taus, base_points, resolution)
    pts = np.stack(grid.coords(), axis=-1).reshape(-1, sys.n)
    records = []
    for ti, t in enumerate(taus):
        for pi, x in enumerate(base_points):
            if density is None:
                smp = euler_maruyama_sample(sys, x, t, steps, N, seed + 1000 * ti + pi, threads)
                est = estimate_density(smp, grid, bandwidth)
                vals = est.density.data.reshape(-1)
                floor = est.noise_floor
            else:
                vals = density(pts, np.asarray(x), t)
                floor = float(np.max(vals)) / math.sqrt(N)
            keep = vals > 10 * floor
            if np.any(keep):
                records.append((t, x, pts[keep], vals[keep]))
    A, B, m, nexp, resid, count = envelope_regression(records)
    return KSEnvelope(A, B, m, nexp, resid, N=N, taus=tuple(taus), base_points=tuple(base_points), seed=seed, points_used=count)
