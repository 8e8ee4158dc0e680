"""Per-step Picard solver in rescaled time.

On step ``l`` the time ``t`` is rescaled as ``t = t_(l-1) + rho_l * tau`` with
``tau`` in ``[0, 1]``.  The local problem reads

    dv/dtau = rho L v - rho V_B[v] v + rho Leray(v),    v(0) = data,

where ``L`` is the generator of the system's semigroup.  Its mild solution is
built as ``v = data + sum_k dv^k``: the first iterate freezes both sources at
the data, and every later increment solves the linear problem obtained by
differencing the sources of two consecutive iterates.

Time integrals are Duhamel integrals ``int_0^tau S(tau - s) g(s) ds`` with
``S(sigma) = exp(rho sigma L)``; they are evaluated on 6 uniform
sub-intervals with 4 Gauss-Legendre nodes each.  The sub-interval ends give
5 interior samples plus the end of the step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Domain, Field, norm
from .hoermander import HormanderSystem
from .kernels import EllipticKernel, _bracket, leray_from_source, velocity_gradient
from .hoermander import convection_array
from .semigroup import semigroup_array, _apply_generator, _operator_coefficients

__all__ = [
    "INTERVALS",
    "GL_ORDER",
    "step_size_bound",
    "StepConstants",
    "TauSeries",
    "StepOperators",
    "LocalState",
    "ContractionRecord",
    "PicardDivergence",
    "first_iterate",
    "increment_step",
    "increment_series",
    "iterate_to_tolerance",
    "momentum_residual",
    "sample_times",
]

INTERVALS = 6
GL_ORDER = 4

_GX, _GW = np.polynomial.legendre.leggauss(GL_ORDER)
_GX = (_GX + 1) / 2  # nodes on [0, 1]
_GW = _GW / 2


def sample_times() -> np.ndarray:
    """The stored tau samples: 0, 1/6, ..., 1."""
    return np.linspace(0.0, 1.0, INTERVALS + 1)


def _lagrange_matrix(targets: np.ndarray) -> np.ndarray:
    """``L[t, p]`` = value of the p-th Lagrange basis polynomial on ``_GX`` at ``targets[t]``."""
    L = np.ones((len(targets), GL_ORDER))
    for p in range(GL_ORDER):
        for r in range(GL_ORDER):
            if r != p:
                L[:, p] *= (targets - _GX[r]) / (_GX[p] - _GX[r])
    return L


# partial integrals int_0^{x_q} over sub-nodes x_q * x_r
_SUB = np.outer(_GX, _GX)  # [q, r]
_SUB_LAGRANGE = _lagrange_matrix(_SUB.ravel()).reshape(GL_ORDER, GL_ORDER, GL_ORDER)


# --- step size ------------------------------------------------------------------


def step_size_bound(C_prev: float, C_B: float, C_G: float, C_K: float, c_sum: float, c_n: float = 1.0) -> float:
    """Admissible step ``1 / (c_n (2 C_B C_G + C_K c_sum) 2 (C_prev + 1))``."""
    vals = dict(C_prev=C_prev, C_B=C_B, C_G=C_G, C_K=C_K, c_sum=c_sum, c_n=c_n)
    bad = [k for k, v in vals.items() if not (v > 0 and math.isfinite(v))]
    if bad:
        raise ValueError(f"constants must be positive and finite: {bad}")
    return 1.0 / (c_n * (2 * C_B * C_G + C_K * c_sum) * 2 * (C_prev + 1))


@dataclass(frozen=True)
class StepConstants:
    """Constants entering the step-size bound (everything except ``C_prev``)."""

    C_B: float
    C_G: float
    C_K: float
    c_sum: float
    c_n: float = 1.0

    def rho(self, C_prev: float) -> float:
        return step_size_bound(C_prev, self.C_B, self.C_G, self.C_K, self.c_sum, self.c_n)

    def to_dict(self) -> dict:
        return {"C_B": self.C_B, "C_G": self.C_G, "C_K": self.C_K, "c_sum": self.c_sum, "c_n": self.c_n}

    @classmethod
    def measure(cls, sys: HormanderSystem, domain: Domain, m_order: int = 2, c_n: float = 1.0, ck_domain: Domain | None = None) -> "StepConstants":
        """Measure ``C_B`` and ``C_ij`` on ``domain`` and ``C_K`` on a box.

        ``C_G`` is the L1 mass of the semigroup density, which is 1 for every
        probability kernel.  ``C_K`` includes the estimated truncation tail.
        """
        from .hoermander import estimate_CB
        from .kernels import estimate_CK

        cb = estimate_CB(sys, domain, m_order)
        ck_domain = ck_domain or Domain.box((64,) * sys.n, 16.0)
        ck = estimate_CK(ck_domain)
        return cls(C_B=cb.C_B, C_G=1.0, C_K=ck.total, c_sum=cb.c_sum, c_n=c_n)


# --- time series ------------------------------------------------------------------


@dataclass
class TauSeries:
    """Values of a field at the tau samples and at the quadrature nodes.

    ``samples`` has shape ``(INTERVALS + 1, c, *shape)`` and ``nodes`` has
    shape ``(INTERVALS, GL_ORDER, c, *shape)``.
    """

    samples: np.ndarray
    nodes: np.ndarray

    @classmethod
    def constant(cls, arr: np.ndarray) -> "TauSeries":
        s = np.broadcast_to(arr, (INTERVALS + 1, *arr.shape)).copy()
        nd = np.broadcast_to(arr, (INTERVALS, GL_ORDER, *arr.shape)).copy()
        return cls(s, nd)

    @classmethod
    def zeros_like(cls, arr: np.ndarray) -> "TauSeries":
        return cls(np.zeros((INTERVALS + 1, *arr.shape)), np.zeros((INTERVALS, GL_ORDER, *arr.shape)))

    def __add__(self, other: "TauSeries") -> "TauSeries":
        return TauSeries(self.samples + other.samples, self.nodes + other.nodes)

    def scaled(self, lam: float) -> "TauSeries":
        return TauSeries(lam * self.samples, lam * self.nodes)

    @property
    def end(self) -> np.ndarray:
        return self.samples[-1]

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.samples)) and np.all(np.isfinite(self.nodes)))

    def sup_norm(self, domain: Domain, kind: str = "Hm", m: int = 2) -> float:
        """Max over the tau samples after 0 of the spatial norm."""
        return max(norm(Field(domain, s), kind, m=m) for s in self.samples[1:])


class StepOperators:
    """Grid-sampled coefficients and the semigroup for one step size."""

    def __init__(self, sys: HormanderSystem, domain: Domain, rho: float, backend: str | None = None, kernel: EllipticKernel | None = None):
        if domain.n != sys.n:
            raise ValueError("domain and system dimensions differ")
        self.sys = sys
        self.domain = domain
        self.rho = float(rho)
        if backend is None:
            backend = "spectral" if sys.is_constant_coefficient else "fd_substep"
        self.backend = backend
        self.kernel = kernel
        self.B = sys.evaluate(sys.B, domain)
        c = sys.evaluate([e for row in sys.c for e in row], domain).reshape(sys.n, sys.n, *domain.shape)
        self.c = [[_compact(c[j, k]) for k in range(sys.n)] for j in range(sys.n)]
        self.d = [_compact(a) for a in sys.evaluate(sys.d, domain)]
        self.has_d = any(not (np.isscalar(a) and a == 0) for a in self.d)

    def propagate(self, arr: np.ndarray, sigma: float) -> np.ndarray:
        """``S(sigma) arr`` with ``S(sigma) = exp(rho sigma L)``."""
        return semigroup_array(self.sys, arr, self.domain, self.rho * sigma, self.backend)

    def convection(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """``V_B[a] b`` for every component of ``b``."""
        return np.stack([convection_array(self.B, a, bi, self.domain) for bi in b])

    def leray(self, bracket: np.ndarray, Jlin: np.ndarray | None = None) -> np.ndarray:
        """Leray term of a scalar bracket plus the optional ``d``-term of ``Jlin``."""
        n = self.domain.n
        if self.has_d and Jlin is not None:
            src = np.stack([bracket + sum(self.d[k] * Jlin[i, k] for k in range(n)) for i in range(n)])
        else:
            src = bracket
        return leray_from_source(src, self.domain, self.kernel)

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        """Frozen first-iterate source ``-V_B[v] v + Leray(v)``."""
        J = velocity_gradient(v, self.domain)
        return -self.convection(v, v) + self.leray(_bracket(J, J, self.c), J)

    def difference(self, v_prev: np.ndarray, v_curr: np.ndarray, dv: np.ndarray) -> np.ndarray:
        """Source of the next increment, linear in ``dv = v_curr - v_prev``.

        ``-(V_B[v_prev] dv + V_B[dv] v_curr)`` plus the Leray term of
        ``c_jk (v_prev_{k,j} dv_{j,k} + dv_{k,j} v_curr_{j,k})``; this is the
        exact difference of the quadratic sources of ``v_curr`` and ``v_prev``.
        """
        Jp = velocity_gradient(v_prev, self.domain)
        Jc = velocity_gradient(v_curr, self.domain)
        Jd = velocity_gradient(dv, self.domain)
        conv = self.convection(v_prev, dv) + self.convection(dv, v_curr)
        br = _bracket(Jp, Jd, self.c) + _bracket(Jd, Jc, self.c)
        return -conv + self.leray(br, Jd)

    # -- Duhamel -----------------------------------------------------------

    def free_evolution(self, arr: np.ndarray) -> TauSeries:
        """``S(tau) arr`` at all samples and nodes."""
        h = 1.0 / INTERVALS
        samples = [arr]
        nodes = []
        for j in range(INTERVALS):
            base = samples[-1]
            nodes.append([self.propagate(base, h * x) for x in _GX])
            samples.append(self.propagate(base, h))
        return TauSeries(np.stack(samples), np.stack([np.stack(q) for q in nodes]))

    def duhamel(self, g_nodes: np.ndarray) -> TauSeries:
        """``int_0^tau S(tau - s) g(s) ds`` from ``g`` at the quadrature nodes."""
        h = 1.0 / INTERVALS
        shape = g_nodes.shape[2:]
        samples = [np.zeros(shape)]
        nodes = []
        for j in range(INTERVALS):
            D = samples[-1]
            g = g_nodes[j]
            at_nodes = []
            for q, xq in enumerate(_GX):
                acc = self.propagate(D, h * xq)
                for r, xr in enumerate(_GX):
                    gi = np.tensordot(_SUB_LAGRANGE[q, r], g, axes=1)
                    acc = acc + (h * xq * _GW[r]) * self.propagate(gi, h * xq * (1 - xr))
                at_nodes.append(acc)
            nodes.append(np.stack(at_nodes))
            end = self.propagate(D, h)
            for q, xq in enumerate(_GX):
                end = end + (h * _GW[q]) * self.propagate(g[q], h * (1 - xq))
            samples.append(end)
        return TauSeries(np.stack(samples), np.stack(nodes))


def _compact(a: np.ndarray):
    """Collapse constant coefficient arrays to scalars (cheaper products)."""
    flat = a.ravel()
    if np.all(flat == flat[0]):
        return float(flat[0])
    return a


# --- local state ------------------------------------------------------------------


class PicardDivergence(RuntimeError):
    """Raised when an iterate stops being finite; carries the step record."""

    def __init__(self, message: str, record: "ContractionRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class ContractionRecord:
    l: int
    rho: float
    k_max: int
    increment_norms: list
    increment_norms_H4: list
    bound_rho: float | None
    warnings: list
    max_divergence: float | None = None

    @staticmethod
    def _ratios(norms):
        return [norms[k] / norms[k - 1] if norms[k - 1] > 0 else 0.0 for k in range(1, len(norms))]

    @property
    def ratios(self) -> list:
        """``|dv^k| / |dv^(k-1)|`` in H^2 for k = 2, 3, ..."""
        return self._ratios(self.increment_norms)

    @property
    def ratios_H4(self) -> list:
        return self._ratios(self.increment_norms_H4)

    def to_dict(self) -> dict:
        return {
            "l": self.l,
            "rho": self.rho,
            "k_max": self.k_max,
            "increment_norms": list(self.increment_norms),
            "increment_norms_H4": list(self.increment_norms_H4),
            "ratios": self.ratios,
            "ratios_H4": self.ratios_H4,
            "bound_rho": self.bound_rho,
            "max_divergence": self.max_divergence,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class LocalState:
    """Iterates of one time step.

    ``iterates[k]`` is ``v^(k)`` at the end of the step (``iterates[0]`` is
    the data) and ``increments[k-1]`` is ``dv^k``, so that
    ``iterates[k] = data + sum(increments[:k])``.
    """

    l: int
    rho: float
    data: Field
    backend: str | None = None
    bound_rho: float | None = None
    kernel: EllipticKernel | None = None
    iterates: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    norms_H2: list = field(default_factory=list)
    norms_H4: list = field(default_factory=list)
    converged: bool = False
    warnings: list = field(default_factory=list)
    solution: TauSeries | None = field(default=None, repr=False)
    previous: TauSeries | None = field(default=None, repr=False)
    last_increment: TauSeries | None = field(default=None, repr=False)
    increment_series_list: list = field(default_factory=list, repr=False)
    ops: StepOperators | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("step index l starts at 1")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def domain(self) -> Domain:
        return self.data.domain

    def operators(self, sys: HormanderSystem) -> StepOperators:
        if self.ops is None or self.ops.sys is not sys:
            self.ops = StepOperators(sys, self.domain, self.rho, self.backend, self.kernel)
        return self.ops

    def record(self) -> ContractionRecord:
        div = None
        if self.solution is not None and self.domain.kind == "torus":
            from .grid import divergence

            div = max(divergence(Field(self.domain, s)).max_abs() for s in self.solution.samples)
        return ContractionRecord(self.l, self.rho, len(self.increments), list(self.norms_H2), list(self.norms_H4), self.bound_rho, list(self.warnings), div)

    def _push(self, delta: TauSeries, keep_series: bool):
        d = self.domain
        if not delta.all_finite():
            raise PicardDivergence(f"non-finite increment at step {self.l}, k={len(self.increments) + 1}", self.record())
        self.increments.append(Field(d, delta.end))
        self.iterates.append(Field(d, self.iterates[-1].data + delta.end))
        self.norms_H2.append(delta.sup_norm(d, "Hm", 2))
        self.norms_H4.append(delta.sup_norm(d, "Hm", 4))
        if keep_series:
            self.increment_series_list.append(delta)


def first_iterate(sys: HormanderSystem, state: LocalState, keep_series: bool = False) -> Field:
    """``v^1 = S(tau) data + rho int_0^tau S(tau-s) [-V_B[data] data + Leray(data)] ds``."""
    ops = state.operators(sys)
    data = state.data.data
    if data.shape[0] != sys.n:
        raise ValueError("data must be an n-vector field")
    free = ops.free_evolution(data)
    src = ops.nonlinear(data)
    forced = ops.duhamel(np.broadcast_to(src, (INTERVALS, GL_ORDER, *src.shape)))
    v1 = free + forced.scaled(ops.rho)
    v0 = TauSeries.constant(data)
    state.iterates = [state.data]
    state.increments, state.norms_H2, state.norms_H4, state.increment_series_list = [], [], [], []
    delta = TauSeries(v1.samples - v0.samples, v1.nodes - v0.nodes)
    state._push(delta, keep_series)
    state.previous, state.solution, state.last_increment = v0, v1, delta
    return state.iterates[-1]


def increment_series(ops: StepOperators, v_prev: TauSeries, v_curr: TauSeries, dv: TauSeries) -> TauSeries:
    """Next increment ``rho int_0^tau S(tau-s) G(s) ds`` with ``G`` linear in ``dv``."""
    g = np.stack([np.stack([ops.difference(v_prev.nodes[j, q], v_curr.nodes[j, q], dv.nodes[j, q]) for q in range(GL_ORDER)]) for j in range(INTERVALS)])
    return ops.duhamel(g).scaled(ops.rho)


def increment_step(sys: HormanderSystem, state: LocalState, k: int, keep_series: bool = False) -> Field:
    """Compute ``dv^(k+1)`` from ``dv^k`` and append it to the state."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(state.increments) < k or state.last_increment is None:
        raise ValueError(f"increment dv^{k} is missing")
    if len(state.increments) != k:
        raise ValueError("increments are computed in order; dv^{k+1} needs the latest increment")
    ops = state.operators(sys)
    delta = increment_series(ops, state.previous, state.solution, state.last_increment)
    state._push(delta, keep_series)
    state.previous = state.solution
    state.solution = state.solution + delta
    state.last_increment = delta
    return state.increments[-1]


def iterate_to_tolerance(sys: HormanderSystem, state: LocalState, tol: float = 1e-10, kmax: int = 12, keep_series: bool = False):
    """Run the Picard series until ``|dv^k|_(H^2) < tol`` or ``k = kmax``.

    Returns ``(state, record)``.  A ratio ``>= 1`` or a step above
    ``state.bound_rho`` is recorded as a warning; non-finite values raise
    :class:`PicardDivergence`.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if state.bound_rho is not None and state.rho > state.bound_rho * (1 + 1e-12):
        state.warnings.append(f"rho={state.rho:.6g} exceeds the step-size bound {state.bound_rho:.6g}; contraction is not guaranteed")
    first_iterate(sys, state, keep_series)
    k = 1
    while state.norms_H2[-1] >= tol and k < kmax:
        increment_step(sys, state, k, keep_series)
        k += 1
        prev, cur = state.norms_H2[-2], state.norms_H2[-1]
        if prev > 0 and cur / prev >= 1.0:
            state.warnings.append(f"non-contraction at k={k}: ratio {cur / prev:.4g}")
    state.converged = state.norms_H2[-1] < tol
    if not state.converged:
        state.warnings.append(f"not converged after k={k}: |dv^k|_H2={state.norms_H2[-1]:.3e}")
    return state, state.record()


# --- residual ------------------------------------------------------------------


def momentum_residual(sys: HormanderSystem, v_traj, p=None, rho: float = None, dtau: float | None = None, kernel: EllipticKernel | None = None) -> float:
    """Defect of the local momentum equation on uniformly spaced tau samples.

    ``max_j |dv/dtau - rho L v + rho V_B[v] v - rho Leray(v)|_(L^2)`` over the
    interior samples, with a centred difference for ``dv/dtau``.  If ``p`` is
    given (one pressure Field per sample), ``Leray(v) = -grad p`` is used
    instead of the convolution.
    """
    if rho is None:
        raise ValueError("rho is required")
    arrs = [f.data if isinstance(f, Field) else np.asarray(f) for f in v_traj]
    if len(arrs) < 3:
        raise ValueError("need at least 3 time samples")
    domain = v_traj[0].domain if isinstance(v_traj[0], Field) else None
    if domain is None:
        raise ValueError("v_traj must hold Fields")
    dtau = dtau if dtau is not None else 1.0 / (len(arrs) - 1)
    ops = StepOperators(sys, domain, rho, kernel=kernel)
    A, beta, _, _ = _operator_coefficients(sys, domain)
    worst = 0.0
    for j in range(1, len(arrs) - 1):
        v = arrs[j]
        dvdt = (arrs[j + 1] - arrs[j - 1]) / (2 * dtau)
        diff = np.stack([_apply_generator(c, domain, A, beta) for c in v])
        if p is not None:
            pj = p[j].data[0] if isinstance(p[j], Field) else np.asarray(p[j])
            from .grid import derivative_array

            leray = -np.stack([derivative_array(pj, domain, i) for i in range(domain.n)])
        else:
            J = velocity_gradient(v, domain)
            leray = ops.leray(_bracket(J, J, ops.c), J)
        res = dvdt - rho * diff + rho * ops.convection(v, v) - rho * leray
        worst = max(worst, norm(Field(domain, res), "L2"))
    return worst
