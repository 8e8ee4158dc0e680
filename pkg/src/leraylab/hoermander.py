"""Vector-field algebra for Hörmander systems.

A system is described by vector fields ``V_i = sum_j v_ji(x) d/dx_j``
(``V_0`` is the drift, ``V_1..V_m`` the diffusion fields), convection
coefficients ``B_j``, couplings ``c_jk`` and ``d_j`` of the Leray term, and a
viscosity ``nu``.  Coefficients are sympy expressions in ``x0, ..., x{n-1}``,
so every derivative used by a Lie bracket is exact.
"""
from __future__ import annotations

import json
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import sympy as sp
from scipy.linalg import qr
from scipy.stats import qmc

from .grid import Domain, Field, derivative_array, multi_indices

__all__ = [
    "SYSTEM_SCHEMA",
    "MAX_DERIVATIVE_ORDER",
    "SystemFileError",
    "HormanderSystem",
    "BracketNode",
    "RankResult",
    "ConditionReport",
    "CBEstimate",
    "lie_bracket",
    "generators",
    "hormander_rank",
    "check_condition",
    "convection_apply",
    "estimate_CB",
    "jacobi_residual",
    "builtin_system",
    "load_system",
    "system_from_dict",
    "BUILTINS",
]

SYSTEM_SCHEMA = "leraylab.system/1"
MAX_DERIVATIVE_ORDER = 4
RANK_RTOL = 1e-8


class SystemFileError(ValueError):
    """Raised for malformed system definitions."""


def coordinate_symbols(n: int) -> tuple:
    return sp.symbols(f"x0:{n}", real=True)


def _sympify_vector(values, n: int, what: str) -> tuple:
    vec = tuple(sp.sympify(v) for v in values)
    if len(vec) != n:
        raise ValueError(f"{what} needs {n} entries, got {len(vec)}")
    return vec


def _lambdify(exprs, syms):
    """Vectorised evaluator returning an array of shape ``(len(exprs), *pts.shape[:-1])``."""
    fn = sp.lambdify(syms, list(exprs), modules="numpy")

    def evaluate(points):
        pts = np.asarray(points, dtype=float)
        cols = [pts[..., i] for i in range(pts.shape[-1])]
        out = fn(*cols)
        base = pts.shape[:-1]
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), base) for o in out])

    return evaluate


@dataclass(frozen=True, eq=False)
class HormanderSystem:
    """Coefficients of a (possibly degenerate) Navier-Stokes type system.

    Parameters
    ----------
    n : int
        Spatial dimension.
    fields : sequence of sequences
        ``[V_0, V_1, ..., V_m]``; each ``V_i`` lists its ``n`` coefficients
        ``v_ji`` as sympy expressions (or anything sympify accepts) in the
        symbols ``x0 .. x{n-1}``.
    B, c, d : optional
        Convection coefficients (default 1), couplings (default all ones,
        which gives the classical Leray term) and linear coefficients
        (default 0).
    nu : float
        Viscosity used by the constant-coefficient specialization.
    name : str
        Label used in reports.
    """

    n: int
    fields: tuple
    B: tuple = None
    c: tuple = None
    d: tuple = None
    nu: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ValueError("dimension must be positive")
        if len(self.fields) < 2:
            raise ValueError("need the drift V_0 and at least one diffusion field")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        object.__setattr__(self, "fields", tuple(_sympify_vector(V, n, "vector field") for V in self.fields))
        object.__setattr__(self, "B", _sympify_vector(self.B if self.B is not None else [1] * n, n, "B"))
        c = self.c if self.c is not None else [[1] * n for _ in range(n)]
        if len(c) != n:
            raise ValueError("c must be n x n")
        object.__setattr__(self, "c", tuple(_sympify_vector(row, n, "row of c") for row in c))
        object.__setattr__(self, "d", _sympify_vector(self.d if self.d is not None else [0] * n, n, "d"))
        self._validate()

    # -- structure ---------------------------------------------------------

    @cached_property
    def symbols(self) -> tuple:
        return coordinate_symbols(self.n)

    @property
    def m(self) -> int:
        return len(self.fields) - 1

    @property
    def drift(self) -> tuple:
        return self.fields[0]

    @property
    def diffusion(self) -> tuple:
        return self.fields[1:]

    def _all_scalars(self):
        for V in self.fields:
            yield from V
        yield from self.B
        for row in self.c:
            yield from row
        yield from self.d

    def _validate(self):
        syms = self.symbols
        known = set(syms)
        exprs = list(self._all_scalars())
        for e in exprs:
            extra = e.free_symbols - known
            if extra:
                raise ValueError(f"unknown symbols {sorted(map(str, extra))} in coefficient {e}")
        rng = np.random.default_rng(2024)
        pts = rng.uniform(-2.0, 2.0, size=(100, self.n))
        values = _lambdify(exprs, syms)(pts)
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficients are not finite at the validation points")
        # analytic first derivatives against centred differences
        grads = [sp.diff(e, s) for e in exprs for s in syms]
        analytic = _lambdify(grads, syms)(pts).reshape(len(exprs), self.n, -1)
        eps = 1e-5
        f = _lambdify(exprs, syms)
        for a in range(self.n):
            step = np.zeros(self.n)
            step[a] = eps
            fd = (f(pts + step) - f(pts - step)) / (2 * eps)
            err = np.abs(fd - analytic[:, a])
            if np.any(err > 1e-6 * np.maximum(1.0, np.abs(analytic[:, a]))):
                raise ValueError("analytic derivatives disagree with finite differences")

    # -- classification ----------------------------------------------------

    @cached_property
    def diffusion_matrix(self) -> sp.Matrix:
        """``a = (1/2) sum_i V_i V_i^T`` (the second-order coefficient)."""
        a = sp.zeros(self.n, self.n)
        for V in self.diffusion:
            col = sp.Matrix(V)
            a += col * col.T / 2
        return sp.simplify(a)

    def heat_diffusivity(self) -> float | None:
        """``kappa`` if the generator is ``kappa * Laplace`` exactly, else None."""
        if any(sp.simplify(e) != 0 for e in self.drift):
            return None
        a = self.diffusion_matrix
        if any(e.free_symbols for e in a):
            return None
        kappa = float(a[0, 0])
        if kappa <= 0:
            return None
        if any(abs(float(a[i, j]) - (kappa if i == j else 0.0)) > 1e-14 for i in range(self.n) for j in range(self.n)):
            return None
        return kappa

    @property
    def is_constant_coefficient(self) -> bool:
        return self.heat_diffusivity() is not None

    @property
    def is_classical_convection(self) -> bool:
        return all(sp.simplify(b - 1) == 0 for b in self.B)

    # -- grid evaluation ---------------------------------------------------

    def evaluate(self, exprs, domain: Domain) -> np.ndarray:
        """Sample scalar expressions on the domain grid, shape ``(k, *shape)``."""
        pts = np.stack(domain.coords(), axis=-1)
        return _lambdify(list(exprs), self.symbols)(pts)

    def evaluate_at(self, exprs, points) -> np.ndarray:
        return _lambdify(list(exprs), self.symbols)(np.atleast_2d(np.asarray(points, dtype=float)))

    @cached_property
    def ito_drift(self) -> tuple:
        """Drift of the Itô equation whose generator is ``(1/2) sum V_i^2 + V_0``."""
        out = []
        for j in range(self.n):
            corr = sum(V[k] * sp.diff(V[j], self.symbols[k]) for V in self.diffusion for k in range(self.n))
            out.append(sp.expand(self.drift[j] + corr / 2))
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "nu": self.nu,
            "fields": [[str(e) for e in V] for V in self.fields],
            "B": [str(e) for e in self.B],
            "c": [[str(e) for e in row] for row in self.c],
            "d": [str(e) for e in self.d],
        }

    # -- constructors ------------------------------------------------------

    @classmethod
    def classical(cls, n: int, nu: float) -> "HormanderSystem":
        """``V_i = sqrt(2 nu) d/dx_i``, no drift, ``B = 1``, classical couplings."""
        s = sp.sqrt(2 * sp.nsimplify(nu))
        fields = [[0] * n] + [[s if j == i else 0 for j in range(n)] for i in range(n)]
        return cls(n, fields, nu=nu, name="laplacian")


# --- brackets -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BracketNode:
    """A generator or an iterated bracket of generators.

    ``label`` records the bracket tree, ``coeffs`` the exact coefficient
    vector and ``depth`` the bracket nesting (generators have depth 0).
    """

    label: str
    coeffs: tuple
    depth: int
    symbols: tuple = field(repr=False)

    @cached_property
    def _evaluator(self):
        return _lambdify(self.coeffs, self.symbols)

    def __call__(self, x) -> np.ndarray:
        """Coefficient vector at one point (shape ``(n,)``) or many (``(k, n)``)."""
        x = np.asarray(x, dtype=float)
        out = self._evaluator(np.atleast_2d(x))
        return out[:, 0] if x.ndim == 1 else out.T

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for c in self.coeffs)


def generators(sys: HormanderSystem) -> list:
    """Depth-0 nodes ``[V_0, V_1, ..., V_m]``."""
    return [BracketNode(f"V{i}", V, 0, sys.symbols) for i, V in enumerate(sys.fields)]


def lie_bracket(V: BracketNode, W: BracketNode) -> BracketNode:
    """``[V, W]`` with component ``j = sum_k V_k dW_j/dx_k - W_k dV_j/dx_k``."""
    if V.symbols != W.symbols:
        raise ValueError("brackets need nodes over the same coordinates")
    depth = max(V.depth, W.depth) + 1
    if V.depth + W.depth + 1 > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"bracket would need derivatives beyond order {MAX_DERIVATIVE_ORDER}")
    syms = V.symbols
    n = len(syms)
    comps = []
    for j in range(n):
        term = sum(V.coeffs[k] * sp.diff(W.coeffs[j], syms[k]) - W.coeffs[k] * sp.diff(V.coeffs[j], syms[k]) for k in range(n))
        comps.append(sp.expand(term))
    return BracketNode(f"[{V.label},{W.label}]", tuple(comps), depth, syms)


def _bracket_levels(sys: HormanderSystem, max_depth: int) -> list:
    cache = sys.__dict__.setdefault("_levels", [])
    gens = generators(sys)
    if not cache:
        cache.append(gens)
    while len(cache) <= max_depth:
        prev = cache[-1]
        new = []
        seen = set()
        for A in prev:
            for G in gens:
                if len(cache) == 1 and int(A.label[1:]) >= int(G.label[1:]):
                    continue  # [V_j, V_k] with j < k only; the rest follow by antisymmetry
                node = lie_bracket(A, G)
                key = node.coeffs
                if node.is_zero or key in seen:
                    continue
                seen.add(key)
                new.append(node)
        cache.append(new)
    return cache[: max_depth + 1]


@dataclass(frozen=True)
class RankResult:
    rank: int
    depth: int
    basis: tuple


def _numerical_rank(M: np.ndarray):
    if M.size == 0:
        return 0, np.array([], dtype=int)
    norms = np.linalg.norm(M, axis=0)
    if norms.max() == 0:
        return 0, np.array([], dtype=int)
    _, R, piv = qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_RTOL * norms.max()))
    return rank, piv[:rank]


def hormander_rank(sys: HormanderSystem, x, max_depth: int = 3) -> RankResult:
    """Rank of the Hörmander span at ``x``, grown one bracket level at a time.

    Depth 0 uses ``V_1..V_m`` only; brackets at depth >= 1 may involve the
    drift ``V_0``.  ``depth`` is the first level at which the rank reaches
    ``n``, or ``max_depth + 1`` if it never does.
    """
    if not 0 <= max_depth <= 3:
        raise ValueError("max_depth must lie in [0, 3]")
    x = np.asarray(x, dtype=float)
    levels = _bracket_levels(sys, max_depth)
    nodes: list = []
    rank, piv = 0, []
    for depth in range(max_depth + 1):
        level = levels[depth][1:] if depth == 0 else levels[depth]
        nodes.extend(level)
        if not nodes:
            continue
        M = np.stack([node(x) for node in nodes], axis=1)
        rank, piv = _numerical_rank(M)
        if rank == sys.n:
            return RankResult(rank, depth, tuple(nodes[i] for i in piv))
    return RankResult(rank, max_depth + 1, tuple(nodes[i] for i in piv))


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    worst_rank: int
    max_depth_used: int
    points: np.ndarray = field(repr=False)
    ranks: tuple = field(repr=False)
    depths: tuple = field(repr=False)
    failing: tuple = ()

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "worst_rank": self.worst_rank,
            "max_depth_used": self.max_depth_used,
            "points_checked": int(len(self.points)),
            "depth_histogram": {str(d): self.depths.count(d) for d in sorted(set(self.depths))},
            "failing_points": [list(map(float, p)) for p in self.failing],
        }


def _sample_points(domain: Domain, samples: int, seed: int = 0) -> np.ndarray:
    n = domain.n
    if domain.kind == "box":
        lo = -np.asarray(domain.extent, dtype=float)
        hi = np.asarray(domain.extent, dtype=float)
    else:
        lo = np.zeros(n)
        hi = np.asarray(domain.extent, dtype=float)
    m = int(np.ceil(np.log2(samples)))
    sob = qmc.Sobol(n, scramble=True, seed=seed).random_base2(m)[:samples]
    pts = qmc.scale(sob, lo, hi)
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    centre = ((lo + hi) / 2)[None]
    return np.concatenate([centre, pts, corners])


def check_condition(sys: HormanderSystem, domain: Domain, samples: int = 100, max_depth: int = 3, seed: int = 0) -> ConditionReport:
    """Run :func:`hormander_rank` at quasi-random points, the centre and all corners."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if domain.n != sys.n:
        raise ValueError("domain and system dimensions differ")
    pts = _sample_points(domain, samples, seed)
    ranks, depths, failing = [], [], []
    for p in pts:
        res = hormander_rank(sys, p, max_depth)
        ranks.append(res.rank)
        depths.append(res.depth)
        if res.rank < sys.n:
            failing.append(p)
    passed = not failing
    used = max(d for d in depths if d <= max_depth) if any(d <= max_depth for d in depths) else max_depth
    return ConditionReport(passed, min(ranks), used, pts, tuple(ranks), tuple(depths), tuple(failing))


def jacobi_residual(U: BracketNode, V: BracketNode, W: BracketNode, points) -> float:
    """Max norm of ``[[U,V],W] + [[V,W],U] + [[W,U],V]`` over the given points."""
    total = [lie_bracket(lie_bracket(U, V), W), lie_bracket(lie_bracket(V, W), U), lie_bracket(lie_bracket(W, U), V)]
    vals = sum(node(np.atleast_2d(points)) for node in total)
    return float(np.max(np.abs(vals)))


# --- convection and constants ----------------------------------------------


def convection_array(B: np.ndarray, v: np.ndarray, target: np.ndarray, domain: Domain, dtarget=None) -> np.ndarray:
    """``sum_j B_j v_j d(target)/dx_j`` on arrays; ``dtarget[j]`` may be precomputed."""
    out = np.zeros(domain.shape)
    for j in range(domain.n):
        dj = dtarget[j] if dtarget is not None else derivative_array(target, domain, j)
        out += B[j] * v[j] * dj
    return out


def convection_apply(sys: HormanderSystem, v: Field, target: Field) -> Field:
    """Apply ``V_B[v] = sum_j B_j(x) v_j d/dx_j`` to each component of ``target``."""
    if v.components != sys.n or v.domain.n != sys.n:
        raise ValueError("v must be an n-vector field of the system's dimension")
    if target.domain != v.domain:
        raise ValueError("v and target live on different domains")
    B = sys.evaluate(sys.B, v.domain)
    out = np.stack([convection_array(B, v.data, t, v.domain) for t in target.data])
    return Field(v.domain, out)


@dataclass(frozen=True)
class CBEstimate:
    C_B: float
    C_ij: np.ndarray

    @property
    def c_sum(self) -> float:
        return float(np.sum(self.C_ij))


def _sup_derivative_sum(expr, syms, domain: Domain, m_order: int) -> float:
    pts = np.stack(domain.coords(), axis=-1)
    total = 0.0
    for alpha in multi_indices(len(syms), m_order):
        e = expr
        for s, a in zip(syms, alpha):
            if a:
                e = sp.diff(e, s, a)
        if e == 0:
            continue
        vals = _lambdify([e], syms)(pts)
        total += float(np.max(np.abs(vals)))
    return total


def estimate_CB(sys: HormanderSystem, domain: Domain, m_order: int = 2) -> CBEstimate:
    """``C_B = sum_{|alpha|<=m} max_i sup |D^alpha B_i|`` and the matrix ``C_ij``.

    Suprema are taken over the grid points of ``domain``.
    """
    if m_order > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"m_order must be <= {MAX_DERIVATIVE_ORDER}")
    if m_order < 0:
        raise ValueError("m_order must be non-negative")
    syms = sys.symbols
    pts = np.stack(domain.coords(), axis=-1)
    CB = 0.0
    for alpha in multi_indices(sys.n, m_order):
        best = 0.0
        for b in sys.B:
            e = b
            for s, a in zip(syms, alpha):
                if a:
                    e = sp.diff(e, s, a)
            if e != 0:
                best = max(best, float(np.max(np.abs(_lambdify([e], syms)(pts)))))
        CB += best
    Cij = np.array([[_sup_derivative_sum(c, syms, domain, m_order) for c in row] for row in sys.c])
    return CBEstimate(CB, Cij)


# --- built-ins and files ----------------------------------------------------


def _builtin_laplacian(n: int = 2, nu: float = 0.5) -> HormanderSystem:
    return HormanderSystem.classical(n, nu)


def _builtin_heisenberg(nu: float = 0.5) -> HormanderSystem:
    x, y, z = coordinate_symbols(3)
    X = [1, 0, -y / 2]
    Y = [0, 1, x / 2]
    return HormanderSystem(3, [[0, 0, 0], X, Y], nu=nu, name="heisenberg")


def _builtin_kolmogorov(nu: float = 0.5) -> HormanderSystem:
    x, y = coordinate_symbols(2)
    return HormanderSystem(2, [[0, x], [1, 0]], nu=nu, name="kolmogorov")


def _builtin_grushin(nu: float = 0.5) -> HormanderSystem:
    x, y = coordinate_symbols(2)
    return HormanderSystem(2, [[0, 0], [1, 0], [0, x]], nu=nu, name="grushin")


def _builtin_degenerate(nu: float = 0.5) -> HormanderSystem:
    return HormanderSystem(2, [[0, 0], [1, 0]], nu=nu, name="degenerate")


BUILTINS = {
    "laplacian": _builtin_laplacian,
    "heisenberg": _builtin_heisenberg,
    "kolmogorov": _builtin_kolmogorov,
    "grushin": _builtin_grushin,
    "degenerate": _builtin_degenerate,
}


def builtin_system(name: str, **kwargs) -> HormanderSystem:
    """Named system: laplacian (any n), heisenberg, kolmogorov, grushin, degenerate."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise SystemFileError(f"unknown built-in system {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**kwargs)


def _polynomial(spec, syms, where: str):
    """A coefficient entry: a number or a table of ``[[exponents...], coefficient]`` pairs."""
    if isinstance(spec, bool):
        raise SystemFileError(f"{where}: booleans are not coefficients")
    if isinstance(spec, (int, float)):
        return sp.nsimplify(spec)
    if not isinstance(spec, list):
        raise SystemFileError(f"{where}: expected a number or a list of [exponents, coefficient] pairs")
    expr = sp.Integer(0)
    for t, term in enumerate(spec):
        if not (isinstance(term, list) and len(term) == 2 and isinstance(term[0], list)):
            raise SystemFileError(f"{where}[{t}]: expected [[e_1, ..., e_n], coefficient]")
        exps, coef = term
        if len(exps) != len(syms) or not all(isinstance(e, int) and e >= 0 for e in exps):
            raise SystemFileError(f"{where}[{t}]: need {len(syms)} non-negative integer exponents")
        if not isinstance(coef, (int, float)) or isinstance(coef, bool):
            raise SystemFileError(f"{where}[{t}]: coefficient must be a number")
        mono = sp.Integer(1)
        for s, e in zip(syms, exps):
            mono *= s**e
        expr += sp.nsimplify(coef) * mono
    return expr


_SYSTEM_KEYS = {"schema", "name", "n", "nu", "drift", "diffusion", "B", "c", "d", "builtin"}


def system_from_dict(doc: dict) -> HormanderSystem:
    """Build a system from the JSON document structure (see :func:`load_system`)."""
    if not isinstance(doc, dict):
        raise SystemFileError("system file must hold a JSON object")
    unknown = set(doc) - _SYSTEM_KEYS
    if unknown:
        raise SystemFileError(f"unknown keys: {sorted(unknown)}")
    if doc.get("schema") != SYSTEM_SCHEMA:
        raise SystemFileError(f"schema must be {SYSTEM_SCHEMA!r}")
    if "builtin" in doc:
        kwargs = {k: doc[k] for k in ("n", "nu") if k in doc}
        if doc["builtin"] != "laplacian":
            kwargs.pop("n", None)
        return builtin_system(doc["builtin"], **kwargs)
    for key in ("n", "diffusion"):
        if key not in doc:
            raise SystemFileError(f"missing key {key!r}")
    n = doc["n"]
    if not isinstance(n, int) or n < 1:
        raise SystemFileError("n must be a positive integer")
    syms = coordinate_symbols(n)

    def vector(spec, where):
        if not isinstance(spec, list) or len(spec) != n:
            raise SystemFileError(f"{where}: expected a list of {n} coefficient entries")
        return [_polynomial(e, syms, f"{where}[{j}]") for j, e in enumerate(spec)]

    drift = vector(doc["drift"], "drift") if "drift" in doc else [0] * n
    diff = doc["diffusion"]
    if not isinstance(diff, list) or not diff:
        raise SystemFileError("diffusion: expected a non-empty list of vector fields")
    fields = [drift] + [vector(V, f"diffusion[{i}]") for i, V in enumerate(diff)]
    B = vector(doc["B"], "B") if "B" in doc else None
    d = vector(doc["d"], "d") if "d" in doc else None
    c = None
    if "c" in doc:
        if not isinstance(doc["c"], list) or len(doc["c"]) != n:
            raise SystemFileError(f"c: expected {n} rows")
        c = [vector(row, f"c[{j}]") for j, row in enumerate(doc["c"])]
    nu = doc.get("nu", 0.5)
    if not isinstance(nu, (int, float)) or nu <= 0:
        raise SystemFileError("nu must be a positive number")
    try:
        return HormanderSystem(n, fields, B=B, c=c, d=d, nu=float(nu), name=str(doc.get("name", "custom")))
    except ValueError as exc:
        raise SystemFileError(str(exc)) from exc


def load_system(path) -> HormanderSystem:
    """Read a system definition file.

    The file holds a JSON object with ``"schema": "leraylab.system/1"`` and
    either ``"builtin": NAME`` (plus optional ``n`` and ``nu``) or the keys
    ``n``, ``nu``, ``drift``, ``diffusion``, ``B``, ``c`` and ``d``.  Every
    coefficient is a number or a list of ``[[e_1, ..., e_n], coefficient]``
    monomials.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SystemFileError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return system_from_dict(doc)
