"""Decay-order fits, contraction tables and growth regressions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .grid import Field, derivative_array, multi_indices

__all__ = [
    "Q_MAX",
    "SHELL_FACTOR",
    "DecayFit",
    "decay_order",
    "ContractionTable",
    "contraction_table",
    "GrowthFit",
    "growth_regression",
    "loglog_slope",
]

SHELL_FACTOR = 1.3
Q_MAX = 20.0
_EPS_FLOOR = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class DecayFit:
    """Estimated polynomial decay order of a field on a box.

    ``q_hat`` is ``-slope`` of ``log sup`` against ``log r`` on the outer half
    of the usable shells.  Faster than polynomial decay is reported as
    ``q_hat = Q_MAX`` with ``super_polynomial`` set.
    """

    q_hat: float
    radii: tuple
    sups: tuple
    r_squared: float
    fitted_radii: tuple
    super_polynomial: bool = False

    def to_dict(self) -> dict:
        return {
            "q_hat": self.q_hat,
            "radii": list(self.radii),
            "sups": list(self.sups),
            "r_squared": self.r_squared,
            "fitted_radii": list(self.fitted_radii),
            "super_polynomial": self.super_polynomial,
        }


def decay_order(f: Field, derivative_orders=(0,), r_min: float | None = None) -> DecayFit:
    """Fit the decay order ``q`` in ``|D^alpha f(x)| <= C / (1 + |x|^q)``.

    Shells are ``[r, 1.3 r]`` starting at ``r_min`` (default the larger of
    two grid spacings and 1/16 of the inscribed radius) up to the inscribed
    radius of the box.  A shell is usable when
    its sup exceeds ``1e3`` machine epsilons; each shell is represented by
    the radius where its sup is attained.

    Raises
    ------
    ValueError
        On a torus, or with fewer than 4 usable shells.
    """
    d = f.domain
    if d.kind != "box":
        raise ValueError("decay_order needs a box domain")
    orders = sorted(set(int(o) for o in derivative_orders))
    if not orders or orders[0] < 0 or orders[-1] > 4:
        raise ValueError("derivative orders must lie in 0..4")
    mag = np.zeros(d.shape)
    for o in orders:
        for alpha in multi_indices(d.n, o):
            if sum(alpha) != o:
                continue
            for comp in f.data:
                g = comp
                for ax, a in enumerate(alpha):
                    if a:
                        g = derivative_array(g, d, ax, a)
                mag = np.maximum(mag, np.abs(g))
    r = d.radius()
    r_max = min(d.extent)
    r0 = r_min if r_min is not None else max(2 * max(d.spacing), r_max / 16)
    radii, sups = [], []
    lo = r0
    while lo * SHELL_FACTOR <= r_max * (1 + 1e-12):
        mask = (r >= lo) & (r < lo * SHELL_FACTOR)
        if mask.any():
            vals = mag[mask]
            i = int(np.argmax(vals))
            radii.append(float(r[mask][i]))
            sups.append(float(vals[i]))
        lo *= SHELL_FACTOR
    usable = []
    for rr, s in zip(radii, sups):
        if s <= _EPS_FLOOR or not math.isfinite(s):
            break
        usable.append((rr, s))
    if len(usable) < 4:
        raise ValueError("insufficient shells: fewer than 4 shells carry a resolvable signal")
    outer = usable[len(usable) // 2:]
    if len(outer) < 2:
        outer = usable[-2:]
    x = np.log([u[0] for u in outer])
    y = np.log([u[1] for u in outer])
    fit = stats.linregress(x, y)
    q = -float(fit.slope)
    r2 = float(fit.rvalue**2) if len(outer) > 2 else 1.0
    superpoly = q >= Q_MAX or len(usable) < len(radii) and q > Q_MAX / 2
    return DecayFit(
        q_hat=Q_MAX if superpoly else q,
        radii=tuple(radii),
        sups=tuple(sups),
        r_squared=min(1.0, max(0.0, r2)),
        fitted_radii=tuple(u[0] for u in outer),
        super_polynomial=bool(superpoly),
    )


# --- contraction tables -----------------------------------------------------------


@dataclass(frozen=True)
class ContractionTable:
    """Ratio matrix of a set of step records with pass/fail flags."""

    rows: tuple  # (l, k, norm, ratio or None)
    all_ratios_ok: bool
    first_increments_ok: bool
    l_trend_slope: float | None
    l_trend_r_squared: float | None
    violations: tuple

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["l", "k", "increment_H2", "ratio"])
        for l, k, nrm, ratio in self.rows:
            w.writerow([l, k, repr(float(nrm)), "" if ratio is None else repr(float(ratio))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "all_ratios_le_half": self.all_ratios_ok,
            "first_increments_le_quarter": self.first_increments_ok,
            "l_trend_slope": self.l_trend_slope,
            "l_trend_r_squared": self.l_trend_r_squared,
            "violations": list(self.violations),
        }


def loglog_slope(xs, ys) -> tuple:
    """Slope and R^2 of ``log y`` against ``log x``."""
    fit = stats.linregress(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)))
    return float(fit.slope), float(fit.rvalue**2)


def contraction_table(records, ratio_bound: float = 0.5, first_bound: float = 0.25, floor: float = 1e-12) -> ContractionTable:
    """Tabulate ``|dv^k|_(H^2)`` and ratios over steps ``l`` and iterations ``k``.

    Ratios whose denominator is below ``floor`` are not assessed (they
    measure round-off).  The l-trend is the log-log slope of the k=2 ratio
    against ``l`` when at least 3 steps provide one.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    rows, violations = [], []
    trend_l, trend_r = [], []
    first_ok = True
    for rec in records:
        norms = [float(x) for x in rec.increment_norms]
        for k, nrm in enumerate(norms, start=1):
            ratio = None
            if k >= 2:
                prev = norms[k - 2]
                ratio = nrm / prev if prev > 0 else 0.0
                if prev > floor and ratio > ratio_bound:
                    violations.append(f"l={rec.l} k={k}: ratio {ratio:.4g} > {ratio_bound}")
                if k == 2 and prev > floor and ratio > 0:
                    trend_l.append(rec.l)
                    trend_r.append(ratio)
            rows.append((rec.l, k, nrm, ratio))
        if norms and norms[0] > first_bound:
            first_ok = False
            violations.append(f"l={rec.l}: first increment {norms[0]:.4g} > {first_bound}")
    slope = r2 = None
    if len(set(trend_l)) >= 3:
        slope, r2 = loglog_slope(trend_l, trend_r)
    ratios_ok = not any("ratio" in v for v in violations)
    return ContractionTable(tuple(rows), ratios_ok, first_ok, slope, r2, tuple(violations))


# --- growth regression -----------------------------------------------------------


@dataclass(frozen=True)
class GrowthFit:
    model: str
    coef: float
    intercept: float
    r_squared: float
    ci: tuple

    def to_dict(self) -> dict:
        return {"model": self.model, "coef": self.coef, "intercept": self.intercept, "r_squared": self.r_squared, "ci": list(self.ci)}


_MODELS = {"linear": lambda x: x, "sqrt": np.sqrt, "constant": None}


def growth_regression(xs, ys, model: str = "linear") -> GrowthFit:
    """Least squares ``y = a g(x) + b`` with a 95% confidence interval on ``a``.

    ``linear`` uses ``g(x) = x`` and ``sqrt`` uses ``g(x) = sqrt(x)``.  The
    ``constant`` model fits a line in ``x`` and reports its slope, so that a
    confidence interval containing 0 indicates no trend; ``coef`` is then the
    slope and ``intercept`` the mean level.
    """
    if model not in _MODELS:
        raise ValueError(f"unknown model {model!r}")
    x = np.asarray(xs, float)
    y = np.asarray(ys, float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D of equal length")
    if len(x) < 10:
        raise ValueError("growth_regression needs at least 10 points")
    g = x if model == "constant" else _MODELS[model](x)
    if np.ptp(g) == 0:
        raise ValueError("degenerate design matrix")
    X = np.column_stack([g, np.ones_like(g)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    a, b = float(coef[0]), float(coef[1])
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(x) - 2
    se = math.sqrt(ss_res / dof / float(((g - g.mean()) ** 2).sum()))
    half = float(stats.t.ppf(0.975, dof)) * se
    if model == "constant":
        b = float(y.mean())
    return GrowthFit(model, a, b, max(0.0, min(1.0, r2)), (a - half, a + half))
