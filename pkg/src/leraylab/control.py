"""Control-function strategies and the growth ledger.

The controlled solution is ``v^r = v + r``.  On step ``l`` the local Picard
solution starts from the controlled data ``v^r(l-1)``; the control increment
``dr^l`` is added to it and accumulated in ``r``:

    v^r(l) = local(l) + dr^l,        r^l = r^(l-1) + dr^l.

Strategies (``C > 1`` is the damping constant):

``none``  ``dr = 0``
``ii``    ``dr = -dv^1``
``i``     ``dr = -dv^1 + Duhamel(-data / C)``
``ia``    ``dr = Duhamel(-data / C)``
``iii``   ``dr = -dv^1 + Duhamel(-data / C - r / C^2)``
``iv``    ``dr = -dv^1 + Duhamel(-data / C^2 - r / C)``
``v``     ``dr = -(S(1) data - data)``

``Duhamel(phi)(tau) = int_0^tau S(tau - s) phi ds`` with the source frozen at
the step-initial values.  For hypoelliptic systems the source is multiplied
by the positive weight ``2 Cbar / (1 + |y|^q)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import growth_regression
from .grid import Field, norm
from .hoermander import HormanderSystem
from .picard import GL_ORDER, INTERVALS, LocalState, StepOperators

__all__ = [
    "STRATEGIES",
    "EXPECTED_LAW",
    "ControlContext",
    "ControlState",
    "control_increment",
    "duhamel_source",
    "apply_control",
    "growth_ledger_check",
    "LEDGER_COLUMNS",
]

STRATEGIES = ("none", "i", "ia", "ii", "iii", "iv", "v")
_NEEDS_DV1 = {"i", "ii", "iii", "iv"}
# growth law tested for |v^r|_H2
EXPECTED_LAW = {"none": None, "i": "constant", "ia": "constant", "ii": "sqrt", "iii": "constant", "iv": "constant", "v": None}
LEDGER_COLUMNS = ("l", "rho_l", "r_Linf", "r_H2", "vr_H2", "v_H2")


@dataclass
class ControlContext:
    """Inputs of one control increment.

    ``weight_q`` switches on the hypoelliptic source weight
    ``2 C_bar / (1 + |y|^q)``.
    """

    sys: HormanderSystem
    data: Field
    rho: float
    C: float = 4.0
    delta_v1: Field | None = None
    r_prev: Field | None = None
    state: LocalState | None = None
    C_bar: float = 1.0
    weight_q: float | None = None
    backend: str | None = None


@dataclass
class ControlState:
    """Strategy, damping constant, current ``r`` and the per-step ledger."""

    strategy: str
    r: Field
    C: float = 4.0
    ledger: list = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.C > 1:
            raise ValueError("damping constant C must exceed 1")
        if not np.all(np.isfinite(self.r.data)):
            raise ValueError("r must be finite")

    @classmethod
    def start(cls, strategy: str, data: Field, C: float = 4.0, r0: str = "zero") -> "ControlState":
        """Initial control ``r^0 = 0`` or ``r^0 = h / C`` (same signs as the data)."""
        if r0 == "zero":
            r = Field.zeros(data.domain, data.components)
        elif r0 == "data_over_C":
            r = data * (1.0 / C)
        else:
            raise ValueError(f"unknown r0 option {r0!r}")
        return cls(strategy, r, C)

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for row in self.ledger:
            w.writerow([row["l"]] + [repr(float(row[c])) for c in LEDGER_COLUMNS[1:]])
        return buf.getvalue()


def _source_weight(ctx: ControlContext) -> np.ndarray | float:
    if ctx.weight_q is None:
        return 1.0
    d = ctx.data.domain
    if d.kind != "box":
        raise ValueError("the decay weight needs a box domain")
    return 2.0 * ctx.C_bar / (1.0 + d.radius() ** ctx.weight_q)


def duhamel_source(ctx: ControlContext, phi: np.ndarray) -> Field:
    """``int_0^1 S(1 - s) (w phi) ds`` for a source frozen in time."""
    ops = ctx.state.operators(ctx.sys) if ctx.state is not None else StepOperators(ctx.sys, ctx.data.domain, ctx.rho, ctx.backend)
    src = _source_weight(ctx) * phi
    g = np.broadcast_to(src, (INTERVALS, GL_ORDER, *src.shape))
    return Field(ctx.data.domain, ops.duhamel(g).end)


def control_increment(strategy: str, ctx: ControlContext) -> Field:
    """Control increment ``dr^l`` at the end of the step."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    data = ctx.data
    if strategy == "none":
        return Field.zeros(data.domain, data.components)
    if strategy in _NEEDS_DV1 and ctx.delta_v1 is None:
        raise ValueError(f"strategy {strategy} needs the first increment")
    C = ctx.C
    r_prev = ctx.r_prev.data if ctx.r_prev is not None else np.zeros_like(data.data)
    if strategy == "ii":
        return -ctx.delta_v1
    if strategy == "v":
        ops = ctx.state.operators(ctx.sys) if ctx.state is not None else StepOperators(ctx.sys, data.domain, ctx.rho, ctx.backend)
        return Field(data.domain, -(ops.propagate(data.data, 1.0) - data.data))
    phi = {
        "i": -data.data / C,
        "ia": -data.data / C,
        "iii": -data.data / C - r_prev / C**2,
        "iv": -data.data / C**2 - r_prev / C,
    }[strategy]
    damp = duhamel_source(ctx, phi)
    if strategy == "ia":
        return damp
    return damp - ctx.delta_v1


def apply_control(state: LocalState, ctrl: ControlState, delta_r: Field):
    """Add ``dr`` to the local solution and to ``r``; append a ledger row.

    Returns ``(v_controlled, r_new)``.  The uncontrolled solution is
    ``v_controlled - r_new``.
    """
    if not state.iterates:
        raise ValueError("the local state holds no iterates")
    local = state.iterates[-1]
    if delta_r.data.shape != local.data.shape or ctrl.r.data.shape != local.data.shape:
        raise ValueError("shape mismatch between control and local solution")
    v_ctrl = local + delta_r
    r_new = ctrl.r + delta_r
    ctrl.r = r_new
    v = v_ctrl - r_new
    ctrl.ledger.append(
        {
            "l": state.l,
            "rho_l": state.rho,
            "r_Linf": norm(r_new, "Linf"),
            "r_H2": norm(r_new, "Hm", m=2),
            "vr_H2": norm(v_ctrl, "Hm", m=2),
            "v_H2": norm(v, "Hm", m=2),
        }
    )
    return v_ctrl, r_new


def growth_ledger_check(ledger, strategy: str, r2_linear: float = 0.95, r2_sqrt: float = 0.9, uniform_step: int = 5, uniform_factor: float = 1.25) -> dict:
    """Fit the growth laws of a ledger and compare with the strategy's law.

    ``|r^l|_inf`` is fitted linearly in ``l``; linear growth is required for
    strategy ``ii`` only, the damped strategies keep ``r`` bounded.  For ``ii``
    the controlled norm ``|v^r|_H2`` is fitted against ``sqrt(l)``; for the
    damped strategies it must stay below ``uniform_factor`` times its value at
    ``uniform_step``.
    """
    rows = list(ledger)
    if len(rows) < 10:
        raise ValueError("growth_ledger_check needs at least 10 ledger entries")
    ls = [row["l"] for row in rows]
    report = {"strategy": strategy, "entries": len(rows)}
    passed = True
    r_vals = [row["r_Linf"] for row in rows]
    if np.ptp(r_vals) > 0:
        lin = growth_regression(ls, r_vals, "linear")
        report["r_linear"] = lin.to_dict()
        report["r_linear_pass"] = lin.r_squared >= r2_linear
        if strategy == "ii":
            passed &= report["r_linear_pass"]
    law = EXPECTED_LAW.get(strategy)
    vr = [row["vr_H2"] for row in rows]
    if law == "sqrt":
        fit = growth_regression(ls, vr, "sqrt")
        report["vr_sqrt"] = fit.to_dict()
        report["vr_sqrt_pass"] = fit.r_squared >= r2_sqrt
        passed &= report["vr_sqrt_pass"]
    elif law == "constant":
        fit = growth_regression(ls, vr, "constant")
        ref_rows = [row for row in rows if row["l"] == uniform_step]
        ref = ref_rows[0]["vr_H2"] if ref_rows else vr[min(uniform_step, len(vr)) - 1]
        later = [row["vr_H2"] for row in rows if row["l"] >= uniform_step]
        report["vr_constant"] = fit.to_dict()
        report["vr_uniform_reference"] = ref
        report["vr_uniform_max"] = max(later)
        report["vr_uniform_pass"] = max(later) <= uniform_factor * ref
        passed &= report["vr_uniform_pass"]
    report["expected_law"] = law
    report["passed"] = bool(passed)
    return report
