"""Global time-stepping driver.

Step ``l`` covers the original-time interval ``[t_(l-1), t_l]`` with
``t_l = rho_1 + ... + rho_l``.  Each step runs the Picard series from the
controlled data, applies the configured control strategy and records a
:class:`StepReport`.  The physical solution is ``v = v^r - r``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import ControlContext, ControlState, apply_control, control_increment
from .grid import Domain, Field, divergence, load_field, norm, save_field
from .hoermander import HormanderSystem
from .kernels import leray_project
from .picard import LocalState, PicardDivergence, StepConstants, iterate_to_tolerance, momentum_residual

__all__ = [
    "Schedule",
    "SchemeConfig",
    "StepReport",
    "Trajectory",
    "TimeSeries",
    "run_global",
    "data_constant",
    "DecayBudget",
    "decay_budget_check",
    "export_original_time",
]


@dataclass(frozen=True)
class Schedule:
    """Step-size rule: ``bound`` (times ``factor``), ``one_over_l`` (``c / l``) or ``fixed``."""

    kind: str = "bound"
    c: float = 0.1
    rho: float = 0.01
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bound", "one_over_l", "fixed"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not (self.c > 0 and self.rho > 0 and self.factor > 0):
            raise ValueError("schedule parameters must be positive")

    def step(self, l: int, bound: float) -> float:
        if self.kind == "bound":
            rho = self.factor * bound
        elif self.kind == "one_over_l":
            rho = self.c / l
        else:
            rho = self.rho
        if not 0 < rho <= 1:
            raise ValueError(f"step size {rho} outside (0, 1]")
        return rho

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        kind = d.pop("kind", "bound")
        unknown = set(d) - {"c", "rho", "factor"}
        if unknown:
            raise ValueError(f"unknown schedule keys {sorted(unknown)}")
        return cls(kind, **d)

    def to_dict(self) -> dict:
        if self.kind == "bound":
            return {"kind": "bound", "factor": self.factor}
        if self.kind == "one_over_l":
            return {"kind": "one_over_l", "c": self.c}
        return {"kind": "fixed", "rho": self.rho}


@dataclass
class SchemeConfig:
    """Everything a global run needs.

    ``horizon`` (optional) stops the run once ``t_l`` reaches it, shortening
    the last step; ``steps`` is then an upper limit.  ``decay_q`` is the decay
    budget; on a box it enters the step constant and the hypoelliptic control
    weight.
    """

    sys: HormanderSystem
    domain: Domain
    initial: Field
    steps: int = 1
    schedule: Schedule = field(default_factory=Schedule)
    strategy: str = "none"
    C: float = 4.0
    tol: float = 1e-10
    kmax: int = 12
    decay_q: float | None = None
    seed: int = 0
    backend: str | None = None
    r0: str = "zero"
    c_n: float = 1.0
    horizon: float | None = None
    constants: StepConstants | None = None
    residual: bool = False
    project: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.initial.domain != self.domain:
            raise ValueError("initial data lives on a different domain")
        if self.initial.components != self.sys.n:
            raise ValueError("initial data must be an n-vector field")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def echo(self) -> dict:
        return {
            "system": self.sys.to_dict(),
            "domain": self.domain.to_dict(),
            "steps": self.steps,
            "schedule": self.schedule.to_dict(),
            "strategy": self.strategy,
            "C": self.C,
            "tol": self.tol,
            "kmax": self.kmax,
            "decay_q": self.decay_q,
            "seed": self.seed,
            "backend": self.backend,
            "r0": self.r0,
            "c_n": self.c_n,
            "horizon": self.horizon,
        }


@dataclass
class StepReport:
    l: int
    rho: float
    t: float
    C_prev: float
    bound_rho: float
    contraction: dict
    r_Linf: float
    r_H2: float
    vr_H2: float
    v_H2: float
    max_divergence: float | None
    residual: float | None = None
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def warnings(self) -> list:
        return self.contraction["warnings"]

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("l", "rho", "t", "C_prev", "bound_rho", "r_Linf", "r_H2", "vr_H2", "v_H2", "max_divergence", "residual")}
        out["contraction"] = self.contraction
        return out


@dataclass
class Trajectory:
    """End-of-step fields and reports of a global run."""

    initial: Field
    times: list = field(default_factory=list)
    vr: list = field(default_factory=list)
    r: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    records: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    aborted: str | None = None

    @property
    def v(self) -> list:
        """Physical solution ``v^r - r`` at every step end."""
        return [a - b for a, b in zip(self.vr, self.r)]

    @property
    def warnings(self) -> list:
        out = [f"l={rep.l}: {w}" for rep in self.reports for w in rep.warnings]
        if self.aborted:
            out.append(self.aborted)
        return out

    def report(self, config: dict | None = None, extra: dict | None = None) -> dict:
        out = {
            "config": config or {},
            "steps": [rep.to_dict() for rep in self.reports],
            "ledger": list(self.ledger),
            "warnings": self.warnings,
            "aborted": self.aborted,
        }
        if extra:
            out.update(extra)
        return out


def data_constant(data: Field, q: float | None = None) -> float:
    """The step constant ``C^(l-1) = max(1, |data|_H2, sup (1+|x|^q)|data|)``.

    The weighted sup enters only on a box with a configured decay budget.
    """
    c = max(1.0, norm(data, "Hm", m=2))
    if q is not None and data.domain.kind == "box":
        c = max(c, norm(data, "weighted_Linf", q=q))
    return c


def run_global(cfg: SchemeConfig, progress=None, observer=None) -> Trajectory:
    """Run ``cfg.steps`` steps (or up to ``cfg.horizon``) of the controlled scheme.

    A non-finite Picard iterate stops the run; the partial trajectory is
    returned with ``aborted`` set.  ``progress(report)`` is called after every
    step; ``observer(state, data, vr, r)`` additionally receives the local
    Picard state and the step's initial data.
    """
    sys = cfg.sys
    data = cfg.initial
    if cfg.project and cfg.domain.kind == "torus":
        data = leray_project(data)
    traj = Trajectory(initial=data)
    ctrl = ControlState.start(cfg.strategy, data, cfg.C, cfg.r0)
    consts = cfg.constants
    if consts is None:
        consts = StepConstants.measure(sys, cfg.domain, c_n=cfg.c_n)
    hypoelliptic = sys.heat_diffusivity() is None
    weight_q = cfg.decay_q if (hypoelliptic and cfg.domain.kind == "box" and cfg.decay_q is not None) else None
    t = 0.0
    for l in range(1, cfg.steps + 1):
        C_prev = data_constant(data, cfg.decay_q)
        bound = consts.rho(C_prev)
        rho = cfg.schedule.step(l, bound)
        if cfg.horizon is not None:
            rho = min(rho, cfg.horizon - t)
        state = LocalState(l, rho, data, backend=cfg.backend, bound_rho=bound)
        try:
            state, rec = iterate_to_tolerance(sys, state, cfg.tol, cfg.kmax)
        except PicardDivergence as exc:
            traj.aborted = f"l={l}: {exc}"
            traj.records.append(exc.record)
            break
        ctx = ControlContext(
            sys=sys, data=data, rho=rho, C=cfg.C, delta_v1=state.increments[0], r_prev=ctrl.r,
            state=state, C_bar=C_prev, weight_q=weight_q, backend=cfg.backend,
        )
        dr = control_increment(cfg.strategy, ctx)
        vr, r = apply_control(state, ctrl, dr)
        t += rho
        v = vr - r
        div = divergence(v).max_abs() if cfg.domain.kind == "torus" else None
        res = None
        if cfg.residual:
            res = momentum_residual(sys, [Field(cfg.domain, s) for s in state.solution.samples], rho=rho)
        row = ctrl.ledger[-1]
        traj.reports.append(
            StepReport(l, rho, t, C_prev, bound, rec.to_dict(), row["r_Linf"], row["r_H2"], row["vr_H2"], row["v_H2"], div, res)
        )
        traj.records.append(rec)
        traj.times.append(t)
        traj.vr.append(vr)
        traj.r.append(r)
        if observer is not None:
            observer(state, data, vr, r)
        data = vr
        if progress is not None:
            progress(traj.reports[-1])
        if cfg.horizon is not None and t >= cfg.horizon * (1 - 1e-14):
            break
    traj.ledger = list(ctrl.ledger)
    return traj


# --- decay budget ---------------------------------------------------------------


@dataclass(frozen=True)
class DecayBudget:
    q: float
    n: int
    m_exp: float
    n_exp: float
    theorem_threshold: float
    lemma_threshold: float

    @property
    def theorem_pass(self) -> bool:
        return self.q >= self.theorem_threshold

    @property
    def lemma_pass(self) -> bool:
        return self.q >= self.lemma_threshold

    @property
    def theorem_margin(self) -> float:
        return self.q - self.theorem_threshold

    @property
    def lemma_margin(self) -> float:
        return self.q - self.lemma_threshold

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "n": self.n,
            "m_exp": self.m_exp,
            "n_exp": self.n_exp,
            "theorem_threshold": self.theorem_threshold,
            "theorem_pass": self.theorem_pass,
            "theorem_margin": self.theorem_margin,
            "lemma_threshold": self.lemma_threshold,
            "lemma_pass": self.lemma_pass,
            "lemma_margin": self.lemma_margin,
        }


def decay_budget_check(q: float, n: int, envelope=None, m_exp: float | None = None, n_exp: float | None = None) -> DecayBudget:
    """Evaluate the decay budgets for the fitted (or given) envelope exponents.

    Global existence needs ``q >= max(n_exp, 3 m_exp) + 2n + 2``; the
    inheritance of decay by the increments needs
    ``q >= max(n_exp, m_exp) + n + 1``.
    """
    if envelope is not None:
        m_exp, n_exp = envelope.m_exp, envelope.n_exp
    if m_exp is None or n_exp is None:
        raise ValueError("need an envelope or both exponents")
    theorem = max(n_exp, 3 * m_exp) + 2 * n + 2
    lemma = max(n_exp, m_exp) + n + 1
    return DecayBudget(float(q), int(n), float(m_exp), float(n_exp), float(theorem), float(lemma))


# --- export -------------------------------------------------------------------


@dataclass
class TimeSeries:
    """Original-time samples ``(t_l, v(t_l))``."""

    times: list
    fields: list

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for l, f in enumerate(self.fields, start=1):
            name = f"v_{l:04d}"
            save_field(f, directory / name)
            names.append(name)
        index = {"schema": "leraylab.series/1", "times": [float(t) for t in self.times], "fields": names}
        path = directory / "series.json"
        path.write_text(json.dumps(index, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "TimeSeries":
        directory = Path(directory)
        index = json.loads((directory / "series.json").read_text())
        if index.get("schema") != "leraylab.series/1":
            raise ValueError("not a leraylab time series")
        return cls(list(index["times"]), [load_field(directory / name) for name in index["fields"]])


def export_original_time(traj: Trajectory) -> TimeSeries:
    """Pairs ``(t_l, v^r(t_l) - r(t_l))`` for every completed step."""
    if not traj.times:
        raise ValueError("empty trajectory")
    return TimeSeries(list(traj.times), traj.v)
