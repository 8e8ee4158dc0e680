"""Run configuration files.

A config is a JSON object with ``"schema": "leraylab.config/1"``.  Unknown
keys are errors, reported with their dotted path.  Sections:

``system``   ``{"builtin": NAME, ...}``, ``{"file": PATH}`` or an inline system
``domain``   ``{"kind": "torus"|"box", "shape": [...], "extent": ...}``
``initial``  ``{"kind": "zero"|"taylor_green"|"random_divfree"|"decaying_vortex", ...}``
``run``      step count, schedule, strategy and tolerances
``density``  Monte Carlo probe settings (``density-probe``)
``decay``    decay-audit settings (``decay-audit``)
``oracle``   ``"taylor_green"`` to compare the run with the closed form
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .fixtures import make_initial
from .grid import Domain
from .hoermander import HormanderSystem, SystemFileError, load_system, system_from_dict, SYSTEM_SCHEMA
from .scheme import Schedule, SchemeConfig

__all__ = ["CONFIG_SCHEMA", "ConfigError", "RunConfig", "load_config", "parse_config", "bundled_path"]

CONFIG_SCHEMA = "leraylab.config/1"

_TOP = {"schema", "name", "system", "domain", "initial", "run", "density", "decay", "oracle"}
_RUN = {"steps", "horizon", "schedule", "strategy", "C", "tol", "kmax", "decay_q", "backend", "r0", "c_n", "residual", "keep_samples"}
_DENSITY = {"x0", "tau", "taus", "N", "steps", "resolution", "half_width", "bandwidth", "order", "base_points", "oracle", "fit_envelope", "bulk_fraction"}
_DECAY = {"q", "q_tolerance", "kmax", "m_exp", "n_exp", "envelope_system", "envelope"}
_ENVELOPE = {"taus", "base_points", "N", "steps", "resolution", "bandwidth"}


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending field."""


def bundled_path(name: str) -> Path:
    """Path of a config shipped with the package (``data/configs/NAME``)."""
    base = resources.files("leraylab") / "data" / "configs"
    p = Path(str(base / name))
    if not p.suffix:
        p = p.with_suffix(".json")
    return p


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(where + '.' + k if where else k for k in unknown)}")


def _number(doc, key, where, default=None, positive=False, integer=False):
    if key not in doc:
        return default
    val = doc[key]
    if val is None:
        return None
    ok = isinstance(val, int) if integer else isinstance(val, (int, float))
    if isinstance(val, bool) or not ok or not math.isfinite(val):
        raise ConfigError(f"{where}.{key}: expected a {'integer' if integer else 'number'}")
    if positive and val <= 0:
        raise ConfigError(f"{where}.{key}: must be positive")
    return val


@dataclass
class RunConfig:
    """Parsed config: the scheme configuration plus the probe sections."""

    name: str
    scheme: SchemeConfig | None
    sys: HormanderSystem
    domain: Domain | None
    density: dict = field(default_factory=dict)
    decay: dict = field(default_factory=dict)
    oracle: str | None = None
    raw: dict = field(default_factory=dict)
    keep_samples: bool = False


def _system(doc, base: Path | None) -> HormanderSystem:
    if not isinstance(doc, dict):
        raise ConfigError("system: expected an object")
    try:
        if "file" in doc:
            _check_keys(doc, {"file"}, "system")
            p = Path(doc["file"])
            if not p.is_absolute() and base is not None:
                cand = base / p
                p = cand if cand.exists() else Path(str(resources.files("leraylab") / "data" / "systems" / p.name))
            return load_system(p)
        if "builtin" in doc and "schema" not in doc:
            doc = dict(doc, schema=SYSTEM_SCHEMA)
        return system_from_dict(doc)
    except SystemFileError as exc:
        raise ConfigError(f"system: {exc}") from exc


def _domain(doc) -> Domain:
    _check_keys(doc, {"kind", "shape", "extent"}, "domain")
    kind = doc.get("kind")
    shape = doc.get("shape")
    if kind not in ("torus", "box"):
        raise ConfigError("domain.kind: expected 'torus' or 'box'")
    if not isinstance(shape, list) or not all(isinstance(s, int) for s in shape):
        raise ConfigError("domain.shape: expected a list of integers")
    extent = doc.get("extent", 2 * math.pi if kind == "torus" else None)
    if extent is None:
        raise ConfigError("domain.extent: required for a box")
    if isinstance(extent, (int, float)):
        extent = [float(extent)] * len(shape)
    try:
        return Domain(kind, tuple(shape), tuple(extent))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"domain: {exc}") from exc


def parse_config(doc: dict, base: Path | None = None, strategy: str | None = None, seed: int | None = None) -> RunConfig:
    """Validate a config document and build the run objects."""
    _check_keys(doc, _TOP, "")
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"schema: expected {CONFIG_SCHEMA!r}")
    if "system" not in doc:
        raise ConfigError("system: missing")
    sys = _system(doc["system"], base)
    domain = _domain(doc["domain"]) if "domain" in doc else None
    if domain is not None and domain.n != sys.n:
        raise ConfigError("domain: dimension differs from the system")
    run = doc.get("run", {})
    _check_keys(run, _RUN, "run")
    scheme = None
    seed = int(seed if seed is not None else 0)
    if "initial" in doc:
        if domain is None:
            raise ConfigError("domain: required with initial data")
        init_doc = doc["initial"]
        if not isinstance(init_doc, dict) or "kind" not in init_doc:
            raise ConfigError("initial: expected an object with a 'kind'")
        if init_doc.get("kind") == "random_divfree" and "seed" not in init_doc:
            init_doc = dict(init_doc, seed=seed)
        try:
            initial = make_initial(init_doc, domain)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"initial: {exc}") from exc
        try:
            schedule = Schedule.from_dict(run.get("schedule", {"kind": "bound"}))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"run.schedule: {exc}") from exc
        strat = strategy or run.get("strategy", "none")
        from .control import STRATEGIES

        if strat not in STRATEGIES:
            raise ConfigError(f"run.strategy: unknown strategy {strat!r}")
        try:
            scheme = SchemeConfig(
                sys=sys,
                domain=domain,
                initial=initial,
                steps=_number(run, "steps", "run", 1, positive=True, integer=True),
                schedule=schedule,
                strategy=strat,
                C=_number(run, "C", "run", 4.0, positive=True),
                tol=_number(run, "tol", "run", 1e-10, positive=True),
                kmax=_number(run, "kmax", "run", 12, positive=True, integer=True),
                decay_q=_number(run, "decay_q", "run", None, positive=True),
                seed=seed,
                backend=run.get("backend"),
                r0=run.get("r0", "zero"),
                c_n=_number(run, "c_n", "run", 1.0, positive=True),
                horizon=_number(run, "horizon", "run", None, positive=True),
                residual=bool(run.get("residual", False)),
            )
        except ValueError as exc:
            raise ConfigError(f"run: {exc}") from exc
        if scheme.C <= 1:
            raise ConfigError("run.C: must exceed 1")
    density = doc.get("density", {})
    _check_keys(density, _DENSITY, "density")
    decay = doc.get("decay", {})
    _check_keys(decay, _DECAY, "decay")
    if "envelope" in decay:
        _check_keys(decay["envelope"], _ENVELOPE, "decay.envelope")
    oracle = doc.get("oracle")
    if oracle not in (None, "taylor_green"):
        raise ConfigError("oracle: only 'taylor_green' is available")
    return RunConfig(
        name=str(doc.get("name", "run")),
        scheme=scheme,
        sys=sys,
        domain=domain,
        density=density,
        decay=decay,
        oracle=oracle,
        raw=doc,
        keep_samples=bool(run.get("keep_samples", False)),
    )


def load_config(path, strategy: str | None = None, seed: int | None = None) -> RunConfig:
    """Read and validate a config file.  Bundled names resolve to ``data/configs``."""
    p = Path(path)
    if not p.exists():
        alt = bundled_path(str(path))
        if alt.exists():
            p = alt
        else:
            raise ConfigError(f"{path}: no such config file")
    text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc, p.parent, strategy, seed)
