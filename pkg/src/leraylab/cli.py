"""Command-line entry point ``leraylab``.

Subcommands: ``run``, ``contraction-audit``, ``density-probe``,
``hormander-check`` and ``decay-audit``.

Exit codes
----------
0  success
1  hard error (bad config, bad system file, non-finite iterate, no samples)
2  finished with warnings (non-contraction, step above the bound, failed audit)
3  Hörmander condition not satisfied (``hormander-check`` only)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys as _sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .diagnostics import contraction_table, decay_order
from .grid import Domain, Field, norm, save_field
from .hoermander import SystemFileError, builtin_system, check_condition, load_system, BUILTINS

log = logging.getLogger("leraylab")

EXIT_OK, EXIT_ERROR, EXIT_WARN, EXIT_FAIL = 0, 1, 2, 3


# --- output handling ------------------------------------------------------------


class OutputDir:
    """Staging directory that is renamed onto ``--out`` when the command ends.

    The manifest is the first file written.  Readers therefore either see no
    output directory or a complete one.
    """

    def __init__(self, out: str | None, manifest: dict):
        self.final = Path(out) if out else None
        if self.final is not None and self.final.exists() and any(self.final.iterdir()):
            raise ConfigError(f"{self.final}: output directory exists and is not empty")
        parent = self.final.parent if self.final is not None else Path(tempfile.gettempdir())
        parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=".leraylab-", dir=parent))
        self.manifest = dict(manifest)
        self.manifest["started"] = datetime.now(timezone.utc).isoformat()
        self._write_manifest()

    def _write_manifest(self):
        (self.path / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def write_json(self, name: str, doc) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        return p

    def write_columns(self, name: str, xs, ys, header: str) -> Path:
        lines = [f"# {header}"] + [f"{float(x)!r} {float(y)!r}" for x, y in zip(xs, ys)]
        return self.write_text(name, "\n".join(lines) + "\n")

    def finish(self, exit_code: int) -> Path | None:
        self.manifest["finished"] = datetime.now(timezone.utc).isoformat()
        self.manifest["exit_code"] = exit_code
        self._write_manifest()
        if self.final is None:
            shutil.rmtree(self.path, ignore_errors=True)
            return None
        if self.final.exists():
            self.final.rmdir()
        os.replace(self.path, self.final)
        return self.final


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("SOLVER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SOLVER_THREADS={env!r} is not an integer") from None
    return 1


# --- subcommands ------------------------------------------------------------------


def _need_scheme(cfg: RunConfig):
    if cfg.scheme is None:
        raise ConfigError("initial: this subcommand needs initial data and a domain")
    return cfg.scheme


def _exit_for(warnings) -> int:
    return EXIT_WARN if warnings else EXIT_OK


def cmd_run(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    from .fixtures import taylor_green, taylor_green_pressure
    from .kernels import recover_pressure
    from .scheme import export_original_time, run_global

    scheme = _need_scheme(cfg)
    traj = run_global(scheme)
    extra = {}
    if traj.times:
        series = export_original_time(traj)
        series.save(out.path / "snapshots")
        save_field(traj.vr[-1], out.path / "snapshots" / "vr_final")
        save_field(traj.r[-1], out.path / "snapshots" / "r_final")
        if cfg.oracle == "taylor_green":
            t = traj.times[-1]
            v = traj.v[-1]
            extra["oracle_error"] = float(np.max(np.abs(v.data - taylor_green(v.domain, scheme.sys.nu, t).data)))
            extra["pressure_error"] = float(np.max(np.abs(recover_pressure(v).data - taylor_green_pressure(v.domain, scheme.sys.nu, t).data)))
            extra["oracle_time"] = t
    report = traj.report(scheme.echo(), extra)
    out.write_json("report.json", report)
    from .control import ControlState

    ctrl = ControlState(scheme.strategy if scheme.strategy else "none", traj.initial * 0.0, scheme.C, list(traj.ledger))
    out.write_text("ledger.csv", ctrl.ledger_csv())
    ls = [rep.l for rep in traj.reports]
    out.write_columns("plot_vr_H2.dat", ls, [rep.vr_H2 for rep in traj.reports], "l |v^r|_H2")
    out.write_columns("plot_r_Linf.dat", ls, [rep.r_Linf for rep in traj.reports], "l |r|_Linf")
    out.write_columns("plot_v_H2.dat", [rep.t for rep in traj.reports], [rep.v_H2 for rep in traj.reports], "t |v|_H2")
    if traj.aborted:
        log.error("run aborted: %s", traj.aborted)
        return EXIT_ERROR
    for w in traj.warnings:
        log.warning(w)
    return _exit_for(traj.warnings)


def cmd_contraction_audit(cfg: RunConfig, out: OutputDir, threads: int) -> int:
    from .scheme import run_global

    scheme = _need_scheme(cfg)
    traj = run_global(scheme)
    if not traj.records:
        log.error("no step completed: %s", traj.aborted)
        return EXIT_ERROR
    table = contraction_table(traj.records)
    out.write_text("contraction.csv", table.to_csv())
    k2 = [(r.l, r.ratios[0]) for r in traj.records if r.ratios]
    out.write_columns("plot_ratio_k2.dat", [a for a, _ in k2], [b for _, b in k2], "l ratio_k2")
    summary = table.summary()
    summary["records"] = [r.to_dict() for r in traj.records]
    summary["warnings"] = traj.warnings
    summary["config"] = scheme.echo()
    out.write_json("audit.json", summary)
    for v in table.violations:
        log.warning("violation: %s", v)
    if traj.aborted:
        return EXIT_ERROR
    return _exit_for(list(table.violations) + traj.warnings)


def cmd_density_probe(cfg: RunConfig, out: OutputDir, threads: int, seed: int) -> int:
    from .semigroup import euler_maruyama_sample, estimate_density, exact_gaussian_law, fit_ks_envelope, relative_density_error

    dens = cfg.density
    sys = cfg.sys
    N = int(dens.get("N", 100_000))
    if N <= 0:
        log.error("no samples: density.N must be positive")
        return EXIT_ERROR
    x0 = np.asarray(dens.get("x0", [0.0] * sys.n), dtype=float)
    tau = float(dens.get("tau", 1.0))
    grid = Domain.box((int(dens.get("resolution", 128)),) * sys.n, float(dens.get("half_width", 6.0)))
    samples = euler_maruyama_sample(sys, x0, tau, int(dens.get("steps", 64)), N, seed, threads)
    est = estimate_density(samples, grid, dens.get("bandwidth", "scott"), x0, tau, int(dens.get("order", 4)))
    save_field(est.density, out.path / "density")
    report = {
        "N": N,
        "x0": x0.tolist(),
        "tau": tau,
        "bandwidth": list(est.bandwidth),
        "mass": est.mass,
        "noise_floor": est.noise_floor,
        "seed": seed,
    }
    passed = True
    oracle = dens.get("oracle")
    if oracle:
        law = exact_gaussian_law(sys, x0, tau)
        if law is None:
            raise ConfigError(f"density.oracle: no closed form for system {sys.name!r}")
        err = relative_density_error(est, *law, radius=float(dens.get("bulk_fraction", 2.0)))
        report["oracle"] = oracle
        report["sup_relative_error"] = err
        report["oracle_pass"] = err <= 0.05
        passed &= report["oracle_pass"]
    env_cfg = dens.get("fit_envelope")
    if env_cfg:
        env = fit_ks_envelope(
            sys,
            env_cfg.get("taus", [0.25, 0.5, 1.0]),
            env_cfg.get("base_points", [[0, 0], [0.5, 0], [1, 0], [1.5, 0], [2, 0]]),
            N=int(env_cfg.get("N", N)),
            seed=seed,
            steps=int(env_cfg.get("steps", 64)),
            resolution=int(env_cfg.get("resolution", 128)),
            threads=threads,
            bandwidth=env_cfg.get("bandwidth", "scott"),
        )
        out.write_text("envelope.json", env.to_json() + "\n")
        report["envelope"] = env.to_dict()
    out.write_json("probe.json", report)
    return EXIT_OK if passed else EXIT_WARN


def cmd_hormander_check(system: str, out: OutputDir | None, seed: int, samples: int = 100) -> int:
    if system in BUILTINS:
        sys = builtin_system(system)
    else:
        sys = load_system(system)
    domain = Domain.box((16,) * sys.n, 2.0)
    rep = check_condition(sys, domain, samples=samples, seed=seed)
    doc = rep.to_dict()
    doc["system"] = sys.name
    lines = [f"system {sys.name}: {'pass' if rep.passed else 'FAIL'}", f"  rank {rep.worst_rank} of {sys.n}, bracket depth {rep.max_depth_used}"]
    for p in rep.failing[:10]:
        lines.append(f"  witness {list(map(float, p))}")
    print("\n".join(lines))
    if out is not None:
        out.write_json("hormander.json", doc)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_decay_audit(cfg: RunConfig, out: OutputDir, threads: int, seed: int) -> int:
    from .picard import LocalState, StepConstants, iterate_to_tolerance
    from .scheme import data_constant, decay_budget_check

    scheme = _need_scheme(cfg)
    if scheme.domain.kind != "box":
        raise ConfigError("domain.kind: decay-audit needs a box")
    dec = cfg.decay
    tol_q = float(dec.get("q_tolerance", 0.5))
    data = scheme.initial
    report = {"config": scheme.echo()}
    if data.max_abs() == 0:
        report.update(trivial=True, passed=True)
        out.write_json("decay.json", report)
        return EXIT_OK
    consts = scheme.constants or StepConstants.measure(scheme.sys, scheme.domain, c_n=scheme.c_n)
    bound = consts.rho(data_constant(data, scheme.decay_q))
    rho = scheme.schedule.step(1, bound)
    state = LocalState(1, rho, data, backend=scheme.backend, bound_rho=bound)
    state, rec = iterate_to_tolerance(scheme.sys, state, scheme.tol, int(dec.get("kmax", scheme.kmax)))
    q_data = decay_order(data)
    fits = []
    for k, inc in enumerate(state.increments, start=1):
        try:
            f = decay_order(inc)
            fits.append({"k": k, **f.to_dict()})
        except ValueError as exc:
            fits.append({"k": k, "q_hat": None, "note": str(exc)})
    q_cfg = dec.get("q", scheme.decay_q)
    target = float(q_cfg) if q_cfg is not None else q_data.q_hat
    higher = [f["q_hat"] for f in fits if f["k"] >= 2 and f["q_hat"] is not None]
    report.update(
        rho=rho,
        bound_rho=bound,
        contraction=rec.to_dict(),
        q_data=q_data.to_dict(),
        increments=fits,
        q_reference=target,
        q_tolerance=tol_q,
        inherited=bool(higher) and min(higher) >= target - tol_q,
    )
    m_exp, n_exp = dec.get("m_exp"), dec.get("n_exp")
    if "envelope" in dec or dec.get("envelope_system"):
        from .semigroup import fit_ks_envelope

        env_sys = builtin_system(dec["envelope_system"]) if dec.get("envelope_system") else scheme.sys
        e = dec.get("envelope", {})
        env = fit_ks_envelope(
            env_sys,
            e.get("taus", [0.25, 0.5, 1.0]),
            e.get("base_points", [[0, 0], [0.5, 0], [1, 0], [1.5, 0], [2, 0]]),
            N=int(e.get("N", 100_000)),
            seed=seed,
            steps=int(e.get("steps", 64)),
            resolution=int(e.get("resolution", 128)),
            threads=threads,
            bandwidth=e.get("bandwidth", "scott"),
        )
        report["envelope"] = env.to_dict()
        m_exp, n_exp = env.m_exp, env.n_exp
    if m_exp is not None and n_exp is not None and q_cfg is not None:
        report["budget"] = decay_budget_check(q_cfg, scheme.sys.n, m_exp=m_exp, n_exp=n_exp).to_dict()
    report["passed"] = report["inherited"] and report.get("budget", {}).get("lemma_pass", True)
    out.write_json("decay.json", report)
    return EXIT_OK if report["passed"] and not rec.warnings else EXIT_WARN


# --- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", metavar="DIR", help="output directory (created atomically)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="thread budget (overrides SOLVER_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="leraylab", description="Controlled Leray-form Navier-Stokes laboratory.")
    parser.add_argument("--version", action="version", version=f"leraylab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "run the global scheme"),
        ("contraction-audit", "record and tabulate Picard contraction ratios"),
        ("density-probe", "Monte Carlo density estimate and envelope fit"),
        ("decay-audit", "decay orders of the Picard increments on a box"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", required=True, metavar="PATH", help="config file or bundled config name")
        p.add_argument("--strategy", default=None, help="control strategy (overrides the config)")
    p = sub.add_parser("hormander-check", parents=[common], help="check the bracket-generating condition")
    p.add_argument("system", nargs="?", help="system file or built-in name")
    p.add_argument("--config", metavar="PATH", help="take the system from a config file")
    p.add_argument("--samples", type=int, default=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    seed = args.seed if args.seed is not None else 0
    out = None
    code = EXIT_ERROR
    try:
        threads = _threads(args.threads)
        manifest = {
            "subcommand": args.command,
            "config": getattr(args, "config", None),
            "output": args.out,
            "seed": seed,
            "threads": threads,
            "version": __version__,
        }
        if args.command == "hormander-check":
            if args.config:
                target = load_config(args.config).raw["system"]
                if "builtin" in target and set(target) <= {"builtin", "schema"}:
                    target = target["builtin"]
                else:
                    target = args.config  # not a system file: let load_system complain
            elif args.system:
                target = args.system
            else:
                parser.error("hormander-check needs a system file, a built-in name or --config")
            manifest["system"] = target
            out = OutputDir(args.out, manifest) if args.out else None
            code = cmd_hormander_check(target, out, seed, args.samples)
        else:
            cfg = load_config(args.config, strategy=args.strategy, seed=seed)
            out = OutputDir(args.out, manifest)
            if args.command == "run":
                code = cmd_run(cfg, out, threads)
            elif args.command == "contraction-audit":
                code = cmd_contraction_audit(cfg, out, threads)
            elif args.command == "density-probe":
                code = cmd_density_probe(cfg, out, threads, seed)
            else:
                code = cmd_decay_audit(cfg, out, threads, seed)
    except (ConfigError, SystemFileError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        code = EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - report every failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=_sys.stderr)
        code = EXIT_ERROR
    finally:
        if out is not None:
            out.finish(code)
    return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
