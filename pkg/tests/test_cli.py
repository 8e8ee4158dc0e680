"""Command-line interface: parsing, exit codes, atomic output and config errors."""
from __future__ import annotations

import json

import pytest

from leraylab.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, EXIT_WARN, build_parser, main
from leraylab.config import ConfigError, bundled_path, load_config


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


SMALL = {
    "schema": "leraylab.config/1",
    "name": "small",
    "system": {"builtin": "laplacian", "n": 2, "nu": 0.1},
    "domain": {"kind": "torus", "shape": [16, 16]},
    "initial": {"kind": "random_divfree", "seed": 1, "kmax": 2, "h2": 1.0},
    "run": {"steps": 2, "schedule": {"kind": "bound"}, "tol": 1e-10, "kmax": 12},
}


class TestParser:
    @pytest.mark.parametrize("cmd", ["run", "contraction-audit", "density-probe", "decay-audit"])
    def test_config_subcommands(self, cmd):
        args = build_parser().parse_args([cmd, "--config", "x.json", "--seed", "3", "--threads", "2"])
        assert args.command == cmd and args.seed == 3 and args.threads == 2

    def test_hormander_positional(self):
        args = build_parser().parse_args(["hormander-check", "heisenberg"])
        assert args.system == "heisenberg" and args.samples == 100

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_config_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run"])


class TestExitCodes:
    def test_zero_data_run(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", "zero-data", "--out", str(out)]) == EXIT_OK
        rep = json.loads((out / "report.json").read_text())
        assert rep is not None
        assert json.loads((out / "manifest.json").read_text())["exit_code"] == EXIT_OK

    def test_small_run_writes_outputs(self, tmp_path):
        out = tmp_path / "o"
        code = main(["run", "--config", str(_write(tmp_path, SMALL)), "--out", str(out)])
        assert code == EXIT_OK
        names = {p.name for p in out.iterdir()}
        assert {"manifest.json", "report.json", "ledger.csv", "plot_vr_H2.dat", "snapshots"} <= names
        assert len((out / "ledger.csv").read_text().splitlines()) == 3

    def test_over_bound_warns(self, tmp_path, capsys):
        assert main(["contraction-audit", "--config", "over-bound", "--out", str(tmp_path / "o")]) == EXIT_WARN

    @pytest.mark.parametrize("system,code", [("heisenberg", EXIT_OK), ("kolmogorov", EXIT_OK), ("laplacian", EXIT_OK)])
    def test_hormander_builtin(self, system, code, capsys):
        assert main(["hormander-check", system]) == code
        assert "pass" in capsys.readouterr().out

    def test_hormander_degenerate_file(self, tmp_path, capsys):
        path = str(bundled_path("x").parent.parent / "systems" / "degenerate.json")
        out = tmp_path / "h"
        assert main(["hormander-check", path, "--out", str(out)]) == EXIT_FAIL
        text = capsys.readouterr().out
        assert "FAIL" in text and "witness" in text
        doc = json.loads((out / "hormander.json").read_text())
        assert doc["passed"] is False

    def test_hormander_from_config(self):
        assert main(["hormander-check", "--config", "kolmogorov"]) == EXIT_OK

    def test_density_needs_samples(self, tmp_path):
        doc = {"schema": "leraylab.config/1", "system": {"builtin": "laplacian"}, "density": {"N": 0}}
        assert main(["density-probe", "--config", str(_write(tmp_path, doc)), "--out", str(tmp_path / "o")]) == EXIT_ERROR

    def test_zero_decay_is_trivial(self, tmp_path):
        out = tmp_path / "o"
        assert main(["decay-audit", "--config", "zero-decay", "--out", str(out)]) == EXIT_OK
        assert json.loads((out / "decay.json").read_text())["trivial"] is True

    def test_decay_needs_box(self, tmp_path, capsys):
        assert main(["decay-audit", "--config", str(_write(tmp_path, SMALL))]) == EXIT_ERROR
        assert "box" in capsys.readouterr().err


class TestOutputDir:
    def test_non_empty_out_rejected(self, tmp_path, capsys):
        out = tmp_path / "o"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert main(["run", "--config", "zero-data", "--out", str(out)]) == EXIT_ERROR
        assert "not empty" in capsys.readouterr().err
        assert [p.name for p in out.iterdir()] == ["keep.txt"]

    def test_empty_out_accepted(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        assert main(["run", "--config", "zero-data", "--out", str(out)]) == EXIT_OK
        assert (out / "manifest.json").exists()

    def test_failed_run_keeps_manifest_and_leaves_no_staging(self, tmp_path):
        doc = {"schema": "leraylab.config/1", "system": {"builtin": "laplacian"}, "density": {"N": 0}}
        out = tmp_path / "o"
        main(["density-probe", "--config", str(_write(tmp_path, doc)), "--out", str(out)])
        man = json.loads((out / "manifest.json").read_text())
        assert man["exit_code"] == EXIT_ERROR and man["subcommand"] == "density-probe"
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".leraylab-")]

    def test_threads_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOLVER_THREADS", "3")
        out = tmp_path / "o"
        main(["run", "--config", "zero-data", "--out", str(out)])
        assert json.loads((out / "manifest.json").read_text())["threads"] == 3
        monkeypatch.setenv("SOLVER_THREADS", "many")
        assert main(["run", "--config", "zero-data"]) == EXIT_ERROR


class TestConfigErrors:
    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(_write(tmp_path, {**SMALL, "colour": "red"}))

    def test_unknown_nested_key_is_named(self, tmp_path):
        bad = {**SMALL, "run": {**SMALL["run"], "stpes": 3}}
        with pytest.raises(ConfigError, match="run.stpes"):
            load_config(_write(tmp_path, bad))

    def test_json_syntax_reports_position(self, tmp_path):
        with pytest.raises(ConfigError, match="line 2 column"):
            load_config(_write(tmp_path, '{\n  "schema": ,\n}'))

    def test_bad_number(self, tmp_path):
        bad = {**SMALL, "run": {**SMALL["run"], "steps": "ten"}}
        with pytest.raises(ConfigError, match="steps"):
            load_config(_write(tmp_path, bad))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="no such config"):
            load_config("does-not-exist.json")

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["run", "--config", str(_write(tmp_path, "{"))]) == EXIT_ERROR
        assert capsys.readouterr().err.startswith("error:")

    @pytest.mark.parametrize(
        "name",
        ["contraction", "decay", "gaussian", "kolmogorov", "one-over-l", "over-bound", "strategy-ii", "strategy-iii", "taylor-green", "zero-data", "zero-decay"],
    )
    def test_bundled_configs_parse(self, name):
        load_config(name)

    def test_strategy_override(self):
        cfg = load_config("strategy-ii", strategy="iii")
        assert cfg.scheme.strategy == "iii"
