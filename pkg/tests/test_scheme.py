"""Global driver: schedules, runs, decay budget and time-series export."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leraylab.fixtures import decaying_vortex, random_divfree, taylor_green
from leraylab.grid import Domain, Field, norm
from leraylab.hoermander import HormanderSystem
from leraylab.picard import StepConstants
from leraylab.scheme import (
    Schedule,
    SchemeConfig,
    TimeSeries,
    data_constant,
    decay_budget_check,
    export_original_time,
    run_global,
)
from leraylab.semigroup import KSEnvelope

SYS = HormanderSystem.classical(2, 0.1)
CONSTS = StepConstants(1.0, 1.0, 1.0, 4.0)


class TestSchedule:
    def test_rules(self):
        assert Schedule("bound", factor=2.0).step(3, 0.01) == pytest.approx(0.02)
        assert Schedule("one_over_l", c=0.1).step(4, 0.5) == pytest.approx(0.025)
        assert Schedule("fixed", rho=0.3).step(9, 0.01) == 0.3

    def test_invalid(self):
        with pytest.raises(ValueError):
            Schedule("geometric")
        with pytest.raises(ValueError):
            Schedule("fixed", rho=-1.0)
        with pytest.raises(ValueError):
            Schedule("fixed", rho=2.0).step(1, 0.1)
        with pytest.raises(ValueError):
            Schedule.from_dict({"kind": "bound", "alpha": 1})

    @pytest.mark.parametrize("doc", [{"kind": "bound", "factor": 3.0}, {"kind": "one_over_l", "c": 0.2}, {"kind": "fixed", "rho": 0.05}])
    def test_roundtrip(self, doc):
        assert Schedule.from_dict(doc).to_dict() == doc


class TestConfig:
    def test_validation(self, torus32):
        v = taylor_green(torus32)
        with pytest.raises(ValueError):
            SchemeConfig(SYS, torus32, v, steps=0)
        with pytest.raises(ValueError):
            SchemeConfig(SYS, Domain.torus((16, 16)), v)
        with pytest.raises(ValueError):
            SchemeConfig(SYS, torus32, Field.zeros(torus32, 1))
        with pytest.raises(ValueError):
            SchemeConfig(SYS, torus32, v, horizon=-1.0)

    def test_echo_is_json_ready(self, torus32):
        import json

        json.dumps(SchemeConfig(SYS, torus32, taylor_green(torus32)).echo())

    def test_data_constant(self, torus32):
        v = random_divfree(torus32, h2=3.0)
        assert data_constant(v) == pytest.approx(3.0)
        assert data_constant(v * 0.01) == 1.0
        box = Domain.box((64, 64), 8.0)
        w = decaying_vortex(box, q=4)
        assert data_constant(w, q=4) >= norm(w, "weighted_Linf", q=4)


class TestRun:
    def test_taylor_green_fixed_steps(self, torus32):
        cfg = SchemeConfig(SYS, torus32, taylor_green(torus32), steps=3, schedule=Schedule("fixed", rho=0.02), constants=CONSTS)
        traj = run_global(cfg)
        assert traj.times == pytest.approx([0.02, 0.04, 0.06])
        for t, v in zip(traj.times, traj.v):
            assert np.max(np.abs(v.data - taylor_green(torus32, 0.1, t).data)) < 1e-12
        # a fixed step above the bound is flagged but still converges here
        assert all("exceeds the step-size bound" in w for w in traj.warnings)

    def test_horizon_clips_last_step(self, torus32):
        cfg = SchemeConfig(SYS, torus32, taylor_green(torus32), steps=100, schedule=Schedule("fixed", rho=0.03), horizon=0.1, constants=CONSTS)
        traj = run_global(cfg)
        assert len(traj.times) == 4
        assert traj.times[-1] == pytest.approx(0.1, abs=1e-15)
        assert traj.reports[-1].rho == pytest.approx(0.01)

    def test_bound_schedule_uses_data_constant(self, torus32):
        data = random_divfree(torus32, seed=1, h2=3.0)
        cfg = SchemeConfig(SYS, torus32, data, steps=1, constants=CONSTS)
        rep = run_global(cfg).reports[0]
        assert rep.rho == pytest.approx(CONSTS.rho(3.0))
        assert rep.C_prev == pytest.approx(3.0)

    @pytest.mark.parametrize("strategy", ["none", "i", "ia", "ii", "iii", "iv", "v"])
    def test_strategies_keep_physical_solution_divergence_free(self, torus32, strategy):
        cfg = SchemeConfig(SYS, torus32, random_divfree(torus32, seed=2), steps=3, strategy=strategy, constants=CONSTS)
        traj = run_global(cfg)
        assert len(traj.ledger) == 3
        assert max(rep.max_divergence for rep in traj.reports) < 1e-10

    def test_observer_sees_states(self, torus32):
        seen = []
        cfg = SchemeConfig(SYS, torus32, random_divfree(torus32, seed=3), steps=2, strategy="ii", constants=CONSTS)
        run_global(cfg, observer=lambda state, data, vr, r: seen.append((state.l, len(state.increments))))
        assert [s[0] for s in seen] == [1, 2]

    def test_residual_reported(self, torus32):
        cfg = SchemeConfig(SYS, torus32, taylor_green(torus32), steps=1, schedule=Schedule("fixed", rho=0.01), constants=CONSTS, residual=True)
        rep = run_global(cfg).reports[0]
        assert rep.residual is not None and rep.residual < 1e-8

    def test_blow_up_aborts_gracefully(self, torus32):
        data = random_divfree(torus32, seed=1) * 1e120
        cfg = SchemeConfig(SYS, torus32, data, steps=3, schedule=Schedule("fixed", rho=1.0), constants=CONSTS, kmax=6)
        with np.errstate(all="ignore"):
            traj = run_global(cfg)
        assert traj.aborted and traj.aborted.startswith("l=1")
        assert traj.times == []
        assert traj.warnings[-1] == traj.aborted


class TestDecayBudget:
    def test_hand_fed_arithmetic(self):
        b = decay_budget_check(10.0, 2, m_exp=1.0, n_exp=3.0)
        assert b.theorem_threshold == max(3.0, 3 * 1.0) + 2 * 2 + 2
        assert b.lemma_threshold == max(3.0, 1.0) + 2 + 1
        assert b.theorem_pass and b.lemma_pass
        assert b.theorem_margin == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(q=st.floats(0, 30), n=st.integers(1, 4), m=st.floats(-2, 5), ne=st.floats(0, 5))
    def test_threshold_formula(self, q, n, m, ne):
        b = decay_budget_check(q, n, m_exp=m, n_exp=ne)
        assert b.theorem_threshold == max(ne, 3 * m) + 2 * n + 2
        assert b.theorem_pass == (q >= max(ne, 3 * m) + 2 * n + 2)
        assert b.lemma_pass == (q >= max(ne, m) + n + 1)

    def test_from_envelope(self):
        env = KSEnvelope(1.0, 0.5, 0.6, 1.7, 0.1)
        b = decay_budget_check(7.0, 2, envelope=env)
        assert b.theorem_threshold == pytest.approx(max(1.7, 1.8) + 6)
        assert not b.theorem_pass

    def test_needs_exponents(self):
        with pytest.raises(ValueError):
            decay_budget_check(6.0, 2, m_exp=1.0)


class TestExport:
    def test_roundtrip(self, torus32, tmp_path):
        cfg = SchemeConfig(SYS, torus32, random_divfree(torus32, seed=5), steps=2, strategy="ii", constants=CONSTS)
        traj = run_global(cfg)
        ts = export_original_time(traj)
        for f, vr, r in zip(ts.fields, traj.vr, traj.r):
            np.testing.assert_array_equal(f.data, (vr - r).data)
        ts.save(tmp_path)
        back = TimeSeries.load(tmp_path)
        assert back.times == ts.times
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(back.fields, ts.fields))

    def test_empty(self, torus32):
        from leraylab.scheme import Trajectory

        with pytest.raises(ValueError):
            export_original_time(Trajectory(initial=Field.zeros(torus32, 2)))
