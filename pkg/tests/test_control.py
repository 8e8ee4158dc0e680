"""Control strategies, control application and the growth ledger."""
from __future__ import annotations

import math

import numpy as np
import pytest

from leraylab.control import (
    LEDGER_COLUMNS,
    STRATEGIES,
    ControlContext,
    ControlState,
    apply_control,
    control_increment,
    duhamel_source,
    growth_ledger_check,
)
from leraylab.fixtures import random_divfree
from leraylab.grid import Domain, Field, norm
from leraylab.hoermander import HormanderSystem
from leraylab.picard import LocalState, iterate_to_tolerance

SYS = HormanderSystem.classical(2, 0.1)
RHO = 0.02


def _mode(domain):
    x, y = domain.coords()
    return Field(domain, np.stack([np.sin(2 * y), np.cos(3 * x)]))


def _damping_factor(rho):
    # int_0^1 exp(-lam (1 - s)) ds per component of the mode field
    lam = np.array([4.0, 9.0]) * 0.1 * rho
    return ((1 - np.exp(-lam)) / lam)[:, None, None]


@pytest.fixture(scope="module")
def step(torus32_module):
    data = random_divfree(torus32_module, seed=11)
    state = LocalState(1, RHO, data)
    state, _ = iterate_to_tolerance(SYS, state, tol=1e-13)
    return data, state


@pytest.fixture(scope="module")
def torus32_module():
    return Domain.torus((32, 32))


def _ctx(data, state, r_prev=None, C=4.0):
    return ControlContext(SYS, data, RHO, C=C, delta_v1=state.increments[0], r_prev=r_prev, state=state)


class TestIncrements:
    def test_none_is_zero(self, step):
        data, state = step
        assert control_increment("none", _ctx(data, state)).max_abs() == 0.0

    def test_ii_cancels_first_increment(self, step):
        data, state = step
        ctrl = ControlState.start("ii", data)
        vr, r = apply_control(state, ctrl, control_increment("ii", _ctx(data, state)))
        expected = data.data + sum(inc.data for inc in state.increments[1:])
        np.testing.assert_allclose(vr.data, expected, atol=1e-15)
        np.testing.assert_allclose(r.data, -state.increments[0].data, atol=0)

    def test_ia_is_damped_duhamel(self, torus32_module):
        data = _mode(torus32_module)
        ctx = ControlContext(SYS, data, RHO, C=4.0)
        dr = control_increment("ia", ctx)
        np.testing.assert_allclose(dr.data, -data.data / 4.0 * _damping_factor(RHO), atol=1e-13)

    def test_i_adds_first_increment(self, step):
        data, state = step
        ctx = _ctx(data, state)
        diff = control_increment("i", ctx) - control_increment("ia", ctx)
        np.testing.assert_allclose(diff.data, -state.increments[0].data, atol=1e-14)

    def test_iii_and_iv_use_r(self, torus32_module):
        data = _mode(torus32_module)
        r_prev = data * 0.5
        dv1 = Field.zeros(torus32_module, 2)
        C = 3.0
        fac = _damping_factor(RHO)
        iii = control_increment("iii", ControlContext(SYS, data, RHO, C=C, delta_v1=dv1, r_prev=r_prev))
        iv = control_increment("iv", ControlContext(SYS, data, RHO, C=C, delta_v1=dv1, r_prev=r_prev))
        np.testing.assert_allclose(iii.data, (-data.data / C - r_prev.data / C**2) * fac, atol=1e-13)
        np.testing.assert_allclose(iv.data, (-data.data / C**2 - r_prev.data / C) * fac, atol=1e-13)

    def test_v_removes_free_evolution(self, torus32_module):
        data = _mode(torus32_module)
        dr = control_increment("v", ControlContext(SYS, data, RHO))
        lam = np.array([4.0, 9.0])[:, None, None] * 0.1 * RHO
        np.testing.assert_allclose(dr.data, data.data * (1 - np.exp(-lam)), atol=1e-14)

    def test_missing_first_increment(self, torus32_module):
        with pytest.raises(ValueError):
            control_increment("ii", ControlContext(SYS, _mode(torus32_module), RHO))
        with pytest.raises(ValueError):
            control_increment("vi", ControlContext(SYS, _mode(torus32_module), RHO))

    def test_hypoelliptic_weight_is_linear_factor(self):
        d = Domain.box((32, 32), 4.0)
        phi = _mode_box(d)
        plain = ControlContext(SYS, Field(d, phi), RHO)
        weighted = ControlContext(SYS, Field(d, phi), RHO, C_bar=3.0, weight_q=4.0)
        w = 2 * 3.0 / (1 + d.radius() ** 4)
        np.testing.assert_allclose(duhamel_source(weighted, phi).data, duhamel_source(plain, w * phi).data, atol=1e-13)

    def test_weight_needs_box(self, torus32_module):
        data = _mode(torus32_module)
        with pytest.raises(ValueError):
            duhamel_source(ControlContext(SYS, data, RHO, weight_q=3.0), data.data)


def _mode_box(d):
    x, y = d.coords()
    return np.stack([np.exp(-(x**2 + y**2)), x * np.exp(-(x**2 + y**2))])


class TestControlState:
    def test_validation(self, torus32_module):
        z = Field.zeros(torus32_module, 2)
        with pytest.raises(ValueError):
            ControlState("vii", z)
        with pytest.raises(ValueError):
            ControlState("ii", z, C=1.0)
        with pytest.raises(ValueError):
            ControlState.start("ii", z, r0="random")
        assert set(STRATEGIES) == {"none", "i", "ia", "ii", "iii", "iv", "v"}

    def test_r0_data_over_C(self, torus32_module):
        data = _mode(torus32_module)
        st = ControlState.start("iii", data, C=5.0, r0="data_over_C")
        np.testing.assert_allclose(st.r.data, data.data / 5.0)

    def test_ledger_row_and_physical_solution(self, step):
        data, state = step
        ctrl = ControlState.start("i", data, r0="data_over_C")
        r_prev = ctrl.r
        dr = control_increment("i", _ctx(data, state, r_prev=r_prev))
        vr, r = apply_control(state, ctrl, dr)
        # the physical solution is unaffected by the control
        np.testing.assert_allclose((vr - r).data, state.iterates[-1].data - r_prev.data, atol=1e-14)
        row = ctrl.ledger[-1]
        assert row["l"] == 1 and row["rho_l"] == RHO
        assert row["r_H2"] == pytest.approx(norm(r, "Hm", m=2))
        assert row["vr_H2"] == pytest.approx(norm(vr, "Hm", m=2))
        lines = ctrl.ledger_csv().splitlines()
        assert lines[0] == ",".join(LEDGER_COLUMNS)
        assert len(lines) == 2


def _ledger(r_fn, vr_fn, steps=25):
    return [{"l": l, "rho_l": 0.01, "r_Linf": r_fn(l), "r_H2": r_fn(l), "vr_H2": vr_fn(l), "v_H2": 1.0} for l in range(1, steps + 1)]


class TestGrowthLedger:
    def test_ii_linear_and_sqrt(self):
        rep = growth_ledger_check(_ledger(lambda l: 0.1 * l, lambda l: 1 + math.sqrt(l)), "ii")
        assert rep["passed"] and rep["r_linear_pass"] and rep["vr_sqrt_pass"]

    def test_ii_fails_without_linear_r(self):
        rep = growth_ledger_check(_ledger(lambda l: math.exp(0.3 * l), lambda l: 1 + math.sqrt(l)), "ii")
        assert not rep["passed"]

    def test_iii_uniform_bound(self):
        ok = growth_ledger_check(_ledger(lambda l: 0.1, lambda l: 2 + 0.5 / l, steps=50), "iii")
        assert ok["passed"]
        bad = growth_ledger_check(_ledger(lambda l: 0.1, lambda l: 1 + 0.1 * l, steps=50), "iii")
        assert not bad["passed"]
        assert bad["vr_uniform_max"] > 1.25 * bad["vr_uniform_reference"]

    def test_needs_ten_rows(self):
        with pytest.raises(ValueError):
            growth_ledger_check(_ledger(lambda l: l, lambda l: l, steps=9), "ii")
