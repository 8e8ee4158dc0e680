"""Semigroup backends, Euler-Maruyama sampling, density estimates and envelopes."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leraylab.fixtures import random_divfree
from leraylab.grid import Domain, Field, norm
from leraylab.hoermander import HormanderSystem, builtin_system
from leraylab.semigroup import (
    KSEnvelope,
    apply_semigroup,
    envelope_regression,
    estimate_density,
    euler_maruyama_sample,
    exact_gaussian_law,
    fit_ks_envelope,
    gaussian_density,
    kolmogorov_covariance,
    kolmogorov_density,
    relative_density_error,
)


def kolmogorov_heat_oracle(domain: Domain, tau: float, s: float) -> np.ndarray:
    """``E f(X_tau^x)`` for ``f(y) = exp(-|y|^2 / (2 s^2))`` under the Kolmogorov law.

    ``X_tau^x`` is Gaussian with mean ``(x1, x2 + tau x1)`` and the Kolmogorov
    covariance, so the expectation is ``2 pi s^2 N(m(x); 0, Sigma + s^2 I)``.
    """
    x, y = domain.coords()
    mean = np.stack([x, y + tau * x], axis=-1)
    cov = kolmogorov_covariance(tau) + s**2 * np.eye(2)
    return 2 * math.pi * s**2 * gaussian_density(mean, np.zeros(2), cov)


class TestBackends:
    def test_fd_matches_spectral_on_torus(self, torus64):
        sys = HormanderSystem.classical(2, 0.1)
        f = random_divfree(torus64, seed=5)
        a = apply_semigroup(sys, f, 0.3, "spectral")
        b = apply_semigroup(sys, f, 0.3, "fd_substep")
        assert norm(a - b) <= 1e-4

    def test_kolmogorov_fd_against_exact_kernel(self):
        d = Domain.box((128, 128), 8.0)
        x, y = d.coords()
        f = Field(d, np.exp(-(x**2 + y**2) / 2))
        u = apply_semigroup(builtin_system("kolmogorov"), f, 0.5, "fd_substep").data[0]
        exact = kolmogorov_heat_oracle(d, 0.5, 1.0)
        assert np.sum(np.abs(u - exact)) / np.sum(np.abs(exact)) <= 0.02

    def test_spectral_rejects_hypoelliptic(self, torus32):
        with pytest.raises(ValueError):
            apply_semigroup(builtin_system("kolmogorov"), Field.zeros(torus32), 0.1, "spectral")

    def test_zero_time_is_identity(self, torus32):
        f = random_divfree(torus32, seed=2)
        g = apply_semigroup(HormanderSystem.classical(2, 0.1), f, 0.0)
        assert g.data.tobytes() == f.data.tobytes()

    def test_unknown_backend(self, torus32):
        with pytest.raises(ValueError):
            apply_semigroup(HormanderSystem.classical(2, 0.1), Field.zeros(torus32), 0.1, "magic")

    def test_constants_preserved(self):
        # L annihilates constants, so both backends keep them on a torus
        d = Domain.torus((16, 16))
        f = Field(d, np.full(d.shape, 2.5))
        for sys in (HormanderSystem.classical(2, 0.3),):
            for backend in ("spectral", "fd_substep"):
                np.testing.assert_allclose(apply_semigroup(sys, f, 0.4, backend).data, 2.5, atol=1e-12)


class TestSampling:
    def test_thread_count_does_not_change_samples(self):
        sys = builtin_system("kolmogorov")
        a = euler_maruyama_sample(sys, [0.3, -0.2], 0.5, 16, 10_000, seed=9, threads=1)
        b = euler_maruyama_sample(sys, [0.3, -0.2], 0.5, 16, 10_000, seed=9, threads=4)
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_samples(self):
        sys = builtin_system("laplacian", n=2, nu=0.5)
        a = euler_maruyama_sample(sys, [0, 0], 0.5, 16, 100, seed=1)
        b = euler_maruyama_sample(sys, [0, 0], 0.5, 16, 100, seed=2)
        assert not np.array_equal(a, b)

    def test_moments_of_kolmogorov_law(self):
        sys = builtin_system("kolmogorov")
        smp = euler_maruyama_sample(sys, [0.5, 0.0], 1.0, 256, 200_000, seed=0)
        mean, cov = exact_gaussian_law(sys, [0.5, 0.0], 1.0)
        np.testing.assert_allclose(smp.mean(axis=0), mean, atol=0.01)
        np.testing.assert_allclose(np.cov(smp.T), cov, atol=0.01)

    def test_exact_law_of_laplacian(self):
        sys = builtin_system("laplacian", n=2, nu=0.25)
        mean, cov = exact_gaussian_law(sys, [1.0, 2.0], 2.0)
        np.testing.assert_allclose(mean, [1.0, 2.0])
        # a = nu I, covariance 2 a t
        np.testing.assert_allclose(cov, np.eye(2))

    def test_no_exact_law_for_heisenberg(self):
        assert exact_gaussian_law(builtin_system("heisenberg"), [0, 0, 0], 1.0) is None

    def test_empty_and_invalid(self):
        sys = builtin_system("laplacian")
        assert euler_maruyama_sample(sys, [0, 0], 1.0, 16, 0).shape == (0, 2)
        with pytest.raises(ValueError):
            euler_maruyama_sample(sys, [0, 0], 1.0, 8, 10)
        with pytest.raises(ValueError):
            euler_maruyama_sample(sys, [0, 0, 0], 1.0, 16, 10)


class TestDensity:
    def test_gaussian_density_normalised(self):
        d = Domain.box((128, 128), 8.0)
        p = gaussian_density(np.stack(d.coords(), axis=-1), [0.5, -0.5], [[1.0, 0.3], [0.3, 0.7]])
        assert p.sum() * d.cell_volume == pytest.approx(1.0, rel=1e-8)

    def test_kolmogorov_density_mean_shift(self):
        # the law at time t from x0 has mean (x0_1, x0_2 + t x0_1)
        p_peak = kolmogorov_density(np.array([1.0, 2.0 + 0.5]), [1.0, 2.0], 0.5)
        p_off = kolmogorov_density(np.array([1.0, 2.0]), [1.0, 2.0], 0.5)
        assert p_peak > p_off

    def test_estimate_recovers_gaussian(self):
        sys = builtin_system("laplacian", n=2, nu=0.5)
        smp = euler_maruyama_sample(sys, [0, 0], 1.0, 16, 200_000, seed=3)
        est = estimate_density(smp, Domain.box((64, 64), 6.0), "scott", order=4)
        assert est.mass == pytest.approx(1.0, abs=1e-3)
        assert relative_density_error(est, [0, 0], np.eye(2), radius=1.5) < 0.1

    def test_order_and_bandwidth_validation(self):
        g = Domain.box((16, 16), 3.0)
        smp = np.zeros((100, 2))
        with pytest.raises(ValueError):
            estimate_density(smp, g, 0.3, order=3)
        with pytest.raises(ValueError):
            estimate_density(smp, g, "scott")
        with pytest.raises(ValueError):
            estimate_density(smp[:0], g, 0.3)
        with pytest.raises(ValueError):
            estimate_density(smp, Domain.torus((16, 16)), 0.3)

    def test_fixed_bandwidth_mass(self):
        g = Domain.box((64, 64), 4.0)
        smp = np.random.default_rng(0).normal(scale=0.5, size=(5000, 2))
        assert estimate_density(smp, g, 0.2).mass == pytest.approx(1.0, abs=1e-6)


class TestEnvelope:
    def test_regression_recovers_synthetic_parameters(self):
        A, B, m, n = 0.7, 0.4, 1.3, 1.1
        rng = np.random.default_rng(0)
        records = []
        for t in (0.25, 0.5, 1.0):
            for x in ((0.0, 0.0), (1.0, 0.0), (2.0, 1.0)):
                ys = rng.uniform(-3, 3, size=(20, 2))
                d2 = np.sum((ys - np.asarray(x)) ** 2, axis=1)
                ps = A * (1 + np.linalg.norm(x)) ** m * t ** (-n) * np.exp(-B * d2 / t)
                records.append((t, x, ys, ps))
        fit = envelope_regression(records)
        np.testing.assert_allclose(fit[:4], (A, B, m, n), rtol=1e-10)
        assert fit[4] < 1e-10

    def test_exact_gaussian_kernel_has_no_polynomial_factor(self):
        sys = builtin_system("laplacian", n=2, nu=0.5)
        env = fit_ks_envelope(
            sys, [0.25, 0.5, 1.0], [(0, 0), (1, 0), (2, 0)], N=10**6, resolution=64,
            density=lambda pts, x, t: gaussian_density(pts, x, t * np.eye(2)),
        )
        # p = (2 pi t)^-1 exp(-|x-y|^2 / (2t))
        assert env.m_exp == pytest.approx(0.0, abs=1e-8)
        assert env.n_exp == pytest.approx(1.0, abs=1e-8)
        assert env.B == pytest.approx(0.5, abs=1e-8)
        assert env.A == pytest.approx(1 / (2 * math.pi), rel=1e-8)

    def test_exact_kolmogorov_kernel_has_polynomial_factor(self):
        env = fit_ks_envelope(
            builtin_system("kolmogorov"), [0.25, 0.5, 1.0], [(0, 0), (0.5, 0), (1, 0), (1.5, 0), (2, 0)],
            N=10**6, resolution=128, density=kolmogorov_density,
        )
        assert env.m_exp > 0.5

    def test_envelope_needs_three_times_and_points(self):
        with pytest.raises(ValueError):
            fit_ks_envelope(builtin_system("laplacian"), [0.5, 1.0], [(0, 0), (1, 0), (2, 0)], N=100)

    def test_envelope_callable_and_json(self):
        env = KSEnvelope(1.0, 0.5, 0.0, 1.0, 0.0)
        assert env(1.0, [0.0, 0.0], [0.0, 0.0]) == pytest.approx(1.0)
        assert json.loads(env.to_json())["B"] == 0.5
        with pytest.raises(ValueError):
            KSEnvelope(-1.0, 0.5, 0.0, 1.0, 0.0)

    @settings(max_examples=10, deadline=None)
    @given(t=st.floats(0.1, 2.0))
    def test_kolmogorov_covariance_positive(self, t):
        assert np.all(np.linalg.eigvalsh(kolmogorov_covariance(t)) > 0)
