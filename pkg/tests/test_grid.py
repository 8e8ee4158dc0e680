"""Grid, fields, derivatives, norms and snapshots."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leraylab.grid import Domain, Field, derivative, divergence, gradient, load_field, multi_indices, norm, save_field


class TestDomain:
    def test_torus_spacing_and_axis(self):
        d = Domain.torus((16, 32))
        assert d.n == 2
        assert d.spacing == pytest.approx((2 * math.pi / 16, 2 * math.pi / 32))
        assert d.axis(0)[0] == 0.0
        assert d.axis(0)[-1] == pytest.approx(2 * math.pi - d.spacing[0])

    def test_box_is_cell_centred_and_symmetric(self):
        d = Domain.box((8, 8), 2.0)
        a = d.axis(0)
        assert a[0] == pytest.approx(-2.0 + 0.25)
        np.testing.assert_allclose(a, -a[::-1])

    @pytest.mark.parametrize(
        "args",
        [("sphere", (8, 8), (1, 1)), ("torus", (12, 16), (1, 1)), ("box", (4, 8), (1, 1)), ("box", (8,), (1,)), ("box", (8, 8), (1, -1))],
    )
    def test_invalid_domains(self, args):
        with pytest.raises(ValueError):
            Domain(*args)

    def test_wavenumbers_are_angular(self):
        d = Domain.torus((8, 8))
        k0 = d.wavenumbers()[0].ravel()
        np.testing.assert_allclose(sorted(k0), [-4, -3, -2, -1, 0, 1, 2, 3])

    def test_to_dict(self):
        assert Domain.box((8, 16), 3.0).to_dict() == {"kind": "box", "n": 2, "shape": [8, 16], "extent": [3.0, 3.0]}


class TestField:
    def test_scalar_promotion_and_readonly(self, torus32):
        f = Field(torus32, np.ones(torus32.shape))
        assert f.components == 1 and f.is_scalar
        with pytest.raises(ValueError):
            f.data[0, 0, 0] = 2.0

    def test_rejects_non_finite(self, torus32):
        a = np.zeros(torus32.shape)
        a[1, 1] = np.nan
        with pytest.raises(FloatingPointError):
            Field(torus32, a)

    def test_rejects_shape_mismatch(self, torus32):
        with pytest.raises(ValueError):
            Field(torus32, np.zeros((2, 16, 16)))

    def test_arithmetic(self, torus32):
        f = Field.from_function(torus32, lambda x, y: (np.sin(x), np.cos(y)))
        g = 2 * f - f + f * 0.5
        np.testing.assert_allclose(g.data, 1.5 * f.data)
        np.testing.assert_allclose((-f).data, -f.data)
        with pytest.raises(ValueError):
            f + Field.zeros(torus32, 1)


class TestDerivatives:
    def test_spectral_exact_on_trig(self, torus32):
        x, y = torus32.coords()
        f = Field(torus32, np.sin(3 * x) * np.cos(2 * y))
        np.testing.assert_allclose(derivative(f, 0).data[0], 3 * np.cos(3 * x) * np.cos(2 * y), atol=1e-12)
        np.testing.assert_allclose(derivative(f, 1, 2).data[0], -4 * np.sin(3 * x) * np.cos(2 * y), atol=1e-11)

    def test_box_stencil_fourth_order(self):
        errs = []
        for N in (32, 64, 128):
            d = Domain.box((N, N), 4.0)
            x, y = d.coords()
            f = Field(d, np.exp(-(x**2 + y**2)))
            exact = -2 * x * np.exp(-(x**2 + y**2))
            inner = (slice(N // 4, -N // 4),) * 2
            errs.append(np.max(np.abs(derivative(f, 0).data[0][inner] - exact[inner])))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(rates > 3.7)

    def test_divergence_of_curl_free_rotation(self, torus32):
        f = Field.from_function(torus32, lambda x, y: (np.sin(y), np.cos(x)))
        assert divergence(f).max_abs() < 1e-12

    def test_gradient_needs_scalar(self, torus32):
        with pytest.raises(ValueError):
            gradient(Field.zeros(torus32, 2))

    def test_axis_out_of_range(self, torus32):
        with pytest.raises(IndexError):
            derivative(Field.zeros(torus32), 2)


class TestNorms:
    def test_l2_of_sine(self, torus64):
        f = Field.from_function(torus64, lambda x, y: np.sin(x))
        # int sin^2 over the 2-torus = 2 pi^2
        assert norm(f) == pytest.approx(math.sqrt(2 * math.pi**2), rel=1e-12)

    @pytest.mark.parametrize("m", [0, 1, 2, 3, 4])
    def test_sobolev_of_sine_counts_multi_indices(self, torus64, m):
        f = Field.from_function(torus64, lambda x, y: np.sin(x))
        # only the pure x-derivatives survive, each with L2^2 = 2 pi^2
        assert norm(f, "Hm", m=m) == pytest.approx(math.sqrt((m + 1) * 2 * math.pi**2), rel=1e-10)

    def test_box_sobolev_matches_torus_definition(self):
        # a compactly concentrated Gaussian: box and analytic values agree
        d = Domain.box((128, 128), 6.0)
        x, y = d.coords()
        f = Field(d, np.exp(-(x**2 + y**2)))
        # |f|^2 = pi/2 ; |d_x f|^2 = |d_y f|^2 = pi/2
        assert norm(f, "Hm", m=1) ** 2 == pytest.approx(3 * math.pi / 2, rel=1e-4)

    def test_weighted_linf(self):
        d = Domain.box((16, 16), 4.0)
        f = Field(d, np.ones(d.shape))
        assert norm(f, "weighted_Linf", q=2) == pytest.approx(1 + np.max(d.radius()) ** 2)
        with pytest.raises(ValueError):
            norm(Field.zeros(Domain.torus((8, 8))), "weighted_Linf", q=2)

    def test_bad_kind(self, torus32):
        with pytest.raises(ValueError):
            norm(Field.zeros(torus32), "H-1")
        with pytest.raises(ValueError):
            norm(Field.zeros(torus32), "Hm", m=5)

    def test_multi_indices_count(self):
        # number of alpha in N^n with |alpha| <= m is C(m + n, n)
        assert len(list(multi_indices(3, 2))) == math.comb(5, 3)


class TestSnapshots:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), comps=st.integers(1, 3), kind=st.sampled_from(["torus", "box"]))
    def test_roundtrip_is_bit_exact(self, tmp_path_factory, seed, comps, kind):
        d = Domain.torus((8, 16)) if kind == "torus" else Domain.box((8, 12), 2.5)
        f = Field(d, np.random.default_rng(seed).normal(size=(comps, *d.shape)))
        base = tmp_path_factory.mktemp("snap") / "f"
        save_field(f, base)
        g = load_field(base)
        assert g.domain == d
        assert g.data.tobytes() == f.data.tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        d = Domain.torus((8, 8))
        save_field(Field.zeros(d, 2), tmp_path / "f")
        raw = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "f.bin").write_bytes(raw[:-8])
        with pytest.raises(ValueError):
            load_field(tmp_path / "f")
