import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wildflow import field3 as f3
from wildflow.field3 import Grid3

from conftest import random_band_limited


class TestGrid:
    @pytest.mark.parametrize("n", [0, 7, 12, 100])
    def test_rejects_bad_sizes(self, n):
        with pytest.raises(ValueError):
            Grid3(n)

    def test_constant_has_unit_mean_coefficient(self, g16):
        c = g16.fft(np.full((16, 16, 16), 3.5))
        assert c[0, 0, 0] == pytest.approx(3.5)
        assert np.abs(c).sum() == pytest.approx(3.5)

    def test_round_trip(self, g16):
        u = random_band_limited(g16, (3,), 7, seed=1)
        assert np.allclose(g16.ifft(g16.fft(u)), u, atol=1e-13)

    def test_mismatch_raises(self, g16):
        with pytest.raises(f3.GridMismatchError):
            g16.fft(np.zeros((8, 8, 8)))

    def test_nyquist_zeroed_in_derivative_wavenumbers(self, g16):
        assert np.all(np.abs(g16.kd[0]) < 8)
        assert np.max(np.abs(g16.k[0])) == 8


class TestOperators:
    def test_derivative_of_sine(self, g16):
        x1, x2, x3 = g16.mesh
        f = np.broadcast_to(np.sin(2 * x1) * np.cos(x3), (16,) * 3)
        gr = f3.grad(g16, f)
        assert np.allclose(gr[0], 2 * np.cos(2 * x1) * np.cos(x3), atol=1e-12)
        assert np.allclose(gr[2], -np.sin(2 * x1) * np.sin(x3), atol=1e-12)

    def test_laplacian_eigenvalue(self, g16):
        x1, x2, x3 = g16.mesh
        f = np.broadcast_to(np.cos(x1 + 2 * x2 - 3 * x3), (16,) * 3)
        assert np.allclose(f3.lap(g16, f), -14 * f, atol=1e-11)

    def test_leray_idempotent_and_divergence_free(self, g16):
        u = random_band_limited(g16, (3,), 8, seed=2)
        p = f3.leray(g16, u)
        assert np.abs(f3.div(g16, p)).max() < 1e-12 * np.abs(u).max()
        assert np.allclose(f3.leray(g16, p), p, atol=1e-13)

    def test_leray_removes_gradients(self, g16):
        phi = random_band_limited(g16, (), 5, seed=3)
        assert np.abs(f3.leray(g16, f3.grad(g16, phi))).max() < 1e-12

    def test_curl_of_gradient_vanishes(self, g16):
        phi = random_band_limited(g16, (), 6, seed=4)
        assert np.abs(f3.curl(g16, f3.grad(g16, phi))).max() < 1e-11

    def test_heat_semigroup(self, g16):
        x1, _, _ = g16.mesh
        f = np.broadcast_to(np.sin(3 * x1), (16,) * 3)
        out = g16.ifft(f3.heat_hat(g16, g16.fft(f), 0.1))
        assert np.allclose(out, np.exp(-0.9) * f, atol=1e-13)
        with pytest.raises(ValueError):
            f3.heat_hat(g16, g16.fft(f), -1.0)


class TestInverseDivergence:
    def test_right_inverse_symmetric_trace_free(self, g16):
        v = random_band_limited(g16, (3,), 7, seed=5)
        v = v - g16.mean(v)[:, None, None, None]
        R = f3.inverse_divergence(g16, v)
        assert np.allclose(R, np.swapaxes(R, 0, 1), atol=1e-14)
        assert np.abs(R[0, 0] + R[1, 1] + R[2, 2]).max() < 1e-13
        back = f3.div(g16, R)
        assert np.abs(back - v).max() < 1e-11 * np.abs(v).max()

    def test_rejects_mean(self, g16):
        v = np.ones((3, 16, 16, 16))
        with pytest.raises(ValueError):
            f3.inverse_divergence(g16, v)

    def test_hat_version_drops_the_mean(self, g16):
        v_hat = g16.fft(np.ones((3, 16, 16, 16)))
        assert np.abs(f3.inverse_divergence_hat(g16, v_hat)).max() == 0.0

    @given(st.integers(min_value=1, max_value=6), st.integers(0, 2))
    def test_single_mode(self, k, comp):
        g = Grid3(16)
        x1, x2, x3 = g.mesh
        v = np.zeros((3, 16, 16, 16))
        v[comp] = np.cos(k * x1 + x3) + 0 * x2
        R = f3.inverse_divergence(g, v)
        assert np.abs(f3.div(g, R) - v).max() < 1e-11


class TestTensors:
    def test_outer_tf_trace(self, g16):
        u = random_band_limited(g16, (3,), 4, seed=6)
        T = f3.outer_tf(u, u)
        assert np.abs(T[0, 0] + T[1, 1] + T[2, 2]).max() < 1e-13

    @given(st.floats(min_value=-3, max_value=3), st.floats(min_value=-3, max_value=3))
    def test_traceless_is_projection(self, a, b):
        t = np.zeros((3, 3, 1, 1, 1))
        t[0, 0] = a
        t[1, 2] = t[2, 1] = b
        once = f3.traceless(t)
        assert np.allclose(f3.traceless(once), once)


class TestMollifiers:
    def test_symbol_at_zero_is_one(self, g16):
        s = f3.space_mollifier_symbol(g16, 0.3)
        assert s[0, 0, 0] == pytest.approx(1.0, abs=1e-14)
        assert np.all(np.abs(s) <= 1 + 1e-12)

    def test_symbol_radial_matches_grid(self, g16):
        s = f3.space_mollifier_symbol(g16, 0.3)
        r = f3.space_mollifier_radial(g16.kabs, 0.3)
        assert np.allclose(s, r, atol=1e-14)

    def test_kernel_mass_one(self):
        k = f3.TimeKernel()
        s = np.linspace(0, 0.2, 20001)
        mass = np.trapezoid(k.density(s, 0.2), s)
        assert mass == pytest.approx(1.0, abs=1e-8)
        assert float(k.cdf(0.2, 0.2)) == pytest.approx(1.0)

    @given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.05, max_value=0.5))
    def test_interval_weights_sum_to_one(self, t, ell):
        k = f3.TimeKernel()
        edges = np.linspace(0, 1.5, 25)
        w, w_ext = f3.kernel_interval_weights(k, ell, t, edges)
        assert w.sum() + w_ext == pytest.approx(1.0, abs=1e-12)
        assert np.all(w >= -1e-15)

    def test_derivative_weights_sum_to_zero(self):
        k = f3.TimeKernel()
        w, w_ext = f3.kernel_interval_weights(k, 0.3, 0.1, np.linspace(0, 1, 11), order=1)
        assert w.sum() + w_ext == pytest.approx(0.0, abs=1e-10)

    def test_exp_moment_closed_form_after_window(self):
        # once t >= ell the average of e^{rate r} is e^{rate t} times the Laplace transform
        k = f3.TimeKernel()
        ell, rate, t = 0.2, 3.0, 0.7
        s = np.linspace(0, ell, 200001)
        ref = np.trapezoid(k.density(s, ell) * np.exp(rate * (t - s)), s)
        assert f3.kernel_exp_moment(k, ell, t, rate) == pytest.approx(ref, rel=1e-9)


class TestNorms:
    def test_l2_of_mode(self, g16):
        x1, _, _ = g16.mesh
        f = np.broadcast_to(np.sin(x1), (16,) * 3)
        assert float(f3.lp_norm_values(g16, f, 2)) == pytest.approx(np.sqrt(4 * np.pi**3), rel=1e-12)

    def test_h0_equals_l2(self, g16):
        u = random_band_limited(g16, (3,), 5, seed=7)
        h0 = float(f3.sobolev_norm_hat(g16, g16.fft(u), 0.0))
        assert h0 == pytest.approx(float(f3.lp_norm_values(g16, u, 2)), rel=1e-12)

    def test_lp_rejects_small_p(self, g16):
        with pytest.raises(ValueError):
            f3.lp_norm_values(g16, np.zeros((16,) * 3), 0.5)

    def test_lp_blocks_partition_unity(self, g16):
        total = sum(sym for _, sym in f3.lp_blocks(g16))
        assert np.allclose(total, 1.0, atol=1e-14)

    @given(st.floats(min_value=-6, max_value=2))
    def test_besov_monotone_in_beta(self, beta):
        # without the low block every weight 2^{j beta} grows with beta
        g = Grid3(16)
        u = random_band_limited(g, (), 5, seed=8)
        f_hat = np.where(g.kabs > 1.0, g.fft(u), 0.0)
        assert f3.besov_norm_hat(g, f_hat, beta) <= f3.besov_norm_hat(g, f_hat, beta + 0.5) + 1e-12

    def test_holder_of_linear_path(self):
        # |t - s| / |t - s|^alpha peaks at the widest pair
        t = np.linspace(0, 1, 11)
        samples = t[:, None] * np.ones((11, 4))
        assert f3.holder_seminorm(t, samples, 0.5) == pytest.approx(1.0, rel=1e-12)
        assert f3.holder_seminorm(t, samples, 1.0 - 1e-9) == pytest.approx(1.0, rel=1e-6)

    def test_holder_gram_matches_direct(self, g16):
        t = np.linspace(0, 1, 5)
        samples = np.stack([random_band_limited(g16, (), 3, seed=s) for s in range(5)])
        direct = f3.holder_seminorm(t, samples, 0.4, norm=lambda a: float(f3.lp_norm_values(g16, a, 2)))
        gram = f3.holder_seminorm(t, samples, 0.4, gram=f3.l2_gram(g16, samples))
        assert gram == pytest.approx(direct, rel=1e-10)

    def test_cntx_of_static_mode(self, g16):
        x1, _, _ = g16.mesh
        f = np.broadcast_to(np.sin(x1), (16,) * 3)
        samples = np.stack([f, f, f])
        assert f3.cntx_norm(g16, samples, 0.1, 1) == pytest.approx(2.0, rel=1e-12)


class TestSpectralField:
    def test_div_of_curl(self, g16):
        u = f3.SpectralField.from_values(g16, random_band_limited(g16, (3,), 5, seed=9))
        assert np.abs(u.curl().div().values()).max() < 1e-11

    def test_grid_mismatch(self):
        a = f3.SpectralField.zeros(Grid3(8), "vector")
        b = f3.SpectralField.zeros(Grid3(16), "vector")
        with pytest.raises(f3.GridMismatchError):
            a + b

    def test_wf1_round_trip(self, g16):
        u = random_band_limited(g16, (3,), 5, seed=10)
        buf = io.BytesIO()
        f3.dump_wf1(u, buf)
        assert buf.getvalue().startswith(b"WF1 1 16\n")
        buf.seek(0)
        assert np.array_equal(f3.load_wf1(buf), u)

    def test_wf1_rejects_garbage(self):
        with pytest.raises(ValueError):
            f3.load_wf1(io.BytesIO(b"nope\n"))
