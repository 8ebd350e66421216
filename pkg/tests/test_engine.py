import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wildflow import engine as E
from wildflow import field3 as f3
from wildflow import jets
from wildflow import stochastic as sto
from wildflow.field3 import Grid3


@pytest.fixture(scope="module")
def g64():
    return Grid3(64)


@pytest.fixture(scope="module")
def additive_step(g64):
    sch = E.ParamSchedule.toy()
    z = sto.stochastic_convolution(sto.sample_wiener(sto.NoiseSpec(kind="additive", sigma=0.5, seed=1)))
    s0 = E.start_pair(sch, g64, E.uniform_times(1.0, 1 / 16), z_full=z)
    return s0, E.ci_step(s0)


class TestSchedule:
    def test_toy_frequencies(self):
        sch = E.ParamSchedule.toy()
        assert [sch.lam(q) for q in range(3)] == pytest.approx([2.0, 16.0, 128.0])
        assert sch.delta(1) == pytest.approx(16.0 ** -0.2)

    def test_doubly_exponential_frequencies_stay_in_log_space(self):
        sch = E.ParamSchedule.paper()
        assert sch.lam(1) == math.inf
        assert math.isfinite(sch.log_lam(2))

    def test_toy_f_is_rounded(self):
        sch = E.ParamSchedule.toy()
        assert sch.f(0) == 1.0 and sch.f_exact(0) != 1.0

    @pytest.mark.parametrize("kw", [dict(beta=1.5), dict(L=0.5), dict(c_R=0.0), dict(mode="wild"), dict(regime="x")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            E.ParamSchedule.toy(**kw)

    def test_asymptotic_schedule_admissible(self):
        conds = E.ParamSchedule.paper().admissibility()
        assert all(c.holds for c in conds), [c.name for c in conds if not c.holds]

    def test_larger_beta_breaks_exactly_the_coupled_conditions(self):
        base = E.ParamSchedule.paper()
        sch = E.ParamSchedule.paper(beta=10 * base.beta)
        failed = {c.name for c in sch.admissibility() if c.holds is False}
        assert failed == {"c:a3:lower", "alpha-beta"}

    def test_nonlinear_conditions_are_symbolic(self):
        sch = E.ParamSchedule.toy(regime="nonlinear")
        conds = sch.admissibility()
        assert conds and all(c.holds is None for c in conds)
        assert sch.admissible()

    def test_M0_envelopes(self):
        assert E.ParamSchedule.toy().M0(0.0) == pytest.approx(16.0)
        assert E.ParamSchedule.toy(regime="multiplicative").M0(0.0) == pytest.approx(math.exp(4.0))


class TestChi:
    def test_sandwich(self):
        s = E.chi_sandwich()
        assert s["lower"] >= 0 and s["upper"] >= 0

    @given(st.floats(min_value=0.0, max_value=50.0))
    def test_between_one_and_z(self, z):
        c = float(E.chi(np.array(z)))
        assert min(1.0, z) - 1e-12 <= c <= max(1.0, z) + 1e-12

    def test_derivative_matches_difference(self):
        z = np.linspace(0.2, 3.5, 12)
        h = 1e-6
        assert np.allclose(E.chi_prime(z), (E.chi(z + h) - E.chi(z - h)) / (2 * h), atol=1e-6)


class TestAmplitudes:
    @given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 1000))
    def test_stress_is_absorbed(self, scale, seed):
        ds = jets.build_direction_set()
        rng = np.random.default_rng(seed)
        R = rng.standard_normal((3, 3) + (8,) * 3) * scale
        R = f3.traceless(0.5 * (R + np.swapaxes(R, 0, 1)))
        sch = E.ParamSchedule.toy()
        rho, drho = E.build_energy_rho(R, np.zeros_like(R), sch, 0, 0.2)
        assert np.max(np.sqrt(np.sum(R**2, axis=(0, 1))) / rho) <= 0.5 + 1e-12
        amps = E.build_amplitudes(rho, drho, R, np.zeros_like(R), ds)
        assert amps.cancellation_residual(ds, R) < 1e-13
        assert np.min(amps.a2) >= 0

    def test_multiplicative_bar(self):
        ds = jets.build_direction_set()
        rho = np.full((2, 2, 2), 3.0)
        R = np.zeros((3, 3, 2, 2, 2))
        amps = E.build_amplitudes(rho, np.zeros_like(rho), R, R, ds, theta_l=2.0)
        assert np.allclose(amps.abar2, amps.a2 / 2.0)
        assert np.allclose(amps.a2, 1.5)


class TestStartPair:
    def test_energy_and_stress(self, g16):
        sch = E.ParamSchedule.toy()
        s0 = E.start_pair(sch, g16, E.uniform_times(1.0, 0.25))
        assert float(f3.lp_norm_values(g16, s0.v(0.0), 2)) == pytest.approx(sch.L**2 / math.sqrt(2), rel=1e-12)
        x3 = g16.mesh[2]
        A = sch.L**2 / (2 * np.pi) ** 1.5
        assert np.allclose(s0.R(0.5)[0, 2], -math.e**2 * 5 * A * np.cos(x3), atol=1e-12)

    @pytest.mark.parametrize("regime", E.REGIMES)
    def test_residual_vanishes(self, g16, regime):
        sch = E.ParamSchedule.toy(regime=regime)
        times = E.uniform_times(1.0, 1 / 16)
        if regime == "multiplicative":
            path = sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", sigma=0.3, seed=5))
            s0 = E.start_pair(sch, g16, times, driver=path)
        elif regime == "additive":
            z = sto.stochastic_convolution(sto.sample_wiener(sto.NoiseSpec(kind="additive", sigma=0.5, seed=1)))
            s0 = E.start_pair(sch, g16, times, z_full=z)
        else:
            s0 = E.start_pair(sch, g16, times)
        assert E.residual_check(s0, [0.0, 0.3, 0.7]).max < 1e-12

    def test_multiplicative_needs_driver(self, g16):
        with pytest.raises(ValueError):
            E.start_pair(E.ParamSchedule.toy(regime="multiplicative"), g16, E.uniform_times(1.0, 0.5))

    def test_uniform_times(self):
        assert E.uniform_times(1.0, 0.25).tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
        with pytest.raises(ValueError):
            E.uniform_times(1.0, 0.3)


class TestOneStep:
    def test_identities(self, additive_step):
        _, s1 = additive_step
        ids = E.step_identities(s1, 0.3)
        for key in ("cancellation", "oscillation", "div_v", "div_w", "mean_w", "symmetry", "trace"):
            assert ids[key] < 1e-10, key
        assert ids["rho_ratio"] <= 0.5

    def test_residual_exact_derivative(self, additive_step):
        _, s1 = additive_step
        assert E.residual_check(s1, [0.3]).max < 1e-10

    def test_causal_in_noise(self, additive_step, g64):
        s0, s1 = additive_step
        raw = sto.sample_wiener(sto.NoiseSpec(kind="additive", sigma=0.5, seed=1))
        z2 = sto.stochastic_convolution(sto.perturb_after(raw, 0.5, seed=77))
        t0 = E.start_pair(s0.schedule, g64, s0.times, z_full=z2)
        t1 = E.ci_step(t0)
        assert np.array_equal(t1.v(0.25), s1.v(0.25))
        assert not np.array_equal(t1.v(0.9), s1.v(0.9))

    def test_term_names(self, additive_step):
        _, s1 = additive_step
        assert set(s1.pieces(0.3).terms) <= set(E.RESERVED_TERMS)
