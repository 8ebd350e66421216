import numpy as np
import pytest
from hypothesis import given, strategies as st

from wildflow import field3 as f3
from wildflow import stochastic as sto
from wildflow.field3 import Grid3


@pytest.fixture(scope="module")
def basis():
    return sto.ModalBasis.divergence_free(2.0)


class TestModalBasis:
    def test_orthonormal_and_divergence_free(self, basis, g16):
        fields = np.stack([basis.values(g16, np.eye(len(basis))[m]) for m in range(len(basis))])
        gram = np.einsum("maxyz,naxyz->mn", fields, fields) * g16.cell_volume
        assert np.allclose(gram, np.eye(len(basis)), atol=1e-12)
        for u in fields[:: max(1, len(basis) // 6)]:
            assert np.abs(f3.div(g16, u)).max() < 1e-12

    def test_project_inverts_values(self, basis, g16):
        c = np.random.default_rng(0).standard_normal(len(basis))
        assert np.allclose(basis.project(g16, basis.values(g16, c)), c, atol=1e-12)

    def test_counts(self):
        # four fields (two polarizations, cos and sin) per pair {k, -k}
        assert len(sto.ModalBasis.divergence_free(1.0)) == 12
        assert len(sto.ModalBasis.divergence_free(0.5)) == 0


class TestNoiseSpec:
    def test_bad_kind(self):
        with pytest.raises(ValueError):
            sto.NoiseSpec(kind="weird")

    def test_horizon_multiple(self):
        with pytest.raises(ValueError):
            sto.NoiseSpec(dt=0.3, T=1.0)

    def test_weights_and_trace(self):
        spec = sto.NoiseSpec(sigma=2.0, K=1.0, decay=3.5)
        assert np.allclose(spec.weights, 2.0)
        assert spec.trace() == pytest.approx(4.0 * 12)


class TestWiener:
    def test_deterministic_in_seed(self):
        spec = sto.NoiseSpec(kind="nonlinear", m=3, seed=11)
        a, b = sto.sample_wiener(spec), sto.sample_wiener(spec)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, sto.sample_wiener(spec, replica=1).values)

    def test_zero_sigma(self):
        p = sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", sigma=0.0))
        assert not np.any(p.values)

    def test_perturb_after_keeps_past(self):
        spec = sto.NoiseSpec(kind="additive", sigma=1.0, seed=2)
        p = sto.sample_wiener(spec)
        q = sto.perturb_after(p, 0.5, seed=9)
        j = p.index(0.5)
        assert np.array_equal(p.values[: j + 1], q.values[: j + 1])
        assert np.array_equal(p.ou[:j], q.ou[:j])
        assert not np.array_equal(p.values[j + 1:], q.values[j + 1:])

    def test_left_continuous_read(self):
        p = sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", dt=0.25, T=1.0))
        assert np.array_equal(p.at(0.3), p.values[1])
        assert np.array_equal(p.at(0.25), p.values[1])


class TestStochasticConvolution:
    def test_requires_additive(self):
        with pytest.raises(ValueError):
            sto.stochastic_convolution(sto.sample_wiener(sto.NoiseSpec(kind="multiplicative")))

    def test_starts_at_zero_and_matches_variance(self):
        spec = sto.NoiseSpec(sigma=1.0, K=1.0, seed=0, dt=0.25, T=1.0)
        zs = np.stack([sto.stochastic_convolution(sto.sample_wiener(spec, r)).coeffs[-1] for r in range(4000)])
        var = sto.ou_variance(1.0, 1.0, 1.0)
        assert zs.var(axis=0).mean() == pytest.approx(var, rel=0.05)

    def test_zero_at_origin(self):
        z = sto.stochastic_convolution(sto.sample_wiener(sto.NoiseSpec(sigma=1.0)))
        assert not np.any(z.coeffs[0])

    def test_em_reference_agrees_in_law(self):
        spec = sto.NoiseSpec(sigma=1.0, K=1.0, seed=5, dt=0.125, T=1.0)
        em = np.stack([sto.euler_maruyama_convolution(spec, r, 8)[0] for r in range(1500)])
        assert em.var() == pytest.approx(sto.ou_variance(1.0, 1.0, 1.0), rel=0.1)

    def test_filter_and_mollify(self, g16):
        spec = sto.NoiseSpec(sigma=1.0, K=2.0)
        z = sto.stochastic_convolution(sto.sample_wiener(spec))
        low = z.filtered(1.0)
        assert np.all(low.coeff_at(0.5)[~spec.basis.mask_leq(1.0)] == 0)
        c = z.mollified_coeff(0.5, f3.TimeKernel(), 0.0001, 0.0)
        assert np.allclose(c, z.coeff_at(0.5 - 1e-9), atol=1e-12)


class TestStopping:
    def test_rule_validation(self):
        with pytest.raises(ValueError):
            sto.StoppingRule("additive", L=0.5)
        with pytest.raises(ValueError):
            sto.StoppingRule("nonlinear", L=2.0)
        with pytest.raises(ValueError):
            sto.StoppingRule("additive", L=4.0, delta=0.2)

    def test_first_passage(self):
        t = np.linspace(0, 1, 5)
        assert sto.first_passage(t, np.array([0, 1, 2, 3, 4]), 2.5) == 0.75
        assert sto.first_passage(t, np.zeros(5), 1.0) == np.inf

    def test_zero_noise_hits_the_cap(self):
        rule = sto.StoppingRule("multiplicative", L=3.0)
        p = sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", sigma=0.0, T=4.0))
        assert sto.stopping_time(rule, path=p) == 3.0

    @given(st.integers(min_value=0, max_value=50))
    def test_stopping_time_positive_and_monotone_in_L(self, seed):
        spec = sto.NoiseSpec(kind="multiplicative", sigma=1.0, seed=seed, dt=1 / 64, T=2.0)
        p = sto.sample_wiener(spec)
        taus = [sto.stopping_time(sto.StoppingRule("multiplicative", L=L), path=p) for L in (2.0, 4.0, 8.0)]
        assert taus[0] > 0
        assert taus[0] <= taus[1] <= taus[2]

    def test_running_holder_is_nondecreasing(self):
        t = np.linspace(0, 1, 17)
        b = np.random.default_rng(1).standard_normal(17)
        h = sto.running_holder(t, np.abs(b[:, None] - b[None, :]), 0.4)
        assert np.all(np.diff(h) >= 0)


class TestTheta:
    def test_zero_path(self):
        p = sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", sigma=0.0))
        th = sto.theta_path(p, 0.1)
        assert th.theta(0.3) == 1.0
        assert th.theta_ell(0.3) == pytest.approx(1.0, abs=1e-14)
        assert th.theta_ell(0.3, order=1) == pytest.approx(0.0, abs=1e-10)

    def test_mean_is_lognormal(self):
        means = np.mean([sto.theta_path(sto.sample_wiener(sto.NoiseSpec(kind="multiplicative", seed=2), r), 0.0).theta(1.0)
                         for r in range(4000)])
        assert means == pytest.approx(np.exp(0.5), rel=0.05)

    def test_m_L(self):
        assert sto.m_L_squared(16.0) == pytest.approx(12 * np.exp(2.0))


class TestGalerkin:
    def test_zero_data_zero_noise(self):
        spec = sto.NoiseSpec(sigma=0.0)
        res = sto.galerkin_reference(spec, np.zeros((3, 16, 16, 16)), n=16, dt=1 / 64, replicas=2, batch=2)
        assert np.all(res.energies == 0)

    def test_single_mode_decays_like_stokes(self):
        g = Grid3(16)
        x1, _, _ = g.mesh
        u0 = np.zeros((3, 16, 16, 16))
        u0[1] = np.sin(2 * x1)
        spec = sto.NoiseSpec(sigma=0.0, T=0.5, dt=1 / 64)
        res = sto.galerkin_reference(spec, u0, n=16, dt=1 / 64, replicas=2, batch=2)
        e0 = float(f3.lp_norm_values(g, u0, 2)) ** 2
        assert np.allclose(res.mean, e0 * np.exp(-8 * res.times), rtol=1e-10)
        assert res.neutrality < 1e-10

    def test_ks_same_law(self):
        rng = np.random.default_rng(0)
        assert sto.ks_same_law(rng.standard_normal(2000), rng.standard_normal(2000)) > 0.01
