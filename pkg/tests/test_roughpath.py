import numpy as np
import pytest
from hypothesis import given, strategies as st

from wildflow import roughpath as rp
from wildflow import stochastic as sto
from wildflow.field3 import Grid3


def brownian(n, m, seed, T=1.0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, T, n + 1)
    B = np.vstack([np.zeros(m), np.cumsum(np.sqrt(T / n) * rng.standard_normal((n, m)), axis=0)])
    return t, B


def tanh_g(m, c0=1.0, c1=0.5):
    return rp.ModalG(np.eye(m), np.eye(m), rp.tanh_coefficient(c0, c1))


class TestLift:
    def test_too_short(self):
        with pytest.raises(ValueError):
            rp.ito_lift((np.array([0.0]), np.zeros((1, 2))))

    def test_alpha_range(self):
        t, B = brownian(4, 1, 0)
        with pytest.raises(ValueError):
            rp.RoughDriver(t, B, np.zeros((4, 1, 1)), alpha=0.6)

    def test_zero_path(self):
        d = rp.ito_lift((np.linspace(0, 1, 9), np.zeros((9, 2))))
        assert not np.any(d.area_matrix())
        assert d.rho_alpha() == 0.0

    def test_scalar_quadratic_variation_identity(self):
        t, B = brownian(128, 1, 3)
        d = rp.ito_lift((t, B))
        qv = np.sum(np.diff(B[:, 0]) ** 2)
        assert d.area(0, 128)[0, 0] == pytest.approx(B[-1, 0] ** 2 / 2 - qv / 2, abs=1e-14)

    @given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=1, max_value=3))
    def test_chen(self, seed, m):
        t, B = brownian(32, m, seed)
        assert rp.ito_lift((t, B)).chen_residual() <= 1e-14

    def test_area_matrix_agrees_with_pairs(self):
        t, B = brownian(16, 2, 4)
        d = rp.ito_lift((t, B))
        A = d.area_matrix()
        assert np.allclose(A[3, 11], d.area(3, 11), atol=1e-15)
        assert not np.any(A[11, 3])

    def test_coarsen_keeps_second_level(self):
        t, B = brownian(64, 2, 5)
        d = rp.ito_lift((t, B))
        c = d.coarsen(8)
        assert np.allclose(c.area(1, 6), d.area(8, 48), atol=1e-15)
        assert c.chen_residual() <= 1e-14
        with pytest.raises(ValueError):
            d.coarsen(5)

    def test_restrict(self):
        t, B = brownian(16, 1, 6)
        r = rp.ito_lift((t, B)).restrict(0.5)
        assert r.times[-1] == 0.5 and len(r.times) == 9

    def test_running_area_norm_nondecreasing(self):
        t, B = brownian(32, 2, 7)
        h = rp.ito_lift((t, B)).running_area_norm(0.8)
        assert h[0] == 0 and np.all(np.diff(h) >= 0)


class TestControlled:
    def test_zero(self):
        t, B = brownian(8, 1, 0)
        d = rp.ito_lift((t, B))
        cp = rp.ControlledPath(np.zeros((9, 1)), np.zeros((9, 1, 1)))
        assert rp.controlled_norm(cp, d) == 0.0

    def test_path_itself_has_no_remainder(self):
        t, B = brownian(16, 1, 1)
        d = rp.ito_lift((t, B))
        cp = rp.ControlledPath(B.copy(), np.ones((17, 1, 1)))
        parts = rp.controlled_norm_parts(cp, d)
        assert parts["remainder"] == pytest.approx(0.0, abs=1e-14)
        assert parts["holder_derivative"] == 0.0
        assert rp.controlled_norm(cp, d) == pytest.approx(np.abs(B).max() + 1.0)

    def test_remainder_of_smooth_path_is_its_seminorm(self):
        t, B = brownian(16, 1, 2)
        d = rp.ito_lift((t, B))
        y = np.sin(3 * t)[:, None]
        cp = rp.ControlledPath(y, np.zeros((17, 1, 1)))
        a2 = 2 * d.alpha
        ref = max(abs(y[j, 0] - y[i, 0]) / (t[j] - t[i]) ** a2 for i in range(17) for j in range(i + 1, 17))
        assert rp.controlled_norm_parts(cp, d)["remainder"] == pytest.approx(ref, rel=1e-14)

    def test_grid_mismatch(self):
        t, B = brownian(8, 1, 0)
        cp = rp.ControlledPath(np.zeros((5, 1)), np.zeros((5, 1, 1)))
        with pytest.raises(ValueError):
            rp.controlled_norm(cp, rp.ito_lift((t, B)))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            rp.ControlledPath(np.zeros((5, 2)), np.zeros((5, 2)))

    def test_sup_scale_dominates_l2_scale(self):
        g = Grid3(8)
        rng = np.random.default_rng(3)
        y = rng.standard_normal((4, 8, 8, 8))
        sup = rp.ControlledPath(y, np.zeros(y.shape + (1,)), "sup")
        l2 = rp.ControlledPath(y, np.zeros(y.shape + (1,)), "L2", cell_volume=g.cell_volume)
        for k in range(4):
            assert l2.norm(y[k]) <= (2 * np.pi) ** 1.5 * sup.norm(y[k]) * (1 + 1e-12)


class TestSewing:
    def test_constant_integrand(self):
        t, B = brownian(16, 2, 0)
        d = rp.ito_lift((t, B))
        y = np.broadcast_to(np.array([[1.0, 2.0]]), (17, 1, 2)).copy()
        res = rp.sewing_integral(y, np.zeros((17, 1, 2, 2)), d, 16)
        assert res.value[0] == pytest.approx(B[-1] @ np.array([1.0, 2.0]), abs=1e-14)

    def test_ito_integral_of_B(self):
        t, B = brownian(256, 1, 9)
        d = rp.ito_lift((t, B))
        res = rp.sewing_integral(B[:, :, None], np.ones((257, 1, 1, 1)), d, 256)
        qv = np.sum(np.diff(B[:, 0]) ** 2)
        assert res.value[0] == pytest.approx((B[-1, 0] ** 2 - qv) / 2, abs=1e-12)
        # the compensated sum is exact at every level for this integrand
        assert max(res.differences) < 1e-12

    def test_non_dyadic(self):
        t, B = brownian(12, 1, 0)
        d = rp.ito_lift((t, B))
        with pytest.raises(ValueError):
            rp.sewing_integral(B[:, :, None], np.ones((13, 1, 1, 1)), d, 12, levels=4)

    @given(st.integers(min_value=0, max_value=10**5))
    def test_refinement_rate_positive(self, seed):
        t, B = brownian(256, 1, seed)
        d = rp.ito_lift((t, B))
        res = rp.sewing_integral(np.sin(B)[:, :, None], np.cos(B)[:, :, None, None], d, 256, np.array([1.0]))
        assert res.rate > 0

    def test_causal(self):
        t, B = brownian(64, 1, 1)
        B2 = B.copy()
        B2[33:] += 1.0
        a = rp.sewing_integral(np.sin(B)[:, :, None], np.cos(B)[:, :, None, None], rp.ito_lift((t, B)), 32)
        b = rp.sewing_integral(np.sin(B2)[:, :, None], np.cos(B2)[:, :, None, None], rp.ito_lift((t, B2)), 32)
        assert np.array_equal(a.value, b.value)


class TestCompose:
    def test_constant_coefficient_has_no_derivative(self):
        G = tanh_g(2, c0=1.5, c1=0.0)
        z = np.random.default_rng(0).standard_normal((5, 2))
        cp = rp.compose_nonlinearity(np.zeros((5, 2)), z, G)
        assert not np.any(cp.dy)
        assert np.allclose(cp.y, 1.5 * np.eye(2))

    def test_direct_evaluation(self):
        G = rp.ModalG(np.array([[1.0]]), np.array([[1.0]]), rp.tanh_coefficient(0.0, 1.0))
        p = np.linspace(-1, 1, 7)[:, None]
        cp = rp.compose_nonlinearity(p, np.zeros((7, 1)), G)
        assert np.allclose(cp.y[:, 0, 0], np.tanh(p[:, 0]))
        assert np.allclose(cp.dy[:, 0, 0, 0], (1 - np.tanh(p[:, 0]) ** 2) * np.tanh(p[:, 0]))

    def test_chain_rule_against_difference(self):
        G = rp.ModalG(np.array([[1.0, 0.0], [0.3, 1.0]]), np.array([[0.5, 1.0], [1.0, -0.2]]), rp.tanh_coefficient(0.2, 0.7))
        u = np.array([0.3, -0.4])
        h = 1e-6
        D = G.dsigma(u @ G.pairings.T)
        for e in range(2):
            du = np.zeros(2)
            du[e] = h
            fd = (G.sigma((u + du) @ G.pairings.T) - G.sigma((u - du) @ G.pairings.T)) / (2 * h)
            assert np.allclose(D[..., e], fd, atol=1e-8)


class TestSolver:
    def test_zero_coefficient_is_heat_flow(self):
        t, B = brownian(32, 2, 0)
        d = rp.ito_lift((t, B))
        G = tanh_g(2, 0.0, 0.0)
        lam = np.array([1.0, 3.0])
        sol = rp.solve_rpde(d, lam, G, z0=np.array([1.0, -2.0]))
        ref = np.exp(-np.outer(t, lam)) * np.array([1.0, -2.0])
        assert np.allclose(sol.z, ref, rtol=1e-13, atol=1e-15)

    def test_additive_like_matches_stochastic_convolution(self):
        spec = sto.NoiseSpec(kind="additive", sigma=1.0, K=1.0, dt=1.0 / 1024, T=1.0, seed=4)
        path = sto.sample_wiener(spec)
        z = sto.stochastic_convolution(path)
        m = len(spec.basis)
        G = tanh_g(m, 1.0, 0.0)
        sol = rp.solve_rpde(rp.ito_lift(path), spec.basis.eig, G)
        assert np.max(np.abs(sol.z - z.coeffs)) <= 5e-3

    def test_causal_bitwise(self):
        t, B = brownian(64, 2, 5)
        B2 = B.copy()
        B2[41:] = B2[41:] + np.random.default_rng(1).standard_normal(2)
        G = tanh_g(2)
        lam = np.array([1.0, 2.0])
        p = np.cos(t)[:, None] * np.ones(2)
        a = rp.solve_rpde(rp.ito_lift((t, B)), lam, G, p)
        b = rp.solve_rpde(rp.ito_lift((t, B2)), lam, G, p)
        assert np.array_equal(a.z[:41], b.z[:41])

    @given(st.integers(min_value=0, max_value=10**5))
    def test_second_level_correction_beats_euler(self, seed):
        # on a 16x coarser mesh the compensated scheme tracks the fine solution far better
        t, B = brownian(1024, 1, seed)
        fine = rp.ito_lift((t, B))
        G = rp.ModalG(np.array([[1.0]]), np.array([[1.0]]), rp.tanh_coefficient(0.5, 2.0))
        lam = np.array([1.0])
        ref = rp.solve_rpde(fine, lam, G).z[::16]
        rough = rp.solve_rpde(fine.coarsen(16), lam, G).z
        _, em = rp.euler_maruyama_rpde(fine, lam, G, None, None, 16)
        assert np.abs(rough - ref).max() < np.abs(em - ref).max()

    def test_consistency_zero_coefficient(self):
        spec = sto.NoiseSpec(kind="nonlinear", sigma=1.0, m=1, dt=1 / 16, T=1.0, seed=0)
        rep = rp.ito_consistency_check(spec, tanh_g(1, 0.0, 0.0), np.array([1.0]), replicas=3)
        assert max(rep.medians) <= 1e-12

    def test_consistency_additive_like(self):
        spec = sto.NoiseSpec(kind="nonlinear", sigma=1.0, m=1, dt=1 / 64, T=1.0, seed=0)
        rep = rp.ito_consistency_check(spec, tanh_g(1, 1.0, 0.0), np.array([1.0]), replicas=5,
                                       fine_factor=16, rpde_factor=1, em_factors=(1,))
        # on the same mesh the exponential and explicit schemes differ by O(h)
        assert rep.medians[0] <= 5e-3


class TestSelftest:
    def test_all_rows_pass(self):
        rows = rp.selftest(seed=1, steps=64)
        assert [r[0] for r in rows] == ["chen", "ito-identity", "sewing-rate"]
        assert all(r[3] for r in rows)
