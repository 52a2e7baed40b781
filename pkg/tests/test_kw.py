import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kahlerlab import continuity as ma
from kahlerlab import geometry as geo
from kahlerlab import grid
from kahlerlab import kw

TWO_PI = 2 * np.pi
LAM = 0.7


def unit(n=1, res=64):
    return grid.make_lattice(n, [1.0] * (2 * n), [res] * (2 * n))


def random_trig(lattice, rng, modes=5, kmax=3):
    out = np.zeros(lattice.shape)
    coords = lattice.coords()
    for _ in range(modes):
        k = rng.integers(-kmax, kmax + 1, size=lattice.ndim)
        phase = sum(TWO_PI * kk * x / p for kk, x, p in zip(k, coords, lattice.periods))
        out = out + rng.normal() * np.cos(phase + rng.uniform(0, TWO_PI))
    return out


@pytest.fixture(scope="module")
def conformal_solution():
    lat = unit(1, 64)
    x, y = lat.coords()
    m = geo.conformal_metric(lat, 0.3 * np.cos(TWO_PI * x) * np.cos(TWO_PI * y))
    tw = ma.geometric_twist(m)
    return m, tw, ma.solve_ma(m, tw, 0.1)


@pytest.fixture(scope="module")
def potential_solution():
    lat = unit(2, 8)
    c = lat.coords()
    phi = 0.01 * (np.cos(TWO_PI * (c[0] + c[2])) + 0.8 * np.sin(TWO_PI * (c[1] - c[3])))
    m = geo.metric_from_potential(lat, np.array([[1.0, 0.2j], [-0.2j, 1.3]]), phi)
    tw = ma.geometric_twist(m)
    return m, tw, ma.solve_ma(m, tw, 0.2)


@pytest.fixture(scope="module")
def positive_twist_sweep():
    """Conformal metric, pointwise positive twist, nonconstant weight."""
    lat = unit(1, 32)
    x, y = lat.coords()
    m = geo.conformal_metric(lat, 0.2 * np.cos(TWO_PI * x) * np.cos(TWO_PI * y))
    psi = 0.02 * np.sin(TWO_PI * x) * np.cos(TWO_PI * y) * np.ones(lat.shape)
    tw = ma.synthetic_twist(m, 0.5, psi)
    M = 1.0 + 25.0 * psi
    return m, tw, M, ma.epsilon_sweep(m, tw, ma.default_schedule(20), M=M)


class TestWeightedLaplacian:
    def test_flat_scaling(self, rng):
        lat = unit(2, 8)
        eps = 0.3
        omega = np.broadcast_to(eps * np.eye(2), lat.shape + (2, 2))
        h = random_trig(lat, rng)
        np.testing.assert_allclose(kw.weighted_laplacian(lat, omega, h), grid.flat_laplacian(lat, h) / eps, atol=1e-10)

    def test_constants(self, conformal_solution):
        m, _, sol = conformal_solution
        out = kw.weighted_laplacian(m.lattice, sol.omega_eps, np.full(m.lattice.shape, 2.3))
        assert grid.sup_norm(out) < 1e-12

    @pytest.mark.parametrize("which", ["conformal_solution", "potential_solution"])
    def test_divergence_structure(self, which, request, rng):
        m, _, sol = request.getfixturevalue(which)
        h = random_trig(m.lattice, rng)
        lap = kw.weighted_laplacian(m.lattice, sol.omega_eps, h)
        total = grid.integrate(m.lattice, lap * np.linalg.det(sol.omega_eps).real)
        assert abs(total) <= 1e-8 * grid.sup_norm(h)

    def test_singular_node(self):
        lat = unit(1, 8)
        omega = np.ones(lat.shape + (1, 1))
        omega[3, 4] = 0.0
        with pytest.raises(geo.PositivityError) as info:
            kw.weighted_laplacian(lat, omega, np.zeros(lat.shape))
        assert info.value.node == (3, 4)


class TestAverages:
    def test_constant_weight(self, conformal_solution):
        m, _, sol = conformal_solution
        assert kw.mbar(sol, 0.37, m) == 0.37
        assert kw.mbar(sol, np.zeros(m.lattice.shape), m) == 0.0

    @given(seed=st.integers(0, 2**32 - 1))
    def test_sup_normalization_invariance(self, seed):
        lat = unit(1, 16)
        r = np.random.default_rng(seed)
        u = 3 * r.normal(size=lat.shape) - 40
        M = r.normal(size=lat.shape)
        dens = np.exp(0.2 * r.normal(size=lat.shape))
        a = ma.weighted_average(lat, u, M, dens)
        b = ma.weighted_average(lat, kw.normalize_sup(u), M, dens)
        assert abs(a - b) <= 1e-12

    def test_normalize_constant(self):
        assert np.all(kw.normalize_sup(np.full((4, 4), -7.5)) == 0)

    @given(seed=st.integers(0, 2**32 - 1))
    def test_normalize_sup(self, seed):
        u = np.random.default_rng(seed).normal(size=(8, 8)) * 10
        v = kw.normalize_sup(u)
        assert v.max() == 0.0
        assert np.all(np.exp(v) <= 1.0)


class TestMbarLimit:
    def test_constant_weight(self, positive_twist_sweep):
        m, _, _, rec = positive_twist_sweep
        assert kw.mbar_limit(rec, np.full(m.lattice.shape, 0.8), m) == 0.8

    def test_zero_weight_is_inapplicable(self):
        m = geo.flat_metric(unit(1, 8))
        rec = ma.epsilon_sweep(m, ma.geometric_twist(m), ma.default_schedule(6), M=np.zeros(m.lattice.shape))
        out = kw.mbar_limit(rec)
        assert isinstance(out, kw.Inapplicable) and not out
        assert "not positive" in out.reason

    def test_matches_limit_solve(self, positive_twist_sweep):
        m, tw, M, rec = positive_twist_sweep
        est = kw.mbar_limit(rec)
        u0 = ma.solve_limit(m, tw)
        ref = ma.weighted_average(m.lattice, u0.u, M, m.det())
        assert isinstance(est, float)
        assert est == pytest.approx(ref, abs=1e-4)

    def test_unsettled_tail(self, positive_twist_sweep):
        m, tw, M, _ = positive_twist_sweep
        rec = ma.epsilon_sweep(m, tw, [32.0, 16.0, 8.0, 4.0], M=M)
        out = kw.mbar_limit(rec)
        assert isinstance(out, kw.Inapplicable) and "not settled" in out.reason

    def test_too_few_entries(self, positive_twist_sweep):
        m, tw, M, _ = positive_twist_sweep
        rec = ma.epsilon_sweep(m, tw, [1.0, 0.5], M=M)
        with pytest.raises(ValueError, match="at least 4"):
            kw.mbar_limit(rec)


class TestWeightedPoisson:
    def test_constant_weight(self, conformal_solution):
        m, _, sol = conformal_solution
        f = kw.solve_weighted_poisson(m.lattice, sol.omega_eps, np.full(m.lattice.shape, 0.6), 0.6)
        assert grid.sup_norm(f) <= 1e-12

    def test_flat_scaling(self, rng):
        lat = unit(1, 32)
        eps = 0.25
        omega = np.broadcast_to(eps * np.eye(1), lat.shape + (1, 1))
        M = random_trig(lat, rng)
        mb = float(np.mean(M))
        f = kw.solve_weighted_poisson(lat, omega, M, mb)
        ref = eps * grid.solve_flat_poisson(lat, M - mb)
        np.testing.assert_allclose(f, ref - ref.min(), atol=1e-10)

    @pytest.mark.parametrize("which", ["conformal_solution", "potential_solution"])
    def test_manufactured_round_trip(self, which, request, rng):
        m, _, sol = request.getfixturevalue(which)
        lat = m.lattice
        h = random_trig(lat, rng)
        rhs = kw.weighted_laplacian(lat, sol.omega_eps, h)
        f = kw.solve_weighted_poisson(lat, sol.omega_eps, rhs + 0.3, 0.3)
        assert f.min() == 0.0
        assert grid.sup_norm(f - (h - h.min())) <= 1e-8

    @given(seed=st.integers(0, 2**32 - 1))
    def test_inf_normalization_and_residual(self, seed):
        lat = unit(1, 16)
        r = np.random.default_rng(seed)
        phi = 0.001 * random_trig(lat, r, modes=3, kmax=2)
        omega = geo.metric_from_potential(lat, [[1.0]], phi).g
        M = random_trig(lat, r, modes=3, kmax=4)
        f = kw.solve_weighted_poisson(lat, omega, M, 0.0)
        assert f.min() == 0.0
        # the solve projects M to zero det-weighted mean first
        det = omega[..., 0, 0].real
        proj = M - np.sum(M * det) / np.sum(det)
        assert grid.sup_norm(kw.weighted_laplacian(lat, omega, f) - proj) <= 1e-9 * max(1.0, grid.sup_norm(M))


class TestSupersolution:
    def test_unit_limit(self):
        A, B, phi = kw.supersolution(np.zeros((4, 4)), 1.0)
        assert A == 2.0
        assert B == math.log(2.0) + 1.0
        assert np.all(phi == B)

    @pytest.mark.parametrize("mbar0", [0.0, -0.5])
    def test_nonpositive_limit(self, mbar0):
        with pytest.raises(kw.InapplicableError):
            kw.supersolution(np.zeros((4, 4)), mbar0)

    @given(mbar0=st.floats(1e-6, 1e6))
    def test_strict_inequalities(self, mbar0):
        A, B, _ = kw.supersolution(np.zeros(3), mbar0)
        assert A > 1 / mbar0 and B > math.log(A)
        # M (e^B - A) >= 0 wherever M >= 0
        assert math.exp(B) - A > 0

    def test_tail_entries(self, positive_twist_sweep):
        _, _, _, rec = positive_twist_sweep
        mbar0 = kw.mbar_limit(rec)
        A, _, _ = kw.supersolution(np.zeros(1), mbar0)
        near = [e.mbar_eps for e in rec.entries if abs(e.mbar_eps - mbar0) <= 0.2 * mbar0]
        assert len(near) >= 4
        assert all(1 - A * mb < 0 for mb in near)


class TestComparison:
    def _exact(self, lat, omega, rng):
        phi = random_trig(lat, rng, modes=3, kmax=2)
        phi = phi * (0.5 / grid.sup_norm(kw.weighted_laplacian(lat, omega, phi)))
        M = (1.0 + kw.weighted_laplacian(lat, omega, phi)) * np.exp(-phi)
        return phi, M

    def test_equality_case(self, conformal_solution, rng):
        m, _, sol = conformal_solution
        phi, M = self._exact(m.lattice, sol.omega_eps, rng)
        rep = kw.check_comparison(m.lattice, phi, phi, M, sol.omega_eps)
        assert rep.is_sub and rep.is_super and rep.checked
        assert rep.ordering_margin == 0.0 and rep.ordering_holds

    def test_strict_pair(self, conformal_solution, rng):
        m, _, sol = conformal_solution
        phi, M = self._exact(m.lattice, sol.omega_eps, rng)
        rep = kw.check_comparison(m.lattice, phi - 0.1, phi + 0.1, M, sol.omega_eps)
        assert rep.is_sub and rep.is_super
        assert rep.ordering_margin == pytest.approx(0.2, abs=1e-12)
        assert rep.to_dict()["ordering_argmin"] == list(rep.ordering_argmin)

    def test_zero_weight(self, conformal_solution):
        m, _, sol = conformal_solution
        lat = m.lattice
        rep = kw.check_comparison(lat, np.zeros(lat.shape), np.ones(lat.shape), np.zeros(lat.shape), sol.omega_eps)
        assert not rep.hypotheses_hold
        assert rep.ordering_holds is None and not rep.checked

    @pytest.mark.parametrize("which", ["conformal_solution", "potential_solution"])
    def test_manufactured_pairs(self, which, request):
        m, _, sol = request.getfixturevalue(which)
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(20):
            pm, pp, M = kw.manufactured_pair(m.lattice, sol.omega_eps, rng)
            rep = kw.check_comparison(m.lattice, pm, pp, M, sol.omega_eps)
            if rep.checked:
                checked += 1
                assert rep.ordering_margin >= -1e-8
        assert checked >= 10


class TestDiffInequality:
    @pytest.mark.parametrize("n", [1, 2])
    @pytest.mark.parametrize("eps", [1.0, 0.01])
    def test_flat_untwisted_is_equality(self, n, eps):
        m = geo.flat_metric(unit(n, 32 if n == 1 else 8))
        tw = ma.geometric_twist(m)
        sol = ma.solve_ma(m, tw, eps)
        r = kw.diff_inequality_residual(sol, np.zeros(m.lattice.shape), m)
        assert grid.sup_norm(r) <= 1e-8
        rep = kw.check_diff_inequality(sol, np.zeros(m.lattice.shape), m, tw)
        assert rep.applicable and rep.holds

    @pytest.mark.parametrize("n", [1, 2])
    @pytest.mark.parametrize("eps", [1.0, 0.01, 2.0**-19])
    def test_lambda_twist(self, n, eps):
        m = geo.flat_metric(unit(n, 32 if n == 1 else 8))
        sol = ma.solve_ma(m, ma.synthetic_twist(m, LAM), eps)
        r = kw.diff_inequality_residual(sol, np.zeros(m.lattice.shape), m)
        assert grid.sup_norm(r - LAM / (eps + LAM)) <= 1e-8

    def test_sign_changing_curvature_is_diagnostic(self, conformal_solution):
        m, tw, sol = conformal_solution
        M = geo.kappa_field(geo.chern_curvature(m), m).M
        assert M.min() < 0 < M.max()
        rep = kw.check_diff_inequality(sol, M, m, tw)
        assert not rep.applicable and rep.holds is None
        assert np.isfinite(rep.min_residual)

    def test_applicability(self):
        m = geo.flat_metric(unit(1, 8))
        assert kw.theory_applicable(m, ma.synthetic_twist(m, LAM), np.zeros(m.lattice.shape))
        assert not kw.theory_applicable(m, ma.synthetic_twist(m, -LAM), np.zeros(m.lattice.shape))
        assert not kw.theory_applicable(m, ma.synthetic_twist(m, LAM), np.full(m.lattice.shape, 0.1))


class TestGuenancia:
    @pytest.mark.parametrize("n", [1, 2])
    def test_flat_closed_forms(self, n):
        m = geo.flat_metric(unit(n, 32 if n == 1 else 8))
        tw = ma.geometric_twist(m)
        eps = 0.125
        sol = ma.solve_ma(m, tw, eps)
        rep = kw.guenancia_check(sol, np.zeros(m.lattice.shape), m, tw)
        assert rep.lhs == 0.0
        assert rep.rhs == pytest.approx(eps**n, rel=1e-12)
        assert rep.C_eps == pytest.approx(1 / eps, rel=1e-12)
        assert rep.applicable and rep.holds

    def test_pointwise_bound_n2(self, potential_solution):
        m, tw, sol = potential_solution
        _, T, _ = ma.trace_diagnostics(sol, m)
        rep = kw.guenancia_check(sol, np.zeros(m.lattice.shape), m, tw)
        assert np.all(np.exp(T) > rep.C_eps)
        assert rep.min_trace_excess > 0

    def test_pointwise_bound_n1_is_equality(self, conformal_solution):
        """For n = 1, e^T = e^{-u} and C_eps = e^{-sup u}: equality at the maximum of u."""
        m, tw, sol = conformal_solution
        _, T, _ = ma.trace_diagnostics(sol, m)
        rep = kw.guenancia_check(sol, np.zeros(m.lattice.shape), m, tw)
        assert abs(rep.min_trace_excess) <= 1e-9
        assert np.all(np.exp(T) >= rep.C_eps * (1 - 1e-9))


class TestReport:
    def test_lambda_twist_unit_weight(self):
        m = geo.flat_metric(unit(2, 8))
        tw = ma.synthetic_twist(m, LAM)
        M = np.ones(m.lattice.shape)
        rec = ma.epsilon_sweep(m, tw, ma.default_schedule(20), M=M)
        rep = kw.kw_report(rec, m, tw, M, np.zeros(m.lattice.shape))
        assert rep.mbar0 == 1.0 and rep.A == 2.0 and rep.B == math.log(2) + 1
        assert np.all(rep.f == 0)
        _, T, _ = ma.trace_diagnostics(rec.entries[-1].solution, m)
        assert T.min() <= rep.B
        assert rep.comparison_margin >= 0
        assert rep.diff_ineq.applicable and rep.diff_ineq.holds
        js = rep.to_json({"f": "fields/f.f64"})
        assert js["supersolution_rule"] == "A = 2/mbar0, B = log(A) + 1"
        assert js["dumps"] == {"f": "fields/f.f64"}

    def test_weight_choice(self):
        lat = unit(1, 32)
        x, _ = lat.coords()
        smooth = np.cos(TWO_PI * x) * np.ones(lat.shape)
        W, kind, shift = kw.poisson_weight(lat, smooth)
        assert kind == "given" and shift == 0.0 and np.array_equal(W, smooth)
        kink = np.abs(np.sin(np.pi * x)) * np.ones(lat.shape)
        W, kind, shift = kw.poisson_weight(lat, kink)
        assert kind == "spectral_minorant" and np.all(W <= kink)
