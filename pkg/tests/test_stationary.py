import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from dagho.errors import DomainError, PreconditionError
from dagho.model import ModelParams, Point, SecondMoment, gradient, hessian
from dagho.stationary import (Branch, Kind, PERTURBED, classify_stationary, critical_tau,
                              eval_perturbed, eval_r, eval_t, grad_norm, p_of_mu,
                              region_membership, solve_perturbed, solve_stationary_points,
                              solve_x_roots, x_curvature_bounds, y_curvature_bounds)

TAU = {0.1: 0.0022553312611319, 0.5: 0.021415232347983, 1.0: 0.016632698165801,
       2.0: 0.0036589430201522, 5.0: 0.00015222716546}


def r_plain(y, mu, a):
    # independent restatement used as the oracle for root checks
    return a / y - mu * a * a / (y * y + mu) ** 2 - (a * a + 1)


def grid_roots(fun, lo, hi, n=200_000):
    """Sign changes on a geometric grid, polished with brentq."""
    zs = np.geomspace(lo, hi, n)
    vals = np.array([fun(z) for z in zs])
    idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    return [brentq(fun, zs[i], zs[i + 1], xtol=1e-300, rtol=1e-15) for i in idx]


def brentq_tau(a):
    def p(mu):
        c = (4 * mu) ** (1 / 3)
        a13 = a ** (1 / 3)
        yub = 0.5 * c * (a13 + math.sqrt(a13 * a13 - c))
        return r_plain(yub, mu, a)
    hi = a * a / (4 * (a * a + 1) ** 3)
    return brentq(p, 1e-12 * a * a, hi, xtol=1e-300, rtol=1e-15)


class TestReducedEquations:
    def test_eval_r_example(self):
        assert eval_r(0.1, 0.01, ModelParams(1)) == pytest.approx(-17.0, abs=1e-12)

    def test_eval_t_example(self):
        assert eval_t(1.0, 0.1, ModelParams(1)) == pytest.approx(-0.1 / 1.44, abs=1e-14)
        assert eval_t(1.0, 0.1, ModelParams(1)) == pytest.approx(-0.069444, abs=1e-6)

    def test_t_blows_up_near_zero(self):
        assert eval_t(1e-12, 0.01, ModelParams(1)) > 1e10

    @pytest.mark.parametrize("fn", [eval_r, eval_t])
    @pytest.mark.parametrize("z", [0.0, -1.0, float("nan")])
    def test_domain(self, fn, z):
        with pytest.raises(DomainError):
            fn(z, 0.1, ModelParams(1))

    @given(st.floats(0.05, 10), st.floats(1e-8, 10))
    def test_sign_facts(self, a, mu):
        m = ModelParams(a)
        assert eval_r(math.sqrt(mu), mu, m) < 0
        assert eval_r(a / (a * a + 1), mu, m) < 0
        assert eval_t(a, mu, m) < 0

    def test_y_bounds_tight(self):
        for a in (0.5, 1.0, 3.0):
            mu = a * a / 4
            b = y_curvature_bounds(mu, ModelParams(a))
            assert b.lower == pytest.approx(math.sqrt(mu), rel=1e-7)
            assert b.upper == pytest.approx(math.sqrt(mu), rel=1e-7)
            assert y_curvature_bounds(mu * 1.001, ModelParams(a)) is None

    def test_x_bounds_tight(self):
        for a in (0.5, 1.0, 3.0):
            mu = a * a / (4 * (a * a + 1) ** 3)
            b = x_curvature_bounds(mu, ModelParams(a))
            half = (4 * mu * a) ** (1 / 3) / 2
            assert b.lower == pytest.approx(half, rel=1e-7)
            assert b.upper == pytest.approx(half, rel=1e-7)
            assert x_curvature_bounds(mu * 1.001, ModelParams(a)) is None

    @given(st.floats(0.1, 5), st.floats(1e-6, 0.2))
    def test_y_bounds_bracket_sqrt_mu(self, a, frac):
        mu = frac * a * a / 4
        b = y_curvature_bounds(mu, ModelParams(a))
        assert b.lower <= math.sqrt(mu) * (1 + 1e-12) and math.sqrt(mu) <= b.upper * (1 + 1e-12)

    def test_slope_signs_by_finite_difference(self):
        m, mu = ModelParams(1), 0.01
        b = y_curvature_bounds(mu, m)
        h = 1e-7

        def slope(y):
            return (eval_r(y + h, mu, m) - eval_r(y - h, mu, m)) / (2 * h)
        mids = [b.lower / 2, 0.5 * (b.lower + b.upper), b.upper + 0.5]
        assert [math.copysign(1, slope(y)) for y in mids] == [-1, 1, -1]

    def test_perturbed_collapse(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, mu, z = rng.uniform(0.2, 4), rng.uniform(1e-4, 1), rng.uniform(0.01, 3)
            m = ModelParams(a)
            assert abs(eval_perturbed(z, mu, m, 0.0, "r_eps") - eval_r(z, mu, m)) <= 1e-14 * max(1, abs(eval_r(z, mu, m)))
            assert abs(eval_perturbed(z, mu, m, 0.0, "t_eps") - eval_t(z, mu, m)) <= 1e-14 * max(1, abs(eval_t(z, mu, m)))

    def test_perturbed_closed_forms(self):
        a, mu, eps, beta, z = 1.3, 0.02, 0.004, 0.2, 0.37
        m = ModelParams(a)
        q = a * a + 1
        want = {
            "r_eps": (a + eps / mu) / z - (mu * a - eps) ** 2 / (mu * (z * z + mu) ** 2) - q,
            "t_eps": (a - eps / mu) / z - (mu * a + eps) ** 2 / (mu * (z * z + mu * q) ** 2) - 1,
            "r_eps_minus": (a - eps / mu) / z - (mu * a + eps) ** 2 / (mu * (z * z + mu) ** 2) - q,
            "t_eps_minus": (a + eps / mu) / z - (mu * a - eps) ** 2 / (mu * (z * z + mu * q) ** 2) - 1,
            "r_beta": a * (1 + beta) / z - q - mu * a * a * (1 - beta) ** 2 / (z * z + mu) ** 2,
            "t_beta": a * (1 - beta) / z - 1 - mu * a * a * (1 + beta) ** 2 / (z * z + mu * q) ** 2,
        }
        for which in PERTURBED:
            got = eval_perturbed(z, mu, m, eps, which, beta=beta)
            assert got == pytest.approx(want[which], rel=1e-13), which

    @given(st.floats(0.2, 5), st.floats(1e-4, 0.5), st.floats(0.01, 0.9), st.floats(0.01, 5))
    def test_perturbed_ordering(self, a, mu, beta, y):
        m = ModelParams(a)
        eps = 0.5 * beta * a * mu
        rb = eval_perturbed(y, mu, m, eps, "r_beta", beta=beta)
        re = eval_perturbed(y, mu, m, eps, "r_eps")
        r = eval_r(y, mu, m)
        assert rb > re > r

    @given(st.floats(0.2, 5), st.floats(1e-6, 1.0))
    def test_beta_form_negative_at_sqrt_mu(self, a, mu):
        # largest beta with ((1+b)/(1-b))^2 <= a^2+1
        s = math.sqrt(math.sqrt(a * a + 1))
        beta = 0.999 * (s - 1) / (s + 1)
        assert eval_perturbed(math.sqrt(mu), mu, ModelParams(a), 0.0, "r_beta", beta=beta) <= 0

    def test_perturbed_rejects(self):
        m = ModelParams(1)
        with pytest.raises(DomainError):
            eval_perturbed(0.1, 0.1, m, -1e-3)
        with pytest.raises(DomainError):
            eval_perturbed(0.1, 0.1, m, 0.0, "r_beta", beta=1.5)
        with pytest.raises(DomainError):
            eval_perturbed(0.1, 0.1, m, 0.0, "nope")


class TestThreshold:
    @pytest.mark.parametrize("a", sorted(TAU))
    def test_pinned_and_brentq(self, a):
        m = ModelParams(a)
        tau = critical_tau(m).tau
        assert tau == pytest.approx(TAU[a], rel=1e-10)
        assert tau == pytest.approx(brentq_tau(a), rel=1e-9)
        assert abs(p_of_mu(tau, m)) <= 1e-8
        assert 0 < tau < min(a * a / 4, a * a / (4 * (a * a + 1) ** 3) + 1e-15)

    def test_a1_interval(self):
        tau = critical_tau(ModelParams(1)).tau
        assert 0 < tau < 0.03125

    @pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
    def test_root_counts_around_tau(self, a):
        m = ModelParams(a)
        tau = critical_tau(m).tau
        assert len(solve_stationary_points(0.5 * tau, m)) == 3
        assert len(solve_stationary_points(0.99 * tau, m)) == 3
        s = solve_stationary_points(tau, m)
        assert len(s) == 2
        assert Kind.DEGENERATE in {sp.kind for sp in s.points}
        assert len(solve_stationary_points(1.01 * tau, m)) == 1

    def test_p_monotone(self):
        m = ModelParams(1)
        mus = np.geomspace(1e-6, 0.03, 60)
        vals = [p_of_mu(mu, m) for mu in mus]
        assert all(u > v for u, v in zip(vals, vals[1:]))


class TestStationaryPoints:
    @pytest.mark.parametrize("a,frac", [(0.5, 0.5), (1.0, 0.5), (2.0, 0.5), (1.0, 0.1), (0.3, 0.9), (4.0, 0.3)])
    def test_roots_match_grid(self, a, frac):
        m = ModelParams(a)
        mu = frac * critical_tau(m).tau
        s = solve_stationary_points(mu, m)
        ref = grid_roots(lambda y: r_plain(y, mu, a), 1e-9 * a, a / (a * a + 1) * 1.0001)
        assert len(ref) == 3 == len(s)
        for sp, y in zip(s.points, ref):
            assert sp.point.y == pytest.approx(y, rel=1e-9)
            assert grad_norm(sp.point, mu, m) <= 1e-10

    @pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
    def test_ordering_and_kinds(self, a):
        m = ModelParams(a)
        mu = 0.5 * critical_tau(m).tau
        s = solve_stationary_points(mu, m)
        ys = [sp.point.y for sp in s.points]
        xs = [sp.point.x for sp in s.points]
        assert ys == sorted(ys) and xs == sorted(xs, reverse=True)
        assert [sp.kind for sp in s.points] == [Kind.MINIMUM, Kind.SADDLE, Kind.MINIMUM]
        assert [sp.branch for sp in s.points] == [Branch.STAR, Branch.DOUBLE_STAR, Branch.TRIPLE_STAR]
        for sp in s.points:
            # independent route: eigenvalues of the Hessian
            ev = np.linalg.eigvalsh(hessian(sp.point, mu, SecondMoment.population(m)))
            assert (ev.min() > 0) == (sp.kind is Kind.MINIMUM)

    def test_x_roots_agree(self):
        for a in (0.5, 1.0, 2.0):
            m = ModelParams(a)
            mu = 0.5 * critical_tau(m).tau
            xs = solve_x_roots(mu, m)
            pts = solve_stationary_points(mu, m).points
            assert len(xs) == 3
            for x, sp in zip(xs, reversed(pts)):
                assert x == pytest.approx(sp.point.x, rel=1e-8)

    def test_single_root_above_quarter(self):
        for a in (0.5, 1.0, 2.0):
            m = ModelParams(a)
            s = solve_stationary_points(0.3 * a * a, m)
            assert len(s) == 1 and s.points[0].kind is Kind.MINIMUM
            assert grad_norm(s.points[0].point, 0.3 * a * a, m) <= 1e-10

    @pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
    def test_small_mu_limits(self, a):
        s = solve_stationary_points(1e-8, ModelParams(a))
        assert abs(s.star.point.x - a) <= 1e-3
        assert abs(s.triple_star.point.y - a / (a * a + 1)) <= 1e-3

    @pytest.mark.parametrize("a,mu", [(5.0, 1e-15), (2.7, 5.9e-15), (0.3, 1e-18)])
    def test_tiny_mu_keeps_all_roots(self, a, mu):
        m = ModelParams(a)
        s = solve_stationary_points(mu, m)
        assert [sp.kind for sp in s.points] == [Kind.MINIMUM, Kind.SADDLE, Kind.MINIMUM]
        # smallest root sits near mu / a
        assert s.star.point.y == pytest.approx(mu / a, rel=1e-3)
        b = y_curvature_bounds(mu, m)
        assert b.lower * b.upper == pytest.approx(mu, rel=1e-12)
        assert s.star.point.y < b.lower < s.double_star.point.y

    def test_system_consistency(self):
        m = ModelParams(1.5)
        mu = 0.4 * critical_tau(m).tau
        for sp in solve_stationary_points(mu, m).points:
            x, y = sp.point
            assert x == pytest.approx(mu * 1.5 / (mu + y * y), rel=1e-12)
            assert y == pytest.approx(mu * 1.5 / (mu * (1.5 ** 2 + 1) + x * x), rel=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.2, 5), st.floats(1e-6, 1 - 1e-6))
    def test_lemma_bounds(self, a, frac):
        m = ModelParams(a)
        mu = frac * critical_tau(m).tau
        s = solve_stationary_points(mu, m)
        assert len(s) == 3
        c = (4 * mu) ** (1 / 3)
        # c/2 (a^(1/3) - sqrt(a^(2/3) - c)), rationalized to avoid cancellation
        y_lb = 0.5 * c * c / (a ** (1 / 3) + math.sqrt(a ** (2 / 3) - c))
        assert s.double_star.point.y > math.sqrt(mu)
        assert s.star.point.y < y_lb

    def test_classify_rejects_nonstationary(self):
        with pytest.raises(PreconditionError):
            classify_stationary((0.3, 0.3), 0.01, ModelParams(1))

    def test_json(self):
        m = ModelParams(1)
        tau = critical_tau(m).tau
        d = json.loads(solve_stationary_points(0.5 * tau, m, tau=tau).to_json())
        assert d["tau"] == tau and len(d["points"]) == 3
        assert [p["kind"] for p in d["points"]] == ["minimum", "saddle", "minimum"]


class TestPerturbedAndRegions:
    def test_perturbed_zero_eps_matches(self):
        m = ModelParams(1)
        mu = 0.5 * critical_tau(m).tau
        pts = solve_perturbed(mu, m, 0.0)
        ref = sorted((sp.point for sp in solve_stationary_points(mu, m).points), key=lambda p: -p.x)
        for p, q in zip(pts, ref):
            assert p.x == pytest.approx(q.x, rel=1e-9) and p.y == pytest.approx(q.y, rel=1e-9)

    def test_perturbed_system(self):
        a, m = 1.0, ModelParams(1.0)
        mu = 0.5 * critical_tau(m).tau
        eps = 0.05 * a * mu
        for minus in (False, True):
            s = -1 if minus else 1
            for x, y in solve_perturbed(mu, m, eps, minus=minus):
                assert x == pytest.approx((mu * a - s * eps) / (mu + y * y), rel=1e-12)
                assert y == pytest.approx((mu * a + s * eps) / (mu * 2 + x * x), rel=1e-8)

    def test_truth_in_regions(self):
        for a in (0.5, 1.0, 2.0):
            m = ModelParams(a)
            tau = critical_tau(m).tau
            for mu in (0.1 * tau, 0.7 * tau):
                f = region_membership((a, 0.0), mu, m, tau=tau)
                assert f.in_A and f.in_B_mu

    def test_b_flags_not_applicable_above_tau(self):
        m = ModelParams(1)
        f = region_membership((1.0, 0.0), 0.2, m)
        assert f.in_B_mu is None and f.in_B_mu_eps is None

    def test_star_splits(self):
        m = ModelParams(1)
        mu = 0.5 * critical_tau(m).tau
        eps = 0.02 * mu
        star = solve_stationary_points(mu, m).star.point
        f = region_membership(star, mu, m, eps=eps)
        assert f.in_A_eps and f.in_A1 and not f.in_A2

    @settings(max_examples=200)
    @given(st.floats(0.3, 3), st.floats(0.001, 0.5), st.floats(0, 1), st.floats(0, 1))
    def test_small_gradient_in_A_eps(self, a, mu, u, v):
        m = ModelParams(a)
        p = Point(u * a, v * a / (a * a + 1))
        eps = grad_norm(p, mu, m) * (1 + 1e-9) + 1e-15
        assert region_membership(p, mu, m, eps=eps, tau=1.0).in_A_eps
