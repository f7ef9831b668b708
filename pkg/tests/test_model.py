import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from dagho.errors import DomainError
from dagho.model import (Dataset, ModelParams, PenalizedObjective, Point, SecondMoment,
                         acyclicity_penalty, enumeration_oracle, gradient, hessian,
                         loss_from_moments, penalized_objective, population_loss, sample_sem,
                         smoothness_bound)

A = st.floats(0.05, 10.0)
COORD = st.floats(-20.0, 20.0)
MU = st.floats(0.0, 5.0)


def pop(a):
    return SecondMoment.population(ModelParams(a))


# oracles: central differences of the objective value

def fd_grad(fun, x, y, h=1e-5):
    return np.array([(fun(x + h, y) - fun(x - h, y)) / (2 * h),
                     (fun(x, y + h) - fun(x, y - h)) / (2 * h)])


def fd_hess(gfun, x, y, h=1e-5):
    gxp, gxm = np.array(gfun(x + h, y)), np.array(gfun(x - h, y))
    gyp, gym = np.array(gfun(x, y + h)), np.array(gfun(x, y - h))
    return np.column_stack([(gxp - gxm) / (2 * h), (gyp - gym) / (2 * h)])


def rel_err(approx, exact):
    approx, exact = np.asarray(approx, float), np.asarray(exact, float)
    return np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), 1e-8)


class TestExamples:
    @pytest.mark.parametrize("p,a,expected", [((1, 0), 1, 1.0), ((0, 0), 1, 1.5), ((0, 0.5), 1, 1.25)])
    def test_population_loss(self, p, a, expected):
        assert population_loss(p, ModelParams(a)) == pytest.approx(expected, abs=1e-15)

    def test_loss_from_moments(self):
        assert loss_from_moments((1, 0), pop(1)) == pytest.approx(1.0, abs=1e-15)
        assert loss_from_moments((0, 0), pop(2)) == pytest.approx(3.0, abs=1e-15)

    def test_empirical_loss_at_truth(self):
        s = sample_sem(ModelParams(1), 100_000, "gaussian", seed=7).moments()
        value = loss_from_moments((1, 0), s)
        assert abs(value - 1.0) <= 0.02
        assert value == pytest.approx(0.9981485329527209, rel=1e-12)

    @pytest.mark.parametrize("p,expected", [((1, 0), 0.0), ((1, 1), 0.5), ((2, 3), 18.0)])
    def test_penalty(self, p, expected):
        assert acyclicity_penalty(p) == expected

    def test_penalized_objective(self):
        assert penalized_objective((1, 0), 0.37, pop(1)) == pytest.approx(0.37)
        assert penalized_objective((1, 1), 0.0, pop(1)) == 0.5
        assert penalized_objective((0, 0), 0.01, pop(1)) == pytest.approx(0.015)

    def test_gradient(self):
        assert gradient((1, 0), 0.1, pop(1)) == pytest.approx((0.0, -0.1), abs=1e-15)
        assert gradient((0, 0), 0.1, pop(1)) == pytest.approx((-0.1, -0.1), abs=1e-15)

    def test_gradient_closed_form(self):
        a, mu, x, y = 1.7, 0.3, 0.4, -0.9
        gx, gy = gradient((x, y), mu, pop(a))
        assert gx == pytest.approx(mu * (x - a) + y * y * x, rel=1e-14)
        assert gy == pytest.approx(mu * (a * a + 1) * y - a * mu + y * x * x, rel=1e-14)

    def test_hessian(self):
        h = hessian((1, 1), 0.1, pop(1))
        np.testing.assert_allclose(h, [[1.1, 2.0], [2.0, 1.2]], atol=1e-15)
        assert np.linalg.det(h) == pytest.approx(-2.68)
        np.testing.assert_allclose(hessian((0, 0), 0.5, pop(1)), np.diag([0.5, 1.0]))

    def test_smoothness(self):
        assert smoothness_bound(0.05, ModelParams(1)) == pytest.approx(3.1)
        assert smoothness_bound(0.0, ModelParams(2)) == 12.0

    def test_smoothness_grid_oracle(self):
        for a, mu in [(0.5, 0.01), (1.0, 0.05), (2.0, 0.3)]:
            m = ModelParams(a)
            xs = np.linspace(0, a, 100)
            ys = np.linspace(0, a / (a * a + 1), 100)
            sup = max(np.linalg.norm(hessian((x, y), mu, pop(a)), 2) for x in xs for y in ys)
            assert sup <= smoothness_bound(mu, m)

    def test_sample_ratio(self):
        s = sample_sem(ModelParams(1), 100_000, "gaussian", seed=7).moments()
        ratio = s.s12 / s.s11
        assert 0.98 <= ratio <= 1.02
        assert ratio == pytest.approx(0.9972959989390898, rel=1e-12)

    def test_sample_rejects(self):
        with pytest.raises(DomainError):
            ModelParams(0)
        with pytest.raises(DomainError):
            sample_sem(ModelParams(1), 1)
        with pytest.raises(DomainError):
            sample_sem(ModelParams(1), 10, "cauchy")

    @pytest.mark.parametrize("kind", ["gaussian", "uniform"])
    def test_sample_deterministic(self, kind):
        d1 = sample_sem(ModelParams(0.8), 500, kind, seed=3)
        d2 = sample_sem(ModelParams(0.8), 500, kind, seed=3)
        assert d1.rows.tobytes() == d2.rows.tobytes()

    def test_uniform_noise_moments(self):
        rows = sample_sem(ModelParams(1e-9), 200_000, "uniform", seed=1).rows
        assert abs(rows[:, 0].mean()) < 0.01
        assert rows[:, 0].var() == pytest.approx(1.0, abs=0.01)
        assert np.abs(rows[:, 0]).max() <= math.sqrt(3)

    def test_oracle_population(self):
        res = enumeration_oracle(pop(1))
        assert res.point == Point(1.0, 0.0)
        assert res.score == pytest.approx(1.0)
        assert res.loser_score == pytest.approx(1.25)
        res2 = enumeration_oracle(pop(2))
        assert res2.point == Point(2.0, 0.0) and res2.score == pytest.approx(1.0)

    def test_oracle_empirical(self):
        s = sample_sem(ModelParams(0.5), 10_000, "gaussian", seed=11).moments()
        res = enumeration_oracle(s)
        assert res.edge == "x"
        assert abs(res.point.x - 0.5) <= 0.05

    def test_oracle_matches_scalar_minimization(self):
        # independent route: numerically minimize the loss on each axis
        s = sample_sem(ModelParams(1.3), 2000, "gaussian", seed=5).moments()
        fx = minimize_scalar(lambda x: loss_from_moments((x, 0.0), s)).fun
        fy = minimize_scalar(lambda y: loss_from_moments((0.0, y), s)).fun
        res = enumeration_oracle(s)
        assert res.score == pytest.approx(min(fx, fy), rel=1e-10)
        assert res.loser_score == pytest.approx(max(fx, fy), rel=1e-10)

    def test_spurious_score(self):
        for a in (0.3, 1.0, 4.0):
            res = enumeration_oracle(pop(a))
            assert res.loser == Point(0.0, pytest.approx(a / (a * a + 1)))
            assert res.loser_score == pytest.approx(0.5 * (1 / (a * a + 1) + a * a + 1))


class TestDataset:
    def test_csv_roundtrip(self, tmp_path):
        ds = sample_sem(ModelParams(1), 50, seed=2)
        path = tmp_path / "d.csv"
        ds.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x1,x2" and len(lines) == 51
        back = Dataset.from_csv(path)
        assert back.rows.tobytes() == ds.rows.tobytes()

    def test_csv_malformed(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2\n1,2\n3,abc\n")
        with pytest.raises(DomainError, match="line 3"):
            Dataset.from_csv(path)

    def test_moments_psd(self):
        with pytest.raises(DomainError):
            SecondMoment(1.0, 2.0, 1.0)


class TestProperties:
    @given(A, COORD, st.booleans())
    def test_acyclic_loss_at_least_one(self, a, c, on_x):
        # cyclic points can dip below 1, acyclic ones never do
        m = ModelParams(a)
        p = (c, 0.0) if on_x else (0.0, c)
        assert population_loss(p, m) >= 1.0 - 1e-12
        assert population_loss((a, 0.0), m) == pytest.approx(1.0)
        assert population_loss((1.0, 0.5), ModelParams(1)) == pytest.approx(0.75)

    @given(A, COORD, COORD)
    def test_moment_form_matches_population(self, a, x, y):
        m = ModelParams(a)
        ref = population_loss((x, y), m)
        assert loss_from_moments((x, y), pop(a)) == pytest.approx(ref, rel=1e-12, abs=1e-12)

    @given(A, MU, COORD, COORD)
    def test_objective_decomposition(self, a, mu, x, y):
        s = pop(a)
        h = acyclicity_penalty((x, y))
        assert h >= 0
        assert penalized_objective((x, y), mu, s) == pytest.approx(
            mu * loss_from_moments((x, y), s) + h, rel=1e-14, abs=1e-300)
        obj = PenalizedObjective(mu, s)
        assert obj.value(x, y) == pytest.approx(penalized_objective((x, y), mu, s), rel=1e-12, abs=1e-12)

    @settings(max_examples=50)
    @given(A, st.floats(0.001, 2.0), st.floats(-1, 1), st.floats(-1, 1))
    def test_derivatives_match_differences(self, a, mu, u, v):
        s = pop(a)
        x, y = 2 * a * u, 2 * a * v
        fun = lambda x_, y_: penalized_objective((x_, y_), mu, s)
        g = gradient((x, y), mu, s)
        assert rel_err(fd_grad(fun, x, y), g) <= 1e-6
        hs = fd_hess(lambda x_, y_: gradient((x_, y_), mu, s), x, y)
        assert rel_err(hs, hessian((x, y), mu, s)) <= 1e-5

    @given(A, MU, COORD, COORD)
    def test_hessian_symmetric_positive_trace(self, a, mu, x, y):
        h = hessian((x, y), mu, pop(a))
        assert h[0, 1] == h[1, 0]
        # at mu=0 the trace is x^2 + y^2, which can underflow
        assert np.trace(h) >= 0
        assert np.trace(h) > 0 or mu == 0

    def test_oracle_on_log_grid(self):
        for a in np.geomspace(0.05, 10, 25):
            res = enumeration_oracle(pop(a))
            assert res.edge == "x"
            assert res.point.x == pytest.approx(a) and res.point.y == 0.0
