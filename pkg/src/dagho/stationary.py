"""Stationary points of g_mu for the bivariate model.

Eliminating one coordinate from grad g_mu = 0 leaves a scalar equation.
For the population loss the stationary system is

    x = mu a / (mu + y^2),        y = mu a / (mu (a^2 + 1) + x^2),

and substituting gives r(y; mu) = 0 or t(x; mu) = 0. Every reduced equation
used here (including the eps- and beta-perturbed variants) has the shape

    F(z) = A / z - C - B / (z^2 + m)^2,

whose slope is positive exactly between the roots of z^2 - c z + m = 0 with
c = (4 B / A)^(1/3). Roots are found by bisection on those monotone pieces.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError, PreconditionError
from .model import ModelParams, Point, SecondMoment, check_mu, gradient, hessian

# relative size of |F(c)| below which a critical value counts as a tangency
TANGENCY_RTOL = 1e-11
# roots closer than this are reported once
MERGE_TOL = 1e-8
# |det H| below this fraction of h11 h22 + h12^2 counts as degenerate
DEGENERATE_RTOL = 1e-9


class Kind(str, Enum):
    MINIMUM = "minimum"
    SADDLE = "saddle"
    DEGENERATE = "degenerate"


class Branch(str, Enum):
    STAR = "star"
    DOUBLE_STAR = "double_star"
    TRIPLE_STAR = "triple_star"


_BRANCHES = (Branch.STAR, Branch.DOUBLE_STAR, Branch.TRIPLE_STAR)


class Reduced(NamedTuple):
    """F(z) = A/z - C - B/(z^2+m)^2 with A, B, m > 0."""

    A: float
    B: float
    C: float
    m: float

    def __call__(self, z):
        return self.A / z - self.C - self.B / (z * z + self.m) ** 2

    def slope(self, z):
        q = z * z + self.m
        return -self.A / (z * z) + 4.0 * self.B * z / q ** 3

    def scale(self, z):
        # magnitude of the individual terms, used for relative tolerances
        return abs(self.A / z) + abs(self.C) + abs(self.B) / (z * z + self.m) ** 2

    def critical(self):
        """(lb, ub) bounding the increasing piece, or None if F is decreasing."""
        if self.A <= 0 or self.B <= 0:
            return None
        c = (4.0 * self.B / self.A) ** (1.0 / 3.0)
        disc = c * c - 4.0 * self.m
        if disc < 0:
            return None
        ub = 0.5 * (c + math.sqrt(disc))
        # the roots multiply to m; m / ub avoids cancellation in c - sqrt(disc)
        return self.m / ub, ub

    def upper(self):
        # F(A/C) = -B/(...)^2 < 0, so every root lies in (0, A/C]
        return self.A / self.C


def _reduced(which, mu, a, eps=0.0, beta=None) -> Reduced:
    a2p1 = a * a + 1.0
    if which == "r":
        return Reduced(a, mu * a * a, a2p1, mu)
    if which == "t":
        return Reduced(a, mu * a * a, 1.0, mu * a2p1)
    if which == "r_eps":
        return Reduced(a + eps / mu, (mu * a - eps) ** 2 / mu, a2p1, mu)
    if which == "t_eps":
        return Reduced(a - eps / mu, (mu * a + eps) ** 2 / mu, 1.0, mu * a2p1)
    if which == "r_eps_minus":
        return Reduced(a - eps / mu, (mu * a + eps) ** 2 / mu, a2p1, mu)
    if which == "t_eps_minus":
        return Reduced(a + eps / mu, (mu * a - eps) ** 2 / mu, 1.0, mu * a2p1)
    if which in ("r_beta", "t_beta"):
        if beta is None or not 0.0 < beta < 1.0:
            raise DomainError("beta must lie in (0, 1)")
        if which == "r_beta":
            return Reduced(a * (1 + beta), mu * a * a * (1 - beta) ** 2, a2p1, mu)
        return Reduced(a * (1 - beta), mu * a * a * (1 + beta) ** 2, 1.0, mu * a2p1)
    raise DomainError(f"unknown reduced equation {which!r}")


def _positive(name, z):
    z = float(z)
    if not (z > 0 and math.isfinite(z)):
        raise DomainError(f"{name} must be positive and finite, got {z!r}")
    return z


def eval_r(y, mu, m: ModelParams) -> float:
    """a/y - mu a^2/(y^2+mu)^2 - (a^2+1)."""
    return _reduced("r", check_mu(mu), m.a)(_positive("y", y))


def eval_t(x, mu, m: ModelParams) -> float:
    """a/x - mu a^2/(mu(a^2+1)+x^2)^2 - 1."""
    return _reduced("t", check_mu(mu), m.a)(_positive("x", x))


PERTURBED = ("r_eps", "t_eps", "r_eps_minus", "t_eps_minus", "r_beta", "t_beta")


def eval_perturbed(z, mu, m: ModelParams, eps=0.0, which="r_eps", beta=None) -> float:
    """Evaluate one of the eps- or beta-perturbed reduced equations at z > 0."""
    if which not in PERTURBED:
        raise DomainError(f"which must be one of {PERTURBED}")
    eps = float(eps)
    if eps < 0:
        raise DomainError("eps must be nonnegative")
    return _reduced(which, check_mu(mu), m.a, eps, beta)(_positive("argument", z))


@dataclass(frozen=True)
class CurvatureBounds:
    lower: float
    upper: float
    variable: str


def y_curvature_bounds(mu, m: ModelParams) -> Optional[CurvatureBounds]:
    """Interval on which r(.; mu) increases; None when mu > a^2/4."""
    mu = check_mu(mu)
    a = m.a
    if mu > a * a / 4.0:
        return None
    c = (4.0 * mu) ** (1.0 / 3.0)
    a13 = a ** (1.0 / 3.0)
    s = math.sqrt(max(a13 * a13 - c, 0.0))
    ub = 0.5 * c * (a13 + s)
    # lower * upper = mu
    return CurvatureBounds(mu / ub, ub, "y")


def x_curvature_bounds(mu, m: ModelParams) -> Optional[CurvatureBounds]:
    """Interval on which t(.; mu) increases; None when mu > a^2/(4(a^2+1)^3)."""
    mu = check_mu(mu)
    a = m.a
    if mu > a * a / (4.0 * (a * a + 1.0) ** 3):
        return None
    c = (4.0 * mu * a) ** (1.0 / 3.0)
    d = 1.0 - (4.0 * mu) ** (1.0 / 3.0) * (a * a + 1.0) / a ** (2.0 / 3.0)
    s = math.sqrt(max(d, 0.0))
    ub = 0.5 * c * (1.0 + s)
    # lower * upper = mu (a^2 + 1)
    return CurvatureBounds(mu * (a * a + 1.0) / ub, ub, "x")


def _bisect(F, lo, hi, flo, max_iter=200):
    """Bisection to float resolution; F(lo) has sign flo and F(hi) the opposite."""
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = F(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class ReducedRoot(NamedTuple):
    z: float
    tangent: bool


def reduced_roots(F: Reduced) -> list:
    """All roots of F on (0, A/C], ascending, with tangencies flagged."""
    hi = F.upper()
    # B/(z^2+m)^2 <= B/m^2, so F > 0 here and no root lies below
    lo = 0.5 * F.A / (F.C + F.B / (F.m * F.m))
    knots = [lo]
    crit = F.critical()
    crit_pts = set()
    if crit is not None:
        for c in crit:
            if lo < c < hi:
                knots.append(c)
                crit_pts.add(c)
    knots.append(hi)
    vals = []
    for z in knots:
        v = F(z)
        if z in crit_pts and abs(v) <= TANGENCY_RTOL * F.scale(z):
            v = 0.0
        vals.append(v)
    roots = []
    for i, (z, v) in enumerate(zip(knots, vals)):
        if v == 0.0:
            roots.append(ReducedRoot(z, z in crit_pts))
        if i + 1 < len(knots):
            w = vals[i + 1]
            if v != 0.0 and w != 0.0 and (v > 0) != (w > 0):
                roots.append(ReducedRoot(_bisect(F, z, knots[i + 1], v), False))
    merged = []
    for r in roots:
        if merged and r.z - merged[-1].z < MERGE_TOL:
            prev = merged.pop()
            merged.append(ReducedRoot(0.5 * (prev.z + r.z), True))
        else:
            merged.append(r)
    return merged


@dataclass(frozen=True)
class Threshold:
    tau: float
    a: float

    def to_dict(self):
        return {"a": self.a, "tau": self.tau}


def p_of_mu(mu, m: ModelParams) -> float:
    """r evaluated at the upper curvature bound; its zero is tau."""
    b = y_curvature_bounds(mu, m)
    if b is None:
        raise DomainError("mu above a^2/4 has no curvature bounds")
    return eval_r(b.upper, mu, m)


def critical_tau(m: ModelParams, tol=0.0) -> Threshold:
    """Bisect p(mu) = 0; p decreases from +inf to a negative value at the cap.

    With the default tol=0 bisection runs to float resolution. p is steep for
    large a, so a fixed tolerance such as 1e-14 a^2 leaves |p(tau)| visibly
    nonzero there.
    """
    a2 = m.a * m.a
    hi = a2 / (4.0 * (a2 + 1.0) ** 3)
    lo = 1e-18 * a2
    while p_of_mu(lo, m) <= 0:
        lo *= 0.5
    if p_of_mu(hi, m) >= 0:
        return Threshold(hi, m.a)
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if p_of_mu(mid, m) > 0:
            lo = mid
        else:
            hi = mid
    return Threshold(0.5 * (lo + hi), m.a)


@dataclass(frozen=True)
class StationaryPoint:
    point: Point
    kind: Kind
    branch: Branch
    mu: float

    def to_dict(self):
        return {"x": self.point.x, "y": self.point.y,
                "branch": self.branch.value, "kind": self.kind.value}


@dataclass(frozen=True)
class StationarySet:
    mu: float
    points: tuple
    tau: Optional[float] = None

    def __len__(self):
        return len(self.points)

    def by_branch(self, branch) -> Optional[StationaryPoint]:
        branch = Branch(branch)
        for sp in self.points:
            if sp.branch is branch:
                return sp
        return None

    @property
    def star(self):
        return self.by_branch(Branch.STAR)

    @property
    def double_star(self):
        return self.by_branch(Branch.DOUBLE_STAR)

    @property
    def triple_star(self):
        return self.by_branch(Branch.TRIPLE_STAR)

    def to_dict(self):
        return {"mu": self.mu, "tau": self.tau,
                "points": [sp.to_dict() for sp in self.points]}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _det(p, mu, m):
    """det H and the size of the two products it is formed from."""
    h = hessian(p, mu, SecondMoment.population(m))
    diag, off = h[0, 0] * h[1, 1], h[0, 1] * h[1, 0]
    return diag - off, abs(diag) + abs(off)


def classify_stationary(p, mu, m: ModelParams, tol=1e-8) -> Kind:
    """Minimum, saddle or degenerate, from the sign of det(Hessian).

    The trace of the Hessian is always positive, so the determinant decides.
    """
    mu = check_mu(mu)
    gx, gy = gradient(p, mu, SecondMoment.population(m))
    if math.hypot(gx, gy) > tol:
        raise PreconditionError(f"point {tuple(p)} is not stationary (|grad| = {math.hypot(gx, gy):.3g})")
    d, size = _det(p, mu, m)
    if abs(d) <= DEGENERATE_RTOL * size:
        return Kind.DEGENERATE
    return Kind.MINIMUM if d > 0 else Kind.SADDLE


def solve_stationary_points(mu, m: ModelParams, tau: Optional[float] = None) -> StationarySet:
    """All stationary points of g_mu for the population loss, sorted by y."""
    mu = check_mu(mu)
    a = m.a
    roots = reduced_roots(_reduced("r", mu, a))
    pts = []
    for i, root in enumerate(roots):
        y = root.z
        x = mu * a / (mu + y * y)
        p = Point(x, y)
        if root.tangent:
            kind = Kind.DEGENERATE
        else:
            kind = classify_stationary(p, mu, m, tol=1e-8 * max(1.0, mu * a))
        pts.append(StationaryPoint(p, kind, _BRANCHES[i], mu))
    return StationarySet(mu, tuple(pts), tau)


def solve_x_roots(mu, m: ModelParams) -> list:
    """Roots of t(x; mu) = 0, ascending in x."""
    mu = check_mu(mu)
    return [r.z for r in reduced_roots(_reduced("t", mu, m.a))]


def solve_perturbed(mu, m: ModelParams, eps, minus=False) -> list:
    """Solutions of the eps-stationary boundary system, sorted by x descending.

    With minus=False this is x = (mu a - eps)/(mu + y^2),
    y = (mu a + eps)/(mu(a^2+1) + x^2); minus=True flips both signs.
    Index 0 is the starred point, index 1 the double-starred one.
    """
    mu = check_mu(mu)
    a = m.a
    which = "r_eps_minus" if minus else "r_eps"
    F = _reduced(which, mu, a, eps)
    if F.A <= 0:
        return []
    sx = (mu * a + eps) if minus else (mu * a - eps)
    pts = [Point(sx / (mu + r.z * r.z), r.z) for r in reduced_roots(F)]
    return sorted(pts, key=lambda p: -p.x)


@dataclass(frozen=True)
class RegionFlags:
    in_A: bool
    in_A_eps: bool
    in_A1: Optional[bool]
    in_A2: Optional[bool]
    in_B_mu: Optional[bool]
    in_B_mu_eps: Optional[bool]

    def to_dict(self):
        return dict(self.__dict__)


def in_region_A(p, m: ModelParams) -> bool:
    x, y = p
    return 0.0 <= x <= m.a and 0.0 <= y <= m.y_spurious


def in_region_A_eps(p, mu, m: ModelParams, eps) -> bool:
    x, y = p
    a = m.a
    lo_x, hi_x = (mu * a - eps) / (mu + y * y), (mu * a + eps) / (mu + y * y)
    qy = x * x + mu * (a * a + 1.0)
    lo_y, hi_y = (mu * a - eps) / qy, (mu * a + eps) / qy
    return lo_x <= x <= hi_x and lo_y <= y <= hi_y


def basin_box(mu, m: ModelParams, eps=0.0) -> Optional[tuple]:
    """(x**, y**) bounding the certified basin, or None if it does not exist."""
    if eps == 0.0:
        s = solve_stationary_points(mu, m)
        if len(s) < 3:
            return None
        ds = s.double_star.point
        return ds.x, ds.y
    pts = solve_perturbed(mu, m, eps)
    if len(pts) < 2:
        return None
    return pts[1].x, pts[1].y


def region_membership(p, mu, m: ModelParams, eps=0.0, tau=None) -> RegionFlags:
    """Membership flags; flags needing a bifurcated landscape are None otherwise."""
    mu = check_mu(mu)
    eps = float(eps)
    x, y = p
    in_a = in_region_A(p, m)
    in_ae = in_region_A_eps(p, mu, m, eps)
    pts = solve_perturbed(mu, m, eps) if eps > 0 else [sp.point for sp in
                                                      sorted(solve_stationary_points(mu, m).points,
                                                             key=lambda s: -s.point.x)]
    in_a1 = in_a2 = None
    if pts:
        first = pts[0]
        in_a1 = in_ae and x >= first.x and y <= first.y
    if len(pts) >= 2:
        second = pts[1]
        in_a2 = in_ae and x <= second.x and y >= second.y
    if tau is None:
        tau = critical_tau(m).tau
    in_b = in_be = None
    if mu < tau:
        box = basin_box(mu, m)
        if box is not None:
            in_b = box[0] < x <= m.a and 0.0 <= y < box[1]
        box_e = basin_box(mu, m, eps) if eps > 0 else box
        if box_e is not None:
            in_be = box_e[0] < x <= m.a and 0.0 <= y < box_e[1]
    return RegionFlags(in_a, in_ae, in_a1, in_a2, in_b, in_be)


def grad_norm(p, mu, m: ModelParams) -> float:
    return float(np.hypot(*gradient(p, mu, SecondMoment.population(m))))
