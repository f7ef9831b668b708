"""Inner solvers: gradient flow and fixed-step gradient descent.

The flow z' = -grad g(z) is integrated with the Dormand-Prince 5(4) pair.
Near the global branch the slow Hessian eigenvalue is about mu while the
fast one is about a^2, so late homotopy stages need many explicit steps.
For the penalized objective both solvers therefore run in compiled loops;
any other objective exposing ``value(x, y)`` and ``grad(x, y)`` goes
through an equivalent pure-Python loop.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import NumericFailure, PreconditionError
from .model import PenalizedObjective, Point, fmt

log = logging.getLogger(__name__)

# Dormand-Prince 5(4) tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# fifth-order minus embedded fourth-order weights
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920,
                          -17253 / 339200, 22 / 525, -1 / 40)

# slack allowed when checking that an accepted step did not raise g; the
# relative part covers rounding in g, whose terms can be far larger than g
MONOTONE_SLACK = 1e-13
ROUNDING_FACTOR = 16.0 * 2.220446049250313e-16
# plateau kicks only where det H < KICK_DET * (tr H)^2, i.e. not near a clear minimum
KICK_DET = 1e-6
# per-step position error is kept below this fraction of |grad g| / |H|_F
GRAD_ERR_FRACTION = 0.1

STOP_CONVERGED = 0
STOP_MAX_STEPS = 1
STOP_MAX_TIME = 2
STOP_NONFINITE = 3
STOP_STEP_UNDERFLOW = 4
_STOP_NAMES = {0: "converged", 1: "max_steps", 2: "max_time", 3: "nonfinite", 4: "step_underflow"}


@dataclass(frozen=True)
class FlowOptions:
    grad_tol: float = 1e-10
    max_time: float = 1e7
    rel_step_tol: float = 1e-9
    abs_step_tol: float = 1e-12
    max_steps: int = 20_000_000
    record_every: int = 10
    record_path: bool = False
    plateau_window: int = 1000
    plateau_drop: float = 1e-14
    perturbation: float = 1e-9

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise PreconditionError("grad_tol must be positive")
        if not self.max_time > 0:
            raise PreconditionError("max_time must be positive")
        if not self.rel_step_tol > 0 or not self.abs_step_tol > 0:
            raise PreconditionError("step tolerances must be positive")
        if self.max_steps < 1 or self.record_every < 1 or self.plateau_window < 1:
            raise PreconditionError("step counts must be >= 1")


@dataclass(frozen=True)
class DescentOptions:
    step: float
    eps: float
    max_iters: int = 50_000_000
    record_every: int = 10
    record_path: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise PreconditionError("step must be positive")
        if not self.eps > 0:
            raise PreconditionError("eps must be positive")
        if self.max_iters < 0 or self.record_every < 1:
            raise PreconditionError("max_iters must be >= 0 and record_every >= 1")


@dataclass
class SolveResult:
    """Outcome of one inner solve.

    ``path`` is an (k, 3) array of (t or iteration, x, y) rows when recorded.
    ``descent_gap`` is the largest g(w+) - g(w) + |grad g(w)|^2 / (2L) seen
    by gradient descent (it is <= 0 when the sufficient-decrease bound holds).
    """

    point: Point
    grad_norm: float
    steps_taken: int
    converged: bool
    path: Optional[np.ndarray] = None
    time: float = 0.0
    stop_reason: str = "converged"
    perturbations: int = 0
    g_start: float = math.nan
    g_end: float = math.nan
    descent_gap: float = -math.inf
    max_g_increase: float = 0.0

    def path_rows(self, objective):
        """Yield (step, t, x, y, f, h, g, grad_norm) for the recorded path."""
        if self.path is None:
            return
        for i, (t, x, y) in enumerate(self.path):
            gx, gy = objective.grad(x, y)
            yield (i, t, x, y, objective.f(x, y), objective.h(x, y),
                   objective.value(x, y), math.hypot(gx, gy))

    def write_path_csv(self, path, objective):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "x", "y", "f", "h", "g", "grad_norm"])
            for row in self.path_rows(objective):
                w.writerow([row[0]] + [fmt(v) for v in row[1:]])


# compiled kernels for g = mu f + h with moments (s11, s12, s22)

@njit(cache=True, nogil=True)
def _g(x, y, mu, s11, s12, s22):
    r1 = s11 - 2.0 * y * s12 + y * y * s22
    r2 = s22 - 2.0 * x * s12 + x * x * s11
    return 0.5 * (mu * (r1 + r2) + x * x * y * y)


@njit(cache=True, nogil=True)
def _g_scale(x, y, mu, s11, s12, s22):
    r1 = s11 + abs(2.0 * y * s12) + y * y * s22
    r2 = s22 + abs(2.0 * x * s12) + x * x * s11
    return 0.5 * (mu * (r1 + r2) + x * x * y * y)


@njit(cache=True, nogil=True)
def _hess_norm(x, y, mu, s11, s22):
    h11 = mu * s11 + y * y
    h22 = mu * s22 + x * x
    h12 = 2.0 * x * y
    return math.sqrt(h11 * h11 + h22 * h22 + 2.0 * h12 * h12)


@njit(cache=True, nogil=True)
def _kick_allowed(x, y, mu, s11, s22):
    h11 = mu * s11 + y * y
    h22 = mu * s22 + x * x
    h12 = 2.0 * x * y
    tr = h11 + h22
    return h11 * h22 - h12 * h12 < KICK_DET * tr * tr


@njit(cache=True, nogil=True)
def _gx(x, y, mu, s11, s12):
    return mu * (x * s11 - s12) + x * y * y


@njit(cache=True, nogil=True)
def _gy(x, y, mu, s12, s22):
    return mu * (y * s22 - s12) + y * x * x


@njit(cache=True, nogil=True)
def _grow(buf, n):
    if n < buf.shape[0]:
        return buf
    out = np.empty((2 * buf.shape[0], 3))
    out[:n] = buf[:n]
    return out


@njit(cache=True, nogil=True)
def _flow_kernel(x, y, mu, s11, s12, s22, grad_tol, max_time, rtol, atol,
                 max_steps, record, every, window, drop, kick):
    buf = np.empty((64 if record else 1, 3))
    nrec = 0
    t = 0.0
    k1x = -_gx(x, y, mu, s11, s12)
    k1y = -_gy(x, y, mu, s12, s22)
    gn = math.sqrt(k1x * k1x + k1y * k1y)
    g = _g(x, y, mu, s11, s12, s22)
    if record:
        buf[0, 0] = t
        buf[0, 1] = x
        buf[0, 2] = y
        nrec = 1
    max_inc = 0.0
    kicks = 0
    steps = 0
    if gn <= grad_tol:
        return x, y, t, gn, steps, STOP_CONVERGED, kicks, max_inc, buf[:nrec]
    h = min(1.0, 0.01 / gn)
    checkpoint = gn
    status = STOP_MAX_STEPS
    while steps < max_steps:
        if t >= max_time:
            status = STOP_MAX_TIME
            break
        if t + h > max_time:
            h = max_time - t
        if h <= 1e-300 or t + h == t:
            status = STOP_STEP_UNDERFLOW
            break
        x2 = x + h * A21 * k1x
        y2 = y + h * A21 * k1y
        k2x = -_gx(x2, y2, mu, s11, s12)
        k2y = -_gy(x2, y2, mu, s12, s22)
        x3 = x + h * (A31 * k1x + A32 * k2x)
        y3 = y + h * (A31 * k1y + A32 * k2y)
        k3x = -_gx(x3, y3, mu, s11, s12)
        k3y = -_gy(x3, y3, mu, s12, s22)
        x4 = x + h * (A41 * k1x + A42 * k2x + A43 * k3x)
        y4 = y + h * (A41 * k1y + A42 * k2y + A43 * k3y)
        k4x = -_gx(x4, y4, mu, s11, s12)
        k4y = -_gy(x4, y4, mu, s12, s22)
        x5 = x + h * (A51 * k1x + A52 * k2x + A53 * k3x + A54 * k4x)
        y5 = y + h * (A51 * k1y + A52 * k2y + A53 * k3y + A54 * k4y)
        k5x = -_gx(x5, y5, mu, s11, s12)
        k5y = -_gy(x5, y5, mu, s12, s22)
        x6 = x + h * (A61 * k1x + A62 * k2x + A63 * k3x + A64 * k4x + A65 * k5x)
        y6 = y + h * (A61 * k1y + A62 * k2y + A63 * k3y + A64 * k4y + A65 * k5y)
        k6x = -_gx(x6, y6, mu, s11, s12)
        k6y = -_gy(x6, y6, mu, s12, s22)
        xn = x + h * (B1 * k1x + B3 * k3x + B4 * k4x + B5 * k5x + B6 * k6x)
        yn = y + h * (B1 * k1y + B3 * k3y + B4 * k4y + B5 * k5y + B6 * k6y)
        if not (math.isfinite(xn) and math.isfinite(yn)):
            h *= 0.1
            continue
        k7x = -_gx(xn, yn, mu, s11, s12)
        k7y = -_gy(xn, yn, mu, s12, s22)
        ex = h * (E1 * k1x + E3 * k3x + E4 * k4x + E5 * k5x + E6 * k6x + E7 * k7x)
        ey = h * (E1 * k1y + E3 * k3y + E4 * k4y + E5 * k5y + E6 * k6y + E7 * k7y)
        # near convergence a position error e shows up as |H| e in the gradient
        cap = GRAD_ERR_FRACTION * max(gn, grad_tol) / _hess_norm(x, y, mu, s11, s22)
        sx = min(atol + rtol * max(abs(x), abs(xn)), cap)
        sy = min(atol + rtol * max(abs(y), abs(yn)), cap)
        err = math.sqrt(0.5 * ((ex / sx) ** 2 + (ey / sy) ** 2))
        gnew = _g(xn, yn, mu, s11, s12, s22)
        slack = MONOTONE_SLACK + ROUNDING_FACTOR * _g_scale(xn, yn, mu, s11, s12, s22)
        if err > 1.0 or gnew > g + slack:
            fac = 0.9 * err ** -0.2 if err > 1.0 else 0.5
            h *= max(0.1, min(0.5, fac))
            continue
        # accept
        t += h
        x = xn
        y = yn
        if gnew - g > max_inc:
            max_inc = gnew - g
        g = gnew
        k1x = k7x
        k1y = k7y
        steps += 1
        gn = math.sqrt(k1x * k1x + k1y * k1y)
        if record and steps % every == 0:
            buf = _grow(buf, nrec)
            buf[nrec, 0] = t
            buf[nrec, 1] = x
            buf[nrec, 2] = y
            nrec += 1
        if gn <= grad_tol:
            status = STOP_CONVERGED
            break
        if steps % window == 0:
            if checkpoint - gn < drop and _kick_allowed(x, y, mu, s11, s22):
                # stalled near a saddle or a degenerate point
                x -= kick
                kicks += 1
                k1x = -_gx(x, y, mu, s11, s12)
                k1y = -_gy(x, y, mu, s12, s22)
                g = _g(x, y, mu, s11, s12, s22)
                gn = math.sqrt(k1x * k1x + k1y * k1y)
            checkpoint = gn
        fac = 5.0 if err == 0.0 else 0.9 * err ** -0.2
        h *= max(0.2, min(5.0, fac))
    if record and (nrec == 0 or buf[nrec - 1, 0] != t):
        buf = _grow(buf, nrec)
        buf[nrec, 0] = t
        buf[nrec, 1] = x
        buf[nrec, 2] = y
        nrec += 1
    return x, y, t, gn, steps, status, kicks, max_inc, buf[:nrec]


@njit(cache=True, nogil=True)
def _descent_kernel(x, y, mu, s11, s12, s22, step, eps, max_iters, record, every):
    buf = np.empty((64 if record else 1, 3))
    nrec = 0
    L = 1.0 / step
    gx = _gx(x, y, mu, s11, s12)
    gy = _gy(x, y, mu, s12, s22)
    g = _g(x, y, mu, s11, s12, s22)
    gap = -np.inf
    if record:
        buf[0, 0] = 0.0
        buf[0, 1] = x
        buf[0, 2] = y
        nrec = 1
    it = 0
    status = STOP_MAX_STEPS
    while True:
        gn2 = gx * gx + gy * gy
        if math.sqrt(gn2) <= eps:
            status = STOP_CONVERGED
            break
        if it >= max_iters:
            break
        xn = x - step * gx
        yn = y - step * gy
        gnew = _g(xn, yn, mu, s11, s12, s22)
        if not (math.isfinite(xn) and math.isfinite(yn) and math.isfinite(gnew)):
            status = STOP_NONFINITE
            break
        d = gnew - g + gn2 / (2.0 * L)
        if d > gap:
            gap = d
        x = xn
        y = yn
        g = gnew
        gx = _gx(x, y, mu, s11, s12)
        gy = _gy(x, y, mu, s12, s22)
        it += 1
        if record and it % every == 0:
            buf = _grow(buf, nrec)
            buf[nrec, 0] = it
            buf[nrec, 1] = x
            buf[nrec, 2] = y
            nrec += 1
    if record and (nrec == 0 or buf[nrec - 1, 0] != it):
        buf = _grow(buf, nrec)
        buf[nrec, 0] = it
        buf[nrec, 1] = x
        buf[nrec, 2] = y
        nrec += 1
    return x, y, math.sqrt(gx * gx + gy * gy), it, status, gap, buf[:nrec]


# pure-Python versions for arbitrary objectives

def _python_error_cap(obj, x, y, gn, grad_tol):
    hess = getattr(obj, "hessian", None)
    if hess is None:
        return math.inf
    norm = float(np.linalg.norm(np.asarray(hess(x, y), dtype=float)))
    return GRAD_ERR_FRACTION * max(gn, grad_tol) / norm if norm > 0 else math.inf


def _python_kick_allowed(obj, x, y):
    hess = getattr(obj, "hessian", None)
    if hess is None:
        return True
    hm = np.asarray(hess(x, y), dtype=float)
    tr = hm[0, 0] + hm[1, 1]
    return hm[0, 0] * hm[1, 1] - hm[0, 1] * hm[1, 0] < KICK_DET * tr * tr


def _flow_python(obj, x, y, o: FlowOptions):
    grad, value = obj.grad, obj.value
    scale = getattr(obj, "rounding_scale", None)
    t = 0.0
    gx, gy = grad(x, y)
    k1x, k1y = -gx, -gy
    gn = math.hypot(k1x, k1y)
    g = value(x, y)
    rows = [(t, x, y)] if o.record_path else None
    max_inc, kicks, steps = 0.0, 0, 0
    if gn <= o.grad_tol:
        return x, y, t, gn, steps, STOP_CONVERGED, kicks, max_inc, rows
    h = min(1.0, 0.01 / gn)
    checkpoint = gn
    status = STOP_MAX_STEPS
    rtol, atol = o.rel_step_tol, o.abs_step_tol

    def f(px, py):
        ux, uy = grad(px, py)
        return -ux, -uy

    while steps < o.max_steps:
        if t >= o.max_time:
            status = STOP_MAX_TIME
            break
        h = min(h, o.max_time - t)
        if h <= 1e-300 or t + h == t:
            status = STOP_STEP_UNDERFLOW
            break
        k2x, k2y = f(x + h * A21 * k1x, y + h * A21 * k1y)
        k3x, k3y = f(x + h * (A31 * k1x + A32 * k2x), y + h * (A31 * k1y + A32 * k2y))
        k4x, k4y = f(x + h * (A41 * k1x + A42 * k2x + A43 * k3x),
                     y + h * (A41 * k1y + A42 * k2y + A43 * k3y))
        k5x, k5y = f(x + h * (A51 * k1x + A52 * k2x + A53 * k3x + A54 * k4x),
                     y + h * (A51 * k1y + A52 * k2y + A53 * k3y + A54 * k4y))
        k6x, k6y = f(x + h * (A61 * k1x + A62 * k2x + A63 * k3x + A64 * k4x + A65 * k5x),
                     y + h * (A61 * k1y + A62 * k2y + A63 * k3y + A64 * k4y + A65 * k5y))
        xn = x + h * (B1 * k1x + B3 * k3x + B4 * k4x + B5 * k5x + B6 * k6x)
        yn = y + h * (B1 * k1y + B3 * k3y + B4 * k4y + B5 * k5y + B6 * k6y)
        if not (math.isfinite(xn) and math.isfinite(yn)):
            h *= 0.1
            continue
        k7x, k7y = f(xn, yn)
        ex = h * (E1 * k1x + E3 * k3x + E4 * k4x + E5 * k5x + E6 * k6x + E7 * k7x)
        ey = h * (E1 * k1y + E3 * k3y + E4 * k4y + E5 * k5y + E6 * k6y + E7 * k7y)
        cap = _python_error_cap(obj, x, y, gn, o.grad_tol)
        sx = min(atol + rtol * max(abs(x), abs(xn)), cap)
        sy = min(atol + rtol * max(abs(y), abs(yn)), cap)
        err = math.sqrt(0.5 * ((ex / sx) ** 2 + (ey / sy) ** 2))
        gnew = value(xn, yn)
        slack = MONOTONE_SLACK + ROUNDING_FACTOR * (scale(xn, yn) if scale else abs(gnew))
        if err > 1.0 or gnew > g + slack:
            fac = 0.9 * err ** -0.2 if err > 1.0 else 0.5
            h *= max(0.1, min(0.5, fac))
            continue
        t += h
        x, y = xn, yn
        max_inc = max(max_inc, gnew - g)
        g = gnew
        k1x, k1y = k7x, k7y
        steps += 1
        gn = math.hypot(k1x, k1y)
        if rows is not None and steps % o.record_every == 0:
            rows.append((t, x, y))
        if gn <= o.grad_tol:
            status = STOP_CONVERGED
            break
        if steps % o.plateau_window == 0:
            if checkpoint - gn < o.plateau_drop and _python_kick_allowed(obj, x, y):
                x -= o.perturbation
                kicks += 1
                k1x, k1y = f(x, y)
                g = value(x, y)
                gn = math.hypot(k1x, k1y)
            checkpoint = gn
        fac = 5.0 if err == 0.0 else 0.9 * err ** -0.2
        h *= max(0.2, min(5.0, fac))
    if rows is not None and rows[-1][0] != t:
        rows.append((t, x, y))
    return x, y, t, gn, steps, status, kicks, max_inc, rows


def _descent_python(obj, x, y, o: DescentOptions):
    grad, value = obj.grad, obj.value
    L = 1.0 / o.step
    gx, gy = grad(x, y)
    g = value(x, y)
    gap = -math.inf
    rows = [(0.0, x, y)] if o.record_path else None
    it = 0
    status = STOP_MAX_STEPS
    while True:
        gn2 = gx * gx + gy * gy
        if math.sqrt(gn2) <= o.eps:
            status = STOP_CONVERGED
            break
        if it >= o.max_iters:
            break
        xn, yn = x - o.step * gx, y - o.step * gy
        gnew = value(xn, yn)
        if not (math.isfinite(xn) and math.isfinite(yn) and math.isfinite(gnew)):
            status = STOP_NONFINITE
            break
        gap = max(gap, gnew - g + gn2 / (2.0 * L))
        x, y, g = xn, yn, gnew
        gx, gy = grad(x, y)
        it += 1
        if rows is not None and it % o.record_every == 0:
            rows.append((float(it), x, y))
    if rows is not None and rows[-1][0] != it:
        rows.append((float(it), x, y))
    return x, y, math.hypot(gx, gy), it, status, gap, rows


def _moments(objective):
    if type(objective) is PenalizedObjective:
        s = objective.loss
        return objective.mu, s.s11, s.s12, s.s22
    return None


def _as_path(rows):
    if rows is None:
        return None
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def gradient_flow(objective, z0, opts: FlowOptions = FlowOptions()) -> SolveResult:
    """Follow z' = -grad g(z) from z0 until |grad g| <= grad_tol or the budget ends."""
    x, y = float(z0[0]), float(z0[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise PreconditionError("initial point must be finite")
    g0 = objective.value(x, y)
    mom = _moments(objective)
    if mom is not None:
        out = _flow_kernel(x, y, *mom, opts.grad_tol, opts.max_time, opts.rel_step_tol,
                           opts.abs_step_tol, opts.max_steps, opts.record_path,
                           opts.record_every, opts.plateau_window, opts.plateau_drop,
                           opts.perturbation)
        xe, ye, t, gn, steps, status, kicks, max_inc, buf = out
        path = np.array(buf) if opts.record_path else None
    else:
        xe, ye, t, gn, steps, status, kicks, max_inc, rows = _flow_python(objective, x, y, opts)
        path = _as_path(rows)
    if kicks:
        log.info("gradient flow: %d plateau perturbation(s) of %.1e in -x", kicks, opts.perturbation)
    return SolveResult(Point(xe, ye), gn, int(steps), status == STOP_CONVERGED, path, t,
                       _STOP_NAMES[int(status)], int(kicks), g0, objective.value(xe, ye),
                       max_g_increase=max_inc)


def gradient_descent(objective, w0, opts: DescentOptions) -> SolveResult:
    """Fixed-step descent w <- w - step * grad g(w) until |grad g| <= eps.

    Raises NumericFailure, carrying the last finite iterate, if an iterate
    or its objective value stops being finite.
    """
    x, y = float(w0[0]), float(w0[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise PreconditionError("initial point must be finite")
    g0 = objective.value(x, y)
    mom = _moments(objective)
    if mom is not None:
        xe, ye, gn, it, status, gap, buf = _descent_kernel(
            x, y, *mom, opts.step, opts.eps, opts.max_iters, opts.record_path, opts.record_every)
        path = np.array(buf) if opts.record_path else None
    else:
        xe, ye, gn, it, status, gap, rows = _descent_python(objective, x, y, opts)
        path = _as_path(rows)
    if status == STOP_NONFINITE:
        raise NumericFailure(f"gradient descent diverged after {it} iterations",
                             last=Point(xe, ye), steps=int(it))
    return SolveResult(Point(xe, ye), gn, int(it), status == STOP_CONVERGED, path, float(it),
                       _STOP_NAMES[int(status)], 0, g0, objective.value(xe, ye), descent_gap=gap)
