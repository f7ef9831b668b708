"""Path following over a decreasing sequence of penalty weights.

Each stage minimizes g_mu for the current mu, warm-started from the end of
the previous stage. Schedules:

* ``theory``     mu_{k+1} = (2/a)^(2/3) mu_k^(4/3), needs the true a
* ``practical``  mu_0 = 1/27 and mu_{k+1} = (2/sqrt(5 mu_0))^(2/3) mu_k^(4/3)
* ``ahat``       the theory rule with a replaced by a_hat = sqrt(4 (mu_0 + eps))
* ``gd``         the eps-aware rule paired with gradient descent stages
* ``custom``     a fixed decay factor or a user function; needs ``force``
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .dynamics import DescentOptions, FlowOptions, SolveResult, gradient_descent, gradient_flow
from .errors import AdmissibilityError, DomainError, NumericFailure
from .model import (ModelParams, PenalizedObjective, Point, SecondMoment, check_mu, fmt,
                    global_target, smoothness_bound)
from .stationary import y_curvature_bounds

log = logging.getLogger(__name__)

KINDS = ("theory", "practical", "ahat", "gd", "custom")
PRACTICAL_MU0 = 1.0 / 27.0


def theory_interval(a) -> tuple[float, float]:
    """[lower, upper) for mu_0 under the exponent-4/3 rule."""
    a2 = a * a
    return a2 / (4.0 * (a2 + 1.0) ** 3), a2 / 4.0


def gd_interval(a, beta, delta) -> tuple[float, float]:
    a2 = a * a
    lo = a2 * (1 + beta) ** 4 / (4.0 * (a2 + 1.0) ** 3 * (1 - beta) ** 2)
    hi = a2 * (1 - delta) ** 3 * (1 - beta) ** 4 / (4.0 * (1 + beta) ** 2)
    return lo, hi


@dataclass(frozen=True)
class Schedule:
    """A mu-sequence policy.

    ``a`` is the edge weight the rule uses (theory, gd). For ``ahat`` it is
    only used to check admissibility and may be None. ``decay`` is the
    custom divisor (mu_{k+1} = mu_k / decay); ``step_fn`` overrides it.
    """

    kind: str
    mu0: float
    a: Optional[float] = None
    beta: Optional[float] = None
    delta: Optional[float] = None
    eps: Optional[float] = None
    decay: Optional[float] = None
    step_fn: Optional[Callable[[float], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"schedule kind must be one of {KINDS}")
        object.__setattr__(self, "mu0", check_mu(self.mu0))
        if self.kind in ("theory", "gd") and self.a is None:
            raise DomainError(f"{self.kind} schedule needs a")
        if self.a is not None:
            ModelParams(self.a)
        if self.kind == "gd":
            for name in ("beta", "delta"):
                v = getattr(self, name)
                if v is None or not 0.0 < v < 1.0:
                    raise DomainError(f"{name} must lie in (0, 1)")
        if self.kind == "ahat":
            eps = 0.01 * self.mu0 if self.eps is None else float(self.eps)
            if eps < 0:
                raise DomainError("eps must be nonnegative")
            object.__setattr__(self, "eps", eps)
        if self.kind == "custom":
            if self.step_fn is None:
                if self.decay is None or not self.decay > 1.0:
                    raise DomainError("custom schedule needs decay > 1 or step_fn")

    @classmethod
    def theory(cls, a, mu0=None):
        if mu0 is None:
            lo, hi = theory_interval(a)
            mu0 = 0.5 * (lo + hi)
        return cls("theory", mu0, a=a)

    @classmethod
    def practical(cls, a=None):
        return cls("practical", PRACTICAL_MU0, a=a)

    @classmethod
    def ahat(cls, mu0, eps=None, a=None):
        return cls("ahat", mu0, a=a, eps=eps)

    @classmethod
    def gd(cls, a, beta, delta, mu0):
        return cls("gd", mu0, a=a, beta=beta, delta=delta)

    @classmethod
    def custom(cls, mu0, decay=None, step_fn=None, a=None):
        return cls("custom", mu0, a=a, decay=decay, step_fn=step_fn)

    @property
    def a_hat(self) -> Optional[float]:
        if self.kind != "ahat":
            return None
        return math.sqrt(4.0 * (self.mu0 + self.eps))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "mu0": self.mu0}
        for name in ("a", "beta", "delta", "eps", "decay"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.kind == "ahat":
            d["a_hat"] = self.a_hat
        if self.step_fn is not None:
            d["step_fn"] = getattr(self.step_fn, "__name__", "callable")
        return d


@dataclass(frozen=True)
class Admissibility:
    ok: Optional[bool]
    lower: Optional[float]
    upper: Optional[float]
    reason: str = ""

    def __bool__(self):
        return bool(self.ok)


def validate_mu0(sched: Schedule, m: Optional[ModelParams] = None) -> Admissibility:
    """Check mu_0 (and kind-specific parameters) against the admissible range.

    ``ok`` is None when the check needs the true a and none is known.
    """
    a = m.a if m is not None else sched.a
    mu0 = sched.mu0
    kind = sched.kind
    if kind == "gd":
        a = sched.a if m is None else m.a
        lo, hi = gd_interval(a, sched.beta, sched.delta)
        ratio = ((1 + sched.beta) / (1 - sched.beta)) ** 2
        if ratio > (1 - sched.delta) * (a * a + 1):
            return Admissibility(False, lo, hi, "((1+beta)/(1-beta))^2 exceeds (1-delta)(a^2+1)")
        if not lo <= mu0 < hi:
            return Admissibility(False, lo, hi, f"mu0={mu0:g} outside [{lo:.6g}, {hi:.6g})")
        return Admissibility(True, lo, hi)
    if a is None:
        return Admissibility(None, None, None, "a unknown; range not checked")
    lo, hi = theory_interval(a)
    if kind == "custom":
        return Admissibility(False, lo, hi, "custom schedules carry no guarantee; use force")
    if kind == "practical":
        if mu0 != PRACTICAL_MU0:
            return Admissibility(False, lo, hi, "practical schedule fixes mu0 = 1/27")
        if a <= math.sqrt(5.0 / 27.0):
            return Admissibility(False, lo, hi, "practical schedule needs a > sqrt(5/27)")
    if not lo <= mu0 < hi:
        return Admissibility(False, lo, hi, f"mu0={mu0:g} outside [{lo:.6g}, {hi:.6g})")
    if kind == "ahat":
        if sched.eps <= 0:
            return Admissibility(False, lo, hi, "eps = 0 gives mu_1 = mu_0, the sequence stalls")
        if sched.a_hat >= a:
            return Admissibility(False, lo, hi, "a_hat = sqrt(4(mu0+eps)) must be below a")
    return Admissibility(True, lo, hi)


def certified_interval(mu_k, m: ModelParams) -> Optional[tuple[float, float]]:
    """[y_lb(mu_k)^2, mu_k): next weights that keep W* tracked, or None."""
    b = y_curvature_bounds(mu_k, m)
    if b is None:
        return None
    return b.lower * b.lower, mu_k


def is_certified_step(mu_k, mu_next, m: ModelParams) -> Optional[bool]:
    iv = certified_interval(mu_k, m)
    if iv is None:
        return None
    return iv[0] <= mu_next < iv[1]


def next_mu(sched: Schedule, mu_k, eps_k=None) -> float:
    mu_k = check_mu(mu_k)
    kind = sched.kind
    if kind == "theory":
        return (2.0 / sched.a) ** (2.0 / 3.0) * mu_k ** (4.0 / 3.0)
    if kind == "practical":
        return (2.0 / math.sqrt(5.0 * PRACTICAL_MU0)) ** (2.0 / 3.0) * mu_k ** (4.0 / 3.0)
    if kind == "ahat":
        return (2.0 / sched.a_hat) ** (2.0 / 3.0) * mu_k ** (4.0 / 3.0)
    if kind == "gd":
        if eps_k is None:
            raise DomainError("gd schedule needs eps_k")
        a = sched.a
        r = eps_k / mu_k
        if eps_k >= a * mu_k:
            raise DomainError("gd update needs eps_k < a mu_k")
        return (2.0 * mu_k * mu_k) ** (2.0 / 3.0) * (a + r) ** (2.0 / 3.0) / (a - r) ** (4.0 / 3.0)
    if sched.step_fn is not None:
        return float(sched.step_fn(mu_k))
    return mu_k / sched.decay


def gd_stage_params(mu_k, m: ModelParams, beta) -> tuple[float, float]:
    """(eps_k, eta_k) = (min(beta a mu_k, mu_k^1.5), 1/L_k)."""
    mu_k = check_mu(mu_k)
    if not 0.0 < beta < 1.0:
        raise DomainError("beta must lie in (0, 1)")
    eps = min(beta * m.a * mu_k, mu_k ** 1.5)
    return eps, 1.0 / smoothness_bound(mu_k, m)


def outer_iteration_bound(mu0, a, delta, beta, eps_dist) -> int:
    """Number of outer gd stages after which the distance is at most eps_dist."""
    a2 = a * a
    e2 = eps_dist * eps_dist
    terms = (
        math.log(mu0 / (beta * beta * a2)),
        math.log(72.0 * mu0 / (a2 * (1.0 - 0.5 ** 0.25))),
        math.log(3.0 * (4.0 - delta) * mu0 / e2),
        0.5 * math.log(46656.0 * mu0 * mu0 / (a2 * e2)),
        math.log(46656.0 * mu0 ** 3 / (a2 * a2 * e2)) / 3.0,
    )
    k = max(terms) / math.log(1.0 / (1.0 - delta))
    return max(0, math.ceil(k))


def total_step_bound(mu0, a, delta, beta, eps_dist, g0) -> float:
    """Upper bound on the total number of gradient steps over all gd stages.

    ``g0`` is g_{mu_0} at the first stage's output.
    """
    a2 = a * a
    inner = max(3.0 * (4.0 - delta) / eps_dist ** 2, 216.0 / (a * eps_dist),
                (216.0 / (a * eps_dist)) ** (2.0 / 3.0), 1.0 / (beta * beta * a2),
                72.0 / ((1.0 - 0.5 ** 0.25) * a2))
    return 2.0 * (mu0 * (a2 + 1.0) + 3.0 * a2) * (1.0 / (beta * a) ** 6 + inner ** 3) * g0


def distance_to_global(p, m: ModelParams) -> float:
    return math.hypot(p[0] - m.a, p[1])


@dataclass(frozen=True)
class StopRule:
    mu_floor: float = 1e-12
    max_stages: int = 200
    dist_tol: Optional[float] = None


@dataclass
class StageRecord:
    k: int
    mu: float
    eps: Optional[float]
    eta: Optional[float]
    start: Point
    end: Point
    inner_steps: int
    grad_norm: float
    converged: bool
    g_start: float
    g_end: float
    dist_to_global: float
    certified: Optional[bool] = None
    descent_gap: Optional[float] = None
    perturbations: int = 0
    path: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"k": self.k, "mu": self.mu, "eps": self.eps, "eta": self.eta,
                "start": list(self.start), "end": list(self.end),
                "inner_steps": self.inner_steps, "grad_norm": self.grad_norm,
                "converged": self.converged, "g_start": self.g_start, "g_end": self.g_end,
                "dist_to_global": self.dist_to_global, "certified": self.certified,
                "descent_gap": self.descent_gap, "perturbations": self.perturbations}


@dataclass
class HomotopyReport:
    stages: list
    final: Point
    dist_to_global: float
    total_inner_steps: int
    stop_reason: str
    schedule: dict
    w0: Point
    target: Point
    admissible: Optional[bool]
    admissibility_note: str = ""
    forced: bool = False
    message: str = ""
    loss: Optional[dict] = None
    horizon: Optional[float] = None

    @property
    def mus(self):
        return [s.mu for s in self.stages]

    def to_dict(self) -> dict:
        return {"final": list(self.final), "dist_to_global": self.dist_to_global,
                "total_inner_steps": self.total_inner_steps, "stop_reason": self.stop_reason,
                "schedule": self.schedule, "w0": list(self.w0), "target": list(self.target),
                "admissible": self.admissible, "admissibility_note": self.admissibility_note,
                "forced": self.forced, "message": self.message, "loss": self.loss,
                "horizon": self.horizon,
                "n_stages": len(self.stages), "stages": [s.to_dict() for s in self.stages]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def trajectory_rows(self, loss: SecondMoment):
        """Rows of the concatenated per-stage trajectory."""
        tx, ty = self.target
        for s in self.stages:
            obj = PenalizedObjective(s.mu, loss)
            path = s.path
            if path is None:
                path = np.array([[0.0, s.start.x, s.start.y],
                                 [float(s.inner_steps), s.end.x, s.end.y]])
            for step, (_, x, y) in enumerate(path):
                gx, gy = obj.grad(x, y)
                yield (s.k, s.mu, s.eps, s.eta, step, x, y, obj.f(x, y), obj.h(x, y),
                       obj.value(x, y), math.hypot(gx, gy), math.hypot(x - tx, y - ty))

    def write_trajectory_csv(self, path, loss: SecondMoment, header_comment: Optional[str] = None):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "mu", "eps", "eta", "step", "x", "y", "f", "h", "g",
                        "grad_norm", "dist_to_global"])
            for row in self.trajectory_rows(loss):
                k, mu, eps, eta, step = row[:5]
                w.writerow([k, fmt(mu), "" if eps is None else fmt(eps),
                            "" if eta is None else fmt(eta), step] + [fmt(v) for v in row[5:]])


def _prepare(sched, loss, m, force):
    adm = validate_mu0(sched, m)
    if adm.ok is False and not force:
        raise AdmissibilityError(adm.reason)
    if adm.ok is False:
        log.info("running inadmissible schedule (%s)", adm.reason)
    return adm


def _default_model(sched, loss):
    if loss.n is None and loss.a is not None:
        return ModelParams(loss.a)
    if sched.a is not None and loss.n is None:
        return ModelParams(sched.a)
    return None


def run_homotopy_flow(sched: Schedule, w0, loss: SecondMoment, stop: StopRule = StopRule(),
                      flow: FlowOptions = FlowOptions(), force: bool = False,
                      model: Optional[ModelParams] = None,
                      horizon: Optional[float] = None) -> HomotopyReport:
    """Gradient-flow path following from w0 under ``sched``.

    ``horizon`` caps each stage's integration time at horizon / mu_k, a fixed
    budget measured in the time scale of the mu f part. By default every
    stage runs until |grad g| <= flow.grad_tol.

    Raises AdmissibilityError for an inadmissible schedule unless ``force``.
    """
    if horizon is not None and not horizon > 0:
        raise DomainError("horizon must be positive")
    m = model or _default_model(sched, loss)
    adm = _prepare(sched, loss, m, force)
    target = global_target(loss, m)
    w = Point(float(w0[0]), float(w0[1]))
    start0 = w
    stages = []
    mu = sched.mu0
    prev_mu = None
    stop_reason, message = "failure", ""
    certified_all = True
    while True:
        obj = PenalizedObjective(mu, loss)
        opts = flow if horizon is None else replace(flow, max_time=min(flow.max_time, horizon / mu))
        try:
            res = gradient_flow(obj, w, opts)
        except NumericFailure as exc:
            stop_reason, message = "failure", str(exc)
            break
        cert = None
        if prev_mu is not None and m is not None:
            cert = is_certified_step(prev_mu, mu, m)
            if cert is False:
                certified_all = False
        end = res.point
        if not (math.isfinite(end.x) and math.isfinite(end.y)):
            stop_reason, message = "failure", "non-finite stage end"
            break
        stages.append(StageRecord(len(stages), mu, None, None, w, end, res.steps_taken,
                                  res.grad_norm, res.converged, res.g_start, res.g_end,
                                  math.hypot(end.x - target.x, end.y - target.y), cert,
                                  perturbations=res.perturbations, path=res.path))
        if not res.converged:
            log.debug("stage %d at mu=%.3e stopped by %s", len(stages) - 1, mu, res.stop_reason)
        w = end
        if stop.dist_tol is not None and stages[-1].dist_to_global <= stop.dist_tol:
            stop_reason = "dist_reached"
            break
        if len(stages) >= stop.max_stages:
            stop_reason = "stage_cap"
            break
        nxt = next_mu(sched, mu)
        if not (math.isfinite(nxt) and 0.0 <= nxt < mu):
            stop_reason, message = "failure", f"schedule did not decrease mu ({mu:g} -> {nxt:g})"
            break
        if nxt < stop.mu_floor:
            stop_reason = "mu_floor"
            break
        prev_mu, mu = mu, nxt
    report = _report(stages, w, start0, target, stop_reason, message, sched, adm, force,
                     certified_all, loss)
    report.horizon = horizon
    return report


def _report(stages, w, w0, target, stop_reason, message, sched, adm, force, certified_all, loss):
    admissible = adm.ok
    if sched.kind == "custom" and adm.lower is not None:
        # a custom run counts as admissible when mu0 and every step are certified
        admissible = adm.lower <= sched.mu0 < adm.upper and certified_all
    final = stages[-1].end if stages else w
    return HomotopyReport(stages, final, math.hypot(final.x - target.x, final.y - target.y),
                          sum(s.inner_steps for s in stages), stop_reason, sched.to_dict(),
                          w0, target, admissible, adm.reason, force, message, loss.to_dict())


def run_homotopy_gd(a, beta, delta, mu0, w0, stop: StopRule = StopRule(),
                    loss: Optional[SecondMoment] = None, force: bool = False,
                    max_iters: int = 50_000_000, record_path: bool = False,
                    record_every: int = 10) -> HomotopyReport:
    """Gradient-descent path following with eps_k, eta_k and the gd update."""
    m = ModelParams(a)
    sched = Schedule.gd(a, beta, delta, mu0)
    loss = SecondMoment.population(m) if loss is None else loss
    adm = _prepare(sched, loss, m, force)
    target = global_target(loss, m)
    w = Point(float(w0[0]), float(w0[1]))
    start0 = w
    stages = []
    mu = sched.mu0
    stop_reason, message = "failure", ""
    while True:
        eps, eta = gd_stage_params(mu, m, beta)
        opts = DescentOptions(eta, eps, max_iters, record_every, record_path)
        try:
            res = gradient_descent(PenalizedObjective(mu, loss), w, opts)
        except NumericFailure as exc:
            stop_reason, message = "failure", str(exc)
            if exc.last is not None:
                w = exc.last
            break
        end = res.point
        stages.append(StageRecord(len(stages), mu, eps, eta, w, end, res.steps_taken,
                                  res.grad_norm, res.converged, res.g_start, res.g_end,
                                  math.hypot(end.x - target.x, end.y - target.y),
                                  descent_gap=res.descent_gap, path=res.path))
        w = end
        if not res.converged:
            stop_reason, message = "failure", f"stage {len(stages) - 1} hit max_iters"
            break
        if stop.dist_tol is not None and stages[-1].dist_to_global <= stop.dist_tol:
            stop_reason = "dist_reached"
            break
        if len(stages) >= stop.max_stages:
            stop_reason = "stage_cap"
            break
        nxt = next_mu(sched, mu, eps)
        if not (math.isfinite(nxt) and 0.0 <= nxt < mu):
            stop_reason, message = "failure", f"schedule did not decrease mu ({mu:g} -> {nxt:g})"
            break
        if nxt < stop.mu_floor:
            stop_reason = "mu_floor"
            break
        mu = nxt
    return _report(stages, w, start0, target, stop_reason, message, sched, adm, force, True, loss)
