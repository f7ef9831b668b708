"""Bivariate linear SEM, least-squares score, acyclicity penalty and the
penalized objective g_mu = mu * f + h.

The graph has two nodes. X1 = N1 and X2 = a * X1 + N2 with unit-variance
noise, and the candidate adjacency matrix is W(x, y) = [[0, x], [y, 0]].
All losses are evaluated through the second-moment matrix of X, so a
population loss and an empirical loss share one code path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DomainError

NOISE_KINDS = ("gaussian", "uniform")


def _finite(name, value):
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return value


def check_mu(mu, allow_zero=False):
    """Validate a penalty weight and return it as float."""
    mu = _finite("mu", mu)
    if mu < 0 or (mu == 0 and not allow_zero):
        raise DomainError(f"mu must be positive, got {mu!r}")
    return mu


@dataclass(frozen=True)
class ModelParams:
    """Ground-truth edge weight ``a`` of the SEM X2 = a X1 + N2."""

    a: float

    def __post_init__(self):
        a = _finite("a", self.a)
        if a <= 0:
            raise DomainError(f"a must be positive, got {a!r}")
        object.__setattr__(self, "a", a)

    @property
    def w_global(self) -> "Point":
        return Point(self.a, 0.0)

    @property
    def y_spurious(self) -> float:
        # limit of the spurious minimum on the y axis
        return self.a / (self.a * self.a + 1.0)

    @property
    def w_spurious(self) -> "Point":
        return Point(0.0, self.y_spurious)


class Point(NamedTuple):
    """Parameter pair (x, y), i.e. W(x, y) = [[0, x], [y, 0]]."""

    x: float
    y: float

    @classmethod
    def of(cls, x, y) -> "Point":
        return cls(_finite("x", x), _finite("y", y))

    def matrix(self) -> np.ndarray:
        return np.array([[0.0, self.x], [self.y, 0.0]])


@dataclass(frozen=True)
class SecondMoment:
    """Entries of E[X X^T] (or its sample analogue).

    ``n`` is None for population moments and the sample count otherwise.
    """

    s11: float
    s12: float
    s22: float
    n: Optional[int] = None
    a: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("s11", "s12", "s22"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        s11, s12, s22 = self.s11, self.s12, self.s22
        scale = max(1.0, s11 * s22)
        if s11 < 0 or s22 < 0 or s11 * s22 - s12 * s12 < -1e-12 * scale:
            raise DomainError("second-moment matrix is not positive semidefinite")
        if self.n is not None and self.n < 1:
            raise DomainError("sample count must be positive")

    @property
    def origin(self) -> str:
        return "population" if self.n is None else "empirical"

    @classmethod
    def population(cls, m: ModelParams) -> "SecondMoment":
        a = m.a
        return cls(1.0, a, a * a + 1.0, None, a)

    @classmethod
    def from_rows(cls, rows) -> "SecondMoment":
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
            raise DomainError("rows must be an (n, 2) array with n >= 1")
        if not np.all(np.isfinite(arr)):
            raise DomainError("rows contain non-finite values")
        n = arr.shape[0]
        # E[N] = 0 is assumed by the model, so moments are not centred
        s = arr.T @ arr / n
        return cls(float(s[0, 0]), float(s[0, 1]), float(s[1, 1]), n)

    @classmethod
    def from_dataset(cls, ds: "Dataset") -> "SecondMoment":
        return cls.from_rows(ds.rows)

    def to_dict(self) -> dict:
        return {"s11": self.s11, "s12": self.s12, "s22": self.s22,
                "origin": self.origin, "n": self.n}


def population_loss(p, m: ModelParams) -> float:
    x, y = p
    a = m.a
    return 0.5 * ((1.0 - a * y) ** 2 + y * y + (a - x) ** 2 + 1.0)


def loss_from_moments(p, sm: SecondMoment) -> float:
    """Half the expected squared residual of X - W^T X."""
    x, y = p
    r1 = sm.s11 - 2.0 * y * sm.s12 + y * y * sm.s22
    r2 = sm.s22 - 2.0 * x * sm.s12 + x * x * sm.s11
    return 0.5 * (r1 + r2)


def acyclicity_penalty(p) -> float:
    x, y = p
    return 0.5 * x * x * y * y


def penalized_objective(p, mu, loss: SecondMoment) -> float:
    return mu * loss_from_moments(p, loss) + acyclicity_penalty(p)


def gradient(p, mu, loss: SecondMoment) -> tuple[float, float]:
    x, y = p
    gx = mu * (x * loss.s11 - loss.s12) + x * y * y
    gy = mu * (y * loss.s22 - loss.s12) + y * x * x
    return gx, gy


def hessian(p, mu, loss: SecondMoment) -> np.ndarray:
    x, y = p
    off = 2.0 * x * y
    return np.array([[mu * loss.s11 + y * y, off],
                     [off, mu * loss.s22 + x * x]])


def smoothness_bound(mu, m: ModelParams) -> float:
    """Lipschitz constant of grad g_mu on the box [-a, a]^2."""
    a2 = m.a * m.a
    return mu * (a2 + 1.0) + 3.0 * a2


@dataclass(frozen=True)
class PenalizedObjective:
    """g_mu bound to a fixed weight and loss; the solvers consume this."""

    mu: float
    loss: SecondMoment

    def __post_init__(self):
        object.__setattr__(self, "mu", check_mu(self.mu, allow_zero=True))

    def f(self, x, y):
        return loss_from_moments((x, y), self.loss)

    def h(self, x, y):
        return 0.5 * x * x * y * y

    def value(self, x, y):
        s = self.loss
        r1 = s.s11 - 2.0 * y * s.s12 + y * y * s.s22
        r2 = s.s22 - 2.0 * x * s.s12 + x * x * s.s11
        return 0.5 * (self.mu * (r1 + r2) + x * x * y * y)

    def rounding_scale(self, x, y):
        """Sum of the magnitudes of the terms summed in value(); bounds its rounding error."""
        s = self.loss
        r1 = s.s11 + abs(2.0 * y * s.s12) + y * y * s.s22
        r2 = s.s22 + abs(2.0 * x * s.s12) + x * x * s.s11
        return 0.5 * (self.mu * (r1 + r2) + x * x * y * y)

    def grad(self, x, y):
        s, mu = self.loss, self.mu
        return (mu * (x * s.s11 - s.s12) + x * y * y,
                mu * (y * s.s22 - s.s12) + y * x * x)

    def hessian(self, x, y):
        return hessian((x, y), self.mu, self.loss)


@dataclass(frozen=True)
class Dataset:
    rows: np.ndarray
    seed: Optional[int] = None
    noise_kind: str = "gaussian"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != 2 or rows.shape[0] == 0:
            raise DomainError("dataset rows must be a nonempty (n, 2) array")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return self.rows.shape[0]

    def moments(self) -> SecondMoment:
        return SecondMoment.from_rows(self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2"])
            for x1, x2 in self.rows:
                w.writerow([fmt(x1), fmt(x2)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read a ``x1,x2`` CSV. Malformed rows raise DomainError naming the line."""
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["x1", "x2"]:
                raise DomainError("line 1: expected header 'x1,x2'")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != 2:
                    raise DomainError(f"line {line}: expected 2 fields, got {len(row)}")
                try:
                    vals = [float(v) for v in row]
                except ValueError:
                    raise DomainError(f"line {line}: non-numeric value") from None
                if not all(math.isfinite(v) for v in vals):
                    raise DomainError(f"line {line}: non-finite value")
                rows.append(vals)
        if not rows:
            raise DomainError("dataset has no rows")
        return cls(np.array(rows))


def fmt(v) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(v), ".17g")


def sample_sem(m: ModelParams, n: int, noise_kind: str = "gaussian", seed: int = 0) -> Dataset:
    """Draw n samples of (X1, X2) with zero-mean unit-variance noise."""
    if int(n) != n or n < 2:
        raise DomainError(f"n must be an integer >= 2, got {n!r}")
    if noise_kind not in NOISE_KINDS:
        raise DomainError(f"noise_kind must be one of {NOISE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(n)
    if noise_kind == "gaussian":
        noise = rng.standard_normal((n, 2))
    else:
        r3 = math.sqrt(3.0)
        noise = rng.uniform(-r3, r3, size=(n, 2))
    x1 = noise[:, 0]
    x2 = m.a * x1 + noise[:, 1]
    return Dataset(np.column_stack([x1, x2]), seed=seed, noise_kind=noise_kind)


class OracleResult(NamedTuple):
    point: Point
    score: float
    edge: str  # "x" means X1 -> X2, "y" means X2 -> X1
    loser: Point
    loser_score: float


def enumeration_oracle(loss: SecondMoment) -> OracleResult:
    """Fit the score under each of the two DAGs and keep the better one."""
    s11, s12, s22 = loss.s11, loss.s12, loss.s22
    # y = 0: residual of X2 on X1, best x = s12 / s11
    x_hat = s12 / s11 if s11 > 0 else 0.0
    px = Point(x_hat, 0.0)
    # x = 0: residual of X1 on X2, best y = s12 / s22
    y_hat = s12 / s22 if s22 > 0 else 0.0
    py = Point(0.0, y_hat)
    fx, fy = loss_from_moments(px, loss), loss_from_moments(py, loss)
    if fx <= fy:
        return OracleResult(px, fx, "x", py, fy)
    return OracleResult(py, fy, "y", px, fx)


def global_target(loss: SecondMoment, m: Optional[ModelParams] = None) -> Point:
    """Reference optimum: (a, 0) for population moments, the oracle winner otherwise."""
    if loss.n is None and m is not None:
        return m.w_global
    return enumeration_oracle(loss).point
