"""Optimal control problem instances and the three layer benchmarks.

All coefficient functions take an ``(n, 2)`` numpy array of points and
return arrays (``(n,)`` for scalars, ``(n, 2)`` for the convection field).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from scipy.stats import qmc

from .errors import ConfigError, DomainError
from .netcore import NetEval

Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RectDomain:
    lower: tuple[float, float] = (0.0, 0.0)
    upper: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if not all(u > l for l, u in zip(self.lower, self.upper)):
            raise ConfigError(f"degenerate domain {self.lower} -> {self.upper}")

    @property
    def area(self) -> float:
        return (self.upper[0] - self.lower[0]) * (self.upper[1] - self.lower[1])

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.atleast_2d(x)
        lo, hi = np.array(self.lower), np.array(self.upper)
        if closed:
            return np.all((x >= lo) & (x <= hi), axis=1)
        return np.all((x > lo) & (x < hi), axis=1)

    def scale(self, unit_points: np.ndarray) -> np.ndarray:
        """Map points of the unit square affinely onto the domain."""
        lo, hi = np.array(self.lower), np.array(self.upper)
        return lo + np.asarray(unit_points) * (hi - lo)


def _const(value: float) -> Field:
    return lambda x: np.full(np.atleast_2d(x).shape[0], float(value))


def constant_field(vec) -> tuple[Field, Field]:
    """Constant convection field and its (zero) divergence."""
    v = np.asarray(vec, dtype=float)
    return (lambda x: np.broadcast_to(v, np.atleast_2d(x).shape).copy()), _const(0.0)


@dataclass
class ProblemSpec:
    """``min 1/2|y - y_d|^2 + beta/2 |u|^2`` subject to ``L y = f + u``.

    ``g_y`` and ``g_p`` are Dirichlet traces of state and adjoint (zero for
    homogeneous problems).
    """

    domain: RectDomain
    eps: float
    zeta: Field
    div_zeta: Field
    c: Field
    f: Field
    y_d: Field
    beta: float = 1.0
    g_y: Field = field(default_factory=lambda: _const(0.0))
    g_p: Field = field(default_factory=lambda: _const(0.0))
    c0: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        for key in ("eps", "beta", "c0"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")


def _like(values: np.ndarray, ref):
    return torch.as_tensor(values, dtype=ref.dtype) if isinstance(ref, torch.Tensor) else values


def _points(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    return np.atleast_2d(np.asarray(x, dtype=float))


def _maybe_scalar(out, x):
    if not isinstance(out, torch.Tensor) and np.ndim(x) == 1:
        return float(np.asarray(out).reshape(-1)[0])
    return out


def op_L(spec: ProblemSpec, y_eval: NetEval, x):
    """``-eps*lap(y) + zeta.grad(y) + c*y``."""
    xp = _points(x)
    grad = y_eval.grad
    zeta = _like(spec.zeta(xp), grad)
    if not isinstance(grad, torch.Tensor):
        grad = np.atleast_2d(grad)
    out = -spec.eps * y_eval.laplacian + (zeta * grad).sum(1) + _like(spec.c(xp), grad) * y_eval.value
    return _maybe_scalar(out, x)


def op_Lstar(spec: ProblemSpec, p_eval: NetEval, x):
    """Formal adjoint: ``-eps*lap(p) - zeta.grad(p) + (c - div zeta)*p``."""
    xp = _points(x)
    grad = p_eval.grad
    zeta = _like(spec.zeta(xp), grad)
    if not isinstance(grad, torch.Tensor):
        grad = np.atleast_2d(grad)
    react = _like(spec.c(xp) - spec.div_zeta(xp), grad)
    out = -spec.eps * p_eval.laplacian - (zeta * grad).sum(1) + react * p_eval.value
    return _maybe_scalar(out, x)


@dataclass(frozen=True)
class WellposednessReport:
    passed: bool
    min_value: float
    c0: float
    n_samples: int


def check_wellposedness(spec: ProblemSpec, n_samples: int = 1024, seed: int = 0) -> WellposednessReport:
    """Check ``c - div(zeta)/2 >= c0`` on scrambled Halton points."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    pts = spec.domain.scale(qmc.Halton(d=2, scramble=True, seed=seed).random(n_samples))
    m = float(np.min(spec.c(pts) - 0.5 * spec.div_zeta(pts)))
    return WellposednessReport(m >= spec.c0, m, spec.c0, n_samples)


# --- layer profile of the exponential boundary-layer benchmark ------------

def _eta_parts(z, eps):
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    z = np.asarray(z, dtype=float)
    tail = np.exp(-1.0 / eps)
    # exp((z-1)/eps) has a nonpositive argument on [0, 1]; same expression at z=1
    # as the denominator so eta(1) cancels exactly
    e = np.exp((z - 1.0) / eps)
    denom = np.exp(0.0) - tail
    return z, e, tail, denom


def eta(z, eps):
    z, e, tail, denom = _eta_parts(z, eps)
    return z ** 3 - (e - tail) / denom


def eta_d1(z, eps):
    z, e, _, denom = _eta_parts(z, eps)
    return 3.0 * z ** 2 - e / (eps * denom)


def eta_d2(z, eps):
    z, e, _, denom = _eta_parts(z, eps)
    return 6.0 * z - e / (eps ** 2 * denom)


class BenchmarkId(str, enum.Enum):
    EXP_BOUNDARY_LAYER = "exp-boundary-layer"
    INTERIOR_LAYER = "interior-layer"
    PARABOLIC_LAYERS = "parabolic-layers"

    @classmethod
    def parse(cls, name) -> "BenchmarkId":
        try:
            return cls(name)
        except ValueError:
            choices = ", ".join(b.value for b in cls)
            raise ConfigError(f"unknown benchmark {name!r} (choose from {choices})") from None


def exact_fields(bid: BenchmarkId, x, eps: float) -> Optional[tuple[NetEval, NetEval]]:
    """Closed-form state and adjoint with their gradients and Laplacians.

    Returns None when no closed form exists.
    """
    bid = BenchmarkId(bid)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2 = x[:, 0], x[:, 1]
    if bid is BenchmarkId.EXP_BOUNDARY_LAYER:
        a, b = eta(x1, eps), eta(x2, eps)
        da, db = eta_d1(x1, eps), eta_d1(x2, eps)
        dda, ddb = eta_d2(x1, eps), eta_d2(x2, eps)
        y = NetEval(a * b, np.stack([da * b, a * db], 1), dda * b + a * ddb)
        r1, r2 = 1.0 - x1, 1.0 - x2
        a, b = eta(r1, eps), eta(r2, eps)
        da, db = eta_d1(r1, eps), eta_d1(r2, eps)
        dda, ddb = eta_d2(r1, eps), eta_d2(r2, eps)
        p = NetEval(a * b, np.stack([-da * b, -a * db], 1), dda * b + a * ddb)
        return y, p
    if bid is BenchmarkId.INTERIOR_LAYER:
        s = (x2 - 0.5) / eps
        atan = np.arctan(s)
        w = 1.0 - x1
        y = NetEval(
            w ** 3 * atan,
            np.stack([-3.0 * w ** 2 * atan, w ** 3 / (eps * (1.0 + s * s))], 1),
            6.0 * w * atan - 2.0 * s * w ** 3 / (eps ** 2 * (1.0 + s * s) ** 2),
        )
        q1, q2 = x1 * (1.0 - x1), x2 * (1.0 - x2)
        p = NetEval(
            q1 * q2,
            np.stack([(1.0 - 2.0 * x1) * q2, q1 * (1.0 - 2.0 * x2)], 1),
            -2.0 * q2 - 2.0 * q1,
        )
        return y, p
    return None


def exact_solution(bid: BenchmarkId, x, eps: float):
    """``(y, p)`` at ``x`` (arrays for a batch, floats for one point) or None."""
    out = exact_fields(bid, x, eps)
    if out is None:
        return None
    y, p = out[0].value, out[1].value
    if np.ndim(x) == 1:
        return float(y[0]), float(p[0])
    return y, p


UNIT_SQUARE = RectDomain((0.0, 0.0), (1.0, 1.0))

_CONVECTION = {
    BenchmarkId.EXP_BOUNDARY_LAYER: (np.sqrt(2.0) / 2.0, np.sqrt(2.0) / 2.0),
    BenchmarkId.INTERIOR_LAYER: (1.0, 0.0),
    BenchmarkId.PARABOLIC_LAYERS: (1.0, 0.0),
}

# (state center at outflow, adjoint/control center at inflow)
DEFAULT_CENTERS = {
    BenchmarkId.EXP_BOUNDARY_LAYER: ((1.0, 1.0), (0.0, 0.0)),
    BenchmarkId.INTERIOR_LAYER: ((1.0, 0.5), (0.0, 0.5)),
    BenchmarkId.PARABOLIC_LAYERS: ((1.0, 0.5), (0.0, 0.5)),
}

DEFAULT_BOUNDARY_DIST = {
    BenchmarkId.EXP_BOUNDARY_LAYER: "beta-half",
    BenchmarkId.INTERIOR_LAYER: "uniform",
    BenchmarkId.PARABOLIC_LAYERS: "uniform",
}


def make_benchmark(bid, eps: float, beta: float = 1.0) -> ProblemSpec:
    """Problem data for one benchmark.

    With a closed-form pair, ``f`` and ``y_d`` are manufactured so the pair
    solves the optimality system exactly, and the Dirichlet traces are the
    exact traces.
    """
    bid = BenchmarkId.parse(bid) if isinstance(bid, str) else bid
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    zeta, div_zeta = constant_field(_CONVECTION[bid])
    c = _const(1.0)
    common = dict(domain=UNIT_SQUARE, eps=eps, zeta=zeta, div_zeta=div_zeta, c=c,
                  beta=beta, c0=1.0, name=bid.value)
    if bid is BenchmarkId.PARABOLIC_LAYERS:
        return ProblemSpec(f=_const(1.0), y_d=_const(1.0), **common)

    # coefficients are needed to manufacture the data, so build a shell first
    shell = ProblemSpec(f=_const(0.0), y_d=_const(0.0), **common)

    def f(x):
        y, p = exact_fields(bid, x, eps)
        return op_L(shell, y, np.atleast_2d(x)) + p.value / beta

    def y_d(x):
        y, p = exact_fields(bid, x, eps)
        return y.value - op_Lstar(shell, p, np.atleast_2d(x))

    def g_y(x):
        return exact_fields(bid, x, eps)[0].value

    def g_p(x):
        return exact_fields(bid, x, eps)[1].value

    return ProblemSpec(f=f, y_d=y_d, g_y=g_y, g_p=g_p, **common)
