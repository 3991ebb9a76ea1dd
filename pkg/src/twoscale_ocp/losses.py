"""Optimality-system residuals and the two training losses.

``J_o = R_state + R_adj + B_y + B_p`` trains state and adjoint networks on
the reduced optimality system; ``J_p = T + a1*R_pen + a2*B_y`` trains state
and control networks on the penalized cost.  Boundary terms compare the
network trace to the problem's Dirichlet data ``g`` (zero for homogeneous
problems), and vanish when there are no boundary points.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .netcore import MlpParams, NetEval, TwoScaleConfig, propagate
from .problems import ProblemSpec, op_L, op_Lstar
from .sampling import CollocationSet


@dataclass(frozen=True)
class StageSchedule:
    """Piecewise-constant weight: ``values[i]`` on ``[breakpoints[i-1], breakpoints[i])``."""

    breakpoints: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(int(b) for b in self.breakpoints))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.breakpoints) + 1:
            raise ConfigError("a schedule needs exactly one more value than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ConfigError(f"breakpoints must be strictly ascending: {self.breakpoints}")
        if any(not v > 0 for v in self.values):
            raise ConfigError(f"schedule values must be positive: {self.values}")

    @classmethod
    def constant(cls, value: float) -> "StageSchedule":
        return cls((), (value,))


def weight_at_epoch(schedule: StageSchedule, epoch: int) -> float:
    return schedule.values[bisect.bisect_right(schedule.breakpoints, epoch)]


# Boundary weights alpha_y = alpha_p, PDE penalty alpha_1 and boundary penalty alpha_2.
BOUNDARY_WEIGHTS = StageSchedule((10_000, 30_000), (1000.0, 5000.0, 10_000.0))
PDE_PENALTY_WEIGHTS = StageSchedule((10_000, 30_000), (100.0, 500.0, 1000.0))
BC_PENALTY_WEIGHTS = StageSchedule((10_000, 30_000), (1000.0, 5000.0, 10_000.0))


@dataclass(frozen=True)
class OptimalityBreakdown:
    r_state: float
    r_adj: float
    b_y: float
    b_p: float

    @property
    def total(self) -> float:
        return self.r_state + self.r_adj + self.b_y + self.b_p


@dataclass(frozen=True)
class PenalizedBreakdown:
    tracking: float
    r_pen: float
    b_y: float
    alpha1: float
    alpha2: float

    @property
    def total(self) -> float:
        return self.tracking + self.alpha1 * self.r_pen + self.alpha2 * self.b_y


# --- pointwise residuals ---------------------------------------------------

def residual_state(x, y_eval: NetEval, p_value, spec: ProblemSpec):
    """``L y + p/beta - f``."""
    return op_L(spec, y_eval, x) + p_value / spec.beta - _tab(spec.f, x, p_value)


def residual_adjoint(x, p_eval: NetEval, y_value, spec: ProblemSpec):
    """``L* p - y + y_d``."""
    return op_Lstar(spec, p_eval, x) - y_value + _tab(spec.y_d, x, y_value)


def residual_penalized(x, y_eval: NetEval, u_value, spec: ProblemSpec):
    """``L y - u - f``."""
    return op_L(spec, y_eval, x) - u_value - _tab(spec.f, x, u_value)


def _tab(fn, x, like):
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    vals = fn(np.atleast_2d(np.asarray(x, dtype=float)))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(vals, dtype=like.dtype)
    return float(vals[0]) if np.ndim(x) == 1 else vals


# --- tabulated problem data ------------------------------------------------

class ResidualData(NamedTuple):
    """Problem coefficients tabulated at the collocation points."""

    x_int: torch.Tensor
    x_bnd: torch.Tensor
    zeta: torch.Tensor
    c: torch.Tensor
    c_adj: torch.Tensor
    f: torch.Tensor
    y_d: torch.Tensor
    g_y: torch.Tensor
    g_p: torch.Tensor
    eps: torch.Tensor
    beta: torch.Tensor

    @classmethod
    def build(cls, spec: ProblemSpec, colloc: CollocationSet) -> "ResidualData":
        if colloc.n_interior == 0:
            raise ConfigError("collocation set has no interior points")
        xi, xb = colloc.interior, colloc.boundary
        c = spec.c(xi)
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
        empty = np.zeros(0)
        return cls(
            x_int=t(xi), x_bnd=t(xb), zeta=t(spec.zeta(xi)), c=t(c),
            c_adj=t(c - spec.div_zeta(xi)), f=t(spec.f(xi)), y_d=t(spec.y_d(xi)),
            g_y=t(spec.g_y(xb) if len(xb) else empty), g_p=t(spec.g_p(xb) if len(xb) else empty),
            eps=t(spec.eps), beta=t(spec.beta),
        )


def _mean_sq(v: torch.Tensor) -> torch.Tensor:
    return (v * v).sum() / max(v.shape[0], 1)


def optimality_parts(y: NetEval, p: NetEval, y_bnd, p_bnd, data: ResidualData, alpha_y, alpha_p):
    """Loss terms from field evaluations; returns ``(terms (4,), res_state, res_adj)``."""
    rs = -data.eps * y.laplacian + (data.zeta * y.grad).sum(1) + data.c * y.value + p.value / data.beta - data.f
    ra = -data.eps * p.laplacian - (data.zeta * p.grad).sum(1) + data.c_adj * p.value - y.value + data.y_d
    terms = torch.stack([
        _mean_sq(rs), _mean_sq(ra),
        alpha_y * _mean_sq(y_bnd - data.g_y), alpha_p * _mean_sq(p_bnd - data.g_p),
    ])
    return terms, rs, ra


def penalized_parts(y: NetEval, u_int, y_bnd, data: ResidualData):
    """Unweighted ``(T, R_pen, B_y)`` and the pointwise PDE residual."""
    rp = -data.eps * y.laplacian + (data.zeta * y.grad).sum(1) + data.c * y.value - u_int - data.f
    dy = y.value - data.y_d
    tracking = 0.5 * (dy * dy + data.beta * u_int * u_int).sum() / dy.shape[0]
    terms = torch.stack([tracking, _mean_sq(rp), _mean_sq(y_bnd - data.g_y)])
    return terms, rp


def _check_finite(kind: str, **vectors):
    for name, v in vectors.items():
        bad = ~torch.isfinite(v.detach())
        if bad.any():
            idx = int(torch.nonzero(bad)[0, 0])
            raise NumericError(f"non-finite {name} in {kind} loss", index=idx)


def _as_t(a):
    return a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))


def _eval_pair(py, pw, cfg_y, cfg_w, data, eps, w_derivs: bool):
    y_int = NetEval(*propagate(py.weights, py.biases, data.x_int, eps, cfg_y))
    if w_derivs:
        w_int = NetEval(*propagate(pw.weights, pw.biases, data.x_int, eps, cfg_w))
    else:
        w_int = NetEval(propagate(pw.weights, pw.biases, data.x_int, eps, cfg_w, derivatives=False)[0], None, None)
    y_bnd = propagate(py.weights, py.biases, data.x_bnd, eps, cfg_y, derivatives=False)[0]
    w_bnd = propagate(pw.weights, pw.biases, data.x_bnd, eps, cfg_w, derivatives=False)[0]
    return y_int, w_int, y_bnd, w_bnd


def optimality_objective(py: MlpParams, pp: MlpParams, cfg_y: TwoScaleConfig, cfg_p: TwoScaleConfig,
                         data: ResidualData, alpha_y: float, alpha_p: float, eps=None) -> torch.Tensor:
    """Differentiable ``J_o`` (0-d tensor).  ``eps`` feeds the two-scale features."""
    eps = data.eps if eps is None else eps
    y, p, yb, pb = _eval_pair(py, pp, cfg_y, cfg_p, data, eps, True)
    terms, rs, ra = optimality_parts(y, p, yb, pb, data, alpha_y, alpha_p)
    _check_finite("optimality", state_residual=rs, adjoint_residual=ra, y_boundary=yb, p_boundary=pb)
    return terms.sum()


def penalized_objective(py: MlpParams, pu: MlpParams, cfg_y: TwoScaleConfig, cfg_u: TwoScaleConfig,
                        data: ResidualData, alpha1: float, alpha2: float, eps=None) -> torch.Tensor:
    eps = data.eps if eps is None else eps
    y, u, yb, _ = _eval_pair(py, pu, cfg_y, cfg_u, data, eps, False)
    terms, rp = penalized_parts(y, u.value, yb, data)
    _check_finite("penalized", pde_residual=rp, u=u.value, y_boundary=yb)
    return terms[0] + alpha1 * terms[1] + alpha2 * terms[2]


def loss_optimality(py: MlpParams, pp: MlpParams, cfg_y: TwoScaleConfig, cfg_p: TwoScaleConfig,
                    colloc: CollocationSet, spec: ProblemSpec, alpha_y: float, alpha_p: float,
                    eps=None) -> OptimalityBreakdown:
    data = ResidualData.build(spec, colloc)
    eps = spec.eps if eps is None else eps
    with torch.no_grad():
        y, p, yb, pb = _eval_pair(py, pp, cfg_y, cfg_p, data, eps, True)
        terms, rs, ra = optimality_parts(y, p, yb, pb, data, alpha_y, alpha_p)
    _check_finite("optimality", state_residual=rs, adjoint_residual=ra, y_boundary=yb, p_boundary=pb)
    return OptimalityBreakdown(*(float(t) for t in terms))


def loss_penalized(py: MlpParams, pu: MlpParams, cfg_y: TwoScaleConfig, cfg_u: TwoScaleConfig,
                   colloc: CollocationSet, spec: ProblemSpec, alpha1: float, alpha2: float,
                   eps=None) -> PenalizedBreakdown:
    data = ResidualData.build(spec, colloc)
    eps = spec.eps if eps is None else eps
    with torch.no_grad():
        y, u, yb, _ = _eval_pair(py, pu, cfg_y, cfg_u, data, eps, False)
        terms, rp = penalized_parts(y, u.value, yb, data)
    _check_finite("penalized", pde_residual=rp, u=u.value, y_boundary=yb)
    return PenalizedBreakdown(*(float(t) for t in terms), float(alpha1), float(alpha2))


def optimality_from_fields(y: NetEval, p: NetEval, y_bnd, p_bnd, spec: ProblemSpec,
                           colloc: CollocationSet, alpha_y: float, alpha_p: float) -> OptimalityBreakdown:
    """``J_o`` for externally supplied fields (e.g. exact solutions) instead of networks."""
    data = ResidualData.build(spec, colloc)
    y = NetEval(*(_as_t(v) for v in (y.value, y.grad, y.laplacian)))
    p = NetEval(*(_as_t(v) for v in (p.value, p.grad, p.laplacian)))
    terms, _, _ = optimality_parts(y, p, _as_t(y_bnd), _as_t(p_bnd), data, alpha_y, alpha_p)
    return OptimalityBreakdown(*(float(t) for t in terms))


def penalized_from_fields(y: NetEval, u_int, y_bnd, spec: ProblemSpec, colloc: CollocationSet,
                          alpha1: float, alpha2: float) -> PenalizedBreakdown:
    data = ResidualData.build(spec, colloc)
    y = NetEval(*(_as_t(v) for v in (y.value, y.grad, y.laplacian)))
    terms, _ = penalized_parts(y, _as_t(u_int), _as_t(y_bnd), data)
    return PenalizedBreakdown(*(float(t) for t in terms), float(alpha1), float(alpha2))
