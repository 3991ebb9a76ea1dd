"""Finite-difference verification of the derivative machinery.

Every check here evaluates only plain network outputs or loss values, so it
is independent of the tangent propagation and of reverse-mode accumulation.
Parameter gradients use Richardson-extrapolated central differences;
input derivatives use Ridders' adaptive extrapolation, which picks its step
from an error estimate and so copes with saturated units whose derivatives
are many orders below the network value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import ResidualData, optimality_objective, penalized_objective
from .netcore import MlpParams, TwoScaleConfig, eval_net, init_params, layer_sizes_for, loss_param_gradient
from .problems import DEFAULT_CENTERS, BenchmarkId, make_benchmark
from .sampling import CollocationSet, sample_boundary


def richardson(fn, h: float):
    """Fourth-order combination of two central differences of ``fn(h)``."""
    return (4.0 * fn(0.5 * h) - fn(h)) / 3.0


def ridders(fn, h0: float, shrink: float = 1.4, n_tab: int = 12) -> tuple[float, float]:
    """Extrapolate ``fn(h) -> fn(0)`` for an even-in-h error expansion; returns ``(value, error estimate)``."""
    c2 = shrink * shrink
    prev = [fn(h0)]
    best, err = prev[0], np.inf
    h = h0
    for i in range(1, n_tab):
        h /= shrink
        row = [fn(h)]
        fac = c2
        for j in range(1, i + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1.0))
            fac *= c2
            e = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
            if e <= err:
                best, err = row[j], e
        if abs(row[i] - prev[i - 1]) >= 2.0 * err:
            break
        prev = row
    return float(best), float(err)


def _extrapolate(fn, h0: float) -> float:
    # a single tableau can lock onto a bad extrapolation when h0 straddles a
    # feature of the function; restart from smaller steps and keep the estimate
    # with the smallest error
    return min((ridders(fn, h0 * f) for f in (1.0, 0.25, 0.0625)), key=lambda r: r[1])[0]


def _net_at(params, cfg, eps):
    """Network as a function of one point, evaluated in extended precision.

    Difference quotients of a saturated net lose most digits to roundoff in
    float64; ``np.longdouble`` buys roughly three more, and the separate
    code path keeps the oracle independent of the library forward pass.
    """
    ld = np.longdouble
    Ws = [w.detach().numpy().astype(ld) for w in params.weights]
    bs = [b.detach().numpy().astype(ld) for b in params.biases]
    s = ld(eps) ** ld(cfg.gamma)
    center = np.array(cfg.center, dtype=ld)

    def f(x):
        x = np.asarray(x, dtype=ld)
        a = np.concatenate([x, s * (x - center), [s]])
        for W, b in zip(Ws[:-1], bs[:-1]):
            a = np.tanh(W @ a + b)
        return (Ws[-1] @ a + bs[-1])[0]

    return f


def fd_gradient(params: MlpParams, cfg: TwoScaleConfig, x, eps: float, h: float = 0.1) -> np.ndarray:
    f, x = _net_at(params, cfg, eps), np.asarray(x, np.longdouble)
    out = np.empty(x.shape[0])
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = 1.0
        out[j] = _extrapolate(lambda s: (f(x + s * e) - f(x - s * e)) / (2 * s), h)
    return out


def fd_second_derivatives(params: MlpParams, cfg: TwoScaleConfig, x, eps: float, h=None) -> np.ndarray:
    """Per-axis second derivatives; ``h`` is the initial step (default: 10% of the stretched length scale)."""
    f, x = _net_at(params, cfg, eps), np.asarray(x, np.longdouble)
    if h is None:
        h = 0.1 * min(1.0, eps ** (-cfg.gamma))
    f0 = f(x)
    out = np.empty(x.shape[0])
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = 1.0
        out[j] = _extrapolate(lambda s: (f(x + s * e) - 2.0 * f0 + f(x - s * e)) / (s * s), h)
    return out


def input_derivative_errors(params: MlpParams, cfg: TwoScaleConfig, x, eps: float) -> tuple[float, float]:
    """``(grad error, laplacian error)`` of :func:`eval_net` against differences.

    Errors are relative to the size of the derivatives, but never to less
    than ``1e-10`` of their natural scale ``eps**gamma * max(1, |N|)`` (and its
    square for the Laplacian): a fully saturated net has derivatives far
    below what any difference quotient can resolve.  The Laplacian is also
    measured against the per-axis magnitudes so cancelling axes stay meaningful.
    """
    stretch = eps ** cfg.gamma
    h = min(1.0, 1.0 / stretch)
    ev = eval_net(params, cfg, np.asarray(x, float), eps)
    g_fd = fd_gradient(params, cfg, x, eps, h=0.1 * h)
    d2 = fd_second_derivatives(params, cfg, x, eps, h=0.1 * h)
    natural = stretch * max(1.0, abs(ev.value))
    g_scale = max(np.max(np.abs(g_fd)), 1e-10 * natural)
    l_scale = max(np.sum(np.abs(d2)), stretch * np.max(np.abs(g_fd)), 1e-10 * stretch * natural)
    g_err = float(np.max(np.abs(g_fd - ev.grad)) / g_scale)
    l_err = float(abs(d2.sum() - ev.laplacian) / l_scale)
    return g_err, l_err


def fd_param_gradient(loss_of_theta, theta: np.ndarray, h: float) -> np.ndarray:
    out = np.empty_like(theta)
    for i in range(theta.shape[0]):
        def central(s, i=i):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += s
            tm[i] -= s
            return (loss_of_theta(tp) - loss_of_theta(tm)) / (2 * s)
        out[i] = richardson(central, h)
    return out


def relative_error(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-6) -> float:
    """Worst entrywise relative error; entries below ``floor * max|exact|`` are compared against that scale."""
    scale = np.maximum(np.maximum(np.abs(exact), np.abs(approx)), floor * np.max(np.abs(exact)))
    scale = np.where(scale > 0, scale, 1.0)
    return float(np.max(np.abs(approx - exact) / scale))


@dataclass
class GradcheckReport:
    formulation: str
    n_params: int
    param_error: float
    grad_error: float
    laplacian_error: float

    @property
    def worst(self) -> float:
        return max(self.param_error, self.grad_error, self.laplacian_error)


def coupled_loss(formulation: str, cfg_y, cfg_w, data: ResidualData, w1: float, w2: float, eps: float):
    """Loss of two parameter sets, as used by :func:`loss_param_gradient`."""
    if formulation == "optimality":
        return lambda py, pw: optimality_objective(py, pw, cfg_y, cfg_w, data, w1, w2, eps)
    return lambda py, pw: penalized_objective(py, pw, cfg_y, cfg_w, data, w1, w2, eps)


def run_gradcheck(benchmark, formulation: str, eps: float, beta: float = 1.0, hidden=(8, 8),
                  n_interior: int = 10, seed: int = 0, gamma: float = -1.0,
                  corrupt: bool = False) -> GradcheckReport:
    """Compare exact parameter and input derivatives with differences on small nets."""
    bid = BenchmarkId.parse(benchmark) if isinstance(benchmark, str) else benchmark
    spec = make_benchmark(bid, eps, beta)
    cy, cw = DEFAULT_CENTERS[bid]
    cfg_y, cfg_w = TwoScaleConfig(cy, gamma), TwoScaleConfig(cw, gamma)
    rng = np.random.default_rng(seed)
    sizes = layer_sizes_for(2, hidden)
    py, pw = _randomized(init_params(sizes, seed), rng), _randomized(init_params(sizes, seed + 1), rng)
    pts, sides = sample_boundary(spec.domain, 1, "uniform", seed)
    colloc = CollocationSet(rng.uniform(0.05, 0.95, size=(n_interior, 2)), pts, sides)
    data = ResidualData.build(spec, colloc)
    loss = coupled_loss(formulation, cfg_y, cfg_w, data, 3.0, 5.0, eps)

    gy, gw = loss_param_gradient(loss, py, pw)
    grad = np.concatenate([gy, gw])
    if corrupt:
        grad[rng.integers(grad.shape[0])] *= 1.01

    theta0 = np.concatenate([py.flatten(), pw.flatten()])
    n_y = py.n_params

    def loss_of_theta(theta):
        with torch.no_grad():
            return float(loss(MlpParams.from_flat(sizes, theta[:n_y]), MlpParams.from_flat(sizes, theta[n_y:])))

    # a net without hidden layers gives a loss quadratic in the parameters,
    # so central differences are exact and a wide step only cuts roundoff
    linear = len(sizes) == 2
    h = 1.0 if linear else 1e-3 * min(1.0, eps ** (-gamma))
    p_err = relative_error(fd_param_gradient(loss_of_theta, theta0, h), grad)
    g_err = l_err = 0.0
    for x in colloc.interior[:5]:
        for params, cfg in ((py, cfg_y), (pw, cfg_w)):
            ge, le = input_derivative_errors(params, cfg, x, eps)
            g_err, l_err = max(g_err, ge), max(l_err, le)
    return GradcheckReport(formulation, theta0.shape[0], p_err, g_err, l_err)


def _randomized(params: MlpParams, rng) -> MlpParams:
    # nonzero biases so every code path contributes
    flat = params.flatten()
    k = 0
    for n_in, n_out in zip(params.layer_sizes[:-1], params.layer_sizes[1:]):
        k += n_in * n_out
        flat[k:k + n_out] = rng.normal(0.0, 0.3, n_out)
        k += n_out
    return MlpParams.from_flat(params.layer_sizes, flat)
