"""Adam training of the coupled network pair and eps-continuation.

Both networks are updated in the same Adam step over their concatenated
parameter vector ``theta = [theta_y, theta_w]``, where ``w`` is the adjoint
(optimality formulation) or the control (penalized formulation).
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, LoadError, NumericError
from .losses import (
    ResidualData,
    StageSchedule,
    loss_optimality,
    loss_penalized,
    optimality_parts,
    penalized_parts,
    weight_at_epoch,
)
from .netcore import MlpParams, NetEval, TwoScaleConfig, load_params, net_value, propagate, save_params
from .problems import ProblemSpec
from .sampling import CollocationSet, RarConfig, rar_select

log = logging.getLogger(__name__)

FORMULATIONS = ("optimality", "penalized")


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(adam: AdamState, params: np.ndarray, grad: np.ndarray, lr: float):
    """One bias-corrected Adam update; returns new ``(adam, params)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or grad.shape != adam.m.shape:
        raise ConfigError(f"gradient length {grad.shape} does not match parameters {params.shape}")
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient", index=None)
    t = adam.t + 1
    m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grad
    v = adam.beta2 * adam.v + (1.0 - adam.beta2) * (grad * grad)
    m_hat = m / (1.0 - adam.beta1 ** t)
    v_hat = v / (1.0 - adam.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + adam.eps_hat)
    return replace(adam, m=m, v=v, t=t), new_params


@dataclass(frozen=True)
class LrSchedule:
    """``lr(t) = max(lr0 * factor**(t // every), floor)``."""

    lr0: float = 1e-3
    factor: float = 0.9
    every: int = 2000
    floor: float = 1e-5

    def __post_init__(self):
        if not (self.lr0 > 0 and 0 < self.factor <= 1 and self.every >= 1 and self.floor > 0):
            raise ConfigError(f"invalid learning-rate schedule {self}")

    def __call__(self, t: int) -> float:
        return max(self.lr0 * self.factor ** (t // self.every), self.floor)


# --- continuation -----------------------------------------------------------------

@dataclass(frozen=True)
class ContinuationConfig:
    eps0: float
    ell: float
    eps_target: float
    epochs_per_stage: int

    def __post_init__(self):
        if not (0 < self.eps_target <= self.eps0):
            raise ConfigError(f"need 0 < eps_target <= eps0, got {self.eps_target}, {self.eps0}")
        if not self.ell > 1:
            raise ConfigError(f"reduction factor must exceed 1, got {self.ell}")
        if self.epochs_per_stage < 0:
            raise ConfigError("epochs_per_stage must be >= 0")


def continuation_sequence(cfg: ContinuationConfig) -> list[float]:
    """``eps_{k+1} = max(eps_k / ell, eps_target)``; the target stage appears once."""
    seq = [cfg.eps0]
    while seq[-1] > cfg.eps_target:
        seq.append(max(seq[-1] / cfg.ell, cfg.eps_target))
    return seq


# --- state and history ------------------------------------------------------------

OPTIMALITY_COLUMNS = ("epoch", "eps", "total", "r_state", "r_adj", "b_y", "b_p", "l1_y", "l1_w", "lr", "elapsed")
PENALIZED_COLUMNS = ("epoch", "eps", "total", "tracking", "r_pen", "b_y", "l1_y", "l1_w", "lr", "elapsed")


@dataclass
class TrainingHistory:
    formulation: str
    rows: list = field(default_factory=list)

    @property
    def columns(self) -> tuple[str, ...]:
        return OPTIMALITY_COLUMNS if self.formulation == "optimality" else PENALIZED_COLUMNS

    def append(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ConfigError(f"unknown history columns {sorted(unknown)}")
        if self.rows and row["epoch"] < self.rows[-1]["epoch"]:
            raise ConfigError("history epochs must be nondecreasing")
        self.rows.append({c: row.get(c) for c in self.columns})


@dataclass
class TrainState:
    params_y: MlpParams
    params_w: MlpParams
    adam: AdamState
    formulation: str
    eps_current: float
    epoch: int = 0
    history: TrainingHistory = None
    train_seconds: float = 0.0

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ConfigError(f"unknown formulation {self.formulation!r}")
        if self.history is None:
            self.history = TrainingHistory(self.formulation)

    @classmethod
    def fresh(cls, params_y: MlpParams, params_w: MlpParams, formulation: str, eps: float) -> "TrainState":
        n = params_y.n_params + params_w.n_params
        return cls(params_y, params_w, AdamState.zeros(n), formulation, eps)

    def theta(self) -> np.ndarray:
        return np.concatenate([self.params_y.flatten(), self.params_w.flatten()])


@dataclass
class TrainSettings:
    """Knobs shared by every stage.  ``weights`` holds (alpha_y, alpha_p) or (alpha_1, alpha_2)."""

    cfg_y: TwoScaleConfig
    cfg_w: TwoScaleConfig
    weights: tuple[StageSchedule, StageSchedule]
    lr: LrSchedule = field(default_factory=LrSchedule)
    log_every: int = 500
    compile: bool = False
    seed: int = 0


def split_flat(layer_sizes, flat):
    weights, biases, k = [], [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(flat[k:k + n_out * n_in].reshape(n_out, n_in))
        k += n_out * n_in
        biases.append(flat[k:k + n_out])
        k += n_out
    return weights, biases


class CoupledObjective:
    """Loss terms and the gradient over the concatenated parameter vector."""

    def __init__(self, formulation: str, sizes_y, sizes_w, cfg_y: TwoScaleConfig,
                 cfg_w: TwoScaleConfig, compile: bool = False):
        self.formulation = formulation
        self.sizes_y, self.sizes_w = tuple(sizes_y), tuple(sizes_w)
        self.cfg_y, self.cfg_w = cfg_y, cfg_w
        self.n_y = sum(o * i + o for i, o in zip(sizes_y[:-1], sizes_y[1:]))
        self._fn = self._terms
        if compile:
            self._fn = torch.compile(self._terms, dynamic=False)
        self._compiled = compile

    def _terms(self, theta, data: ResidualData, eps, w1, w2):
        wy, by = split_flat(self.sizes_y, theta[:self.n_y])
        ww, bw = split_flat(self.sizes_w, theta[self.n_y:])
        y = NetEval(*propagate(wy, by, data.x_int, eps, self.cfg_y))
        y_bnd = propagate(wy, by, data.x_bnd, eps, self.cfg_y, derivatives=False)[0]
        if self.formulation == "optimality":
            p = NetEval(*propagate(ww, bw, data.x_int, eps, self.cfg_w))
            p_bnd = propagate(ww, bw, data.x_bnd, eps, self.cfg_w, derivatives=False)[0]
            terms, _, _ = optimality_parts(y, p, y_bnd, p_bnd, data, w1, w2)
            return terms.sum(), terms
        u = propagate(ww, bw, data.x_int, eps, self.cfg_w, derivatives=False)[0]
        terms, _ = penalized_parts(y, u, y_bnd, data)
        return terms[0] + w1 * terms[1] + w2 * terms[2], terms

    def value_and_grad(self, theta: np.ndarray, data: ResidualData, eps: float, w1: float, w2: float):
        th = torch.tensor(theta, requires_grad=True)
        args = (data, torch.tensor(float(eps), dtype=torch.float64),
                torch.tensor(float(w1), dtype=torch.float64), torch.tensor(float(w2), dtype=torch.float64))
        try:
            total, terms = self._fn(th, *args)
        except Exception as exc:  # inductor needs a working C++ toolchain
            if not self._compiled:
                raise
            warnings.warn(f"torch.compile unavailable ({type(exc).__name__}); using eager mode")
            self._fn, self._compiled = self._terms, False
            total, terms = self._fn(th, *args)
        (grad,) = torch.autograd.grad(total, th)
        return float(total.detach()), terms.detach().numpy().copy(), grad.numpy()


def _stage_weights(settings: TrainSettings, epoch: int):
    return weight_at_epoch(settings.weights[0], epoch), weight_at_epoch(settings.weights[1], epoch)


def _locate_bad_point(state: TrainState, spec: ProblemSpec, colloc: CollocationSet,
                      settings: TrainSettings, w1: float, w2: float) -> Optional[int]:
    try:
        if state.formulation == "optimality":
            loss_optimality(state.params_y, state.params_w, settings.cfg_y, settings.cfg_w,
                            colloc, spec, w1, w2, eps=state.eps_current)
        else:
            loss_penalized(state.params_y, state.params_w, settings.cfg_y, settings.cfg_w,
                           colloc, spec, w1, w2, eps=state.eps_current)
    except NumericError as exc:
        return exc.index
    return None


Evaluator = Callable[[TrainState], dict]


def train_stage(state: TrainState, spec: ProblemSpec, colloc: CollocationSet, settings: TrainSettings,
                n_epochs: int, evaluator: Optional[Evaluator] = None,
                objective: Optional[CoupledObjective] = None) -> TrainState:
    """Full-batch Adam for ``n_epochs`` at ``state.eps_current``; returns a new state.

    On a non-finite loss the raised :class:`NumericError` carries the last
    good state as ``exc.last_state``.
    """
    if n_epochs < 0:
        raise ConfigError("n_epochs must be >= 0")
    if n_epochs == 0:
        return state
    if objective is None:
        objective = CoupledObjective(state.formulation, state.params_y.layer_sizes,
                                     state.params_w.layer_sizes, settings.cfg_y, settings.cfg_w,
                                     compile=settings.compile)
    data = ResidualData.build(spec, colloc)
    theta = state.theta()
    adam = state.adam
    n_y = state.params_y.n_params
    sizes_y, sizes_w = state.params_y.layer_sizes, state.params_w.layer_sizes
    history = state.history
    start_epoch, t0, clock = state.epoch, time.perf_counter(), state.train_seconds

    def snapshot(th, ad, epoch):
        return replace(state, params_y=MlpParams.from_flat(sizes_y, th[:n_y].copy()),
                       params_w=MlpParams.from_flat(sizes_w, th[n_y:].copy()), adam=ad,
                       epoch=epoch, history=history, train_seconds=clock + time.perf_counter() - t0)

    for k in range(n_epochs):
        epoch = start_epoch + k
        w1, w2 = _stage_weights(settings, epoch)
        lr = settings.lr(epoch)
        total, terms, grad = objective.value_and_grad(theta, data, state.eps_current, w1, w2)
        if not (math.isfinite(total) and np.all(np.isfinite(grad))):
            good = snapshot(theta, adam, epoch)
            exc = NumericError(f"non-finite loss at epoch {epoch}",
                               index=_locate_bad_point(good, spec, colloc, settings, w1, w2))
            exc.last_state = good
            raise exc
        last = k == n_epochs - 1
        if epoch % settings.log_every == 0 or last:
            # logged loss is the one evaluated at the pre-update parameters of this epoch
            row = dict(epoch=epoch, eps=state.eps_current, total=total, lr=lr,
                       elapsed=clock + time.perf_counter() - t0)
            names = ("r_state", "r_adj", "b_y", "b_p") if state.formulation == "optimality" else ("tracking", "r_pen", "b_y")
            row.update(zip(names, (float(t) for t in terms)))
            if evaluator is not None:
                metrics = evaluator(snapshot(theta, adam, epoch))
                row.update((k, v) for k, v in metrics.items() if k in history.columns)
            history.append(**row)
            log.info("epoch %d eps %.3g loss %.4e", epoch, state.eps_current, total)
        adam, theta = adam_step(adam, theta, grad, lr)
    return snapshot(theta, adam, start_epoch + n_epochs)


# --- residual refinement and continuation -----------------------------------------

def pointwise_residual(state: TrainState, spec: ProblemSpec, settings: TrainSettings, points: np.ndarray) -> np.ndarray:
    """Magnitude used by RAR: ``max(|R_state|, |R_adj|)`` or ``|R_pen|``."""
    data = ResidualData.build(spec, CollocationSet(points))
    py, pw, eps = state.params_y, state.params_w, state.eps_current
    with torch.no_grad():
        y = NetEval(*propagate(py.weights, py.biases, data.x_int, eps, settings.cfg_y))
        empty = torch.zeros(0, dtype=torch.float64)
        if state.formulation == "optimality":
            p = NetEval(*propagate(pw.weights, pw.biases, data.x_int, eps, settings.cfg_w))
            _, rs, ra = optimality_parts(y, p, empty, empty, data, 1.0, 1.0)
            return torch.maximum(rs.abs(), ra.abs()).numpy()
        u = propagate(pw.weights, pw.biases, data.x_int, eps, settings.cfg_w, derivatives=False)[0]
        _, rp = penalized_parts(y, u, empty, data)
        return rp.abs().numpy()


StageHook = Callable[[int, float, TrainState], None]


def successive_train(cont: ContinuationConfig, rar: RarConfig,
                     problem_factory: Callable[[float], ProblemSpec],
                     colloc: CollocationSet, state: TrainState, settings: TrainSettings,
                     evaluator_factory: Optional[Callable[[float], Evaluator]] = None,
                     on_stage_start: Optional[StageHook] = None,
                     on_stage_end: Optional[StageHook] = None,
                     start_epoch: int = 0,
                     on_chunk_end: Optional[Callable[[TrainState, CollocationSet], None]] = None):
    """Continuation in eps with warm starts and periodic RAR.

    Each stage trains ``cont.epochs_per_stage`` epochs at ``eps_k`` in
    chunks of ``rar.period``; RAR points are appended after every chunk
    except the final one of the run.  ``start_epoch`` skips work already done
    by a resumed state (stage ``k`` covers global epochs ``[k*E, (k+1)*E)``)
    and ``on_chunk_end(state, collocation)`` fires after each chunk and its
    refinement, which is where a resumable checkpoint belongs.
    Returns ``(state, collocation)``.
    """
    objective = CoupledObjective(state.formulation, state.params_y.layer_sizes, state.params_w.layer_sizes,
                                 settings.cfg_y, settings.cfg_w, compile=settings.compile)
    sequence = continuation_sequence(cont)
    n_rar = 0
    if rar.enabled and start_epoch > 0:
        # rounds already performed: chunk ends at or before start_epoch
        per_stage = [min(max(start_epoch - k * cont.epochs_per_stage, 0), cont.epochs_per_stage) for k in range(len(sequence))]
        n_rar = sum(d // rar.period + (0 < d % rar.period and d == cont.epochs_per_stage) for d in per_stage)
    n_epochs = cont.epochs_per_stage
    for k, eps_k in enumerate(sequence):
        done = min(max(start_epoch - k * n_epochs, 0), n_epochs)
        if done == n_epochs:
            continue
        state = replace(state, eps_current=eps_k)
        spec = problem_factory(eps_k)
        evaluator = evaluator_factory(eps_k) if evaluator_factory else None
        if on_stage_start and done == 0:
            on_stage_start(k, eps_k, state)
        remaining = n_epochs - done
        while True:
            chunk = min(remaining, rar.period - (n_epochs - remaining) % rar.period)
            state = train_stage(state, spec, colloc, settings, chunk, evaluator, objective)
            remaining -= chunk
            final = remaining == 0 and k == len(sequence) - 1
            if rar.enabled and not final and chunk > 0:
                seed = settings.seed + 7919 * (n_rar + 1)
                new = rar_select(lambda pts: pointwise_residual(state, spec, settings, pts),
                                 spec.domain, rar, seed)
                colloc = colloc.with_interior(new, {"rar": n_rar, "eps": eps_k, "epoch": state.epoch, "seed": seed})
                n_rar += 1
            if on_chunk_end:
                on_chunk_end(state, colloc)
            if remaining == 0:
                break
        if on_stage_end:
            on_stage_end(k, eps_k, state)
    return state, colloc


def recover_control(params_p: MlpParams, cfg_p: TwoScaleConfig, x, eps: float, beta: float):
    """Control from the adjoint network: ``u = -p / beta``."""
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    return -net_value(params_p, cfg_p, x, eps) / beta


# --- checkpoints -----------------------------------------------------------------

def save_checkpoint(state: TrainState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_params(state.params_y, d / "params_y.bin")
    save_params(state.params_w, d / "params_w.bin")
    np.asarray(state.adam.m, dtype="<f8").tofile(d / "adam_m.bin")
    np.asarray(state.adam.v, dtype="<f8").tofile(d / "adam_v.bin")
    manifest = {
        "formulation": state.formulation, "epoch": state.epoch, "eps_current": repr(state.eps_current),
        "adam_t": state.adam.t, "adam_beta1": repr(state.adam.beta1), "adam_beta2": repr(state.adam.beta2),
        "adam_eps_hat": repr(state.adam.eps_hat), "train_seconds": repr(state.train_seconds),
    }
    (d / "manifest.txt").write_text("".join(f"{k} {v}\n" for k, v in manifest.items()))


def load_checkpoint(directory) -> TrainState:
    d = Path(directory)
    try:
        meta = dict(line.split(" ", 1) for line in (d / "manifest.txt").read_text().splitlines() if line)
        py, pw = load_params(d / "params_y.bin"), load_params(d / "params_w.bin")
        m = np.fromfile(d / "adam_m.bin", dtype="<f8").astype(np.float64)
        v = np.fromfile(d / "adam_v.bin", dtype="<f8").astype(np.float64)
        adam = AdamState(m, v, int(meta["adam_t"]), float(meta["adam_beta1"]),
                         float(meta["adam_beta2"]), float(meta["adam_eps_hat"]))
        return TrainState(py, pw, adam, meta["formulation"], float(meta["eps_current"]),
                          int(meta["epoch"]), train_seconds=float(meta.get("train_seconds", 0.0)))
    except (OSError, KeyError, ValueError) as exc:
        raise LoadError(f"{d}: unreadable checkpoint ({exc})") from exc
