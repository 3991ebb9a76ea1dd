"""Error metrics, reference-field ingestion and CSV/JSON output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigError, LoadError, NumericError
from .netcore import net_value
from .problems import BenchmarkId, RectDomain, exact_solution
from .training import TrainingHistory

PointField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EvalGrid:
    """Uniform tensor grid over the closed domain.

    Nodes are row-major with ``x1`` varying fastest: node ``j*n1 + i`` sits at
    ``(x1_i, x2_j)``.
    """

    domain: RectDomain
    n1: int = 200
    n2: int = 200

    def __post_init__(self):
        if self.n1 < 2 or self.n2 < 2:
            raise ConfigError("evaluation grid needs at least 2 nodes per axis")

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        (a1, a2), (b1, b2) = self.domain.lower, self.domain.upper
        return np.linspace(a1, b1, self.n1), np.linspace(a2, b2, self.n2)

    @property
    def nodes(self) -> np.ndarray:
        t1, t2 = self.axes
        g1, g2 = np.meshgrid(t1, t2, indexing="xy")
        return np.column_stack([g1.ravel(), g2.ravel()])


def l1_error(field: PointField, reference: PointField, grid: EvalGrid) -> float:
    """``area * mean |field - reference|`` over the grid nodes."""
    x = grid.nodes
    a, b = np.asarray(field(x), dtype=float), np.asarray(reference(x), dtype=float)
    diff = np.abs(a - b)
    if not np.all(np.isfinite(diff)):
        raise NumericError("non-finite value in L1 error", index=int(np.flatnonzero(~np.isfinite(diff))[0]))
    return float(grid.domain.area * diff.mean())


class ReferenceField:
    """Bilinear interpolant of node values on a rectangular grid."""

    def __init__(self, x1: np.ndarray, x2: np.ndarray, values: np.ndarray):
        self.x1, self.x2 = np.asarray(x1, float), np.asarray(x2, float)
        self.values = np.asarray(values, float).reshape(len(self.x2), len(self.x1))
        self._interp = RegularGridInterpolator((self.x2, self.x1), self.values, method="linear")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.column_stack([np.clip(x[:, 1], self.x2[0], self.x2[-1]),
                             np.clip(x[:, 0], self.x1[0], self.x1[-1])])
        return self._interp(q)


def load_reference(path) -> ReferenceField:
    """Read ``x1,x2,value`` rows forming a complete rectangular grid."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x1", "x2", "value"]:
            raise LoadError(f"{path}:1: expected header 'x1,x2,value', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise LoadError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-numeric field in {row}") from None
            if not all(math.isfinite(v) for v in vals):
                raise LoadError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    data = np.array(rows)
    x1, x2 = np.unique(data[:, 0]), np.unique(data[:, 1])
    if len(x1) < 2 or len(x2) < 2 or len(data) != len(x1) * len(x2):
        raise LoadError(f"{path}: nodes do not form a rectangular grid ({len(x1)}x{len(x2)} vs {len(data)} rows)")
    values = np.full((len(x2), len(x1)), np.nan)
    values[np.searchsorted(x2, data[:, 1]), np.searchsorted(x1, data[:, 0])] = data[:, 2]
    if np.isnan(values).any():
        raise LoadError(f"{path}: duplicate nodes leave grid holes")
    return ReferenceField(x1, x2, values)


def export_grid(field: PointField, grid: EvalGrid, path) -> None:
    x = grid.nodes
    v = np.asarray(field(x), dtype=float)
    with open(path, "w", newline="") as fh:
        fh.write("x1,x2,value\n")
        for (a, b), c in zip(x, v):
            fh.write(f"{a:.17g},{b:.17g},{c:.17g}\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_history(history: TrainingHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(history.columns)
        for row in history.rows:
            w.writerow([_fmt(row[c]) for c in history.columns])


def read_history(path) -> list[dict]:
    """Rows as dicts of floats (``None`` for empty cells)."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing history file {path}")
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- evaluators for training logs -------------------------------------------------

def net_field(params, cfg, eps, scale: float = 1.0) -> PointField:
    return lambda x: scale * net_value(params, cfg, x, eps)


def make_evaluator(formulation: str, cfg_y, cfg_w, grid: EvalGrid, beta: float,
                   y_ref: Optional[PointField], p_ref: Optional[PointField]):
    """L1 errors of state, second network and control, for the fields that have a reference.

    The second network is compared with ``p`` (optimality) or ``u = -p/beta``
    (penalized); ``l1_u`` is the control error in both formulations.
    """

    def evaluate(state) -> dict:
        out = {}
        eps = state.eps_current
        if y_ref is not None:
            out["l1_y"] = l1_error(net_field(state.params_y, cfg_y, eps), y_ref, grid)
        if p_ref is not None:
            u_ref = lambda x: -p_ref(x) / beta
            if formulation == "optimality":
                out["l1_w"] = l1_error(net_field(state.params_w, cfg_w, eps), p_ref, grid)
                out["l1_u"] = out["l1_w"] / beta
            else:
                out["l1_w"] = l1_error(net_field(state.params_w, cfg_w, eps), u_ref, grid)
                out["l1_u"] = out["l1_w"]
        return out

    return evaluate


def exact_references(bid: BenchmarkId, eps: float):
    """``(y_ref, p_ref)`` point fields of a closed-form benchmark, or ``(None, None)``."""
    probe = exact_solution(bid, np.zeros((1, 2)), eps)
    if probe is None:
        return None, None
    return (lambda x: exact_solution(bid, x, eps)[0]), (lambda x: exact_solution(bid, x, eps)[1])
