"""Collocation points and residual-based adaptive refinement (RAR)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, LoadError
from .problems import RectDomain

# side tags: 0 bottom (x2 = min), 1 right (x1 = max), 2 top (x2 = max), 3 left (x1 = min)
SIDES = ("bottom", "right", "top", "left")
INTERIOR_MODES = ("grid", "uniform-random")
BOUNDARY_DISTS = ("uniform", "beta-half")


@dataclass
class CollocationSet:
    interior: np.ndarray
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sides: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=float).reshape(-1, 2)
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(-1, 2)
        self.sides = np.asarray(self.sides, dtype=int).reshape(-1)
        if self.sides.shape[0] != self.boundary.shape[0]:
            raise ConfigError("one side tag per boundary point is required")

    @property
    def n_interior(self) -> int:
        return self.interior.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary.shape[0]

    def with_interior(self, points: np.ndarray, note: dict) -> "CollocationSet":
        """New set with ``points`` appended to the interior."""
        return CollocationSet(
            np.vstack([self.interior, np.asarray(points).reshape(-1, 2)]),
            self.boundary.copy(),
            self.sides.copy(),
            [*self.provenance, note],
        )

    @classmethod
    def read_csv(cls, path) -> "CollocationSet":
        """Inverse of :meth:`to_csv` (provenance is not stored)."""
        interior, boundary, sides = [], [], []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    x = (float(row["x1"]), float(row["x2"]))
                    if row["kind"] == "interior":
                        interior.append(x)
                    else:
                        boundary.append(x)
                        sides.append(SIDES.index(row["side"]))
                except (KeyError, ValueError) as exc:
                    raise LoadError(f"{path}:{lineno}: bad collocation row ({exc})") from None
        return cls(np.array(interior), np.array(boundary), np.array(sides, dtype=int))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "kind", "side"])
            for x1, x2 in self.interior:
                w.writerow([repr(float(x1)), repr(float(x2)), "interior", ""])
            for (x1, x2), s in zip(self.boundary, self.sides):
                w.writerow([repr(float(x1)), repr(float(x2)), "boundary", SIDES[s]])


def sample_interior(domain: RectDomain, mode: str, n1: int, n2: int, seed: int = 0) -> np.ndarray:
    """Interior points: open tensor grid ``(i/(n1+1), j/(n2+1))`` or i.i.d. uniform.

    Random mode draws ``n1 * n2`` points.
    """
    if n1 < 1 or n2 < 1:
        raise ConfigError(f"interior counts must be >= 1, got {n1}x{n2}")
    if mode == "grid":
        t1 = np.arange(1, n1 + 1) / (n1 + 1)
        t2 = np.arange(1, n2 + 1) / (n2 + 1)
        g1, g2 = np.meshgrid(t1, t2, indexing="xy")
        unit = np.column_stack([g1.ravel(), g2.ravel()])
    elif mode == "uniform-random":
        unit = _open_uniform(np.random.default_rng(seed), (n1 * n2, 2))
    else:
        raise ConfigError(f"unknown interior mode {mode!r}")
    return domain.scale(unit)


def _open_uniform(rng, shape):
    # uniform on (0, 1): reject the measure-zero endpoint 0 that Generator.random can return
    u = rng.random(shape)
    while np.any(u == 0.0):
        bad = u == 0.0
        u[bad] = rng.random(int(bad.sum()))
    return u


def side_parameters(n: int, dist: str, rng) -> np.ndarray:
    """Positions ``t`` in (0, 1) along one side."""
    u = _open_uniform(rng, n)
    if dist == "uniform":
        return u
    if dist == "beta-half":
        # inverse CDF of the arcsine law Beta(1/2, 1/2)
        return np.sin(0.5 * np.pi * u) ** 2
    raise ConfigError(f"unknown boundary distribution {dist!r}")


def sample_boundary(domain: RectDomain, per_side: int, dist: str = "uniform", seed: int = 0):
    """``per_side`` points on each of the four sides; returns ``(points, sides)``."""
    if per_side < 1:
        raise ConfigError(f"per_side must be >= 1, got {per_side}")
    rng = np.random.default_rng(seed)
    (a1, a2), (b1, b2) = domain.lower, domain.upper
    pts, tags = [], []
    for side in range(4):
        t = side_parameters(per_side, dist, rng)
        if side == 0:
            p = np.column_stack([a1 + t * (b1 - a1), np.full(per_side, a2)])
        elif side == 1:
            p = np.column_stack([np.full(per_side, b1), a2 + t * (b2 - a2)])
        elif side == 2:
            p = np.column_stack([a1 + t * (b1 - a1), np.full(per_side, b2)])
        else:
            p = np.column_stack([np.full(per_side, a1), a2 + t * (b2 - a2)])
        pts.append(p)
        tags.append(np.full(per_side, side))
    return np.vstack(pts), np.concatenate(tags)


def make_collocation(domain: RectDomain, n1: int, n2: int, per_side: int,
                     boundary_dist: str = "uniform", interior_mode: str = "grid",
                     seed: int = 0) -> CollocationSet:
    interior = sample_interior(domain, interior_mode, n1, n2, seed)
    boundary, sides = sample_boundary(domain, per_side, boundary_dist, seed + 1)
    note = {"interior": f"{interior_mode} {n1}x{n2}", "boundary": f"{boundary_dist} {per_side}x4", "seed": seed}
    return CollocationSet(interior, boundary, sides, [note])


@dataclass(frozen=True)
class RarConfig:
    pool_size: int = 10_000
    top_k: int = 500
    period: int = 20_000
    enabled: bool = True

    def __post_init__(self):
        if self.top_k < 1 or self.top_k > self.pool_size:
            raise ConfigError(f"need 1 <= top_k <= pool_size, got {self.top_k}, {self.pool_size}")
        if self.period < 1:
            raise ConfigError("RAR period must be >= 1")


def rar_select(residual_fn: Callable[[np.ndarray], np.ndarray], domain: RectDomain,
               cfg: RarConfig, seed: int = 0) -> np.ndarray:
    """The ``top_k`` of ``pool_size`` uniform candidates with largest ``|residual|``.

    Ties go to the lower candidate index.
    """
    pool = domain.scale(_open_uniform(np.random.default_rng(seed), (cfg.pool_size, 2)))
    return select_top(pool, np.abs(np.asarray(residual_fn(pool), dtype=float)), cfg.top_k)


def select_top(pool: np.ndarray, magnitude: np.ndarray, top_k: int) -> np.ndarray:
    order = np.argsort(-magnitude, kind="stable")
    return pool[order[:top_k]]
