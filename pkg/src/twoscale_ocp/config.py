"""Run configuration: TOML file -> validated :class:`RunConfig`.

Only ``benchmark``, ``formulation``, ``eps`` and ``seed`` are required; every
other knob falls back to a per-benchmark preset.  Validation errors name the
file and line of the offending key.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .losses import BC_PENALTY_WEIGHTS, BOUNDARY_WEIGHTS, PDE_PENALTY_WEIGHTS, StageSchedule
from .problems import DEFAULT_BOUNDARY_DIST, DEFAULT_CENTERS, BenchmarkId
from .sampling import BOUNDARY_DISTS, INTERIOR_MODES, RarConfig
from .training import FORMULATIONS, ContinuationConfig, LrSchedule

SCALES = ("full", "desk")

# hidden widths, interior grid, boundary points per side, epochs per stage
_SCALE_PRESETS = {
    "full": dict(hidden=(100, 100, 100), interior=(150, 150), boundary_per_side=250, epochs_per_stage=80_000),
    "desk": dict(hidden=(50, 50, 50), interior=(60, 60), boundary_per_side=100, epochs_per_stage=20_000),
}


@dataclass(frozen=True)
class RunConfig:
    benchmark: BenchmarkId
    formulation: str
    eps: float
    seed: int
    beta: float = 1.0
    scale: str = "full"
    hidden: tuple[int, ...] = (100, 100, 100)
    gamma: float = -1.0
    center_y: tuple[float, float] = (1.0, 1.0)
    center_w: tuple[float, float] = (0.0, 0.0)
    interior: tuple[int, int] = (150, 150)
    interior_mode: str = "grid"
    boundary_per_side: int = 250
    boundary_dist: str = "uniform"
    weights: tuple[StageSchedule, StageSchedule] = (BOUNDARY_WEIGHTS, BOUNDARY_WEIGHTS)
    lr: LrSchedule = field(default_factory=LrSchedule)
    continuation: ContinuationConfig = None
    rar: RarConfig = field(default_factory=RarConfig)
    log_every: int = 500
    eval_grid: tuple[int, int] = (200, 200)
    compile: bool = True
    out: Optional[str] = None
    source: Optional[str] = None


# section -> allowed keys; "" is the top level
_SCHEMA = {
    "": {"benchmark", "formulation", "eps", "seed", "beta", "scale", "out"},
    "network": {"hidden", "gamma", "center_y", "center_w"},
    "collocation": {"interior", "interior_mode", "boundary_per_side", "boundary_dist"},
    "weights": {"boundary", "pde_penalty", "bc_penalty"},
    "lr": {"lr0", "factor", "every", "floor"},
    "continuation": {"eps0", "ell", "epochs_per_stage"},
    "rar": {"enabled", "pool_size", "top_k", "period"},
    "run": {"log_every", "eval_grid", "compile"},
}


class _Locator:
    """Maps ``(section, key)`` to a line number of the source text."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple[str, str], int] = {}
        section = ""
        for n, line in enumerate(text.splitlines(), start=1):
            s = line.strip()
            m = re.match(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
            if m:
                section = m.group(1)
                self.lines.setdefault((section, ""), n)
                continue
            m = re.match(r"([A-Za-z0-9_-]+)\s*=", s)
            if m:
                self.lines.setdefault((section, m.group(1)), n)

    def error(self, section: str, key: str, msg: str) -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        where = f"{self.source}:{line}" if line else self.source
        name = f"{section}.{key}" if section and key else (key or section)
        return ConfigError(f"{where}: {name}: {msg}")


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path), overrides)


def parse_config(text: str, source: str = "<config>", overrides: Optional[dict] = None) -> RunConfig:
    """Parse TOML text; ``overrides`` replaces top-level keys (e.g. ``seed``)."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    loc = _Locator(text, source)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    _check_keys(raw, loc)
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    sect = lambda name: raw.get(name, {})

    def req(key):
        if key not in top:
            raise loc.error("", key, "required key missing")
        return top[key]

    try:
        bid = BenchmarkId.parse(req("benchmark"))
    except ConfigError as exc:
        raise loc.error("", "benchmark", str(exc)) from None
    formulation = _choice(loc, "", "formulation", req("formulation"), FORMULATIONS)
    eps = _positive(loc, "", "eps", req("eps"))
    seed = req("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise loc.error("", "seed", f"expected a non-negative integer, got {seed!r}")
    beta = _positive(loc, "", "beta", top.get("beta", 1.0))
    scale = _choice(loc, "", "scale", top.get("scale", "full"), SCALES)
    preset = _SCALE_PRESETS[scale]

    net = sect("network")
    hidden = _int_list(loc, "network", "hidden", net.get("hidden", preset["hidden"]), allow_empty=True)
    gamma = _number(loc, "network", "gamma", net.get("gamma", -1.0))
    if not gamma < 0:
        raise loc.error("network", "gamma", f"must be negative, got {gamma}")
    cy, cw = DEFAULT_CENTERS[bid]
    center_y = _center(loc, "center_y", net.get("center_y", "auto"), cy)
    center_w = _center(loc, "center_w", net.get("center_w", "auto"), cw)

    col = sect("collocation")
    interior = _int_list(loc, "collocation", "interior", col.get("interior", preset["interior"]))
    if len(interior) != 2:
        raise loc.error("collocation", "interior", "expected [n1, n2]")
    interior_mode = _choice(loc, "collocation", "interior_mode", col.get("interior_mode", "grid"), INTERIOR_MODES)
    per_side = col.get("boundary_per_side", preset["boundary_per_side"])
    if not isinstance(per_side, int) or isinstance(per_side, bool) or per_side < 1:
        raise loc.error("collocation", "boundary_per_side", f"expected a positive integer, got {per_side!r}")
    dist = col.get("boundary_dist", "auto")
    dist = DEFAULT_BOUNDARY_DIST[bid] if dist == "auto" else _choice(loc, "collocation", "boundary_dist", dist, BOUNDARY_DISTS)

    w = sect("weights")
    if formulation == "optimality":
        weights = (_schedule(loc, "boundary", w.get("boundary"), BOUNDARY_WEIGHTS),) * 2
    else:
        weights = (_schedule(loc, "pde_penalty", w.get("pde_penalty"), PDE_PENALTY_WEIGHTS),
                   _schedule(loc, "bc_penalty", w.get("bc_penalty"), BC_PENALTY_WEIGHTS))

    lr_raw = sect("lr")
    for key in ("lr0", "floor"):
        if key in lr_raw:
            _positive(loc, "lr", key, lr_raw[key])
    if "factor" in lr_raw and not 0 < _number(loc, "lr", "factor", lr_raw["factor"]) <= 1:
        raise loc.error("lr", "factor", f"must lie in (0, 1], got {lr_raw['factor']}")
    if "every" in lr_raw and not (isinstance(lr_raw["every"], int) and lr_raw["every"] >= 1):
        raise loc.error("lr", "every", f"expected a positive integer, got {lr_raw['every']!r}")
    lr = _build(loc, "lr", LrSchedule, **{k: lr_raw[k] for k in lr_raw})

    c = sect("continuation")
    epochs = c.get("epochs_per_stage", preset["epochs_per_stage"])
    if not isinstance(epochs, int) or isinstance(epochs, bool):
        raise loc.error("continuation", "epochs_per_stage", f"expected an integer, got {epochs!r}")
    eps0 = _positive(loc, "continuation", "eps0", c.get("eps0", eps))
    if eps0 < eps:
        raise loc.error("continuation", "eps0", f"must be at least the target eps {eps}, got {eps0}")
    ell = _number(loc, "continuation", "ell", c.get("ell", 10.0))
    if not ell > 1:
        raise loc.error("continuation", "ell", f"reduction factor must exceed 1, got {ell}")
    cont = _build(loc, "continuation", ContinuationConfig, eps0=eps0, ell=ell, eps_target=eps, epochs_per_stage=epochs)

    r = sect("rar")
    rar = _build(loc, "rar", RarConfig, **{k: r[k] for k in r})

    run = sect("run")
    log_every = run.get("log_every", 500)
    if not isinstance(log_every, int) or log_every < 1:
        raise loc.error("run", "log_every", f"expected a positive integer, got {log_every!r}")
    grid = _int_list(loc, "run", "eval_grid", run.get("eval_grid", [200, 200]))
    if len(grid) != 2 or min(grid) < 2:
        raise loc.error("run", "eval_grid", "expected [n1, n2] with at least 2 nodes per axis")
    compile_ = run.get("compile", True)
    if not isinstance(compile_, bool):
        raise loc.error("run", "compile", "expected true or false")
    out = top.get("out")
    if out is not None and not isinstance(out, str):
        raise loc.error("", "out", "expected a path string")

    return RunConfig(bid, formulation, eps, seed, beta, scale, hidden, gamma, center_y, center_w,
                     tuple(interior), interior_mode, per_side, dist, weights, lr, cont, rar,
                     log_every, tuple(grid), compile_, out, source)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


# --- field validators ----------------------------------------------------------------

def _check_keys(raw: dict, loc: _Locator) -> None:
    for k, v in raw.items():
        if isinstance(v, dict):
            if k not in _SCHEMA or k == "":
                raise loc.error(k, "", f"unknown section [{k}]")
            for kk in v:
                if kk not in _SCHEMA[k]:
                    raise loc.error(k, kk, f"unknown key (allowed: {', '.join(sorted(_SCHEMA[k]))})")
        elif k not in _SCHEMA[""]:
            raise loc.error("", k, "unknown key")


def _number(loc, section, key, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise loc.error(section, key, f"expected a number, got {v!r}")
    return float(v)


def _positive(loc, section, key, v) -> float:
    v = _number(loc, section, key, v)
    if not v > 0:
        raise loc.error(section, key, f"must be positive, got {v}")
    return v


def _choice(loc, section, key, v, allowed):
    if v not in allowed:
        raise loc.error(section, key, f"expected one of {', '.join(allowed)}; got {v!r}")
    return v


def _int_list(loc, section, key, v, allow_empty=False) -> tuple[int, ...]:
    ok = isinstance(v, (list, tuple)) and all(isinstance(i, int) and not isinstance(i, bool) and i >= 1 for i in v)
    if not ok or (not v and not allow_empty):
        raise loc.error(section, key, f"expected a list of positive integers, got {v!r}")
    return tuple(v)


def _center(loc, key, v, default) -> tuple[float, float]:
    if v == "auto":
        return tuple(default)
    if not (isinstance(v, list) and len(v) == 2):
        raise loc.error("network", key, f"expected \"auto\" or [x1, x2], got {v!r}")
    return tuple(_number(loc, "network", key, c) for c in v)


def _schedule(loc, key, v, default: StageSchedule) -> StageSchedule:
    if v is None:
        return default
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return _build(loc, "weights", StageSchedule.constant, v, key=key)
    if not isinstance(v, dict) or set(v) - {"breakpoints", "values"}:
        raise loc.error("weights", key, "expected a number or {breakpoints = [...], values = [...]}")
    return _build(loc, "weights", StageSchedule, tuple(v.get("breakpoints", ())), tuple(v.get("values", ())), key=key)


def _build(loc, section, ctor, *args, key: str = "", **kw):
    try:
        return ctor(*args, **kw)
    except (ConfigError, TypeError, ValueError) as exc:
        if not key:
            # point at the first of the section's keys present in the file
            present = [k for k in kw if (section, k) in loc.lines]
            key = min(present, key=lambda k: loc.lines[(section, k)]) if present else ""
        raise loc.error(section, key, str(exc)) from None
