"""Command-line entry point: ``twoscale-ocp {run,gradcheck,compare,sample-dump}``.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .config import RunConfig, load_config
from .errors import ConfigError, LoadError, NumericError
from .gradcheck import run_gradcheck
from .losses import loss_optimality, loss_penalized, weight_at_epoch
from .metrics_io import (EvalGrid, exact_references, export_grid, l1_error, load_reference, make_evaluator,
                         net_field, read_history, write_history, write_json)
from .netcore import TwoScaleConfig, init_params, layer_sizes_for
from .problems import check_wellposedness, make_benchmark
from .sampling import CollocationSet, make_collocation
from .training import TrainSettings, TrainState, load_checkpoint, save_checkpoint, successive_train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
GRADCHECK_TOL = 1e-5


# --- shared setup ---------------------------------------------------------------------

def _load(args) -> RunConfig:
    return load_config(args.config, overrides={"seed": args.seed})


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out or f"runs/{Path(args.config).stem}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(TwoScaleConfig(cfg.center_y, cfg.gamma), TwoScaleConfig(cfg.center_w, cfg.gamma),
                         cfg.weights, cfg.lr, cfg.log_every, cfg.compile, cfg.seed)


def _collocation(cfg: RunConfig, spec) -> CollocationSet:
    n1, n2 = cfg.interior
    return make_collocation(spec.domain, n1, n2, cfg.boundary_per_side, cfg.boundary_dist,
                            cfg.interior_mode, cfg.seed)


def _references(cfg: RunConfig, args, eps: float):
    """``(y_ref, p_ref)`` at ``eps``: closed form if available, else files at the target eps."""
    y_ref, p_ref = exact_references(cfg.benchmark, eps)
    if y_ref is None and eps == cfg.eps:
        y_ref = load_reference(args.reference) if args.reference else None
        p_ref = load_reference(args.reference_adjoint) if args.reference_adjoint else None
    return y_ref, p_ref


# --- run ------------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    factory = lambda e: make_benchmark(cfg.benchmark, e, cfg.beta)
    spec = factory(cfg.eps)
    wp = check_wellposedness(spec, seed=cfg.seed)
    if not wp.passed:
        raise ConfigError(f"{cfg.source}: coefficients violate c - div(zeta)/2 >= {wp.c0} (min {wp.min_value:.3g})")
    for name in ("reference", "reference_adjoint"):
        if getattr(args, name):
            load_reference(getattr(args, name))  # fail before training, not after
    settings = _settings(cfg)
    grid = EvalGrid(spec.domain, *cfg.eval_grid)
    sizes = layer_sizes_for(2, cfg.hidden)

    start_epoch = 0
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.formulation != cfg.formulation:
            raise ConfigError(f"{args.resume}: checkpoint formulation {state.formulation} != {cfg.formulation}")
        colloc = CollocationSet.read_csv(Path(args.resume) / "collocation.csv")
        hist = out / "history.csv"
        if hist.exists():
            for row in read_history(hist):
                if row["epoch"] < state.epoch:
                    state.history.append(**{k: (int(v) if k == "epoch" else v) for k, v in row.items()})
        start_epoch = state.epoch
    else:
        state = TrainState.fresh(init_params(sizes, 2 * cfg.seed), init_params(sizes, 2 * cfg.seed + 1),
                                 cfg.formulation, cfg.continuation.eps0)
        colloc = _collocation(cfg, spec)

    def evaluator_factory(eps_k):
        y_ref, p_ref = _references(cfg, args, eps_k)
        if y_ref is None and p_ref is None:
            return None
        return make_evaluator(cfg.formulation, settings.cfg_y, settings.cfg_w, grid, cfg.beta, y_ref, p_ref)

    ckpt = out / "checkpoint"

    def on_chunk_end(st, col):
        save_checkpoint(st, ckpt)
        col.to_csv(ckpt / "collocation.csv")
        write_history(st.history, out / "history.csv")

    t0 = time.perf_counter()
    try:
        state, colloc = successive_train(cfg.continuation, cfg.rar, factory, colloc, state, settings,
                                         evaluator_factory, start_epoch=start_epoch, on_chunk_end=on_chunk_end)
    except NumericError as exc:
        last = getattr(exc, "last_state", None)
        if last is not None:
            save_checkpoint(last, out / "checkpoint_abort")
            write_history(last.history, out / "history.csv")
        raise
    wall = time.perf_counter() - t0

    eps = state.eps_current
    write_history(state.history, out / "history.csv")
    export_grid(net_field(state.params_y, settings.cfg_y, eps), grid, out / "grid_y.csv")
    export_grid(net_field(state.params_w, settings.cfg_w, eps), grid, out / "grid_w.csv")
    colloc.to_csv(out / "collocation.csv")
    summary = _summary(cfg, args, state, colloc, settings, grid, wall, start_epoch)
    write_json(summary, out / "summary.json")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _summary(cfg, args, state, colloc, settings, grid, wall, start_epoch) -> dict:
    eps = state.eps_current
    spec = make_benchmark(cfg.benchmark, eps, cfg.beta)
    last = max(state.epoch - 1, 0)
    w1, w2 = (weight_at_epoch(s, last) for s in settings.weights)
    if cfg.formulation == "optimality":
        b = loss_optimality(state.params_y, state.params_w, settings.cfg_y, settings.cfg_w, colloc, spec, w1, w2)
        losses = dict(total=b.total, r_state=b.r_state, r_adj=b.r_adj, b_y=b.b_y, b_p=b.b_p)
    else:
        b = loss_penalized(state.params_y, state.params_w, settings.cfg_y, settings.cfg_w, colloc, spec, w1, w2)
        losses = dict(total=b.total, tracking=b.tracking, r_pen=b.r_pen, b_y=b.b_y)
    out = dict(benchmark=cfg.benchmark.value, formulation=cfg.formulation, eps=eps, seed=cfg.seed,
               epochs=state.epoch, n_interior=colloc.n_interior, n_boundary=colloc.n_boundary,
               final_losses=losses, wall_clock_seconds=wall, train_seconds=state.train_seconds,
               seconds_per_epoch=_per_epoch_cost(state.history.rows, wall, state.epoch - start_epoch))
    y_ref, p_ref = _references(cfg, args, eps)
    if y_ref is not None:
        out["l1_y"] = l1_error(net_field(state.params_y, settings.cfg_y, eps), y_ref, grid)
    if p_ref is not None:
        u_ref = lambda x: -p_ref(x) / cfg.beta
        w = net_field(state.params_w, settings.cfg_w, eps)
        if cfg.formulation == "optimality":
            out["l1_p"] = l1_error(w, p_ref, grid)
            out["l1_u"] = l1_error(lambda x: -w(x) / cfg.beta, u_ref, grid)
        else:
            out["l1_u"] = l1_error(w, u_ref, grid)
    return out


def _per_epoch_cost(rows, wall: float, n_epochs: int) -> float:
    # slope of elapsed time between the first and last log rows; skips one-off compile cost
    if len(rows) >= 2 and rows[-1]["epoch"] > rows[0]["epoch"]:
        return (rows[-1]["elapsed"] - rows[0]["elapsed"]) / (rows[-1]["epoch"] - rows[0]["epoch"])
    return wall / max(n_epochs, 1)


# --- gradcheck --------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    try:
        hidden = tuple(int(h) for h in args.hidden.split(",") if h.strip()) if args.hidden is not None else (8, 8)
    except ValueError:
        raise ConfigError(f"--hidden expects comma-separated integers, got {args.hidden!r}") from None
    worst = 0.0
    for formulation in ("optimality", "penalized"):
        rep = run_gradcheck(cfg.benchmark, formulation, cfg.eps, cfg.beta, hidden, args.points,
                            cfg.seed, cfg.gamma, corrupt=args.corrupt_gradient)
        print(f"{formulation:10s} params={rep.n_params:4d} hidden={list(hidden)} "
              f"param_grad={rep.param_error:.3e} input_grad={rep.grad_error:.3e} "
              f"laplacian={rep.laplacian_error:.3e}")
        worst = max(worst, rep.worst)
    ok = worst <= GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_VERIFY


# --- compare ----------------------------------------------------------------------------

def _read_run(run_dir: Path):
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise LoadError(f"missing summary file {summary_path}")
    return read_history(run_dir / "history.csv"), json.loads(summary_path.read_text())


def cmd_compare(args) -> int:
    a_dir, b_dir = Path(args.run_a), Path(args.run_b)
    (ha, sa), (hb, sb) = _read_run(a_dir), _read_run(b_dir)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)

    fields = ("total", "l1_y", "l1_w")
    by_epoch = {}
    for tag, hist in (("a", ha), ("b", hb)):
        for row in hist:
            entry = by_epoch.setdefault(int(row["epoch"]), {})
            for f in fields:
                entry[f"{tag}_{f}"] = row.get(f)
    cols = ["epoch"] + [f"{t}_{f}" for f in fields for t in ("a", "b")] + [f"diff_{f}" for f in fields]
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for epoch in sorted(by_epoch):
            e = by_epoch[epoch]
            diffs = [_diff(e.get(f"a_{f}"), e.get(f"b_{f}")) for f in fields]
            w.writerow([epoch] + [_cell(e.get(c)) for c in cols[1:1 + 2 * len(fields)]] + [_cell(d) for d in diffs])

    lines = [f"A: {a_dir} ({sa['formulation']})", f"B: {b_dir} ({sb['formulation']})"]
    for key in ("l1_y", "l1_p", "l1_u"):
        va, vb = sa.get(key), sb.get(key)
        if va is None and vb is None:
            continue
        verdict = ""
        if va is not None and vb is not None:
            verdict = "  equal" if va == vb else f"  lower: {'A' if va < vb else 'B'}"
        lines.append(f"final {key}: A={_txt(va)} B={_txt(vb)}{verdict}")
    ca, cb = sa["seconds_per_epoch"], sb["seconds_per_epoch"]
    lines.append(f"seconds per epoch: A={ca:.4g} B={cb:.4g}  ratio A/B={ca / cb:.3g}")
    text = "\n".join(lines) + "\n"
    (out / "verdict.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _diff(a, b):
    return None if a is None or b is None else a - b


def _cell(v):
    return "" if v is None else f"{v:.17g}"


def _txt(v):
    return "n/a" if v is None else f"{v:.4e}"


# --- sample-dump ------------------------------------------------------------------------

def cmd_sample_dump(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    colloc = _collocation(cfg, make_benchmark(cfg.benchmark, cfg.eps, cfg.beta))
    colloc.to_csv(out / "collocation.csv")
    print(f"wrote {colloc.n_interior} interior and {colloc.n_boundary} boundary points to {out / 'collocation.csv'}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twoscale-ocp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="TOML run configuration")
            p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("run", help="train one configuration")
    common(p)
    p.add_argument("--reference", help="state reference grid CSV (for problems without a closed form)")
    p.add_argument("--reference-adjoint", help="adjoint reference grid CSV")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference derivative verification")
    common(p)
    p.add_argument("--hidden", help="comma-separated hidden widths of the test nets (default 8,8)")
    p.add_argument("--points", type=int, default=10, help="interior test points")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="side-by-side report of two finished runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    common(p, config=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sample-dump", help="write the initial collocation set as CSV")
    common(p)
    p.set_defaults(func=cmd_sample_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
