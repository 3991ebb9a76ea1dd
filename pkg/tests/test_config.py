from pathlib import Path

import pytest

from twoscale_ocp.config import load_config, parse_config, with_overrides
from twoscale_ocp.errors import ConfigError
from twoscale_ocp.losses import BC_PENALTY_WEIGHTS, PDE_PENALTY_WEIGHTS, weight_at_epoch
from twoscale_ocp.problems import BenchmarkId

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
MINIMAL = 'benchmark = "exp-boundary-layer"\nformulation = "optimality"\neps = 0.01\nseed = 3\n'


def test_minimal_config_uses_full_presets():
    cfg = parse_config(MINIMAL)
    assert cfg.benchmark is BenchmarkId.EXP_BOUNDARY_LAYER and cfg.seed == 3
    assert cfg.hidden == (100, 100, 100) and cfg.interior == (150, 150) and cfg.boundary_per_side == 250
    assert cfg.continuation.epochs_per_stage == 80_000 and cfg.continuation.eps0 == 0.01
    assert cfg.center_y == (1.0, 1.0) and cfg.center_w == (0.0, 0.0)
    assert cfg.eval_grid == (200, 200)


def test_desk_scale_and_penalized_weights():
    cfg = parse_config(MINIMAL.replace("optimality", "penalized") + 'scale = "desk"\n')
    assert cfg.hidden == (50, 50, 50) and cfg.interior == (60, 60) and cfg.boundary_per_side == 100
    assert cfg.continuation.epochs_per_stage == 20_000
    assert cfg.weights == (PDE_PENALTY_WEIGHTS, BC_PENALTY_WEIGHTS)


def test_explicit_sections():
    text = MINIMAL + (
        "[network]\nhidden = [16, 16]\ncenter_y = [0.5, 1.0]\n"
        "[weights]\nboundary = 7.5\n"
        "[continuation]\neps0 = 0.1\nell = 10\nepochs_per_stage = 12\n"
        "[rar]\nenabled = false\n"
    )
    cfg = parse_config(text)
    assert cfg.hidden == (16, 16) and cfg.center_y == (0.5, 1.0)
    assert weight_at_epoch(cfg.weights[0], 10**6) == 7.5
    assert cfg.continuation.eps0 == 0.1 and cfg.continuation.epochs_per_stage == 12
    assert not cfg.rar.enabled


@pytest.mark.parametrize("extra,line,name", [
    ("[network]\nhidden = [0]\n", 6, "network.hidden"),
    ("[collocation]\nboundary_dist = \"cosine\"\n", 6, "collocation.boundary_dist"),
    ("[collocation]\nboundary_per_side = 0\n", 6, "collocation.boundary_per_side"),
    ("[lr]\n\nfactor = 2.0\n", 7, "lr.factor"),
    ("[rar]\ntop_k = 50\npool_size = 10\n", 6, "rar.top_k"),
    ("[continuation]\nell = 1.0\n", 6, "continuation.ell"),
    ("[continuation]\neps0 = 0.001\n", 6, "continuation.eps0"),
    ("[run]\nspeed = 1\n", 6, "run.speed"),
    ("[extras]\n", 5, "extras"),
])
def test_errors_name_file_and_line(extra, line, name):
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + extra, "cfg.toml")
    msg = str(err.value)
    assert msg.startswith(f"cfg.toml:{line}: ") and name in msg


def test_bogus_benchmark():
    with pytest.raises(ConfigError, match=r"cfg.toml:1: benchmark: .*bogus"):
        parse_config(MINIMAL.replace("exp-boundary-layer", "bogus"), "cfg.toml")


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        parse_config(MINIMAL.replace("seed = 3\n", ""))
    with pytest.raises(ConfigError, match="seed"):
        parse_config(MINIMAL.replace("seed = 3", "seed = -1"))


def test_seed_override():
    assert parse_config(MINIMAL, overrides={"seed": 9}).seed == 9
    assert parse_config(MINIMAL, overrides={"seed": None}).seed == 3
    assert with_overrides(parse_config(MINIMAL), seed=4).seed == 4


def test_toml_syntax_error():
    with pytest.raises(ConfigError, match="cfg.toml"):
        parse_config("eps = = 1\n", "cfg.toml")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.toml")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.source == str(path)


def test_shipped_configs_cover_every_benchmark_and_scale():
    seen = {(c.benchmark, c.formulation, c.scale) for c in map(load_config, CONFIGS.glob("ex*.toml"))}
    for bid in BenchmarkId:
        for form in ("optimality", "penalized"):
            assert (bid, form, "full") in seen and (bid, form, "desk") in seen
