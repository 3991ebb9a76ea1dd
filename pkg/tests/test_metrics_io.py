import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from twoscale_ocp.errors import ConfigError, LoadError, NumericError
from twoscale_ocp.metrics_io import (
    EvalGrid, ReferenceField, exact_references, export_grid, l1_error, load_reference, make_evaluator,
    read_history, write_history,
)
from twoscale_ocp.netcore import TwoScaleConfig, init_params, layer_sizes_for
from twoscale_ocp.problems import UNIT_SQUARE, BenchmarkId, RectDomain, eta
from twoscale_ocp.training import TrainingHistory, TrainState

GRID = EvalGrid(UNIT_SQUARE, 50, 40)


def _write(path, text):
    path.write_text(text)
    return path


def test_grid_includes_boundary_and_is_row_major():
    g = EvalGrid(UNIT_SQUARE, 3, 2)
    np.testing.assert_array_equal(g.nodes, [[0, 0], [0.5, 0], [1, 0], [0, 1], [0.5, 1], [1, 1]])
    assert EvalGrid(UNIT_SQUARE).nodes.shape == (40000, 2)
    with pytest.raises(ConfigError):
        EvalGrid(UNIT_SQUARE, 1, 5)


def test_l1_examples():
    zero = lambda x: np.zeros(len(x))
    assert l1_error(zero, zero, GRID) == 0.0
    assert l1_error(lambda x: np.full(len(x), 0.5), zero, GRID) == pytest.approx(0.5, rel=1e-15)
    n1 = 200
    assert abs(l1_error(lambda x: x[:, 0], zero, EvalGrid(UNIT_SQUARE, n1, n1)) - 0.5) <= 1 / n1


def test_l1_scales_with_area():
    dom = RectDomain((0.0, 0.0), (2.0, 3.0))
    assert l1_error(lambda x: np.ones(len(x)), lambda x: np.zeros(len(x)), EvalGrid(dom, 5, 5)) == pytest.approx(6.0)


def test_l1_non_finite():
    with pytest.raises(NumericError):
        l1_error(lambda x: np.where(x[:, 0] > 0.5, np.nan, 0.0), lambda x: np.zeros(len(x)), GRID)


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_l1_symmetric_nonnegative(a, b, c):
    f = lambda x: a * x[:, 0] + b
    g = lambda x: c * x[:, 1] * x[:, 0]
    e = l1_error(f, g, GRID)
    assert e >= 0 and e == l1_error(g, f, GRID)
    assert l1_error(f, f, GRID) == 0.0


def test_reference_constant_and_linear(tmp_path):
    p = _write(tmp_path / "c.csv", "x1,x2,value\n0,0,1\n1,0,1\n0,1,1\n1,1,1\n")
    x = np.random.default_rng(0).uniform(size=(20, 2))
    np.testing.assert_allclose(load_reference(p)(x), 1.0, rtol=1e-15)
    rows = [f"{a},{b},{a}" for b in (0, 0.5, 1) for a in (0, 0.5, 1)]
    p = _write(tmp_path / "l.csv", "x1,x2,value\n" + "\n".join(rows) + "\n")
    np.testing.assert_allclose(load_reference(p)(x), x[:, 0], rtol=1e-14, atol=1e-15)


@settings(max_examples=25)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_bilinear_reproduced_exactly(coef):
    a, b, c, d = coef
    f = lambda x1, x2: a + b * x1 + c * x2 + d * x1 * x2
    x1, x2 = np.array([0.0, 0.3, 1.0]), np.array([0.0, 0.6, 0.8, 1.0])
    g1, g2 = np.meshgrid(x1, x2)
    ref = ReferenceField(x1, x2, f(g1, g2))
    x = np.random.default_rng(1).uniform(size=(30, 2))
    np.testing.assert_allclose(ref(x), f(x[:, 0], x[:, 1]), atol=1e-13)


@pytest.mark.parametrize("text,where", [
    ("a,b,c\n0,0,1\n", ":1:"),
    ("x1,x2,value\n0,0,1\n1,0\n", ":3:"),
    ("x1,x2,value\n0,0,1\n1,0,abc\n", ":3:"),
    ("x1,x2,value\n0,0,1\n1,0,1\n0,1,nan\n1,1,1\n", ":4:"),
])
def test_reference_errors_name_the_line(tmp_path, text, where):
    with pytest.raises(LoadError, match=where):
        load_reference(_write(tmp_path / "r.csv", text))


def test_reference_rejects_non_rectangular(tmp_path):
    with pytest.raises(LoadError, match="rectangular"):
        load_reference(_write(tmp_path / "r.csv", "x1,x2,value\n0,0,1\n1,0,1\n0,1,1\n"))
    with pytest.raises(LoadError):
        load_reference(tmp_path / "absent.csv")


def test_export_zero_field(tmp_path):
    export_grid(lambda x: np.zeros(len(x)), EvalGrid(UNIT_SQUARE, 2, 2), tmp_path / "z.csv")
    lines = (tmp_path / "z.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,value" and len(lines) == 5
    assert all(line.endswith(",0") for line in lines[1:])


def test_export_load_roundtrip(tmp_path):
    f = lambda x: np.exp(x[:, 0]) * np.sin(3 * x[:, 1]) / 7.0
    export_grid(f, GRID, tmp_path / "f.csv")
    back = load_reference(tmp_path / "f.csv")
    x = GRID.nodes
    np.testing.assert_allclose(back(x), f(x), rtol=1e-15, atol=1e-15)


def test_export_exact_state_maximum(tmp_path):
    eps = 0.01
    y_ref, _ = exact_references(BenchmarkId.EXP_BOUNDARY_LAYER, eps)
    grid = EvalGrid(UNIT_SQUARE)
    export_grid(y_ref, grid, tmp_path / "y.csv")
    values = np.loadtxt(tmp_path / "y.csv", delimiter=",", skiprows=1)[:, 2]
    # independent oracle: 1-D maximization of eta, squared
    opt = minimize_scalar(lambda z: -eta(z, eps), bounds=(0.5, 1.0), method="bounded", options={"xatol": 1e-12})
    true_max = opt.fun ** 2
    assert values.max() <= true_max + 1e-12
    # quadratic in the node spacing near a smooth maximum: eta'' ~ 1/eps
    h = 1.0 / (grid.n1 - 1)
    assert values.max() >= true_max - 2 * (h * h / eps) * abs(opt.fun)


def test_exact_references_absent_for_parabolic():
    assert exact_references(BenchmarkId.PARABOLIC_LAYERS, 0.01) == (None, None)


def test_history_files(tmp_path):
    h = TrainingHistory("optimality")
    write_history(h, tmp_path / "h0.csv")
    assert (tmp_path / "h0.csv").read_text().strip() == ",".join(h.columns)
    for e in range(3):
        h.append(epoch=e * 500, eps=0.01, total=1.0 / 3 + e, r_state=1e-7 * e, lr=1e-3, l1_y=0.1 / 7)
    write_history(h, tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 4
    back = read_history(tmp_path / "h.csv")
    for row, orig in zip(back, h.rows):
        for k, v in orig.items():
            assert row[k] == v
    with pytest.raises(LoadError):
        read_history(tmp_path / "nope.csv")


def test_evaluator_control_error_follows_adjoint():
    cfg = TwoScaleConfig((0.0, 0.0))
    sizes = layer_sizes_for(2, (4,))
    state = TrainState.fresh(init_params(sizes, 0), init_params(sizes, 1), "optimality", 0.1)
    y_ref, p_ref = exact_references(BenchmarkId.EXP_BOUNDARY_LAYER, 0.1)
    out = make_evaluator("optimality", cfg, cfg, GRID, 2.0, y_ref, p_ref)(state)
    assert set(out) == {"l1_y", "l1_w", "l1_u"}
    assert out["l1_u"] == pytest.approx(out["l1_w"] / 2.0, rel=1e-15)
    assert make_evaluator("optimality", cfg, cfg, GRID, 1.0, None, None)(state) == {}
