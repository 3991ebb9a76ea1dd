import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from twoscale_ocp.errors import ConfigError, LoadError, NumericError
from twoscale_ocp.losses import (
    BC_PENALTY_WEIGHTS, BOUNDARY_WEIGHTS, PDE_PENALTY_WEIGHTS, StageSchedule, loss_optimality, loss_penalized,
)
from twoscale_ocp.netcore import MlpParams, TwoScaleConfig, init_params, layer_sizes_for, net_value, two_scale_features
from twoscale_ocp.problems import DEFAULT_CENTERS, UNIT_SQUARE, BenchmarkId, make_benchmark
from twoscale_ocp.sampling import RarConfig, make_collocation
from twoscale_ocp.training import (
    AdamState, ContinuationConfig, CoupledObjective, LrSchedule, TrainingHistory, TrainSettings, TrainState,
    adam_step, continuation_sequence, load_checkpoint, recover_control, save_checkpoint, successive_train,
    train_stage,
)

BID = BenchmarkId.EXP_BOUNDARY_LAYER
SIZES = layer_sizes_for(2, (6, 6))


def _settings(form="optimality", log_every=5):
    cy, cw = DEFAULT_CENTERS[BID]
    w = (BOUNDARY_WEIGHTS, BOUNDARY_WEIGHTS) if form == "optimality" else (PDE_PENALTY_WEIGHTS, BC_PENALTY_WEIGHTS)
    return TrainSettings(TwoScaleConfig(cy), TwoScaleConfig(cw), w, log_every=log_every)


def _state(form="optimality", eps=0.1, seed=0):
    return TrainState.fresh(init_params(SIZES, 2 * seed), init_params(SIZES, 2 * seed + 1), form, eps)


def _colloc(seed=0):
    return make_collocation(UNIT_SQUARE, 5, 5, 4, "beta-half", seed=seed)


# --- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    adam, p = adam_step(AdamState.zeros(3), np.array([1.0, 2.0, 3.0]), np.zeros(3), 1e-3)
    assert adam.t == 1
    np.testing.assert_array_equal(p, [1.0, 2.0, 3.0])


def test_adam_first_step_by_hand():
    _, p = adam_step(AdamState.zeros(1), np.zeros(1), np.ones(1), 1e-3)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-15)
    assert p[0] == pytest.approx(-0.000999999990, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_adam_matches_torch(seed, n):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=n)
    grads = rng.normal(size=(15, n))
    xt = torch.tensor(x0, requires_grad=True)
    opt = torch.optim.Adam([xt], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    adam, x = AdamState.zeros(n), x0.copy()
    for g in grads:
        opt.zero_grad()
        xt.grad = torch.tensor(g)
        opt.step()
        adam, x = adam_step(adam, x, g, 1e-2)
    np.testing.assert_allclose(x, xt.detach().numpy(), rtol=1e-12, atol=1e-14)
    assert adam.t == 15 and np.all(adam.v >= 0)


def test_adam_rejects_bad_input():
    with pytest.raises(NumericError):
        adam_step(AdamState.zeros(2), np.zeros(2), np.array([1.0, np.inf]), 1e-3)
    with pytest.raises(ConfigError):
        adam_step(AdamState.zeros(2), np.zeros(2), np.zeros(3), 1e-3)
    with pytest.raises(ConfigError):
        adam_step(AdamState.zeros(2), np.zeros(2), np.zeros(2), 0.0)


def test_lr_schedule():
    lr = LrSchedule()
    assert lr(0) == 1e-3 and lr(1999) == 1e-3
    assert lr(2000) == pytest.approx(9e-4)
    assert lr(10**7) == 1e-5
    with pytest.raises(ConfigError):
        LrSchedule(lr0=-1.0)


# --- continuation --------------------------------------------------------------------

def test_continuation_sequence_example():
    seq = continuation_sequence(ContinuationConfig(0.1, 10.0, 5e-4, 10))
    assert seq == pytest.approx([0.1, 0.01, 0.001, 5e-4], rel=1e-15)
    assert seq[-1] == 5e-4


def test_single_stage_when_already_at_target():
    assert continuation_sequence(ContinuationConfig(0.01, 2.0, 0.01, 10)) == [0.01]


@given(st.floats(1e-4, 1.0), st.floats(1.01, 20.0), st.floats(1e-4, 1.0))
def test_continuation_rule(eps0, ell, frac):
    target = eps0 * frac
    seq = continuation_sequence(ContinuationConfig(eps0, ell, target, 1))
    assert seq[0] == eps0 and seq[-1] == target
    assert seq.count(target) == 1
    for a, b in zip(seq, seq[1:]):
        assert b == max(a / ell, target)


def test_continuation_validation():
    with pytest.raises(ConfigError):
        ContinuationConfig(0.01, 10.0, 0.1, 10)
    with pytest.raises(ConfigError):
        ContinuationConfig(0.1, 1.0, 0.01, 10)


def test_warm_start_and_feature_refresh():
    """Stage k+1 starts from the exact parameters stage k ended with, at the next eps."""
    starts, ends = [], []
    cont = ContinuationConfig(0.1, 2.0, 0.04, 3)
    successive_train(cont, RarConfig(enabled=False), lambda e: make_benchmark(BID, e), _colloc(), _state(),
                     _settings(), on_stage_start=lambda k, e, s: starts.append((e, s.theta().tobytes())),
                     on_stage_end=lambda k, e, s: ends.append((e, s.theta().tobytes(), s.epoch)))
    assert [e for e, _ in starts] == pytest.approx([0.1, 0.05, 0.04])
    for (_, end, _), (_, start) in zip(ends, starts[1:]):
        assert end == start
    assert [ep for *_, ep in ends] == [3, 6, 9]


def test_stage_features_use_current_eps():
    st_ = _state(eps=0.02)
    cfg = _settings().cfg_y
    f = two_scale_features(np.array([0.5, 0.5]), st_.eps_current, cfg)
    assert f[-1] == pytest.approx(50.0)


# --- history and state ----------------------------------------------------------------

def test_history_validation():
    h = TrainingHistory("penalized")
    h.append(epoch=0, total=1.0)
    h.append(epoch=0, total=0.5)
    with pytest.raises(ConfigError):
        h.append(epoch=-1)
    with pytest.raises(ConfigError):
        h.append(epoch=3, r_adj=1.0)
    assert h.rows[0]["l1_y"] is None


def test_unknown_formulation():
    with pytest.raises(ConfigError):
        _state(form="alternating")


def test_checkpoint_roundtrip(tmp_path):
    st_ = train_stage(_state(), make_benchmark(BID, 0.1), _colloc(), _settings(), 3)
    save_checkpoint(st_, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.theta().tobytes() == st_.theta().tobytes()
    assert back.adam.m.tobytes() == st_.adam.m.tobytes() and back.adam.v.tobytes() == st_.adam.v.tobytes()
    assert (back.epoch, back.adam.t, back.eps_current, back.formulation) == (3, 3, 0.1, "optimality")


def test_checkpoint_missing(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "nothing")


# --- stage training -------------------------------------------------------------------

def test_zero_epochs_is_noop():
    st_ = _state()
    assert train_stage(st_, make_benchmark(BID, 0.1), _colloc(), _settings(), 0) is st_


def test_quadratic_surrogate_decreases():
    objective = CoupledObjective("optimality", (5, 1), (5, 1), TwoScaleConfig((0, 0)), TwoScaleConfig((0, 0)))
    theta = np.ones(12)
    adam, values = AdamState.zeros(12), []
    for _ in range(100):
        values.append(float(theta @ theta))
        adam, theta = adam_step(adam, theta, 2 * theta, 1e-2)
    assert all(b < a for a, b in zip(values, values[1:]))
    assert objective.n_y == 6


@pytest.mark.parametrize("form", ["optimality", "penalized"])
def test_training_reduces_loss(form):
    spec, col, s = make_benchmark(BID, 0.1), _colloc(), _settings(form, log_every=1000)
    st0 = _state(form)
    fn = loss_optimality if form == "optimality" else loss_penalized
    before = fn(st0.params_y, st0.params_w, s.cfg_y, s.cfg_w, col, spec, 1000.0, 1000.0, eps=0.1).total
    st1 = train_stage(st0, spec, col, s, 200)
    after = fn(st1.params_y, st1.params_w, s.cfg_y, s.cfg_w, col, spec, 1000.0, 1000.0, eps=0.1).total
    assert after < before
    assert st1.epoch == 200 and st1.adam.t == 200
    assert [r["epoch"] for r in st1.history.rows] == [0, 199]


def test_logged_loss_matches_breakdown():
    spec, col, s = make_benchmark(BID, 0.1), _colloc(), _settings()
    st0 = _state()
    st1 = train_stage(st0, spec, col, s, 1)
    row = st1.history.rows[0]
    b = loss_optimality(st0.params_y, st0.params_w, s.cfg_y, s.cfg_w, col, spec, 1000.0, 1000.0, eps=0.1)
    assert row["total"] == pytest.approx(b.total, rel=1e-12)
    assert row["r_adj"] == pytest.approx(b.r_adj, rel=1e-12)


def test_runs_are_bitwise_deterministic():
    spec, col, s = make_benchmark(BID, 0.1), _colloc(), _settings()
    a = train_stage(_state(), spec, col, s, 20)
    b = train_stage(_state(), spec, col, s, 20)
    assert a.theta().tobytes() == b.theta().tobytes()


def test_non_finite_loss_keeps_last_state():
    spec = make_benchmark(BID, 0.1)
    bad_f = lambda x: np.where(np.atleast_2d(x)[:, 0] > 0.5, np.nan, 0.0)
    bad = type(spec)(spec.domain, spec.eps, spec.zeta, spec.div_zeta, spec.c, bad_f, spec.y_d, beta=spec.beta)
    st0 = _state()
    with pytest.raises(NumericError) as err:
        train_stage(st0, bad, _colloc(), _settings(), 5)
    last = err.value.last_state
    assert last.epoch == 0 and last.theta().tobytes() == st0.theta().tobytes()
    assert err.value.index is not None


def test_state_gradient_changes_with_adjoint_weights():
    spec, col, s = make_benchmark(BID, 0.1), _colloc(), _settings()
    from twoscale_ocp.losses import ResidualData
    obj = CoupledObjective("optimality", SIZES, SIZES, s.cfg_y, s.cfg_w)
    data = ResidualData.build(spec, col)
    theta = _state().theta()
    n_y = init_params(SIZES, 0).n_params
    _, _, g1 = obj.value_and_grad(theta, data, 0.1, 1.0, 1.0)
    theta2 = theta.copy()
    theta2[n_y + 3] += 0.5
    _, _, g2 = obj.value_and_grad(theta2, data, 0.1, 1.0, 1.0)
    assert not np.allclose(g1[:n_y], g2[:n_y])


# --- RAR and resume --------------------------------------------------------------------

def test_rar_grows_collocation_between_chunks():
    notes = []
    rar = RarConfig(pool_size=200, top_k=7, period=4)
    cont = ContinuationConfig(0.1, 2.0, 0.05, 8)
    col = _colloc()
    state, out = successive_train(cont, rar, lambda e: make_benchmark(BID, e), col, _state(), _settings(),
                                  on_chunk_end=lambda s, c: notes.append((s.epoch, c.n_interior)))
    # chunks end at 4, 8, 12, 16; no refinement after the last one
    assert [e for e, _ in notes] == [4, 8, 12, 16]
    assert [n for _, n in notes] == [25 + 7, 25 + 14, 25 + 21, 25 + 21]
    assert out.n_interior == 25 + 21 and state.epoch == 16


def test_resume_matches_uninterrupted_run(tmp_path):
    rar = RarConfig(pool_size=100, top_k=5, period=3)
    cont = ContinuationConfig(0.1, 2.0, 0.05, 6)
    factory = lambda e: make_benchmark(BID, e)
    full, full_col = successive_train(cont, rar, factory, _colloc(), _state(), _settings())

    saved = {}

    def grab(s, c):
        if s.epoch == 9:
            save_checkpoint(s, tmp_path / "ck")
            c.to_csv(tmp_path / "col.csv")
            saved["done"] = True

    successive_train(cont, rar, factory, _colloc(), _state(), _settings(), on_chunk_end=grab)
    assert saved
    from twoscale_ocp.sampling import CollocationSet
    st9 = load_checkpoint(tmp_path / "ck")
    col9 = CollocationSet.read_csv(tmp_path / "col.csv")
    resumed, res_col = successive_train(cont, rar, factory, col9, st9, _settings(), start_epoch=9)
    assert resumed.epoch == full.epoch == 12
    assert resumed.theta().tobytes() == full.theta().tobytes()
    np.testing.assert_array_equal(res_col.interior, full_col.interior)


# --- control recovery ------------------------------------------------------------------

def _const_net(value):
    flat = np.zeros(6)
    flat[5] = value
    return MlpParams.from_flat((5, 1), flat)


def test_recover_control_examples():
    cfg, x = TwoScaleConfig((0.0, 0.0)), np.array([0.3, 0.3])
    assert recover_control(_const_net(0.0), cfg, x, 0.1, 1.0) == 0.0
    assert recover_control(_const_net(2.0), cfg, x, 0.1, 1.0) == -2.0
    assert recover_control(_const_net(2.0), cfg, x, 0.1, 4.0) == -0.5
    with pytest.raises(ConfigError):
        recover_control(_const_net(2.0), cfg, x, 0.1, 0.0)


def test_recovered_control_error_is_adjoint_error_over_beta():
    cfg = TwoScaleConfig((0.0, 0.0))
    p = init_params(SIZES, 3)
    x = np.random.default_rng(0).uniform(size=(50, 2))
    ref_p = np.sin(x[:, 0])
    beta = 2.5
    u_err = np.abs(recover_control(p, cfg, x, 0.1, beta) - (-ref_p / beta)).mean()
    p_err = np.abs(net_value(p, cfg, x, 0.1) - ref_p).mean()
    assert u_err == pytest.approx(p_err / beta, rel=1e-14)
