import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from epiforecast.features import WindowSample
from epiforecast.models import build_lstm_baseline
from epiforecast.nn import autograd as ag
from epiforecast.nn.autograd import Tensor, no_grad
from epiforecast.nn.gradcheck import check_gradients, relative_error
from epiforecast.nn.layers import (
    LSTM,
    Dense,
    Initializer,
    LayerNorm,
    MultiHeadAttention,
    ParamStore,
    adam_step,
    dense,
    sinusoidal_encoding,
)
from epiforecast.nn.training import EarlyStopping, TrainConfig, TrainingDiverged, split_samples, train

from gradient_cases import ALL_CASES


@pytest.mark.parametrize("name", sorted(ALL_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    fn, tensors = ALL_CASES[name](seed)
    errors = check_gradients(fn, tensors, eps=1e-5)
    assert max(errors.values()) < 1e-4, errors


def test_relative_error_floor_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5
    assert relative_error(np.ones(3), np.ones(3)) == 0.0


# -- dense -------------------------------------------------------------------

def test_dense_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = dense(x, Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)), "sigmoid")
    assert np.all(out.data == 0.5)
    out = dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)), "linear")
    assert np.array_equal(out.data, x)
    out = dense(np.zeros((1, 1)), Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)), "softplus")
    assert out.data[0, 0] == pytest.approx(math.log(2), abs=1e-15)


def test_dense_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(4, 3\).*\(2, 2\)"):
        dense(np.zeros((4, 3)), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_softplus_stable_for_large_inputs():
    out = ag.softplus(Tensor(np.array([-800.0, 0.0, 800.0])))
    assert np.all(np.isfinite(out.data))
    assert out.data[2] == 800.0


# -- LSTM --------------------------------------------------------------------

def test_lstm_zero_weights_give_zero_output():
    store = ParamStore()
    layer = LSTM(store, "l", 5, 4, Initializer(mode="zeros"))
    out = layer(Tensor(np.random.default_rng(1).normal(size=(3, 7, 5))))
    assert np.all(out.data == 0.0)


def test_lstm_single_step_is_one_cell():
    rng = np.random.default_rng(2)
    H, F = 3, 2
    W, U, b = rng.normal(size=(F, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    x = rng.normal(size=(4, 1, F))
    z = x[:, 0] @ W + b  # h_prev = 0
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, g, o = sig(z[:, :H]), np.tanh(z[:, 2 * H:3 * H]), sig(z[:, 3 * H:])
    expected = o * np.tanh(i * g)  # c_prev = 0
    out = ag.lstm(Tensor(x), Tensor(W), Tensor(U), Tensor(b))
    assert np.allclose(out.data, expected, rtol=1e-13, atol=1e-15)


def test_lstm_needs_a_timestep():
    layer = LSTM(ParamStore(), "l", 2, 3)
    with pytest.raises(ValueError):
        layer(Tensor(np.zeros((1, 0, 2))))


def test_lstm_non_finite_is_fatal():
    with pytest.raises(FloatingPointError):
        ag.lstm(Tensor(np.full((1, 2, 1), np.nan)), Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))),
                Tensor(np.ones(4)))


# -- attention ---------------------------------------------------------------

def test_attention_uniform_when_keys_identical():
    store = ParamStore()
    mha = MultiHeadAttention(store, "a", dim=4, heads=2, head_dim=3, init=Initializer(5))
    x = np.tile(np.random.default_rng(0).normal(size=(1, 1, 4)), (2, 6, 1))
    mha(Tensor(x))
    assert np.allclose(mha.last_weights, 1 / 6, atol=1e-15)


def test_attention_single_position_returns_value_projection():
    store = ParamStore()
    mha = MultiHeadAttention(store, "a", dim=4, heads=2, head_dim=3, init=Initializer(6))
    x = np.random.default_rng(1).normal(size=(3, 1, 4))
    out = mha(Tensor(x))
    assert np.all(mha.last_weights == 1.0)
    value = (x @ mha.Wv.data + mha.bv.data) @ mha.Wo.data + mha.bo.data
    assert np.allclose(out.data, value, rtol=1e-13)


@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_attention_rows_sum_to_one(seed, T):
    store = ParamStore()
    mha = MultiHeadAttention(store, "a", dim=5, heads=3, head_dim=2, init=Initializer(seed))
    x = np.random.default_rng(seed).normal(0, 3, size=(2, T, 5))
    mha(Tensor(x))
    assert np.all(np.abs(mha.last_weights.sum(axis=-1) - 1) <= 1e-12)


def test_attention_shape_mismatch():
    mha = MultiHeadAttention(ParamStore(), "a", dim=4, heads=1, head_dim=2)
    with pytest.raises(ValueError):
        mha(Tensor(np.zeros((1, 3, 5))))


def test_sinusoidal_encoding_first_row():
    enc = sinusoidal_encoding(3, 4)
    assert np.array_equal(enc[0], [0, 1, 0, 1])
    assert enc[1, 0] == pytest.approx(math.sin(1.0))


# -- layer norm --------------------------------------------------------------

def test_layer_norm_examples():
    store = ParamStore()
    ln = LayerNorm(store, "n", 4)
    ln.bias.data = np.array([0.1, -0.2, 0.3, 0.0])
    assert np.allclose(ln(Tensor(np.full((2, 4), 7.0))).data, ln.bias.data, atol=1e-12)
    ln.bias.data = np.zeros(4)
    x = np.array([[-1.0, 1.0, -1.0, 1.0]])  # mean 0, variance 1
    assert np.allclose(ln(Tensor(x)).data, x, atol=1e-6)


# -- dropout -----------------------------------------------------------------

def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert ag.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert ag.dropout(x, 0.7, False, None) is x
    with pytest.raises(ValueError):
        ag.dropout(x, 1.0, True, np.random.default_rng(0))


def test_dropout_is_unbiased():
    x = Tensor(np.full(100_000, 3.0))
    out = ag.dropout(x, 0.5, True, np.random.default_rng(42)).data
    assert set(np.unique(out)) <= {0.0, 6.0}
    assert abs(out.mean() - 3.0) <= 0.05 * 3.0


def test_dropout_mask_is_seeded():
    x = Tensor(np.ones(50))
    a = ag.dropout(x, 0.4, True, np.random.default_rng(9)).data
    b = ag.dropout(x, 0.4, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


# -- L1 ----------------------------------------------------------------------

def test_l1_examples():
    assert ag.l1_loss(np.ones(3), np.ones(3)).data == 0.0
    assert ag.l1_loss(np.full(4, 2.5), np.full(4, 4.0)).data == 1.5
    assert ag.l1_loss(np.array([1.0, 2.0]), np.zeros(2)).data == 1.5
    with pytest.raises(ValueError):
        ag.l1_loss(np.zeros(2), np.zeros(3))


@given(arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)), arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)))
def test_l1_non_negative_and_zero_iff_equal(p, t):
    loss = float(ag.l1_loss(p, t).data)
    assert loss >= 0
    assert (loss == 0) == bool(np.all(p == t))


# -- autograd plumbing ------------------------------------------------------

def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = ag.sum(ag.mul(w, 2.0))
    assert not out.requires_grad and out._parents == ()


def test_gradients_accumulate_through_shared_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ag.mul(x, x)
    ag.sum(ag.add(y, y)).backward()
    assert x.grad[0] == 8.0


# -- Adam --------------------------------------------------------------------

def _scalar_store(value=0.0):
    store = ParamStore()
    store.add("w", np.array([value]))
    return store


def test_adam_zero_gradient_leaves_params():
    store = _scalar_store(1.5)
    adam_step(store, {"w": np.zeros(1)})
    assert store["w"].data[0] == 1.5
    assert store.step == 1


def test_adam_zero_gradient_decays_moments():
    store = _scalar_store(1.5)
    store.m["w"][:] = 0.2
    store.v["w"][:] = 0.3
    adam_step(store, {"w": np.zeros(1)})
    assert store.m["w"][0] == pytest.approx(0.9 * 0.2, rel=1e-15)
    assert store.v["w"][0] == pytest.approx(0.999 * 0.3, rel=1e-15)


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step(g):
    lr, eps = 1e-3, 1e-8
    store = _scalar_store()
    adam_step(store, {"w": np.array([g])}, lr=lr, eps=eps)
    # m_hat = g, v_hat = g^2, so |dw| = lr |g| / (|g| + eps)
    assert abs(store["w"].data[0]) == pytest.approx(lr * abs(g) / (abs(g) + eps), rel=1e-12)
    assert abs(store["w"].data[0]) == pytest.approx(lr, rel=1e-4)
    assert np.sign(store["w"].data[0]) == -np.sign(g)


def test_adam_opposite_gradients_hand_trace():
    # step 1: m = 0.1 g, v = 0.001 g^2 -> m_hat = g, v_hat = g^2, dw = -lr
    # step 2: m = 0.09 g - 0.1 g = -0.01 g, v = 0.001999 g^2
    #         m_hat = -0.01 g / 0.19 = -g / 19, v_hat = g^2, dw = +lr / 19
    # net displacement -18/19 lr: the second step undoes only a nineteenth
    lr, g = 1e-3, 0.5
    store = _scalar_store()
    adam_step(store, {"w": np.array([g])}, lr=lr, eps=0.0)
    adam_step(store, {"w": np.array([-g])}, lr=lr, eps=0.0)
    assert store["w"].data[0] == pytest.approx(-18 / 19 * lr, rel=1e-12)


def test_adam_rejects_nan_gradient():
    store = _scalar_store()
    with pytest.raises(FloatingPointError):
        adam_step(store, {"w": np.array([np.nan])})


def test_param_store_counts_and_snapshots():
    store = ParamStore()
    Dense(store, "d", 3, 2)
    assert store.count() == 8
    snap = store.snapshot()
    store["d.W"].data = store["d.W"].data + 1
    store.load(snap)
    assert np.array_equal(store["d.W"].data, snap["d.W"])
    with pytest.raises(KeyError):
        store.add("d.W", np.zeros(1))


def test_initializer_bounds_and_determinism():
    a = Initializer(3)((50, 40), 25)
    b = Initializer(3)((50, 40), 25)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 1 / 5


# -- early stopping and training ---------------------------------------------

def test_early_stopping_never_triggers_on_improvement():
    stopper = EarlyStopping(20)
    assert not any(stopper.update(e, 1.0 / e) for e in range(1, 1001))
    assert stopper.best_epoch == 1000


def test_early_stopping_halts_patience_after_best():
    stopper = EarlyStopping(20)
    losses = [5, 4, 3, 2, 1] + [1.5] * 30
    stopped = None
    for epoch, loss in enumerate(losses, 1):
        if stopper.update(epoch, loss):
            stopped = epoch
            break
    assert stopper.best_epoch == 5
    assert stopped == 25


def test_ties_do_not_count_as_improvement():
    stopper = EarlyStopping(2)
    stopper.update(1, 1.0)
    assert not stopper.update(2, 1.0)
    assert stopper.update(3, 1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def _toy_samples(n=60, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        ctx = rng.uniform(0, 0.1, size=(5, 1))
        act = rng.uniform(0, 1, size=(5, 12))
        target = np.array([ctx.mean() * (1 - 0.5 * act[-1, 0])])
        out.append(WindowSample(ctx, act, np.zeros(6), target, geo_id=f"R{k % 3}", target_index=k))
    return out


def test_chronological_split_holds_out_latest_windows():
    samples = _toy_samples(60)
    train_idx, val_idx = split_samples(samples, 0.1)
    assert len(val_idx) == 6 and len(train_idx) == 54
    for geo in ("R0", "R1", "R2"):
        tr = [samples[i].target_index for i in train_idx if samples[i].geo_id == geo]
        va = [samples[i].target_index for i in val_idx if samples[i].geo_id == geo]
        assert max(tr) < min(va)


def test_training_is_bitwise_reproducible_and_restores_best():
    samples = _toy_samples()
    cfg = TrainConfig(max_epochs=15, batch_size=8, seed=4)
    runs = []
    for _ in range(2):
        model = build_lstm_baseline(hidden=6, lookback=5, seed=1)
        history = train(model, samples, cfg)
        runs.append((model, history))
    (m1, h1), (m2, h2) = runs
    for name in m1.params:
        assert np.array_equal(m1.params[name].data, m2.params[name].data)
    assert h1.to_csv() == h2.to_csv()
    assert len(h1) <= 15
    _, val_idx = split_samples(samples, cfg.val_fraction)
    batch = tuple(a[val_idx] for a in m1.batch(samples))
    with no_grad():
        assert float(m1.loss(batch).data) == h1.best_val_loss


def test_training_divergence_reports_history():
    samples = _toy_samples()
    samples[3] = WindowSample(samples[3].context, samples[3].action, np.zeros(6), np.array([np.inf]),
                              geo_id="R0", target_index=3)
    model = build_lstm_baseline(hidden=4, lookback=5)
    with pytest.raises(TrainingDiverged) as info:
        train(model, samples, TrainConfig(max_epochs=5, batch_size=64))
    assert info.value.history.records == []
    assert math.isfinite(info.value.history.initial_val_loss)


def test_train_needs_two_samples():
    with pytest.raises(ValueError):
        train(build_lstm_baseline(hidden=2, lookback=5), _toy_samples(1))
