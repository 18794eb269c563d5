"""Network kernels: activations, normalization, corruption, gradients,
optimizer, pretraining, fine-tuning, and the checkpoint format.

Independent oracles used here:
- a neuron-by-neuron forward pass written with explicit Python loops
- central finite differences for gradients
- a straight-line scalar transcription of the optimizer recurrences
- an eigen-decomposition PCA residual floor for the linear-autoencoder case
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popflow.errors import (CorruptFile, DimensionMismatch,
                            FormatVersionMismatch, NonFiniteGradient)
from popflow.sdae import (DaeLayer, SdaeModel, TrainConfig, backward,
                          batch_loss, corrupt, denormalize, finetune,
                          fit_bounds, forward, init_model, init_opt_state,
                          load_model, model_params, mse_loss, normalize,
                          pretrain_layer, pretrain_stack, relu,
                          rmsprop_momentum_step, save_model)


def new_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def loop_forward(model, x):
    """Independent straight-line forward pass, one neuron at a time."""
    a = list(x)
    for layer in model.layers:
        out = []
        for i in range(layer.w.shape[0]):
            acc = layer.b[i]
            for j in range(layer.w.shape[1]):
                acc += layer.w[i, j] * a[j]
            out.append(max(acc, 0.0))
        a = out
    final = []
    for i in range(model.top_w.shape[0]):
        acc = model.top_b[i]
        for j in range(model.top_w.shape[1]):
            acc += model.top_w[i, j] * a[j]
        final.append(acc)
    return np.array(final)


# ---------------------------------------------------------------------------
# relu


def test_relu_examples():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0, 0.0])
    assert np.array_equal(relu(x), x)
    assert np.array_equal(relu(np.array([-5.0, -0.1])), [0.0, 0.0])


# ---------------------------------------------------------------------------
# normalization


def test_normalize_range_branch():
    assert normalize(5.0, 0.0, 10.0) == pytest.approx(0.5)


def test_normalize_constant_nonzero_maps_to_one():
    assert normalize(4.0, 4.0, 4.0) == pytest.approx(1.0)


def test_normalize_constant_zero_passes_through():
    assert normalize(0.0, 0.0, 0.0) == 0.0


def test_denormalize_restores_constants():
    assert denormalize(1.0, 4.0, 4.0) == 4.0
    assert denormalize(0.0, 0.0, 0.0) == 0.0
    assert denormalize(0.25, 2.0, 6.0) == pytest.approx(3.0)


def test_normalize_mixed_columns_round_trip():
    lo = np.array([0.0, 4.0, 0.0])
    hi = np.array([10.0, 4.0, 0.0])
    v = np.array([[5.0, 4.0, 0.0], [10.0, 4.0, 0.0]])
    u = normalize(v, lo, hi)
    assert np.allclose(u, [[0.5, 1.0, 0.0], [1.0, 1.0, 0.0]], atol=1e-15)
    assert np.allclose(denormalize(u, lo, hi), v, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    lo=st.floats(-1e3, 1e3),
    span=st.floats(1e-3, 1e3),
    t=st.floats(-0.5, 1.5),
)
def test_round_trip_ranged_branch(lo, span, t):
    hi = lo + span
    v = lo + t * span  # includes values outside the training bounds
    back = denormalize(normalize(v, lo, hi), lo, hi)
    assert back == pytest.approx(v, abs=1e-12 * max(1.0, abs(v)))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-1e3, 1e3))
def test_round_trip_constant_branch(c):
    back = denormalize(normalize(c, c, c), c, c)
    assert back == pytest.approx(c, abs=1e-12 * max(1.0, abs(c)))


# ---------------------------------------------------------------------------
# corruption


def test_corrupt_level_zero_identity():
    x = np.arange(1.0, 11.0)
    out = corrupt(x, 0.0, new_rng())
    assert np.array_equal(out, x)


def test_corrupt_exact_cardinality():
    x = np.ones(100)
    out = corrupt(x, 0.3, new_rng(3))
    assert int(np.sum((out == 0) & (x != 0))) == 30


def test_corrupt_seeded_mask_reproducible():
    x = np.arange(1.0, 51.0)
    a = corrupt(x, 0.2, new_rng(9))
    b = corrupt(x, 0.2, new_rng(9))
    assert np.array_equal(a, b)


def test_corrupt_rows_get_independent_masks():
    x = np.ones((20, 10))
    out = corrupt(x, 0.5, new_rng(1))
    masks = {tuple(np.flatnonzero(row == 0)) for row in out}
    assert len(masks) > 1


# ---------------------------------------------------------------------------
# forward


def test_forward_identity_composition():
    layer = DaeLayer(w=np.eye(3), b=np.zeros(3), w_dec=None, b_dec=None)
    model = SdaeModel(layers=[layer], top_w=np.eye(3), top_b=np.zeros(3),
                      corruption_level=0.0)
    x = np.array([0.3, 0.0, 2.0])
    y, _ = forward(model, x)
    assert np.array_equal(y[0], x)


def test_forward_zero_input_zero_biases():
    model = init_model(4, (5,), 3, 0.0, new_rng(2))
    y, _ = forward(model, np.zeros(4))
    assert np.array_equal(y[0], np.zeros(3))


def test_forward_matches_loop_oracle():
    model = init_model(2, (4,), 3, 0.0, new_rng(11))
    rng = new_rng(12)
    for _ in range(5):
        x = rng.uniform(-1, 1, size=2)
        y, _ = forward(model, x)
        assert np.allclose(y[0], loop_forward(model, x), atol=1e-12)


def test_forward_dimension_mismatch():
    model = init_model(4, (5,), 3, 0.0, new_rng(2))
    with pytest.raises(DimensionMismatch):
        forward(model, np.zeros(5))


def test_infer_mode_ignores_rng_and_corruption():
    model = init_model(6, (4,), 2, 0.5, new_rng(0))
    x = new_rng(1).uniform(0.1, 1.0, size=(3, 6))
    y1, cache = forward(model, x)          # no rng at all
    assert np.array_equal(cache["x"], x)   # untouched input
    y2, _ = forward(model, x)
    assert np.array_equal(y1, y2)
    with pytest.raises(ValueError):
        forward(model, x, train=True)      # corruption needs a generator


# ---------------------------------------------------------------------------
# loss


def test_mse_examples():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert mse_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(0.5)
    assert mse_loss(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == pytest.approx(12.5)


def test_mse_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mse_loss(np.zeros(2), np.zeros(3))


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_at_perfect_fit():
    model = init_model(3, (4,), 2, 0.0, new_rng(5))
    x = new_rng(6).uniform(0.1, 1.0, size=(4, 3))
    y, cache = forward(model, x)
    grads = backward(model, cache, y)
    assert all(np.allclose(g, 0.0, atol=1e-15) for g in grads)


def test_backward_matches_finite_differences():
    model = init_model(3, (5, 4), 2, 0.0, new_rng(8))
    rng = new_rng(9)
    x = rng.uniform(0, 1, size=(6, 3))
    y_true = rng.uniform(0, 1, size=(6, 2))
    _, cache = forward(model, x)
    grads = backward(model, cache, y_true)
    h = 1e-5
    for p, g in zip(model_params(model), grads):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = p[ix]
            p[ix] = orig + h
            up = batch_loss(y_true, forward(model, x)[0])
            p[ix] = orig - h
            down = batch_loss(y_true, forward(model, x)[0])
            p[ix] = orig
            fd = (up - down) / (2 * h)
            assert g[ix] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_backward_identical_rows_equal_single_row():
    model = init_model(3, (4,), 2, 0.0, new_rng(10))
    rng = new_rng(11)
    x = rng.uniform(0, 1, size=3)
    y = rng.uniform(0, 1, size=2)
    _, cache1 = forward(model, x)
    single = backward(model, cache1, y)
    xm = np.tile(x, (7, 1))
    ym = np.tile(y, (7, 1))
    _, cache7 = forward(model, xm)
    batch = backward(model, cache7, ym)
    for a, b in zip(single, batch):
        assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------------------
# optimizer


def transcribed_scalar_run(w0, grads, eta, momentum, rho=0.99, eps=1e-8):
    """Straight-line transcription of the update recurrences, scalars only."""
    w = w0
    rr = 0.0
    prev_applied = 0.0
    trace = []
    for g in grads:
        rr = rho * rr + (1.0 - rho) * g * g
        raw = eta / math.sqrt(eps + rr) * g
        applied = momentum * raw + (1.0 - momentum) * prev_applied
        w = w - applied
        prev_applied = applied
        trace.append(w)
    return trace


def test_optimizer_scalar_hand_example():
    """g=0.1 from a fresh state: rr=1e-4, raw ~ 9.99950e-3, applied ~ 8.99955e-3."""
    w = [np.array([0.0])]
    opt = init_opt_state(w, eta=0.001, momentum=0.9)
    rmsprop_momentum_step(w, [np.array([0.1])], opt)
    assert opt.rr[0][0] == pytest.approx(1e-4, rel=1e-12)
    raw = 0.001 * 0.1 / math.sqrt(1e-8 + 1e-4)
    assert raw == pytest.approx(9.99950e-3, rel=1e-5)
    applied = 0.9 * raw
    assert applied == pytest.approx(8.99955e-3, rel=1e-5)
    assert w[0][0] == pytest.approx(-applied, rel=1e-12)


def test_optimizer_zero_gradient_noop():
    w = [np.array([1.5, -2.0])]
    opt = init_opt_state(w, eta=0.01, momentum=0.9)
    rmsprop_momentum_step(w, [np.zeros(2)], opt)
    assert np.array_equal(w[0], [1.5, -2.0])


def test_optimizer_momentum_two_step_behavior():
    """Second applied step differs through the momentum term.

    From a fresh accumulator the growing RMS denominator outweighs the
    momentum carry, so the second step is smaller; once the accumulator sits
    at its fixed point g^2 the momentum term makes the second step larger.
    """
    trace = transcribed_scalar_run(0.0, [0.1, 0.1], eta=0.001, momentum=0.9)
    applied1 = -trace[0]
    applied2 = trace[0] - trace[1]
    assert applied2 != applied1
    assert abs(applied2) < abs(applied1)

    # saturated accumulator: raw step is constant, momentum accumulates
    w = [np.array([0.0])]
    opt = init_opt_state(w, eta=0.001, momentum=0.9)
    opt.rr[0][...] = 0.1 * 0.1 / (1 - 0.0)  # fixed point of the rr recurrence
    before = w[0][0]
    rmsprop_momentum_step(w, [np.array([0.1])], opt)
    first = before - w[0][0]
    before = w[0][0]
    rmsprop_momentum_step(w, [np.array([0.1])], opt)
    second = before - w[0][0]
    assert abs(second) > abs(first)


def test_optimizer_matches_transcription_on_random_sequences():
    rng = new_rng(123)
    for trial in range(10):
        grads = rng.normal(0, 1, size=100)
        eta = float(rng.uniform(1e-4, 1e-2))
        momentum = float(rng.uniform(0.0, 0.99))
        w = [np.array([float(rng.normal())])]
        w0 = w[0][0]
        opt = init_opt_state(w, eta=eta, momentum=momentum)
        expected = transcribed_scalar_run(w0, grads, eta, momentum)
        for g, exp in zip(grads, expected):
            rmsprop_momentum_step(w, [np.array([g])], opt)
            assert w[0][0] == pytest.approx(exp, abs=1e-12, rel=1e-12)


def test_optimizer_rejects_non_finite():
    w = [np.array([1.0])]
    opt = init_opt_state(w, eta=0.01, momentum=0.9)
    with pytest.raises(NonFiniteGradient):
        rmsprop_momentum_step(w, [np.array([np.nan])], opt)


# ---------------------------------------------------------------------------
# pretraining


def test_pretrain_reduces_reconstruction_loss():
    rng = new_rng(21)
    data = rng.uniform(0.1, 0.9, size=(100, 6))
    cfg = TrainConfig(hidden_sizes=(8,), epochs_unsup=500, batch_size=100,
                      corruption_level=0.0, eta_unsup=1e-3)
    model = init_model(6, (8,), 6, 0.0, new_rng(22))
    history = pretrain_layer(model.layers[0], data, cfg, new_rng(23))
    assert history[-1] < history[0]


def test_pretrain_deterministic():
    rng = new_rng(30)
    data = rng.uniform(0.1, 0.9, size=(60, 5))
    cfg = TrainConfig(hidden_sizes=(4,), epochs_unsup=40, batch_size=20,
                      corruption_level=0.1)
    runs = []
    for _ in range(2):
        model = init_model(5, (4,), 5, 0.1, new_rng(31))
        pretrain_layer(model.layers[0], data, cfg, new_rng(32))
        runs.append((model.layers[0].w.copy(), model.layers[0].b.copy()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_pretrain_linear_regime_reaches_pca_floor():
    """Width-2 bottleneck on rank-3 positive data vs the PCA-2 residual.

    The init seed is one where every unit starts with healthy activity on
    this data (a fully dead ReLU unit would never recover and the affine
    regime would not apply)."""
    rng = new_rng(40)
    latent = rng.uniform(-1.0, 1.0, size=(300, 3))
    mixing = np.array([[0.20, 0.15, 0.18, 0.12, 0.16],
                       [0.14, -0.12, 0.10, 0.17, -0.11],
                       [0.08, 0.12, -0.08, 0.08, 0.12]])
    data = 0.5 + latent @ mixing
    centered = data - data.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    pca_floor = 0.5 * float(np.sum(svals[2:] ** 2)) / data.shape[0]

    cfg = TrainConfig(hidden_sizes=(2,), epochs_unsup=8000, batch_size=300,
                      corruption_level=0.0, eta_unsup=1e-3)
    model = init_model(5, (2,), 5, 0.0, new_rng(100))
    history = pretrain_layer(model.layers[0], data, cfg, new_rng(42))
    assert abs(history[-1] - pca_floor) <= 0.10 * pca_floor


def test_stack_single_layer_equals_pretrain_layer():
    rng = new_rng(50)
    data = rng.uniform(0.1, 0.9, size=(40, 4))
    cfg = TrainConfig(hidden_sizes=(3,), epochs_unsup=25, batch_size=20,
                      corruption_level=0.1)
    stacked = init_model(4, (3,), 4, 0.1, new_rng(51))
    pretrain_stack(stacked, data, cfg, new_rng(52))
    manual = init_model(4, (3,), 4, 0.1, new_rng(51))
    pretrain_layer(manual.layers[0], data, cfg, new_rng(52))
    assert np.array_equal(stacked.layers[0].w, manual.layers[0].w)
    assert np.array_equal(stacked.layers[0].b, manual.layers[0].b)
    assert stacked.layers[0].w_dec is None  # decoder discarded by the stack


def test_stack_feeds_clean_activations_upward():
    rng = new_rng(60)
    data = rng.uniform(0.1, 0.9, size=(40, 4))
    cfg = TrainConfig(hidden_sizes=(3, 3), epochs_unsup=20, batch_size=20,
                      corruption_level=0.2)
    stacked = init_model(4, (3, 3), 4, 0.2, new_rng(61))
    pretrain_stack(stacked, data, cfg, new_rng(62))

    manual = init_model(4, (3, 3), 4, 0.2, new_rng(61))
    rng_replay = new_rng(62)
    pretrain_layer(manual.layers[0], data, cfg, rng_replay)
    acts = np.maximum(data @ manual.layers[0].w.T + manual.layers[0].b, 0.0)
    pretrain_layer(manual.layers[1], acts, cfg, rng_replay)
    assert np.array_equal(stacked.layers[1].w, manual.layers[1].w)
    assert np.array_equal(stacked.layers[1].b, manual.layers[1].b)


def test_stack_seed_determinism():
    rng = new_rng(70)
    data = rng.uniform(0.1, 0.9, size=(30, 4))
    cfg = TrainConfig(hidden_sizes=(3, 2), epochs_unsup=15, batch_size=15,
                      corruption_level=0.1)
    weights = []
    for _ in range(2):
        model = init_model(4, (3, 2), 4, 0.1, new_rng(71))
        pretrain_stack(model, data, cfg, new_rng(72))
        weights.append(np.concatenate([l.w.ravel() for l in model.layers]))
    assert np.array_equal(weights[0], weights[1])


# ---------------------------------------------------------------------------
# fine-tuning


def _toy_supervised(n=60, seed=80):
    rng = new_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 2))
    y = np.column_stack([0.3 + 0.4 * x[:, 0], 0.2 + 0.5 * x[:, 1] ** 2])
    return x, y


def test_finetune_history_and_best_snapshot():
    x, y = _toy_supervised()
    cfg = TrainConfig(hidden_sizes=(6,), epochs_sup=60, batch_size=20,
                      corruption_level=0.0, eta_sup=3e-3, patience=60)
    model = init_model(2, (6,), 2, 0.0, new_rng(81))
    model, history = finetune(model, x[:40], y[:40], x[40:], y[40:], cfg, new_rng(82))
    assert len(history) >= 1
    val_losses = [row[2] for row in history]
    returned_val = batch_loss(y[40:], forward(model, x[40:])[0])
    assert returned_val == pytest.approx(min(val_losses), rel=1e-12)


def test_finetune_early_stop_counts_epochs():
    """With updates below the float resolution, validation never improves
    after the first epoch, so the run stops after patience extra epochs."""
    x, y = _toy_supervised()
    cfg = TrainConfig(hidden_sizes=(4,), epochs_sup=50, batch_size=20,
                      corruption_level=0.0, eta_sup=1e-300, patience=5)
    model = init_model(2, (4,), 2, 0.0, new_rng(83))
    snapshot = [p.copy() for p in model_params(model)]
    model, history = finetune(model, x[:40], y[:40], x[40:], y[40:], cfg, new_rng(84))
    assert len(history) == 6  # first epoch plus patience non-improving ones
    for p, snap in zip(model_params(model), snapshot):
        assert np.allclose(p, snap, atol=1e-250)


def test_finetune_regresses_toy_map_under_two_percent():
    """Regression bound on a tiny one-input map through the full pipeline."""
    rng = new_rng(90)
    x = rng.uniform(0.5, 1.5, size=(2000, 1))
    y = 5.0 + 2.0 * x + 3.0 * x ** 2
    x_lo, x_hi = fit_bounds(x)
    y_lo, y_hi = fit_bounds(y)
    xn = normalize(x, x_lo, x_hi)
    yn = normalize(y, y_lo, y_hi)
    cfg = TrainConfig(hidden_sizes=(8, 8), epochs_sup=150, epochs_unsup=30,
                      batch_size=100, corruption_level=0.05, eta_sup=2e-3,
                      eta_unsup=1e-3, patience=150)
    model = init_model(1, (8, 8), 1, cfg.corruption_level, new_rng(91))
    pretrain_stack(model, xn[:1700], cfg, new_rng(92))
    model, _ = finetune(model, xn[:1700], yn[:1700], xn[1700:], yn[1700:],
                        cfg, new_rng(93))
    pred = denormalize(forward(model, xn[1700:])[0], y_lo, y_hi)
    rmse = float(np.sqrt(np.mean((pred - y[1700:]) ** 2)))
    y_range = float(y.max() - y.min())
    assert rmse < 0.02 * y_range


# ---------------------------------------------------------------------------
# checkpointing


def _trained_like_model():
    model = init_model(3, (4, 3), 5, 0.1, new_rng(100))
    for layer in model.layers:
        layer.w_dec = None
        layer.b_dec = None
    model.x_lo = np.array([0.0, 1.0, -2.0])
    model.x_hi = np.array([1.0, 1.0, 3.0])
    model.y_lo = np.zeros(5)
    model.y_hi = np.arange(1.0, 6.0)
    return model


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = _trained_like_model()
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    again = load_model(path)
    x = new_rng(101).uniform(0, 1, size=(4, 3))
    y1, _ = forward(model, x)
    y2, _ = forward(again, x)
    assert np.array_equal(y1, y2)
    assert np.array_equal(again.x_lo, model.x_lo)
    assert np.array_equal(again.y_hi, model.y_hi)
    assert again.corruption_level == model.corruption_level
    assert again.dims() == model.dims()


def test_checkpoint_truncation_detected(tmp_path):
    model = _trained_like_model()
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:-17])
    with pytest.raises(CorruptFile):
        load_model(path)


def test_checkpoint_bitflip_detected(tmp_path):
    model = _trained_like_model()
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFile):
        load_model(path)


def test_checkpoint_future_version_rejected(tmp_path):
    model = _trained_like_model()
    path = tmp_path / "model.ckpt"
    save_model(model, path)
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(FormatVersionMismatch):
        load_model(path)


def test_checkpoint_requires_bounds(tmp_path):
    model = init_model(3, (4,), 2, 0.0, new_rng(102))
    with pytest.raises(ValueError):
        save_model(model, tmp_path / "m.ckpt")
