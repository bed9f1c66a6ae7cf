"""Losses, optimizer steps, the fit loop, and grid tuning."""

import math

import numpy as np
import pytest

from _synth import make_learnable_windows, make_sample
from forewarn.core import QuantileGrid, ValidationError, WindowConfig, WindowSample
from forewarn.forecasters import ForecasterSpec, init_params, stack_windows
from forewarn.training import (
    TrainConfig,
    TrainingDivergedError,
    TuneResult,
    adam_step,
    clip_global_norm,
    fit,
    gaussian_nll,
    grid_tune,
    init_adam_state,
    loss_and_grads,
    pinball_loss,
)

WC = WindowConfig(h=2, cm=2)
QS = QuantileGrid((0.2, 0.5, 0.8))

TINY_HYPERS = {
    "seq2seq": {"decoder_layers": 1, "neurons": 20},
    "convseq2seq": {"decoder_layers": 1, "neurons": 20, "channels": 20},
    "ar_rnn": {"cell": "gru", "nodes": 40, "dropout": 0.1},
    "attn_seq2seq": {"state": 40, "heads": 4, "dropout": 0.1},
}


def tiny_batch(rng, n=3, wc=WC):
    return stack_windows([make_sample(rng, wc) for _ in range(n)])


# ------------------------------------------------------------------ config


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(patience=-1)


# ------------------------------------------------------------------ losses


def test_pinball_hand_values():
    assert abs(pinball_loss(1.0, 0.0, 0.9) - 0.9) < 1e-15
    assert abs(pinball_loss(0.0, 1.0, 0.9) - 0.1) < 1e-15
    assert abs(pinball_loss(0.0, 1.0, 0.1) - 0.9) < 1e-15
    assert pinball_loss(5.0, 5.0, 0.3) == 0.0
    assert abs(pinball_loss(2.0, -1.0, 0.25) - 0.75) < 1e-15
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(ValidationError):
            pinball_loss(1.0, 0.0, bad)


def test_gaussian_nll_hand_values():
    # -log pdf of N(0,1) at 0 is 0.5*log(2*pi)
    assert abs(gaussian_nll(0.0, 0.0, 1.0) - 0.9189385332046727) < 1e-15
    assert abs((gaussian_nll(1.0, 0.0, 1.0) - gaussian_nll(0.0, 0.0, 1.0)) - 0.5) < 1e-15
    assert abs(gaussian_nll(3.0, 1.0, 2.0) - (0.9189385332046727 + math.log(2.0) + 0.5)) < 1e-12
    with pytest.raises(ValidationError):
        gaussian_nll(0.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        gaussian_nll(0.0, 0.0, -1.0)
    # tiny-but-positive sigma is floored at 1e-6 instead of overflowing
    assert abs(gaussian_nll(0.0, 0.0, 1e-12) - (0.9189385332046727 + math.log(1e-6))) < 1e-10


def test_batch_pinball_matches_pointwise():
    rng = np.random.default_rng(0)
    spec = ForecasterSpec("seq2seq", TINY_HYPERS["seq2seq"])
    params = init_params(spec, WC, len(QS), 2, 3, seed=0)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    batch = tiny_batch(rng, n=4)
    loss, grads = loss_and_grads(spec, params, batch, QS, train=False, compute_grads=False)
    assert grads == {}
    y = batch["future_target"]
    want = np.mean(
        [pinball_loss(y[i, t], 0.0, q) for i in range(4) for t in range(WC.h) for q in QS.qs]
    )
    assert abs(loss - want) < 1e-12


def test_batch_nll_matches_pointwise():
    rng = np.random.default_rng(1)
    spec = ForecasterSpec("ar_rnn", TINY_HYPERS["ar_rnn"])
    params = init_params(spec, WC, len(QS), 2, 3, seed=0)
    params = {k: np.zeros_like(v) for k, v in params.items()}
    batch = tiny_batch(rng, n=4)
    loss, _ = loss_and_grads(spec, params, batch, QS, train=False, compute_grads=False)
    sigma = math.log(2.0) + 1e-6
    y = batch["future_target"]
    want = np.mean([gaussian_nll(y[i, t], 0.0, sigma) for i in range(4) for t in range(WC.h)])
    assert abs(loss - want) < 1e-12


# ------------------------------------------------------------------ optimizer


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    assert np.allclose(grads["a"], [0.6]) and np.allclose(grads["b"], [0.8])

    grads = {"g": np.array([10.0])}
    assert clip_global_norm(grads, 1.0) == 10.0
    assert np.allclose(grads["g"], [1.0])

    grads = {"g": np.array([0.5])}
    assert clip_global_norm(grads, 1.0) == 0.5
    assert grads["g"][0] == 0.5  # under the cap: untouched


def test_adam_first_step_hand_value():
    # bias correction makes the first step -lr * g/(|g|+eps) exactly
    params = {"w": np.array([0.0])}
    state = init_adam_state(params)
    adam_step(params, {"w": np.array([1.0])}, state, lr=1e-3)
    assert state["t"] == 1
    assert abs(params["w"][0] - (-1e-3 / (1.0 + 1e-8))) < 1e-18


def test_adam_matches_reference_iteration():
    rng = np.random.default_rng(2)
    w = rng.standard_normal(4)
    params = {"w": w.copy()}
    state = init_adam_state(params)
    ref_w = w.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    lr, b1, b2, eps = 2e-3, 0.9, 0.999, 1e-8
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(params, {"w": g.copy()}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref_w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert np.allclose(params["w"], ref_w, rtol=1e-14, atol=0)


# ------------------------------------------------------------------ gradients


def _gradcheck(spec, params, batch, grid, rng, coords_per_tensor=3, step=1e-4):
    loss, grads = loss_and_grads(spec, params, batch, grid, train=False)
    assert sorted(grads) == sorted(params)

    def f():
        return loss_and_grads(spec, params, batch, grid, train=False, compute_grads=False)[0]

    worst = 0.0
    worst_where = ""
    for name in sorted(params):
        arr = params[name]
        assert grads[name].shape == arr.shape
        assert np.all(np.isfinite(grads[name]))
        n_coords = min(coords_per_tensor, arr.size)
        for flat in rng.choice(arr.size, size=n_coords, replace=False):
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            hi = f()
            arr[idx] = orig - step
            lo = f()
            arr[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            ad = grads[name][idx]
            rel = abs(ad - fd) / max(1e-6, abs(ad), abs(fd))
            if rel > worst:
                worst, worst_where = rel, f"{name}{tuple(int(i) for i in idx)}"
    assert worst < 1e-3, f"gradient mismatch at {worst_where}: rel={worst:.3e}"


@pytest.mark.parametrize("family", sorted(TINY_HYPERS))
def test_gradients_match_central_differences(family):
    for seed in range(5):
        hyper = dict(TINY_HYPERS[family])
        if family == "ar_rnn":
            hyper["cell"] = "gru" if seed % 2 == 0 else "lstm"
        spec = ForecasterSpec(family, hyper)
        rng = np.random.default_rng((90, seed))
        params = init_params(spec, WC, len(QS), 2, 3, seed=seed)
        batch = tiny_batch(rng, n=3)
        _gradcheck(spec, params, batch, QS, rng)


# ------------------------------------------------------------------ fit


def make_split_windows(seed=0, n_train=60, n_val=20, wc=WC, noise=0.05):
    rng = np.random.default_rng(seed)
    return (
        make_learnable_windows(rng, n_train, wc, noise=noise),
        make_learnable_windows(rng, n_val, wc, noise=noise),
    )


def test_fit_is_deterministic_to_the_byte():
    train, val = make_split_windows()
    spec = ForecasterSpec("seq2seq", TINY_HYPERS["seq2seq"])
    cfg = TrainConfig(epochs=3, batch_size=16, seed=5)
    a = fit(spec, train, val, cfg, grid=QS)
    b = fit(spec, train, val, cfg, grid=QS)
    assert sorted(a.params) == sorted(b.params)
    for name in a.params:
        assert a.params[name].tobytes() == b.params[name].tobytes()
    assert a.training_log == b.training_log


def test_fit_restores_best_epoch_parameters():
    train, val = make_split_windows(seed=3)
    spec = ForecasterSpec("seq2seq", TINY_HYPERS["seq2seq"])
    model = fit(spec, train, val, TrainConfig(epochs=8, batch_size=16, lr=5e-3, seed=1), grid=QS)
    log = model.training_log
    assert log["best_val_loss"] == min(log["val_loss"])
    assert log["val_loss"][log["best_epoch"] - 1] == log["best_val_loss"]
    recomputed, _ = loss_and_grads(
        model.spec, model.params, stack_windows(val), QS, train=False, compute_grads=False
    )
    assert abs(recomputed - log["best_val_loss"]) < 1e-12


def test_fit_learns_a_learnable_task():
    train, val = make_split_windows(seed=4, n_train=200, n_val=60)
    spec = ForecasterSpec("seq2seq", TINY_HYPERS["seq2seq"])
    cfg = TrainConfig(epochs=25, batch_size=32, lr=1e-2, patience=25, seed=2)
    model = fit(spec, train, val, cfg, grid=QS)
    log = model.training_log
    assert log["best_val_loss"] < 0.6 * log["val_loss"][0]


def test_fit_early_stopping_invariants():
    train, val = make_split_windows(seed=5)
    spec = ForecasterSpec("seq2seq", TINY_HYPERS["seq2seq"])
    cfg = TrainConfig(epochs=40, batch_size=16, lr=1e-2, patience=3, seed=3)
    log = fit(spec, train, val, cfg, grid=QS).training_log
    stopped = log["stopped_epoch"]
    assert stopped <= cfg.epochs
    assert len(log["val_loss"]) == stopped and len(log["train_loss"]) == stopped
    assert 1 <= log["best_epoch"] <= stopped
    if stopped < cfg.epochs:
        assert stopped - log["best_epoch"] >= cfg.patience


def test_fit_persistence_is_a_no_op():
    train, val = make_split_windows(seed=6, n_train=8, n_val=4)
    model = fit(ForecasterSpec("persistence"), train, val, TrainConfig(epochs=1), grid=QS)
    assert model.params == {}
    assert "persistence" in model.training_log["note"]


def test_fit_rejects_empty_or_malformed_windows():
    train, val = make_split_windows(seed=7, n_train=4, n_val=2)
    with pytest.raises(ValidationError, match="non-empty"):
        fit(ForecasterSpec("persistence"), [], val, TrainConfig())
    rng = np.random.default_rng(0)
    bad = WindowSample(
        scenario=train[0].scenario,
        past_target=rng.standard_normal(3),
        past_covariates=rng.standard_normal((3, 2)),
        future_target=rng.standard_normal(2),
        denorm=(0.0, 1.0),
    )  # k=3 is not a multiple of h=2
    with pytest.raises(ValidationError, match="do not fit"):
        fit(ForecasterSpec("persistence"), [bad], val, TrainConfig())


def test_training_divergence_raises_and_names_the_epoch():
    train, val = make_split_windows(seed=8, n_train=24, n_val=8)
    spec = ForecasterSpec("seq2seq", {"decoder_layers": 4, "neurons": 20})
    cfg = TrainConfig(epochs=10, batch_size=16, lr=1e3, seed=4)
    with pytest.raises(TrainingDivergedError, match=r"epoch \d+"):
        fit(spec, train, val, cfg, grid=QS)


# ------------------------------------------------------------------ tuning


def test_grid_tune_rows_and_divergence_ranking():
    train, val = make_split_windows(seed=9, n_train=20, n_val=10)
    base = TrainConfig(epochs=2, batch_size=16, lr=1e-2, seed=0)
    result = grid_tune(
        "seq2seq",
        {"neurons": (20,), "lr": (1e-2, 1e3)},
        train,
        val,
        base,
        repetitions=2,
        grid=QS,
    )
    assert isinstance(result, TuneResult)
    assert len(result.rows) == 2 * 2  # two configs x two repetitions
    assert result.best_cfg.lr == 1e-2
    assert result.best_spec.params["neurons"] == 20
    diverged = [r for r in result.rows if r["lr"] == 1e3]
    assert diverged and all(r["diverged"] and r["val_qrisk_sum"] == math.inf for r in diverged)
    stable = [r for r in result.rows if r["lr"] == 1e-2]
    assert all(not r["diverged"] and math.isfinite(r["val_qrisk_sum"]) for r in stable)
    assert all(len(r["per_q"]) == len(QS) for r in stable)


def test_grid_tune_rejects_unknown_axes():
    train, val = make_split_windows(seed=10, n_train=8, n_val=4)
    with pytest.raises(ValidationError, match="unknown tuning axes"):
        grid_tune("seq2seq", {"bogus": (1,)}, train, val, TrainConfig(), grid=QS)


def test_grid_tune_persistence_has_single_config():
    train, val = make_split_windows(seed=11, n_train=8, n_val=4)
    result = grid_tune(
        "persistence", {}, train, val, TrainConfig(epochs=1, seed=0), repetitions=3, grid=QS
    )
    assert len(result.rows) == 3
    assert result.best_spec.family == "persistence"
    assert all(math.isfinite(r["val_qrisk_sum"]) and r["val_qrisk_sum"] > 0 for r in result.rows)


def test_grid_tune_seeds_vary_per_rep():
    train, val = make_split_windows(seed=12, n_train=8, n_val=4)
    result = grid_tune(
        "persistence", {}, train, val, TrainConfig(epochs=1, seed=0), repetitions=3, grid=QS
    )
    seeds = [r["seed"] for r in result.rows]
    assert len(set(seeds)) == 3
