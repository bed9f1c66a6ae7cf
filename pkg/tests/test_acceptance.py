"""End-to-end acceptance checks, one test per criterion.

Each test finishes with a single PASS line; run

    pytest tests/test_acceptance.py -v -s

to see the lines (without -s they only appear for failures). The shared
fixture generates the default dataset and trains one model per family; its
wall time is itself part of criterion 6.
"""

import gc
import json
import time

import numpy as np
import pytest

from _synth import make_model, make_sample
from forewarn.cart import cross_validate, extract_rules
from forewarn.core import QuantileGrid, WindowConfig, violation_sign
from forewarn.data import build_split, dataset_hash, fit_norm, windows_for_phase, write_episodes
from forewarn.evaluation import (
    bench,
    confusion,
    evaluate_model,
    f_beta,
    mann_whitney_u,
    q_risk,
    sweep,
    vargha_delaney,
)
from forewarn.forecasters import (
    ForecasterSpec,
    NEURAL_FAMILIES,
    init_params,
    save_checkpoint,
    stack_windows,
)
from forewarn.simulate import SimConfig, generate_dataset
from forewarn.training import TrainConfig, fit, loss_and_grads, pinball_loss

DECISION_Q = 0.995


@pytest.fixture(scope="module")
def workbench():
    """Default dataset, one trained model per family, their test metrics."""
    t0 = time.perf_counter()
    episodes = generate_dataset(SimConfig())  # 200 episodes, seed 42
    split = build_split(episodes)
    norm = fit_norm(episodes, split)
    wc = WindowConfig(h=3, cm=3)
    target = episodes[0].metric_names[0]
    phases = {
        ph: windows_for_phase(episodes, split, wc, norm, ph, target=target)
        for ph in ("train", "val", "test")
    }
    cfg = TrainConfig(epochs=15, batch_size=256, lr=1e-3, clip_norm=1.0, patience=5, seed=0)
    models, evals = {}, {}
    for family in ("persistence",) + tuple(NEURAL_FAMILIES):
        model = fit(
            ForecasterSpec(family), phases["train"], phases["val"], cfg,
            norm=norm, target=target, lc_names=episodes[0].lc_names,
        )
        models[family] = model
        evals[family] = evaluate_model(model, phases["test"], mc_seed=1234)
    return {
        "episodes": episodes,
        "split": split,
        "norm": norm,
        "wc": wc,
        "target": target,
        "phases": phases,
        "cfg": cfg,
        "models": models,
        "evals": evals,
        "elapsed": time.perf_counter() - t0,
    }


# ------------------------------------------------------------- criterion 1


def test_01_formula_hand_values():
    f3 = f_beta(0.993, 0.985)
    assert abs(f3 - 0.986) < 5e-4
    assert abs(pinball_loss(1.0, 0.0, 0.9) - 0.9) < 1e-12
    assert abs(pinball_loss(0.0, 1.0, 0.9) - 0.1) < 1e-12
    assert abs(q_risk(np.array([[2.0]]), np.array([[1.0]]), 0.5) - 0.5) < 1e-12
    assert violation_sign([0.0]) == 1  # touching the threshold is a violation
    assert violation_sign([-0.5, 0.0, -0.2]) == 1
    assert violation_sign([-0.5, -0.1]) == -1
    print(f"\nPASS 1/10 formula hand values: F3(0.993, 0.985)={f3:.4f}, "
          "pinball 0.9/0.1 and q-risk 0.5 exact, sign(0)=+1")


# ------------------------------------------------------------- criterion 2


def test_02_oracle_equivalence():
    rng = np.random.default_rng(202)

    # q-risk against a scalar double sum over 100 random windows
    y = 3.0 * rng.standard_normal((100, 5))
    y_hat = y + rng.standard_normal((100, 5))
    for q in (0.05, 0.5, 0.995):
        num = den = 0.0
        for i in range(100):
            for t in range(5):
                num += pinball_loss(y[i, t], y_hat[i, t], q)
                den += abs(y[i, t])
        assert abs(q_risk(y, y_hat, q) - 2.0 * num / den) < 1e-9

    # rank statistics against exhaustive pair enumeration, all sizes <= 8
    checked = 0
    for n1 in range(1, 9):
        for n2 in range(1, 9):
            for draw in range(3):
                if draw == 0:  # small integer support forces ties
                    a = rng.integers(0, 3, size=n1).astype(float)
                    b = rng.integers(0, 3, size=n2).astype(float)
                else:
                    a = rng.standard_normal(n1)
                    b = rng.standard_normal(n2)
                wins = sum(1.0 for x in a for z in b if x > z)
                ties = sum(1.0 for x in a for z in b if x == z)
                u_ref = wins + 0.5 * ties
                u, _ = mann_whitney_u(a, b)
                assert abs(u - u_ref) < 1e-9
                assert abs(vargha_delaney(a, b) - u_ref / (n1 * n2)) < 1e-12
                checked += 1

    # window origins against a direct scan of every timestep
    eps = generate_dataset(SimConfig(n_scenarios=6, episode_len=53, seed=7))
    split = build_split(eps)
    norm = fit_norm(eps, split)
    target = eps[0].metric_names[0]
    n_windows = 0
    for h, cm in ((1, 1), (2, 3), (5, 2), (12, 1)):
        wc = WindowConfig(h=h, cm=cm)
        for phase in ("train", "val", "test"):
            got = windows_for_phase(eps, split, wc, norm, phase, target=target)
            want = []
            for ep in eps:
                s0, s1 = split.by_episode[ep.id].segment(phase)
                for t in range(ep.length):
                    lookback_fits = t - (wc.k - 1) >= 0
                    future_inside = t + 1 >= s0 and t + h <= s1 - 1
                    if lookback_fits and future_inside:
                        want.append((ep.id, t))
            assert [(s.episode_id, s.origin_t) for s in got] == want
            n_windows += len(want)

    # confusion counts against a naive scan of 1000 labeled pairs
    d = rng.choice((-1, 1), size=1000)
    t = rng.choice((-1, 1), size=1000)
    c = confusion(d, t)
    tp = fp = fn = tn = 0
    for di, ti in zip(d.tolist(), t.tolist()):
        if di == 1 and ti == 1:
            tp += 1
        elif di == 1:
            fp += 1
        elif ti == 1:
            fn += 1
        else:
            tn += 1
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
    print(f"\nPASS 2/10 oracle equivalence: q-risk double sum (3 levels), "
          f"{checked} rank-statistic cases, {n_windows} window origins, confusion over 1000 pairs")


# ------------------------------------------------------------- criterion 3

GRAD_HYPERS = {
    "seq2seq": {"decoder_layers": 1, "neurons": 20},
    "convseq2seq": {"decoder_layers": 1, "neurons": 20, "channels": 20},
    "ar_rnn": {"cell": "gru", "nodes": 40, "dropout": 0.1},
    "attn_seq2seq": {"state": 40, "heads": 4, "dropout": 0.1},
}


def test_03_gradient_checks_all_layers():
    wc = WindowConfig(h=2, cm=2)
    grid = QuantileGrid((0.2, 0.5, 0.8))
    t0 = time.perf_counter()
    worst = 0.0
    layers_checked = 0
    for family in sorted(GRAD_HYPERS):
        for seed in range(5):
            hyper = dict(GRAD_HYPERS[family])
            if family == "ar_rnn":
                hyper["cell"] = "gru" if seed % 2 == 0 else "lstm"
            spec = ForecasterSpec(family, hyper)
            rng = np.random.default_rng((30, seed))
            params = init_params(spec, wc, len(grid), 2, 3, seed=seed)
            batch = stack_windows([make_sample(rng, wc) for _ in range(3)])
            _, grads = loss_and_grads(spec, params, batch, grid, train=False)
            assert sorted(grads) == sorted(params)

            def loss_at():
                return loss_and_grads(
                    spec, params, batch, grid, train=False, compute_grads=False
                )[0]

            step = 1e-4
            for name in sorted(params):
                arr = params[name]
                assert np.all(np.isfinite(grads[name]))
                layers_checked += 1
                for flat in rng.choice(arr.size, size=min(3, arr.size), replace=False):
                    idx = np.unravel_index(flat, arr.shape)
                    orig = arr[idx]
                    arr[idx] = orig + step
                    hi = loss_at()
                    arr[idx] = orig - step
                    lo = loss_at()
                    arr[idx] = orig
                    fd = (hi - lo) / (2.0 * step)
                    ad = grads[name][idx]
                    rel = abs(ad - fd) / max(1e-6, abs(ad), abs(fd))
                    assert rel < 1e-3, f"{family} seed {seed} {name}{idx}: rel={rel:.2e}"
                    worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"\nPASS 3/10 gradient checks: {layers_checked} parameter tensors across "
          f"4 families x 5 seeds, worst rel err {worst:.2e} < 1e-3, {elapsed:.1f}s < 60s")


# ------------------------------------------------------------- criterion 4


def test_04_pinball_minimizer_is_the_quantile():
    rng = np.random.default_rng(404)
    draws = rng.standard_normal(10_000)
    gaps = {}
    for q in (0.05, 0.5, 0.95):
        candidates = np.quantile(draws, np.linspace(0.0, 1.0, 2001))
        best_loss, best_c = np.inf, None
        for i in range(0, candidates.size, 250):  # chunked to bound memory
            c = candidates[i : i + 250][:, None]
            diff = draws[None, :] - c
            losses = np.mean(
                q * np.clip(diff, 0.0, None) + (1.0 - q) * np.clip(-diff, 0.0, None), axis=1
            )
            j = int(np.argmin(losses))
            if losses[j] < best_loss:
                best_loss, best_c = float(losses[j]), float(candidates[i + j])
        gap = abs(best_c - float(np.quantile(draws, q)))
        assert gap <= 0.02, f"q={q}: minimizer off by {gap:.4f}"
        gaps[q] = gap
    shown = ", ".join(f"q={q}: {g:.4f}" for q, g in gaps.items())
    print(f"\nPASS 4/10 pinball minimizer matches empirical quantile within 0.02 ({shown})")


# ------------------------------------------------------------- criterion 5


def test_05_alarm_counts_monotone_in_quantile(workbench):
    for family, ev in workbench["evals"].items():
        fns = [ev.per_q[q]["fn"] for q in ev.quantiles]
        fps = [ev.per_q[q]["fp"] for q in ev.quantiles]
        assert all(a >= b for a, b in zip(fns, fns[1:])), f"{family}: FN not non-increasing {fns}"
        assert all(a <= b for a, b in zip(fps, fps[1:])), f"{family}: FP not non-decreasing {fps}"
    print(f"\nPASS 5/10 monotone alarms: FN non-increasing and FP non-decreasing over "
          f"{len(workbench['evals'])} models x {len(QuantileGrid().qs)} quantiles, zero violations")


# ------------------------------------------------------------- criterion 6


def test_06_learning_beats_persistence(workbench):
    evals = workbench["evals"]
    base = evals["persistence"].per_q[DECISION_Q]["q_risk"]
    improvements = {}
    for family in NEURAL_FAMILIES:
        qr = evals[family].per_q[DECISION_Q]["q_risk"]
        rel = (base - qr) / base
        assert rel >= 0.20, f"{family}: only {rel:.1%} better than persistence"
        improvements[family] = rel
    best_family, best_f3 = max(
        ((f, evals[f].per_q[DECISION_Q]["f_beta"]) for f in NEURAL_FAMILIES),
        key=lambda kv: kv[1],
    )
    assert best_f3 >= 0.85
    assert workbench["elapsed"] <= 900.0
    shown = ", ".join(f"{f} {improvements[f]:.0%}" for f in NEURAL_FAMILIES)
    print(f"\nPASS 6/10 learning efficacy: q-risk@{DECISION_Q} improvement {shown} (need 20%), "
          f"best F3 {best_f3:.3f} ({best_family}, need 0.85), "
          f"train+evaluate {workbench['elapsed']:.0f}s <= 900s")


# ------------------------------------------------------------- criterion 7


def _equal_lookback_means(family, rng):
    """Mean single-call latency per horizon at fixed lookback k=12.

    Timing contamination (scheduler preemption, collector pauses) only ever
    adds time, so each horizon takes the lower of two block means.
    """
    per_h = {}
    for h, cm in ((3, 4), (12, 1)):
        wc = WindowConfig(h=h, cm=cm)
        model = make_model(family, wc=wc, qs=QuantileGrid().qs, seed=0)
        sample = make_sample(rng, wc)
        per_h[h] = min(
            bench(model, sample, warmup=30, iters=300).mean_ms for _ in range(2)
        )
    return per_h


def test_07_latency_grows_with_horizon_only_for_iterative_decoding():
    # same lookback (k=12) on both sides so only the decoding structure differs
    rng = np.random.default_rng(707)
    means = {}
    gc.collect()
    gc.freeze()
    gc.disable()
    try:
        for family in NEURAL_FAMILIES:
            per_h = _equal_lookback_means(family, rng)
            for _ in range(2):  # a contaminated pass is re-measured, not excused
                ratio = per_h[12] / per_h[3]
                within_bound = ratio >= 2.5 if family == "ar_rnn" else ratio <= 1.5
                if within_bound:
                    break
                per_h = _equal_lookback_means(family, rng)
            means[family] = per_h
    finally:
        gc.enable()
        gc.unfreeze()
    ratios = {f: m[12] / m[3] for f, m in means.items()}
    assert ratios["ar_rnn"] >= 2.5, f"ar_rnn ratio {ratios['ar_rnn']:.2f}, means {means['ar_rnn']}"
    for family in ("seq2seq", "convseq2seq", "attn_seq2seq"):
        assert ratios[family] <= 1.5, f"{family} ratio {ratios[family]:.2f}, means {means[family]}"
        assert means[family][3] < 10.0 and means[family][12] < 10.0
    shown = ", ".join(f"{f} {r:.2f}" for f, r in ratios.items())
    worst_ms = max(max(m.values()) for f, m in means.items() if f != "ar_rnn")
    print(f"\nPASS 7/10 latency structure: h=12/h=3 ratios {shown} "
          f"(ar_rnn >= 2.5, others <= 1.5), one-shot families <= {worst_ms:.2f} ms < 10 ms")


# ------------------------------------------------------------- criterion 8


def test_08_window_sweep_emits_all_six_configs(workbench):
    cfg = TrainConfig(epochs=1, batch_size=256, lr=1e-3, clip_norm=1.0, patience=1, seed=0)
    rows = sweep(workbench["episodes"][:40], ["persistence"], cfg, repetitions=1)
    assert len(rows) == 6
    assert all(not row["skipped"] for row in rows)
    assert all(row["total_window"] == row["h"] * (1 + row["cm"]) for row in rows)
    totals = sorted(row["total_window"] for row in rows)
    assert totals == [6, 12, 24, 30, 48, 120]
    print(f"\nPASS 8/10 sweep shape: 6 configs, total windows {totals}, maximum 120 present")


# ------------------------------------------------------------- criterion 9


def test_09_tree_recovers_planted_scenario_structure():
    rng = np.random.default_rng(909)
    n = 600
    x = rng.uniform(0.0, 1.0, size=(n, 4))
    plateau = np.where(
        x[:, 0] <= 0.5,
        np.where(x[:, 2] <= 0.4, 0.95, 0.80),
        np.where(x[:, 2] <= 0.6, 0.55, 0.30),
    )
    y = plateau + 0.01 * rng.standard_normal(n)
    result = cross_validate(x, y, k=10, seed=0)
    assert result.r2 >= 0.9
    rules = extract_rules(result.tree)
    used = {j for rule in rules for (j, _, _) in rule.intervals}
    assert used == {0, 2}, f"tree split on {sorted(used)}, planted features are [0, 2]"
    probes = rng.uniform(0.0, 1.0, size=(10_000, 4))
    for row in probes:
        assert sum(rule.matches(row) for rule in rules) == 1
    print(f"\nPASS 9/10 planted recovery: CV picked depth {result.max_depth}, "
          f"split features {sorted(used)}, R^2 {result.r2:.3f} >= 0.9, "
          f"{len(rules)} rules partition 10000 probe points")


# ------------------------------------------------------------- criterion 10


def test_10_repeat_runs_are_byte_identical(workbench, tmp_path):
    # dataset: regenerate from the same seeds and compare the written bytes
    again = generate_dataset(SimConfig())
    p1, p2 = tmp_path / "run1.jsonl", tmp_path / "run2.jsonl"
    write_episodes(p1, workbench["episodes"])
    write_episodes(p2, again)
    assert p1.read_bytes() == p2.read_bytes()
    digest = dataset_hash(p1)
    assert digest == dataset_hash(p2)

    # checkpoints: two fits from the same config serialize identically
    cfg = TrainConfig(epochs=3, batch_size=256, lr=1e-3, clip_norm=1.0, patience=3, seed=11)
    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    for path in (c1, c2):
        model = fit(
            ForecasterSpec("seq2seq"),
            workbench["phases"]["train"], workbench["phases"]["val"], cfg,
            norm=workbench["norm"], target=workbench["target"],
            lc_names=workbench["episodes"][0].lc_names,
        )
        save_checkpoint(model, path)
    assert c1.read_bytes() == c2.read_bytes()

    # metric summaries: two Monte-Carlo evaluations with one seed agree exactly
    summaries = []
    for _ in range(2):
        ev = evaluate_model(workbench["models"]["ar_rnn"], workbench["phases"]["test"],
                            mc_seed=77)
        summaries.append(json.dumps({str(q): ev.per_q[q] for q in ev.quantiles},
                                    sort_keys=True))
    assert summaries[0] == summaries[1]
    print(f"\nPASS 10/10 determinism: dataset bytes identical (sha256 {digest[:12]}...), "
          "checkpoint bytes identical, metric summaries identical")
