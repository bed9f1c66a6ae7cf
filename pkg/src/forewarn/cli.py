"""One executable for the whole pipeline: data, training, evaluation, monitoring.

Every subcommand takes an optional --config JSON file; explicit flags override
file values, which override built-in defaults. Runs that produce files write
the merged settings next to them (run_config.json) so any result can be
reproduced from its output directory alone, and identical seeds give
byte-identical summaries.

Exit codes: 0 on success, 1 with a structured message on stderr for runtime
failures (missing inputs, bad data, divergence), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .cart import cross_validate, extract_rules, scenario_f3_table
from .core import (
    DEFAULT_QUANTILES,
    QuantileGrid,
    ValidationError,
    WindowConfig,
    first_violation_index,
)
from .data import (
    DatasetError,
    build_split,
    dataset_hash,
    fit_norm,
    read_episode_lines,
    read_episodes,
    windows_for_phase,
    write_episodes,
)
from .evaluation import EvalReport, bench, evaluate, evaluate_model, plot_data, sweep
from .forecasters import FAMILIES, ForecasterSpec, load_checkpoint, save_checkpoint
from .monitor import MonitorConfig, SafetyMonitor
from .simulate import SimConfig, SimulationError, generate_dataset
from .training import TrainConfig, TrainingDivergedError, fit, grid_tune

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    """Bad invocation that argparse cannot catch (missing or malformed values)."""


# ----------------------------------------------------------------- defaults

_TRAIN_KNOBS = {
    "epochs": 100,
    "batch_size": 128,
    "lr": 1e-3,
    "clip_norm": 1.0,
    "patience": 10,
}

DEFAULTS: dict[str, dict] = {
    "simulate": {
        "out": None,
        "scenarios": 200,
        "episode_len": 200,
        "dt": 1.0,
        "seed": 42,
        # plant knobs, settable through a config file
        "speed_mps": 5.0,
        "k_c": 0.8,
        "k_h": 0.5,
        "u_max_deg_s": 6.0,
        "noise_base": 0.3,
        "noise_cloud_gain": 1.2,
        "noise_tod_gain": 0.6,
        "bias_gain": 7.0,
    },
    "train": {
        "data": None,
        "out": None,
        "family": None,
        "h": 3,
        "cm": 3,
        **_TRAIN_KNOBS,
        "seed": 0,
        "quantiles": list(DEFAULT_QUANTILES),
        "target": None,
        "params": {},
        "allow_custom": False,
    },
    "tune": {
        "data": None,
        "out": None,
        "family": None,
        "h": 3,
        "cm": 3,
        **_TRAIN_KNOBS,
        "seed": 0,
        "quantiles": list(DEFAULT_QUANTILES),
        "target": None,
        "axes": {},
        "reps": 5,
    },
    "evaluate": {
        "model": None,
        "data": None,
        "out": None,
        **_TRAIN_KNOBS,
        "seed": 0,
        "reps": 5,
        "quantiles": None,
        "n_paths": 100,
        "workers": 1,
    },
    "sweep": {
        "data": None,
        "out": None,
        "families": list(FAMILIES),
        "h_values": [3, 12],
        "cm_values": [1, 3, 9],
        **_TRAIN_KNOBS,
        "seed": 0,
        "reps": 1,
        "quantiles": list(DEFAULT_QUANTILES),
        "target": None,
        "n_paths": 100,
        "workers": 1,
    },
    "bench": {
        "model": None,
        "data": None,
        "out": None,
        "iters": 500,
        "warmup": 50,
        "n_paths": 100,
    },
    "monitor": {
        "model": None,
        "decision_quantile": 0.995,
        "hysteresis": 1,
        "seed": 0,
        "n_paths": 100,
    },
    "analyze": {
        "model": None,
        "data": None,
        "out": None,
        "q": 0.995,
        "seed": 0,
        "n_paths": 100,
        "depths": [1, 2, 3, 4, 5],
        "leaves": [2, 5, 10],
        "folds": 10,
    },
}


# ----------------------------------------------------------------- plumbing


def _merged(cmd: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown file keys are rejected."""
    defaults = DEFAULTS[cmd]
    ns = dict(vars(args))
    ns.pop("func", None)
    ns.pop("cmd", None)
    config_path = ns.pop("config", None)
    file_cfg: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
    return {**defaults, **file_cfg, **ns}


def _require(cfg: dict, cmd: str, key: str):
    value = cfg.get(key)
    if value is None:
        raise UsageError(f"{cmd} needs --{key.replace('_', '-')} (flag or config file)")
    return value


def _floats(value) -> tuple[float, ...]:
    items = value.split(",") if isinstance(value, str) else value
    try:
        return tuple(float(x) for x in items if str(x).strip() != "")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"expected a comma-separated number list, got {value!r}") from exc


def _ints(value) -> tuple[int, ...]:
    items = value.split(",") if isinstance(value, str) else value
    try:
        return tuple(int(x) for x in items if str(x).strip() != "")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"expected a comma-separated integer list, got {value!r}") from exc


def _names(value) -> tuple[str, ...]:
    items = value.split(",") if isinstance(value, str) else value
    return tuple(str(x).strip() for x in items if str(x).strip())


def _dictval(value, what: str) -> dict:
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{what} must be a JSON object, got {value!r}") from exc
    if not isinstance(value, dict):
        raise UsageError(f"{what} must be a JSON object, got {value!r}")
    return value


def _jsonable(obj):
    """JSON-safe copy: tuples to lists, numpy scalars unboxed, non-finite to null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def _write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _echo_config(outdir: Path, cmd: str, cfg: dict) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(outdir / "run_config.json", {"command": cmd, **cfg})


def _dataset_file(data) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / "dataset.jsonl"
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        clip_norm=float(cfg["clip_norm"]),
        patience=int(cfg["patience"]),
        seed=int(cfg["seed"]),
    )


def _phase_windows(episodes, wc: WindowConfig, target: str):
    split = build_split(episodes)
    norm = fit_norm(episodes, split)
    phases = {
        phase: windows_for_phase(episodes, split, wc, norm, phase, target=target)
        for phase in ("train", "val", "test")
    }
    return norm, phases


def _report_json(report: EvalReport) -> dict:
    return {
        "family": report.family,
        "h": report.h,
        "cm": report.cm,
        "repetitions": report.repetitions,
        "quantiles": list(report.quantiles),
        "metrics": {
            f"{q:g}": {
                key: {"mean": s.mean, "half_ci": s.half_ci}
                for key, s in report.per_q[q].items()
            }
            for q in report.quantiles
        },
        "plots": plot_data(report),
    }


def _print_report(report: EvalReport) -> None:
    print(
        f"family={report.family} h={report.h} cm={report.cm} "
        f"repetitions={report.repetitions}"
    )
    print(
        f"{'q':>8}  {'q_risk':>21}  {'precision':>9}  {'recall':>7}"
        f"  {'f3':>7}  {'fn':>8}  {'fp':>8}"
    )
    for q in report.quantiles:
        m = report.per_q[q]
        print(
            f"{q:8.4f}  {m['q_risk'].mean:10.4f} +/- {m['q_risk'].half_ci:7.4f}"
            f"  {m['precision'].mean:9.3f}  {m['recall'].mean:7.3f}"
            f"  {m['f_beta'].mean:7.3f}  {m['fn'].mean:8.1f}  {m['fp'].mean:8.1f}"
        )


# ----------------------------------------------------------------- commands


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _merged("simulate", args)
    out = Path(_require(cfg, "simulate", "out"))
    sim_cfg = SimConfig(
        n_scenarios=int(cfg["scenarios"]),
        episode_len=int(cfg["episode_len"]),
        dt_seconds=float(cfg["dt"]),
        speed_mps=float(cfg["speed_mps"]),
        k_c=float(cfg["k_c"]),
        k_h=float(cfg["k_h"]),
        u_max_deg_s=float(cfg["u_max_deg_s"]),
        noise_base=float(cfg["noise_base"]),
        noise_cloud_gain=float(cfg["noise_cloud_gain"]),
        noise_tod_gain=float(cfg["noise_tod_gain"]),
        bias_gain=float(cfg["bias_gain"]),
        seed=int(cfg["seed"]),
    )
    episodes = generate_dataset(sim_cfg)
    out.mkdir(parents=True, exist_ok=True)
    data_file = out / "dataset.jsonl"
    write_episodes(data_file, episodes)
    violations = sum(1 for ep in episodes if bool(np.any(ep.safety_metric >= 0.0)))
    manifest = {
        "file": data_file.name,
        "episodes": len(episodes),
        "episode_len": sim_cfg.episode_len,
        "dt_seconds": sim_cfg.dt_seconds,
        "seed": sim_cfg.seed,
        "sha256": dataset_hash(data_file),
        "violation_episodes": violations,
    }
    _write_json(out / "manifest.json", manifest)
    _echo_config(out, "simulate", cfg)
    print(
        f"wrote {len(episodes)} episodes to {data_file} "
        f"({violations} with violations, sha256 {manifest['sha256'][:12]})"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _merged("train", args)
    out = Path(_require(cfg, "train", "out"))
    family = _require(cfg, "train", "family")
    episodes = read_episodes(_dataset_file(_require(cfg, "train", "data")))
    wc = WindowConfig(h=int(cfg["h"]), cm=int(cfg["cm"]))
    grid = QuantileGrid(_floats(cfg["quantiles"]))
    target = cfg["target"] or episodes[0].metric_names[0]
    norm, phases = _phase_windows(episodes, wc, target)
    spec = ForecasterSpec(family, _dictval(cfg["params"], "--params"), bool(cfg["allow_custom"]))
    model = fit(
        spec, phases["train"], phases["val"], _train_cfg(cfg),
        grid=grid, norm=norm, target=target, lc_names=episodes[0].lc_names,
    )
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{family}_h{wc.h}_cm{wc.cm}.ckpt"
    save_checkpoint(model, ckpt)
    _write_json(out / "train_log.json", {
        "family": family,
        "h": wc.h,
        "cm": wc.cm,
        "target": target,
        "checkpoint": ckpt.name,
        "parameter_count": model.parameter_count,
        "windows": {"train": len(phases["train"]), "val": len(phases["val"])},
        "training_log": model.training_log,
    })
    _echo_config(out, "train", cfg)
    log = model.training_log
    if "best_epoch" in log:
        print(
            f"trained {family}: best epoch {log['best_epoch']} "
            f"val loss {log['best_val_loss']:.6f} -> {ckpt}"
        )
    else:
        print(f"trained {family} (no learned parameters) -> {ckpt}")
    return 0


def _cmd_tune(args: argparse.Namespace) -> int:
    cfg = _merged("tune", args)
    out = Path(_require(cfg, "tune", "out"))
    family = _require(cfg, "tune", "family")
    episodes = read_episodes(_dataset_file(_require(cfg, "tune", "data")))
    wc = WindowConfig(h=int(cfg["h"]), cm=int(cfg["cm"]))
    grid = QuantileGrid(_floats(cfg["quantiles"]))
    target = cfg["target"] or episodes[0].metric_names[0]
    norm, phases = _phase_windows(episodes, wc, target)
    axes = {k: list(v) for k, v in _dictval(cfg["axes"], "--axes").items()}
    result = grid_tune(
        family, axes, phases["train"], phases["val"], _train_cfg(cfg),
        repetitions=int(cfg["reps"]), grid=grid, norm=norm, target=target,
        lc_names=episodes[0].lc_names,
    )
    rows = []
    for row in result.rows:
        safe = dict(row)
        safe["per_q"] = {f"{q:g}": v for q, v in row["per_q"].items()}
        rows.append(safe)
    best_train = {
        "batch_size": result.best_cfg.batch_size,
        "lr": result.best_cfg.lr,
        "clip_norm": result.best_cfg.clip_norm,
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "tune.json", {
        "family": family,
        "best_params": result.best_spec.params,
        "best_train": best_train,
        "rows": rows,
    })
    _echo_config(out, "tune", cfg)
    print(f"tuned {family} over {len(result.rows)} runs")
    print(f"best params: {result.best_spec.params}")
    print(f"best training knobs: {best_train}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _merged("evaluate", args)
    model = load_checkpoint(_require(cfg, "evaluate", "model"))
    episodes = read_episodes(_dataset_file(_require(cfg, "evaluate", "data")))
    grid = QuantileGrid(_floats(cfg["quantiles"])) if cfg["quantiles"] else model.grid
    norm, phases = _phase_windows(episodes, model.wc, model.target)
    report = evaluate(
        model.spec, _train_cfg(cfg),
        phases["train"], phases["val"], phases["test"],
        repetitions=int(cfg["reps"]), grid=grid, norm=norm, target=model.target,
        lc_names=episodes[0].lc_names, n_paths=int(cfg["n_paths"]),
        workers=int(cfg["workers"]),
    )
    _print_report(report)
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval_summary.json", _report_json(report))
        _echo_config(out, "evaluate", cfg)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _merged("sweep", args)
    out = Path(_require(cfg, "sweep", "out"))
    episodes = read_episodes(_dataset_file(_require(cfg, "sweep", "data")))
    families = _names(cfg["families"])
    for family in families:
        if family not in FAMILIES:
            raise ValidationError(f"unknown family {family!r}; choose from {FAMILIES}")
    grid = QuantileGrid(_floats(cfg["quantiles"]))
    rows = sweep(
        episodes, families, _train_cfg(cfg),
        h_values=_ints(cfg["h_values"]), cm_values=_ints(cfg["cm_values"]),
        repetitions=int(cfg["reps"]), grid=grid, target=cfg["target"],
        n_paths=int(cfg["n_paths"]), workers=int(cfg["workers"]),
    )
    print(f"{'family':>14} {'h':>3} {'cm':>3} {'total':>6}  result")
    json_rows = []
    for row in rows:
        keep = {k: row[k] for k in ("family", "h", "cm", "lookback", "total_window", "skipped")}
        line = (
            f"{row['family']:>14} {row['h']:>3} {row['cm']:>3} {row['total_window']:>6}  "
        )
        if row["skipped"]:
            keep["skipped_reason"] = row["skipped_reason"]
            print(line + f"skipped: {row['skipped_reason']}")
        else:
            keep["qrisk_sum_mean"] = row["qrisk_sum_mean"]
            report = row["report"]
            keep["f_beta_mean"] = {
                f"{q:g}": report.per_q[q]["f_beta"].mean for q in report.quantiles
            }
            print(line + f"q_risk_sum={row['qrisk_sum_mean']:.4f}")
        json_rows.append(keep)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "sweep.json", {"rows": json_rows})
    _echo_config(out, "sweep", cfg)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _merged("bench", args)
    model = load_checkpoint(_require(cfg, "bench", "model"))
    episodes = read_episodes(_dataset_file(_require(cfg, "bench", "data")))
    _, phases = _phase_windows(episodes, model.wc, model.target)
    if not phases["test"]:
        raise ValidationError("dataset yields no test windows for this model's window config")
    report = bench(
        model, phases["test"][0],
        warmup=int(cfg["warmup"]), iters=int(cfg["iters"]), n_paths=int(cfg["n_paths"]),
    )
    print(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bench.json", report.to_dict())
        _echo_config(out, "bench", cfg)
    return 0


def _cmd_monitor(args: argparse.Namespace) -> int:
    """Stream episodes from stdin; one JSON line per decision to stdout."""
    cfg = _merged("monitor", args)
    model = load_checkpoint(_require(cfg, "monitor", "model"))
    mon_cfg = MonitorConfig(
        model=model,
        decision_quantile=float(cfg["decision_quantile"]),
        hysteresis=int(cfg["hysteresis"]),
        seed=int(cfg["seed"]),
        n_paths=int(cfg["n_paths"]),
    )
    episodes = read_episode_lines(sys.stdin)
    for ep in episodes:
        if ep.lc_names != model.lc_names:
            raise ValidationError(
                f"episode {ep.id}: channels {ep.lc_names} do not match model {model.lc_names}"
            )
        y = ep.metric(model.target)
        monitor = SafetyMonitor(mon_cfg, ep.scenario)
        for t in range(ep.length):
            monitor.push(ep.lc_outputs[t], float(y[t]))
            if monitor.last_decision is None:
                continue
            column = monitor.last_forecast.column(mon_cfg.decision_quantile)
            # flush per line: downstream consumers act on decisions as they
            # happen, and a closed pipe must surface here, not at shutdown
            print(json.dumps({
                "t": t,
                "q": mon_cfg.decision_quantile,
                "max_forecast": float(column.max()),
                "decision": monitor.last_decision,
                "ttv": first_violation_index(column) if monitor.last_decision == 1 else None,
            }), flush=True)
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _merged("analyze", args)
    model = load_checkpoint(_require(cfg, "analyze", "model"))
    episodes = read_episodes(_dataset_file(_require(cfg, "analyze", "data")))
    _, phases = _phase_windows(episodes, model.wc, model.target)
    if not phases["test"]:
        raise ValidationError("dataset yields no test windows for this model's window config")
    ev = evaluate_model(
        model, phases["test"], mc_seed=int(cfg["seed"]), n_paths=int(cfg["n_paths"])
    )
    q = float(cfg["q"])
    features, f3, names = scenario_f3_table(ev, q, episodes)
    cv = cross_validate(
        features, f3, max_depths=_ints(cfg["depths"]), min_leaves=_ints(cfg["leaves"]),
        k=int(cfg["folds"]), seed=int(cfg["seed"]),
    )
    rules = extract_rules(cv.tree)
    print(f"scenario rules for F3 at q={q:g} over {features.shape[0]} episodes")
    print(
        f"selected max_depth={cv.max_depth} min_samples_leaf={cv.min_samples_leaf} "
        f"cv_mse={cv.cv_mse:.6f} r2={cv.r2:.4f}"
    )
    for rule in rules:
        print("  " + rule.text(names))
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "analysis.json", {
            "q": q,
            "episodes": int(features.shape[0]),
            "feature_names": list(names),
            "max_depth": cv.max_depth,
            "min_samples_leaf": cv.min_samples_leaf,
            "cv_mse": cv.cv_mse,
            "r2": cv.r2,
            "rules": [
                {
                    "text": rule.text(names),
                    "value": rule.value,
                    "count": rule.count,
                    "intervals": [
                        {
                            "feature": names[j],
                            "gt": lo if math.isfinite(lo) else None,
                            "le": hi if math.isfinite(hi) else None,
                        }
                        for j, lo, hi in rule.intervals
                    ],
                }
                for rule in rules
            ],
        })
        _echo_config(out, "analyze", cfg)
    return 0


# ----------------------------------------------------------------- parser


def _sub(subparsers, name: str, help_text: str, func) -> argparse.ArgumentParser:
    p = subparsers.add_parser(name, help=help_text, description=help_text)
    p.add_argument("--config", help="JSON file of settings; explicit flags win")
    p.set_defaults(func=func)
    return p


def _opt(p: argparse.ArgumentParser, flag: str, **kwargs) -> None:
    kwargs.setdefault("default", argparse.SUPPRESS)
    p.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forewarn",
        description="quantile forecasting of safety metrics with a runtime violation monitor",
    )
    sub = parser.add_subparsers(dest="cmd", metavar="command", required=True)

    p = _sub(sub, "simulate", "generate a scenario-swept episode dataset", _cmd_simulate)
    _opt(p, "--scenarios", type=int, help="number of sampled scenarios (one episode each)")
    _opt(p, "--episode-len", type=int, help="steps per episode")
    _opt(p, "--dt", type=float, help="seconds per step")
    _opt(p, "--seed", type=int, help="sampling and noise seed")
    _opt(p, "--out", help="output directory (dataset.jsonl + manifest.json)")

    p = _sub(sub, "train", "train one forecaster and write a checkpoint", _cmd_train)
    _opt(p, "--data", help="dataset file or directory")
    _opt(p, "--out", help="output directory")
    _opt(p, "--family", choices=FAMILIES, help="forecaster family")
    _opt(p, "--h", type=int, help="forecast horizon")
    _opt(p, "--cm", type=int, help="context multiplier (lookback = cm * h)")
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--clip-norm", type=float)
    _opt(p, "--patience", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--quantiles", help="comma-separated quantile levels")
    _opt(p, "--target", help="safety metric to forecast (default: first in dataset)")
    _opt(p, "--params", help="JSON object of model hyperparameters")
    _opt(p, "--allow-custom", action="store_true", help="accept off-grid hyperparameters")

    p = _sub(sub, "tune", "grid-search hyperparameters against validation q-risk", _cmd_tune)
    _opt(p, "--data", help="dataset file or directory")
    _opt(p, "--out", help="output directory")
    _opt(p, "--family", choices=FAMILIES)
    _opt(p, "--h", type=int)
    _opt(p, "--cm", type=int)
    _opt(p, "--axes", help='JSON object of axis values, e.g. {"neurons": [20, 80]}')
    _opt(p, "--reps", type=int, help="training repetitions per configuration")
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--clip-norm", type=float)
    _opt(p, "--patience", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--quantiles", help="comma-separated quantile levels")
    _opt(p, "--target")

    p = _sub(sub, "evaluate", "retrain a checkpoint's config and report test metrics", _cmd_evaluate)
    _opt(p, "--model", help="checkpoint path")
    _opt(p, "--data", help="dataset file or directory")
    _opt(p, "--out", help="optional output directory for the JSON summary")
    _opt(p, "--reps", type=int, help="independent retraining repetitions")
    _opt(p, "--workers", type=int, help="bounded worker pool for repetitions")
    _opt(p, "--quantiles", help="comma-separated quantile levels (default: checkpoint grid)")
    _opt(p, "--n-paths", type=int, help="Monte Carlo paths for sampling forecasters")
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--clip-norm", type=float)
    _opt(p, "--patience", type=int)
    _opt(p, "--seed", type=int)

    p = _sub(sub, "sweep", "evaluate families across the window-size grid", _cmd_sweep)
    _opt(p, "--data", help="dataset file or directory")
    _opt(p, "--out", help="output directory")
    _opt(p, "--families", help="comma-separated family names")
    _opt(p, "--h-values", help="comma-separated horizons")
    _opt(p, "--cm-values", help="comma-separated context multipliers")
    _opt(p, "--reps", type=int)
    _opt(p, "--workers", type=int)
    _opt(p, "--quantiles", help="comma-separated quantile levels")
    _opt(p, "--target")
    _opt(p, "--n-paths", type=int)
    _opt(p, "--epochs", type=int)
    _opt(p, "--batch-size", type=int)
    _opt(p, "--lr", type=float)
    _opt(p, "--clip-norm", type=float)
    _opt(p, "--patience", type=int)
    _opt(p, "--seed", type=int)

    p = _sub(sub, "bench", "measure single-window prediction latency and memory", _cmd_bench)
    _opt(p, "--model", help="checkpoint path")
    _opt(p, "--data", help="dataset file or directory (provides one test window)")
    _opt(p, "--out", help="optional output directory")
    _opt(p, "--iters", type=int)
    _opt(p, "--warmup", type=int)
    _opt(p, "--n-paths", type=int)

    p = _sub(sub, "monitor", "stream episodes from stdin, print one line per decision", _cmd_monitor)
    _opt(p, "--model", help="checkpoint path")
    _opt(p, "--decision-quantile", type=float, help="grid level whose sign decides")
    _opt(p, "--hysteresis", type=int, help="consecutive positives needed to alarm")
    _opt(p, "--seed", type=int)
    _opt(p, "--n-paths", type=int)

    p = _sub(sub, "analyze", "distill per-scenario F3 into interval rules", _cmd_analyze)
    _opt(p, "--model", help="checkpoint path")
    _opt(p, "--data", help="dataset file or directory")
    _opt(p, "--out", help="optional output directory")
    _opt(p, "--q", type=float, help="quantile level whose F3 is explained")
    _opt(p, "--depths", help="comma-separated max depths to cross-validate")
    _opt(p, "--leaves", help="comma-separated min leaf sizes to cross-validate")
    _opt(p, "--folds", type=int)
    _opt(p, "--seed", type=int)
    _opt(p, "--n-paths", type=int)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        missing = getattr(exc, "filename", None) or str(exc)
        print(f"error: missing input file: {missing}", file=sys.stderr)
        return 1
    except (ValidationError, DatasetError, SimulationError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # downstream consumer (head, jq) closed the pipe; leave quietly, and
        # point stdout at devnull so the shutdown flush cannot raise again
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1


if __name__ == "__main__":
    sys.exit(main())
