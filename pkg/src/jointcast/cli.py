"""Command-line entry point: data generation, training, evaluation, prediction.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 gradient check above tolerance.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import (generate_synthetic_city, make_windows, read_dataset, stack_windows, write_dataset,
                   write_manifest, zscore_apply, zscore_invert)
from .errors import ConfigError, DataError, JointcastError, ValidationError
from .gradcheck import SCALES, TOLERANCE, gradcheck_suite
from .graph import RELATION_NAMES
from .metrics import metric_table
from .training import ABLATIONS, TrainConfig, evaluate_windows, fit, load_model, persistence_metrics, save_model

log = logging.getLogger("jointcast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3
RUN_PATH_KEYS = ("data", "out")
CHECKPOINT = "model.ckpt"

ABLATION_HELP = "\n".join(f"  {k:18s} {v}" for k, v in ABLATIONS.items())


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- run config

def load_run_config(path: str | None) -> tuple[TrainConfig, dict]:
    """Read a JSON run config: any ``TrainConfig`` field plus ``data`` and ``out``."""
    if path is None:
        return TrainConfig(), {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    paths = {k: raw.pop(k) for k in RUN_PATH_KEYS if k in raw}
    if "fixed_weights" in raw:
        raw["fixed_weights"] = tuple(raw["fixed_weights"])
    try:
        cfg = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, paths


def default_run_config() -> dict:
    return {**TrainConfig().to_dict(), "data": None, "out": None}


# ---------------------------------------------------------------- commands

def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    ds, manifest = generate_synthetic_city(args.seed, args.stations_air, args.stations_weather, args.steps)
    write_dataset(ds, out)
    write_manifest(out / "manifest.json", manifest)
    print(f"wrote {ds.steps} steps for {len(ds.stations)} stations to {out}")
    return EXIT_OK


def _dataset_for(path: str, norm=None):
    ds = read_dataset(path)
    if norm is not None:
        ds.norm_stats = norm
    return ds


def cmd_train(args) -> int:
    cfg, paths = load_run_config(args.config)
    if args.ablate is not None:
        cfg = dataclasses.replace(cfg, ablate=args.ablate)
    data = args.data or paths.get("data")
    out = args.out or paths.get("out")
    if not data or not out:
        raise ConfigError("train needs --data and --out (or 'data'/'out' in the config file)")
    for key, val in (("epochs", args.epochs), ("seed", args.seed)):
        if val is not None:
            cfg = dataclasses.replace(cfg, **{key: val})
    ds = _dataset_for(data)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "data": str(data), "out": str(out)},
                                                indent=1, sort_keys=True))
    with open(out / "stats.jsonl", "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["type"] == "epoch" and "val" in rec:
                log.info("epoch %d  val air MAE %.4f  weather MAE %.4f", rec["epoch"],
                         rec["val"]["air"]["mae"], rec["val"]["weather"]["mae"])
        result = fit(ds, cfg, on_record)
    save_model(out / CHECKPOINT, result, ds)

    report = {"best_epoch": result.best_epoch, "val": result.best_val, "ablate": cfg.ablate}
    test_w = make_windows(ds, cfg.T, cfg.tau, "test")
    if test_w:
        res = evaluate_windows(result.state.model, test_w, ds.norm, cfg.tau)
        report["test"] = _rows_by_group(metric_table(res["pred"], res["target"], _names(ds)))
        report["test_persistence"] = persistence_metrics(test_w, ds.norm)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"checkpoint {out / CHECKPOINT}, stats {out / 'stats.jsonl'}, report {out / 'metrics.json'}")
    return EXIT_OK


def _names(ds) -> dict:
    return {"air": list(ds.air_vars), "weather": list(ds.weather_vars)}


def _rows_by_group(rows) -> dict:
    return {r["group"]: {"mae": r["mae"], "smape": r["smape"]} for r in rows if r["variable"] == "ALL"}


def format_table(rows) -> str:
    lines = [f"{'group':8s} {'variable':12s} {'MAE':>12s} {'SMAPE':>10s}"]
    for r in rows:
        lines.append(f"{r['group']:8s} {r['variable']:12s} {r['mae']:12.4f} {r['smape']:10.4f}")
    return "\n".join(lines)


def evaluate_checkpoint(checkpoint: str, data: str, split: str = "test", oracle: bool = False) -> list[dict]:
    """Per-variable metric rows for ``split``; ``oracle`` scores the targets against themselves."""
    ds = read_dataset(data)
    state, norm = load_model(checkpoint, ds)
    ds.norm_stats = norm
    cfg = state.cfg
    windows = make_windows(ds, cfg.T, cfg.tau, split)
    if not windows:
        raise DataError(f"split {split!r} holds no (T={cfg.T}, tau={cfg.tau}) windows")
    predictor = (lambda b: (b.fut_air, b.fut_weather)) if oracle else None
    res = evaluate_windows(state.model, windows, norm, cfg.tau, predictor=predictor)
    return metric_table(res["pred"], res["target"], _names(ds))


def cmd_evaluate(args) -> int:
    rows = evaluate_checkpoint(args.checkpoint, args.data, args.split, args.oracle_self_test)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["group", "variable", "mae", "smape"], lineterminator="\n")
            wr.writeheader()
            for r in rows:
                wr.writerow({**r, "mae": repr(r["mae"]), "smape": repr(r["smape"])})
    return EXIT_OK


def _future_stamps(timestamps: list[str], at: int, horizon: int) -> list[str]:
    t = [datetime.fromisoformat(s) for s in timestamps]
    step = t[1] - t[0] if len(t) > 1 else None
    out = []
    for k in range(1, horizon + 1):
        if at + k < len(t):
            out.append(timestamps[at + k])
        elif step is not None:
            out.append((t[at] + k * step).isoformat())
        else:
            out.append(f"+{k}")
    return out


def predict(checkpoint: str, data: str, at: str, horizon: int | None = None):
    """Forecast ``horizon`` steps after timestamp ``at`` from the ``T`` steps ending there.

    Returns ``(forecast_rows, attention_rows)``; attention comes from the
    first CHAT layer, one block per evaluated snapshot (history then rollout).
    """
    ds = read_dataset(data)
    state, norm = load_model(checkpoint, ds)
    ds.norm_stats = norm
    cfg, model = state.cfg, state.model
    horizon = cfg.tau if horizon is None else horizon
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    try:
        idx = ds.timestamps.index(at)
    except ValueError:
        raise DataError(f"timestamp {at!r} not found in {data}") from None
    if idx + 1 < cfg.T:
        raise DataError(f"timestamp {at!r} leaves only {idx + 1} history steps, need T={cfg.T}")
    air = zscore_apply(ds.air[idx + 1 - cfg.T: idx + 1], norm, "air")[None]
    weather = zscore_apply(ds.weather[idx + 1 - cfg.T: idx + 1], norm, "weather")[None]
    record: list = []
    with tn.no_grad():
        pa, pw = model.forward(air, weather, horizon, record=record)
    pa = zscore_invert(pa.data[0], norm, "air")
    pw = zscore_invert(pw.data[0], norm, "weather")

    stamps = _future_stamps(ds.timestamps, idx, horizon)
    rows = []
    for k in range(horizon):
        for group, pred, stations, names in (("air", pa, ds.air_stations, ds.air_vars),
                                             ("weather", pw, ds.weather_stations, ds.weather_vars)):
            for i, st in enumerate(stations):
                for v, name in enumerate(names):
                    rows.append({"step": k + 1, "timestamp": stamps[k], "station_id": st.id,
                                 "kind": group, "variable": name, "value": float(pred[k, i, v])})

    ids = model.layout.station_ids
    mask = model.layout.mask
    att_rows = []
    for step, att in enumerate(record):
        for r, rel in enumerate(RELATION_NAMES):
            tgt, src = np.nonzero(mask[r])
            for i, j in zip(tgt, src):
                att_rows.append({"step": step, "relation": rel, "target_id": ids[i],
                                 "source_id": ids[j], "weight": float(att[0, r, i, j])})
    return rows, att_rows


def _write_rows(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_predict(args) -> int:
    rows, att = predict(args.checkpoint, args.data, args.at, args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "forecasts.csv", rows, ["step", "timestamp", "station_id", "kind", "variable", "value"])
    _write_rows(out / "attention.csv", att, ["step", "relation", "target_id", "source_id", "weight"])
    print(f"wrote {len(rows)} forecast values and {len(att)} attention weights to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(args.scale, args.seed)
    for name, err in report.worst_params(args.show):
        print(f"  {name:40s} {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"gradcheck scale={report.scale} params={len(report.per_param)} "
          f"max_rel_err={report.worst:.3e} tol={TOLERANCE:g} time={report.seconds:.1f}s {verdict}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_show_config(args) -> int:
    print(json.dumps(default_run_config(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointcast", description="Joint air-quality and weather forecasting on station graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a seeded synthetic city")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--stations-air", type=int, default=8)
    g.add_argument("--stations-weather", type=int, default=4)
    g.add_argument("--steps", type=int, default=2000)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="fit a model", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="ablations (each names what it removes):\n" + ABLATION_HELP)
    t.add_argument("--config", help="JSON run config (see show-config)")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--ablate", choices=sorted(ABLATIONS), metavar="NAME")
    t.add_argument("--out", help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-variable MAE/SMAPE of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", help="metrics CSV path")
    e.add_argument("--oracle-self-test", action="store_true", help="score the targets against themselves")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="forecast from one origin and export attention weights")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--at", required=True, help="last observed timestamp (ISO format)")
    r.add_argument("--horizon", type=int, help="steps to forecast (default: trained tau)")
    r.add_argument("--out", required=True, help="directory for forecasts.csv and attention.csv")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    c.add_argument("--scale", choices=sorted(SCALES), default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--show", type=int, default=5, help="list the N worst parameters")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("show-config", help="print the run config schema with defaults")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"jointcast: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ValidationError) as exc:
        print(f"jointcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except JointcastError as exc:
        print(f"jointcast: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
