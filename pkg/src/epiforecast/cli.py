"""Command-line entry point: ``epiforecast <command> [options]``.

Commands: ingest, featurize, train, forecast, experiment, report.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  Progress goes to
stderr (verbosity from ``EPIFORECAST_LOG``); results go to files under the
output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

from .config import RunConfig, load_config
from .data_ingest import IngestError, dataset_from_json, dataset_to_json, load_cultural, parse_oxcgrt
from .evaluation import ExperimentConfig, emit_report, reports_from_forecasts, run_experiment
from .features import build_frame, build_windows, frame_to_csv
from .forecast import forecast_region, forecast_to_csv, read_forecast_csv
from .models import MODEL_KINDS, CheckpointError, build_model, load_checkpoint, save_checkpoint
from .nn.training import TrainingDiverged, train

logger = logging.getLogger("epiforecast")


class UsageError(Exception):
    pass


def _safe_name(geo_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", geo_id).strip("_") or "region"


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_snapshot(cfg: RunConfig):
    path = cfg.paths.snapshot_path
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset snapshot at {path}; run `epiforecast ingest` first")
    with open(path) as f:
        return dataset_from_json(f.read())


def _experiment_config(cfg: RunConfig) -> ExperimentConfig:
    if cfg.experiment_dates:
        return ExperimentConfig(cfg.experiment or "custom", models=cfg.models, seed=cfg.seed, **cfg.experiment_dates)
    if not cfg.experiment:
        raise UsageError("no experiment given; use --experiment e2020|e2021 or an [experiment] table")
    try:
        return ExperimentConfig.named(cfg.experiment, cfg.models, cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_ingest(cfg: RunConfig, args) -> int:
    if not cfg.paths.data:
        raise UsageError("ingest needs a data CSV (--data or [paths] data)")
    with open(cfg.paths.data, "rb") as f:
        raw = f.read()
    dataset = parse_oxcgrt(raw)
    if cfg.paths.culture:
        with open(cfg.paths.culture, "rb") as f:
            dataset = dataset.with_culture(load_cultural(f.read()))
    _write(cfg.paths.snapshot_path, dataset_to_json(dataset))
    print(f"{len(dataset.regions)} regions retained, {len(dataset.report.dropped)} dropped"
          f" ({len(dataset.report.errors)} malformed rows)", file=sys.stderr)
    return 0


def cmd_featurize(cfg: RunConfig, args) -> int:
    dataset = _load_snapshot(cfg)
    out_dir = os.path.join(cfg.paths.out, "features")
    for key, series in dataset.regions.items():
        frame = build_frame(series, dataset.culture_for(key), dataset.schema, cfg.features)
        _write(os.path.join(out_dir, f"{_safe_name(key.geo_id)}.csv"), frame_to_csv(frame))
    print(f"wrote {len(dataset.regions)} feature frames to {out_dir}", file=sys.stderr)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .evaluation import training_samples

    dataset = _load_snapshot(cfg)
    exp = _experiment_config(cfg) if (cfg.experiment or cfg.experiment_dates) else None
    failed = False
    for kind in cfg.models:
        model = build_model(kind, lookback=cfg.features.lookback, seed=cfg.seed, **cfg.model_hparams.get(kind, {}))
        if exp is not None:
            samples = training_samples(dataset, exp, model.target_kind, cfg.features)
        else:
            samples = []
            for key, series in dataset.regions.items():
                frame = build_frame(series, dataset.culture_for(key), dataset.schema, cfg.features)
                samples += build_windows(frame, cfg.features.lookback, model.target_kind)
        logger.info("%s: training on %d windows", kind, len(samples))
        try:
            history = train(model, samples, cfg.train)
        except TrainingDiverged as exc:
            logger.error("%s: %s", kind, exc)
            history, failed = exc.history, True
        ckpt_dir = cfg.paths.checkpoint_dir
        save_checkpoint(model, os.path.join(ckpt_dir, f"{kind}.json"), cfg.train, history)
        _write(os.path.join(ckpt_dir, f"{kind}_history.csv"), history.to_csv())
        logger.info("%s: best validation epoch %d (L1 %.6g)", kind, history.best_epoch, history.best_val_loss)
    return 1 if failed else 0


def cmd_forecast(cfg: RunConfig, args) -> int:
    dataset = _load_snapshot(cfg)
    if len(cfg.models) != 1:
        raise UsageError("forecast takes exactly one model kind via --models")
    kind = cfg.models[0]
    if not cfg.region:
        raise UsageError("forecast needs --region")
    try:
        series = dataset.by_geo_id(cfg.region)
    except KeyError:
        raise UsageError(f"region {cfg.region!r} not in snapshot; available: {', '.join(dataset.geo_ids())}") from None
    ckpt = args.checkpoint or os.path.join(cfg.paths.checkpoint_dir, f"{kind}.json")
    model = load_checkpoint(ckpt)
    if model.kind != kind:
        raise UsageError(f"checkpoint {ckpt} holds {model.kind}, not {kind}")
    start = len(series)
    if args.start:
        import numpy as np

        start = int((np.datetime64(args.start, "D") - series.dates[0]).astype(int))
        if not 1 <= start <= len(series):
            raise UsageError(f"--start {args.start} outside {series.dates[0]}..{series.dates[-1]}")
    result = forecast_region(model, series, start, cfg.horizon, dataset.culture_for(series.key),
                             dataset.schema, cfg.features)
    path = os.path.join(cfg.paths.out, "forecasts", f"forecast_{kind}_{_safe_name(series.key.geo_id)}.csv")
    _write(path, forecast_to_csv([result]))
    print(f"wrote {len(result)} forecast days to {path}", file=sys.stderr)
    return 1 if result.aborted else 0


def cmd_experiment(cfg: RunConfig, args) -> int:
    dataset = _load_snapshot(cfg)
    exp = _experiment_config(cfg)
    reports = run_experiment(dataset, exp, cfg.train, cfg.model_hparams, cfg.features,
                             checkpoint_dir=cfg.paths.checkpoint_dir)
    paths = emit_report(reports, cfg.paths.out, exp)
    for kind, rep in reports.items():
        print(f"{kind}: aggregate {rep.aggregate:.6g} over {len(rep.per_region)} regions"
              + (" [DIVERGED]" if rep.diverged else ""), file=sys.stderr)
    print(f"wrote {', '.join(os.path.basename(p) for p in paths)} to {cfg.paths.out}", file=sys.stderr)
    return 1 if any(r.diverged for r in reports.values()) else 0


def cmd_report(cfg: RunConfig, args) -> int:
    import pandas as pd

    dataset = _load_snapshot(cfg)
    if not args.forecasts:
        raise UsageError("report needs one or more --forecasts CSV files")
    frames = []
    for path in args.forecasts:
        with open(path) as f:
            frames.append(read_forecast_csv(f.read()))
    reports = reports_from_forecasts(dataset, pd.concat(frames, ignore_index=True))
    emit_report(reports, cfg.paths.out)
    for kind, rep in reports.items():
        print(f"{kind}: aggregate {rep.aggregate:.6g} over {len(rep.per_region)} regions", file=sys.stderr)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def _models_arg(text: str) -> list[str]:
    kinds = [k.strip().lower() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in MODEL_KINDS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown model kind(s) {unknown}; choose from {', '.join(MODEL_KINDS)}")
    return kinds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epiforecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--models", type=_models_arg, help="comma-separated model kinds")
        p.add_argument("--experiment", help="e2020 or e2021")
        p.add_argument("--region", help="geo_id to forecast")
        p.add_argument("--horizon", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="OxCGRT-format CSV")
        p.add_argument("--culture", help="cultural dimensions CSV")
        p.add_argument("--snapshot", help="dataset snapshot (default: <out>/snapshot.json)")
        p.add_argument("--max-epochs", type=int)
        if name == "forecast":
            p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoints/<kind>.json)")
            p.add_argument("--start", help="first forecast date (default: day after the data)")
        if name == "report":
            p.add_argument("--forecasts", nargs="+", help="forecast CSV files")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EPIFORECAST_LOG", "INFO").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, models=args.models, experiment=args.experiment,
                          region=args.region, horizon=args.horizon, out=args.out, data=args.data,
                          culture=args.culture, snapshot=args.snapshot, max_epochs=args.max_epochs)
    except (ValueError, OSError) as exc:
        print(f"epiforecast: error: {exc}", file=sys.stderr)
        return 2
    logger.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"epiforecast {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, IngestError, CheckpointError, ValueError, FloatingPointError) as exc:
        print(f"epiforecast {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
