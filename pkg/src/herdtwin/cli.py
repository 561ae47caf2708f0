"""Command-line pipeline: simulate, ingest, train, predict, evaluate, ablate.

Exit codes: 0 success, 1 runtime failure (the failing stage is named),
2 usage or configuration error. Every run of train dumps the effective
configuration next to the model bundle so outputs are reproducible from the
dump plus the seed alone.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, write_effective_config
from .ensemble import read_bundle, tuner_log_text, write_bundle
from .evaluation import (
    ablate_digital_twin,
    ablate_feature_groups,
    features_from_frames,
    roc_points,
    rolling_metric_series,
    run_cv_detailed,
    train_bundle,
    write_report_files,
)
from .frameio import write_frame
from .heads import forecast, write_forecasts
from .ingest import IngestError, ingest_directory
from .synth import SynthError, simulate_herd

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.override("global", "seed", args.seed)
    if getattr(args, "jobs", None) is not None:
        cfg.override("global", "jobs", args.jobs)
    if getattr(args, "max_gap_seconds", None) is not None:
        cfg.override("ingest", "max_gap_seconds", args.max_gap_seconds)
    if getattr(args, "step_minutes", None) is not None:
        cfg.override("ingest", "step_minutes", args.step_minutes)
    for item in getattr(args, "agg", None) or []:
        try:
            modality, style = item.split("=", 1)
        except ValueError:
            raise ConfigError(f"--agg expects <modality>=<mean|last|max>, got {item!r}")
        cfg.override("ingest", f"agg_{modality}", style)
    return cfg


def _ingest_frames(cfg: RunConfig, data_dir: Path):
    raw = data_dir / "raw" if (data_dir / "raw").is_dir() else data_dir
    try:
        return ingest_directory(raw, cfg.ingest_config())
    except IngestError as exc:
        raise StageError("ingest", exc) from exc


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out_dir = Path(args.out)
    result = simulate_herd(cfg.synth_config(), out_dir)
    write_effective_config(cfg, out_dir / "effective_config.ini")
    print(f"wrote {result.cfg.n_cows} cows x {result.cfg.days} days to {out_dir}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _load(args)
    data_dir = Path(args.data)
    frames = _ingest_frames(cfg, data_dir)
    out_dir = Path(args.out) if args.out else data_dir / "frames"
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        write_frame(frame, out_dir / f"{frame.cow}.twinframe")
    print(f"wrote {len(frames)} frames to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    data_dir = Path(args.data)
    frames = _ingest_frames(cfg, data_dir)
    pipe = cfg.pipeline_config()
    try:
        pooled = features_from_frames(frames, pipe)
    except Exception as exc:
        raise StageError("features", exc) from exc
    if not np.any(~np.isnan(pooled.label_cbt_future)):
        print("error: no labels (no observed CBT at the forecast horizon anywhere)",
              file=sys.stderr)
        return EXIT_RUNTIME
    try:
        bundle = train_bundle(pooled, pipe)
    except Exception as exc:
        raise StageError("train", exc) from exc
    model_out = Path(args.model_out)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    write_bundle(bundle, model_out)
    write_effective_config(cfg, model_out.with_suffix(model_out.suffix + ".config"))
    tuner_path = model_out.with_suffix(model_out.suffix + ".tuner.csv")
    tuner_path.write_text(tuner_log_text(bundle.ensemble.tuner_log), encoding="utf-8")
    print(f"wrote bundle to {model_out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load(args)
    try:
        bundle = read_bundle(args.model)
    except Exception as exc:
        print(f"error: cannot load bundle: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    frames = _ingest_frames(cfg, Path(args.data))
    pipe = cfg.pipeline_config()
    try:
        pooled = features_from_frames(frames, pipe)
        records = forecast(bundle, pooled)
    except Exception as exc:
        raise StageError("predict", exc) from exc
    write_forecasts(records, args.out)
    print(f"wrote {len(records)} forecast records to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    frames = _ingest_frames(cfg, Path(args.data))
    pipe = cfg.pipeline_config()
    try:
        pooled = features_from_frames(frames, pipe)
        report, detail = run_cv_detailed(pooled, pipe)
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    out_dir = Path(args.out)
    known = ~np.isnan(detail.labels_true)
    extras = {
        "residuals": (detail.timestamps, detail.y_true - detail.y_hat),
        "rolling": rolling_metric_series(detail.timestamps, detail.y_true, detail.y_hat),
    }
    if known.any() and len(set(detail.labels_true[known].astype(int).tolist())) == 2:
        extras["roc"] = roc_points(detail.labels_true[known].astype(int), detail.p_stress[known])
    write_report_files(out_dir, report, extras)
    write_effective_config(cfg, out_dir / "effective_config.ini")
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    frames = _ingest_frames(cfg, Path(args.data))
    pipe = cfg.pipeline_config()
    try:
        pooled = features_from_frames(frames, pipe)
        rows = ablate_feature_groups(pooled, pipe)
        all_report = rows[-1].report
        dt = ablate_digital_twin(pooled, pipe, with_dt_report=all_report)
    except Exception as exc:
        raise StageError("ablate", exc) from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["feature_group,mae,rmse,r2"]
    for row in rows:
        lines.append(
            f"{row.name},{row.report.mean.get('mae', float('nan'))!r},"
            f"{row.report.mean.get('rmse', float('nan'))!r},"
            f"{row.report.mean.get('r2', float('nan'))!r}"
        )
    (out_dir / "feature_groups.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    dt_lines = ["metric,with_dt,without_dt,relative_pct,absolute_delta"]
    for name in ("mae", "rmse", "r2", "picp"):
        if name not in dt.relative_pct:
            continue
        dt_lines.append(
            f"{name},{dt.with_dt.mean[name]!r},{dt.without_dt.mean[name]!r},"
            f"{dt.relative_pct[name]!r},{dt.absolute_delta[name]!r}"
        )
    (out_dir / "dt_ablation.csv").write_text("\n".join(dt_lines) + "\n", encoding="utf-8")
    write_effective_config(cfg, out_dir / "effective_config.ini")
    print(f"wrote ablation tables to {out_dir} ({len(rows)} feature-group rows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="herdtwin",
        description="Physics-informed digital-twin forecasting of cattle core body temperature",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="INI configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--jobs", type=int, default=None, help="worker parallelism cap")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (with raw/)")

    p = sub.add_parser("simulate", help="generate a synthetic herd dataset")
    common(p, data=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("ingest", help="parse raw sensor files into per-cow frames")
    common(p)
    p.add_argument("--out", default=None, help="frames directory (default <data>/frames)")
    p.add_argument("--max-gap-seconds", type=int, default=None)
    p.add_argument("--step-minutes", type=int, default=None)
    p.add_argument("--agg", action="append", metavar="MODALITY=STYLE",
                   help="per-modality bin aggregation (mean|last|max)")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train the full pipeline and write a model bundle")
    common(p)
    p.add_argument("--model-out", required=True, help="output bundle path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="forecast with a trained bundle")
    common(p)
    p.add_argument("--model", required=True, help="trained bundle path")
    p.add_argument("--out", required=True, help="forecast records output file")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="grouped cross-validation with full metric report")
    common(p)
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="feature-group and twin ablation tables")
    common(p)
    p.add_argument("--out", required=True, help="ablation output directory")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SynthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
