"""Command-line interface: synth / train / evaluate / report.

Every command takes an optional JSON --config plus a handful of override
flags (flags win), echoes the effective configuration into the output
directory, and uses exit codes 0 (success), 1 (validation or input
error), 2 (runtime failure). The INTERVALREC_OUT environment variable
supplies a default output root when --out is absent.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, inference, synthetic, trainer
from .config import RunConfig, load_run_config, write_effective_config

OUT_ENV = "INTERVALREC_OUT"


class CommandError(RuntimeError):
    """User-facing failure with an explicit exit code."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


# -- helpers --------------------------------------------------------------


def _resolve_out(args, config: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if config.out_dir:
        return Path(config.out_dir)
    root = os.environ.get(OUT_ENV)
    if root:
        return Path(root) / command
    raise CommandError(f"no output directory: pass --out, set out_dir in the config, or set ${OUT_ENV}")


def _load_config(args) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.train.seed = args.seed
        config.synthetic.seed = args.seed
    else:
        config.train.seed = config.seed
        if "seed" not in _config_file_keys(args, "synthetic"):
            config.synthetic.seed = config.seed
    return config


def _config_file_keys(args, section: str) -> set[str]:
    path = getattr(args, "config", None)
    if not path:
        return set()
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return set()
    part = payload.get(section)
    return set(part.keys()) if isinstance(part, dict) else set()


def _columns_for(config: RunConfig, data_path: Path | None) -> dataio.ColumnConfig:
    if config.data.columns is not None:
        return config.data.columns
    preset = config.data.preset
    if preset is None and data_path is not None:
        looks_synthetic = (data_path / "ground_truth.json").exists() if data_path.is_dir() else False
        preset = "synthetic" if looks_synthetic else None
    if preset == "kuairand":
        return dataio.KUAIRAND_COLUMNS
    if preset == "synthetic" or preset is None:
        return synthetic.SYNTH_COLUMNS
    raise CommandError(f"unknown data preset: {preset!r}")


def _data_path(args, config: RunConfig) -> Path:
    raw = getattr(args, "data", None) or config.data.path
    if raw is None and (config.data.train_csv or config.data.test_csv):
        return Path(".")
    if raw is None:
        raise CommandError("no input data: pass --data or set data.path in the config")
    return Path(raw)


def _train_val_test_records(args, config: RunConfig):
    """Ingest and split according to the data section; returns records + columns."""
    base = _data_path(args, config)
    columns = _columns_for(config, base)
    if config.data.train_csv or config.data.test_csv:
        if not (config.data.train_csv and config.data.test_csv):
            raise CommandError("data.train_csv and data.test_csv must be set together")
        train_path, test_path = Path(config.data.train_csv), Path(config.data.test_csv)
    elif base.is_dir():
        train_path, test_path = base / "train.csv", base / "test.csv"
    else:
        result = dataio.ingest_csv(base, columns)
        split_config = config.data.split
        if split_config.mode == "ratio" and "seed" not in _config_file_keys(args, "data"):
            split_config.seed = config.seed
        split = dataio.split_records(result.records, split_config)
        return split, result.summary, columns, split_config

    train_result = dataio.ingest_csv(train_path, columns)
    test_result = dataio.ingest_csv(test_path, columns)
    vf = config.data.val_fraction
    carve = dataio.SplitConfig(mode="ratio", fractions=(1.0 - vf, vf, 0.0), seed=config.seed)
    inner = dataio.split_records(train_result.records, carve)
    split = dataio.RecordSplit(train=inner.train, validation=inner.validation, test=test_result.records)
    summary = train_result.summary
    summary.rows_read += test_result.summary.rows_read
    summary.kept += test_result.summary.kept
    summary.dropped_negative_interval += test_result.summary.dropped_negative_interval
    summary.dropped_bad_row += test_result.summary.dropped_bad_row
    return split, summary, columns, carve


def _test_batch_for_bundle(args, config: RunConfig, bundle):
    base = _data_path(args, config)
    columns = _columns_for(config, base)
    test_path = base / "test.csv" if base.is_dir() else base
    result = dataio.ingest_csv(test_path, columns)
    return dataio.encode_dataset(result.records, bundle.schema), result

# -- commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _load_config(args)
    config.synthetic.validate()
    out = _resolve_out(args, config, "synth")
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out)
    summary = synthetic.emit_dataset(config.synthetic, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"world seed {config.synthetic.seed}: "
          f"{summary['train_rows']} train rows (positive rate {summary['train_positive_rate']:.4f}), "
          f"{summary['test_rows']} test rows (positive rate {summary['test_positive_rate']:.4f})")
    hist = summary["train_interval_histogram"]
    populated = sum(1 for c in hist if c > 0)
    print(f"train intervals populated: {populated}/{len(hist)}; files in {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    if getattr(args, "backbone", None):
        config.train.backbone.backbone = args.backbone
    if getattr(args, "alpha", None) is not None:
        config.train.alpha = args.alpha
    if getattr(args, "epochs", None) is not None:
        config.train.epochs = args.epochs
    if getattr(args, "matching_only", False):
        config.train.mode = "matching-only"
    config.validate()
    out = _resolve_out(args, config, "train")
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out)

    split, summary, columns, split_config = _train_val_test_records(args, config)
    if not split.train or not split.validation:
        raise CommandError("training needs non-empty train and validation splits")
    schema = dataio.build_schema(split.train, columns, config.horizon)
    (out / "schema.json").write_text(json.dumps(dataio.schema_to_dict(schema), indent=2, sort_keys=True) + "\n")
    dataio.write_split_manifest(out / "split_manifest.json", split_config, split)

    train_batch = dataio.encode_dataset(split.train, schema)
    val_batch = dataio.encode_dataset(split.validation, schema)
    print(f"ingested {summary.kept} rows "
          f"(dropped: {summary.dropped_negative_interval} negative-interval, {summary.dropped_bad_row} bad); "
          f"train/val/test = {len(split.train)}/{len(split.validation)}/{len(split.test)}")
    print(f"timestamp units: {summary.time_units}")

    result = trainer.train(train_batch, val_batch, schema, config.train, log_path=out / "train_log.jsonl")
    checkpoint = out / "checkpoint.bundle"
    trainer.save_checkpoint(result.bundle, checkpoint)
    print(f"best epoch {result.bundle.best_epoch}: "
          f"{config.train.validation_metric} = {result.bundle.val_metric:.6f} "
          f"({len(result.history)} epochs run)")
    print(f"checkpoint: {checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    if getattr(args, "policy", None):
        config.fusion.policy = args.policy
    if getattr(args, "beta", None) is not None:
        config.fusion.beta = args.beta
    if getattr(args, "k", None):
        config.eval.k = args.k
    if getattr(args, "per_interval", False):
        config.eval.per_interval = True
    if getattr(args, "cold_start", False):
        config.eval.cold_start = True
    config.fusion.validate(strict_beta=True)
    if not config.eval.k or any(k < 1 for k in config.eval.k):
        raise CommandError(f"invalid --k list: {config.eval.k}")
    out = _resolve_out(args, config, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out)

    bundle = trainer.load_checkpoint(args.checkpoint)
    batch, _ = _test_batch_for_bundle(args, config, bundle)
    result = inference.score_batch(bundle, batch, config.fusion)
    report = evaluation.evaluate(
        batch,
        result.scores,
        k_list=sorted(set(config.eval.k)),
        per_interval=config.eval.per_interval,
        per_interval_k=max(config.eval.k),
        cold_start_train_videos=set(bundle.train_video_ids) if config.eval.cold_start else None,
        horizon=bundle.schema.horizon,
    )
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text())
    inference.write_scores_csv(out / "scores.csv", batch, result)
    print(f"policy {config.fusion.policy} on {report.evaluated_users} users "
          f"({report.excluded_users} excluded without positives)")
    for metric in evaluation.METRICS:
        parts = "  ".join(f"@{k}={report.overall[metric][k]:.6f}" for k in sorted(report.overall[metric]))
        print(f"  {metric:<7} {parts}")
    print(f"reports in {out}")
    return 0


def cmd_report(args) -> int:
    config = _load_config(args)
    if getattr(args, "policy", None):
        config.fusion.policy = args.policy
    if getattr(args, "beta", None) is not None:
        config.fusion.beta = args.beta
    config.fusion.validate(strict_beta=True)
    out = _resolve_out(args, config, "report")
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, out)

    bundle = trainer.load_checkpoint(args.checkpoint)
    baseline = trainer.load_checkpoint(args.baseline_checkpoint) if args.baseline_checkpoint else bundle

    base = _data_path(args, config)
    truth_path = Path(args.ground_truth) if args.ground_truth else (
        base / "ground_truth.json" if base.is_dir() else None
    )
    if truth_path is None or not truth_path.exists():
        raise CommandError("case study needs a ground-truth sidecar: pass --ground-truth")
    truth = json.loads(truth_path.read_text())
    classes = {vid: info["sensitivity_class"] for vid, info in truth["videos"].items()}

    batch, _ = _test_batch_for_bundle(args, config, bundle)
    columns = _columns_for(config, base)
    profile_path = base / "train.csv" if base.is_dir() else base
    profile_records = dataio.ingest_csv(profile_path, columns).records
    profile_batch = dataio.encode_dataset(profile_records, bundle.schema)
    profile = evaluation.interval_profile(profile_batch, bundle.schema.horizon)
    evaluation.write_interval_profile_csv(out / "interval_profile.csv", profile)

    treatment = inference.score_batch(bundle, batch, config.fusion)
    backbone_only = inference.score_batch(
        baseline, batch, inference.FusionConfig(policy="backbone-only", beta=config.fusion.beta)
    )
    study_treatment = evaluation.report_prediction_by_interval(batch, treatment.scores, classes)
    study_baseline = evaluation.report_prediction_by_interval(batch, backbone_only.scores, classes)

    with (out / "prediction_by_interval.csv").open("w") as fh:
        fh.write("policy,class,interval,count,mean_score\n")
        for label, study in ((config.fusion.policy, study_treatment), ("backbone-only", study_baseline)):
            for row in study.rows:
                fh.write(f"{label},{row['class']},{row['interval']},{row['count']},{row['mean_score']!r}\n")
    slopes = {
        config.fusion.policy: study_treatment.slopes,
        "backbone-only": study_baseline.slopes,
    }
    (out / "slopes.json").write_text(json.dumps(slopes, indent=2, sort_keys=True) + "\n")

    print(f"slope of mean prediction vs interval ({config.fusion.policy} vs backbone-only):")
    for cls in sorted(set(study_treatment.slopes) | set(study_baseline.slopes)):
        a = study_treatment.slopes.get(cls, float("nan"))
        b = study_baseline.slopes.get(cls, float("nan"))
        print(f"  {cls:<12} {a:+.6f}  vs  {b:+.6f}")
    print(f"case-study tables in {out}")
    return 0


# -- parser ---------------------------------------------------------------


def _parse_k(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intervalrec",
        description="Release-interval-aware recommendation: synthesize, train, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", help=f"output directory (default from ${OUT_ENV})")

    p_synth = sub.add_parser("synth", help="generate a synthetic world with ground truth")
    common(p_synth)
    p_synth.set_defaults(handler=cmd_synth)

    p_train = sub.add_parser("train", help="train the joint model on logged interactions")
    common(p_train)
    p_train.add_argument("--data", help="dataset directory (train.csv/test.csv) or a single csv")
    p_train.add_argument("--backbone", choices=["fm", "deepfm"])
    p_train.add_argument("--alpha", type=float, help="matching-loss weight in (0,1)")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--matching-only", action="store_true", help="train the backbone alone (ablation)")
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a test split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset directory or test csv")
    p_eval.add_argument("--policy", choices=list(inference.POLICIES))
    p_eval.add_argument("--beta", type=float, help="fusion weight in (0,1)")
    p_eval.add_argument("--k", type=_parse_k, help="comma-separated K list, e.g. 5,10")
    p_eval.add_argument("--per-interval", action="store_true", help="NDCG breakdown per interval")
    p_eval.add_argument("--cold-start", action="store_true", help="cold-start slice metrics")
    p_eval.set_defaults(handler=cmd_evaluate)

    p_report = sub.add_parser("report", help="interval profile and prediction-vs-interval case study")
    common(p_report)
    p_report.add_argument("--checkpoint", required=True)
    p_report.add_argument("--baseline-checkpoint", help="separately trained matching-only bundle")
    p_report.add_argument("--data", help="dataset directory or csv")
    p_report.add_argument("--ground-truth", help="sidecar json with per-video sensitivity classes")
    p_report.add_argument("--policy", choices=list(inference.POLICIES))
    p_report.add_argument("--beta", type=float)
    p_report.set_defaults(handler=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if not getattr(args, "handler", None):
        build_parser().print_help()
        return 1
    try:
        return args.handler(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
