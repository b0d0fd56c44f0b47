"""Command-line entry points.

Subcommands:
    split      write fold plans and preprocessed matrices (exporter inputs)
    label      compute OOF soft labels and write per-teacher caches
    distill    train students and save the fitted models
    eval       full pipeline with reports (no latency timing)
    bench      full pipeline with single-core latency timing enabled
    ablate     the seven-configuration MLP ablation grid
    report     regenerate macro reports from an existing report.csv
    leak-demo  show the in-context vs out-of-fold entropy contrast

Exit codes: 0 success, 1 partial failure (some datasets errored), 2 config
error. The output directory can be overridden with $OOFDISTILL_OUT.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .data import load_dataset, make_folds
from .experiment import (ConfigError, ExperimentConfig, config_from_dict,
                         label_to_caches, leak_demo, run_ablation, run_experiment,
                         write_ablation_report, write_split_artifacts)
from .gbdt import save_gbdt
from .metrics import MetricRow
from .mlp import save_mlp
from .synth import gaussian_mixture_task
from .util import derive_seed

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(doc)


def _cmd_split(args) -> int:
    config = _load_config(args.config)
    out_dir = config.resolved_output_dir() / "split"
    for dspec in config.datasets:
        ds = load_dataset(dspec.path, dspec.label_column, name=dspec.name,
                          min_class_count=config.folds_k)
        plan = make_folds(ds.labels, config.folds_k,
                          derive_seed(config.folds_seed, dspec.name))
        plan_path, matrix_path = write_split_artifacts(ds, plan, out_dir)
        print(f"{dspec.name}: wrote {plan_path} and {matrix_path}")
    return EXIT_OK


def _cmd_label(args) -> int:
    config = _load_config(args.config)
    out_dir = config.resolved_output_dir() / "caches"
    for path in label_to_caches(config, out_dir):
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_distill(args) -> int:
    from .experiment import _split_train_test, _train_student
    from .labeling import annotate, collect_oof

    config = _load_config(args.config)
    out_dir = config.resolved_output_dir() / "models"
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for dspec in config.datasets:
        try:
            ds = load_dataset(dspec.path, dspec.label_column, name=dspec.name,
                              min_class_count=config.folds_k)
            train, _ = _split_train_test(ds, config)
            plan = make_folds(train.labels, config.folds_k,
                              derive_seed(config.folds_seed, dspec.name))
            for group in config.teacher_sets:
                specs = [config.teacher_by_name(nm) for nm in group]
                label = "+".join(group)
                soft = collect_oof(train, plan, specs,
                                   derive_seed(config.seed, dspec.name, label))
                annotated = annotate(soft, config.annotation, ds.C)
                for student in config.students:
                    mname = f"{label}->{student}"
                    _, model = _train_student(
                        student, train, annotated, config,
                        derive_seed(config.seed, dspec.name, mname))
                    path = out_dir / f"{dspec.name}.{label}.{student}.json"
                    (save_gbdt if student == "gbdt" else save_mlp)(model, path)
                    print(f"{dspec.name}: trained {mname} -> {path}")
        except Exception as exc:  # noqa: BLE001 - per-dataset isolation
            failures += 1
            print(f"{dspec.name}: FAILED ({exc})", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def _run_and_report(config: ExperimentConfig) -> int:
    result = run_experiment(config)
    print(f"wrote reports to {result.output_dir}")
    for e in result.macro:
        ret = "" if e["mean_retention"] is None else f" ret={e['mean_retention']:.1f}%"
        print(f"  {e['model']}: auc={e['mean_auc']:.4f}±{e['sd_auc']:.4f}{ret}")
    for dname, msg in result.errors:
        print(f"  {dname}: FAILED ({msg})", file=sys.stderr)
    return EXIT_PARTIAL if result.errors else EXIT_OK


def _cmd_eval(args) -> int:
    config = _load_config(args.config)
    return _run_and_report(replace(config, bench=replace(config.bench, enabled=False)))


def _cmd_bench(args) -> int:
    config = _load_config(args.config)
    bench = replace(config.bench, enabled=True, pin_core=args.pin_core or config.bench.pin_core)
    return _run_and_report(replace(config, bench=bench))


def _cmd_ablate(args) -> int:
    config = _load_config(args.config)
    rows = run_ablation(config)
    out_dir = config.resolved_output_dir()
    write_ablation_report(rows, out_dir)
    print(f"wrote ablation report to {out_dir}")
    for r in rows:
        print(f"  {r.configuration}: auc={r.macro_auc:.4f} "
              f"delta={r.delta_vs_full:+.4f} kl_evals={r.kl_evals}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .experiment import _write_reports

    config = _load_config(args.config)
    report_path = config.resolved_output_dir() / "report.csv"
    if not report_path.exists():
        raise ConfigError(f"{report_path} not found; run `eval` first")
    rows = []
    lines = report_path.read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split(",")
    for ln in lines[1:]:
        rec = dict(zip(header, ln.split(",")))
        rows.append(MetricRow(
            dataset=rec["dataset"], model=rec["model"], auc=float(rec["auc"]),
            ece=float(rec["ece"]) if rec["ece"] else None,
            latency_ms=float(rec["latency_ms"]) if rec["latency_ms"] else None,
            n_features=int(rec["n_features"]) if rec["n_features"] else None,
            teacher_auc=float(rec["teacher_auc"]) if rec["teacher_auc"] else None,
        ))
    _write_reports(config, rows, [], {}, config.resolved_output_dir())
    print(f"regenerated reports in {config.resolved_output_dir()}")
    return EXIT_OK


def _cmd_leak_demo(args) -> int:
    if args.dataset:
        ds = load_dataset(args.dataset, args.label_column)
    else:
        ds = gaussian_mixture_task(n=args.rows, seed=args.seed)
    demo = leak_demo(ds, k_oof=args.k_oof, k_leaky=args.k_leaky,
                     smoothing=args.smoothing, folds=args.folds, seed=args.seed)
    print(json.dumps(demo, indent=2, sort_keys=True))
    contrast = demo["oof_mean_entropy_nats"] / max(demo["leaky_mean_entropy_nats"], 1e-12)
    print(f"# out-of-fold entropy is {contrast:.0f}x the leaky (in-context) entropy")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oofdistill",
        description="Out-of-fold soft-label distillation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, doc in (
        ("split", _cmd_split, "write fold plans and preprocessed matrices"),
        ("label", _cmd_label, "write per-teacher OOF prediction caches"),
        ("distill", _cmd_distill, "train and save student models"),
        ("eval", _cmd_eval, "run the full pipeline and write reports"),
        ("ablate", _cmd_ablate, "run the MLP ablation grid"),
        ("report", _cmd_report, "regenerate reports from report.csv"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.set_defaults(fn=fn)

    p = sub.add_parser("bench", help="run the pipeline with latency timing")
    p.add_argument("--config", required=True)
    p.add_argument("--pin-core", action="store_true",
                   help="pin the measured region to one logical core")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("leak-demo", help="show the leakage entropy contrast")
    p.add_argument("--dataset", default=None, help="CSV path (default: synthetic)")
    p.add_argument("--label-column", default="label")
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--k-oof", type=int, default=5)
    p.add_argument("--k-leaky", type=int, default=1)
    p.add_argument("--smoothing", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_leak_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
