"""Experiment orchestration: config schema, full pipeline runs, the ablation
grid, and report emission.

Reports are deterministic under fixed seeds: rows are emitted in a canonical
order with fixed float formatting and no timestamps. Latency measurement is
therefore opt-in (`bench.enabled`) and lands in a separate file, keeping the
main report byte-stable across reruns.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bench import measure_latency, speedup
from .cache import write_cache
from .data import Dataset, FoldPlan, load_dataset, make_folds
from .gbdt import GbdtConfig, fit_gbdt, predict_gbdt, soft_logit_targets
from .labeling import AnnotationConfig, SoftLabelSet, annotate, collect_leaky, collect_oof
from . import losses
from .losses import LossConfig
from .metrics import (MetricRow, ece, feature_split_analysis, friedman,
                      retention, roc_auc, wilcoxon_signed_rank, win_rate)
from .mlp import MlpConfig, fit_mlp, predict_mlp
from .teachers import TeacherSpec, fit_teacher
from .util import derive_seed, entropy_nats, stratified_holdout

BASELINE_MODEL = "gbdt-hard"
OUTPUT_DIR_ENV = "OOFDISTILL_OUT"

# Ablation grid in report order: name, loss/annotation adjustments.
ABLATION_GRID = (
    ("full", {}),
    ("hard-labels (alpha=0)", {"alpha": 0.0}),
    ("soft-only (alpha=1)", {"alpha": 1.0}),
    ("no-adaptive-temperature", {"fixed_temperature": True}),
    ("no-confidence-weighting", {"unit_weights": True}),
    ("t-max-1", {"t_max": 1.0}),
    ("t-max-5", {"t_max": 5.0}),
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str
    label_column: str


@dataclass(frozen=True)
class BenchSettings:
    enabled: bool = False
    batch_size: int = 1000
    warmup: int = 10
    iters: int = 100
    pin_core: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    teachers: tuple
    teacher_sets: tuple
    students: tuple = ("gbdt",)
    loss: LossConfig = LossConfig()
    mlp_label_smoothing: float = 0.05
    annotation: AnnotationConfig = AnnotationConfig()
    folds_k: int = 5
    folds_seed: int = 0
    gbdt: GbdtConfig = GbdtConfig()
    mlp: MlpConfig = MlpConfig()
    baseline: str = BASELINE_MODEL
    test_fraction: float = 0.25
    seed: int = 0
    bench: BenchSettings = BenchSettings()
    external_teacher_latency_ms: tuple = ()
    output_dir: str = "out"
    workers: int = 1

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigError("no datasets configured")
        if not self.teachers:
            raise ConfigError("no teachers configured")
        names = [t.name for t in self.teachers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate teacher names in {names}")
        for group in self.teacher_sets:
            for nm in group:
                if nm not in names:
                    raise ConfigError(f"teacher set references unknown teacher {nm!r}")
        for s in self.students:
            if s not in ("gbdt", "mlp"):
                raise ConfigError(f"unknown student {s!r}")
        trained = {BASELINE_MODEL}
        trained.update(_model_name(group, s)
                       for group in self.teacher_sets for s in self.students)
        if self.baseline not in trained:
            raise ConfigError(f"baseline {self.baseline!r} is not among trained models {sorted(trained)}")
        if not 0.0 < self.test_fraction < 0.5:
            raise ConfigError(f"test_fraction must be in (0, 0.5), got {self.test_fraction}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.output_dir))

    def teacher_by_name(self, name: str) -> TeacherSpec:
        for t in self.teachers:
            if t.name == name:
                return t
        raise ConfigError(f"unknown teacher {name!r}")


def _model_name(group, student: str) -> str:
    return "+".join(group) + "->" + student


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from parsed JSON."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {
        "datasets", "teachers", "teacher_sets", "students", "loss",
        "mlp_label_smoothing", "annotation", "folds", "gbdt", "mlp", "baseline",
        "test_fraction", "seed", "bench", "external_teacher_latency_ms",
        "output_dir", "workers",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def build(cls, sub: dict, what: str):
        try:
            return cls(**sub)
        except TypeError as exc:
            raise ConfigError(f"bad {what} section: {exc}") from exc

    try:
        datasets = tuple(
            DatasetSpec(name=d["name"], path=d["path"],
                        label_column=d.get("label_column", "label"))
            for d in doc.get("datasets", [])
        )
        teachers = tuple(build(TeacherSpec, t, "teacher") for t in doc.get("teachers", []))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad datasets/teachers section: {exc}") from exc
    for t in teachers:
        try:
            t.validate()
        except Exception as exc:
            raise ConfigError(f"teacher {t.name!r}: {exc}") from exc

    teacher_sets = tuple(tuple(g) for g in doc.get("teacher_sets", [])) or tuple(
        (t.name,) for t in teachers
    )
    folds = doc.get("folds", {})
    bench_doc = doc.get("bench", {})
    config = ExperimentConfig(
        datasets=datasets,
        teachers=teachers,
        teacher_sets=teacher_sets,
        students=tuple(doc.get("students", ("gbdt",))),
        loss=build(LossConfig, doc.get("loss", {}), "loss"),
        mlp_label_smoothing=doc.get("mlp_label_smoothing", 0.05),
        annotation=build(AnnotationConfig, doc.get("annotation", {}), "annotation"),
        folds_k=folds.get("k", 5),
        folds_seed=folds.get("seed", 0),
        gbdt=build(GbdtConfig, doc.get("gbdt", {}), "gbdt"),
        mlp=build(MlpConfig, doc.get("mlp", {}), "mlp"),
        baseline=doc.get("baseline", BASELINE_MODEL),
        test_fraction=doc.get("test_fraction", 0.25),
        seed=doc.get("seed", 0),
        bench=build(BenchSettings, bench_doc, "bench"),
        external_teacher_latency_ms=tuple(
            sorted(doc.get("external_teacher_latency_ms", {}).items())
        ),
        output_dir=doc.get("output_dir", "out"),
        workers=doc.get("workers", 1),
    )
    config.validate()
    return config


def hard_label_soft_set(labels: np.ndarray, C: int) -> SoftLabelSet:
    """Stand-in soft labels for hard-label training (alpha=0 paths): uniform
    probabilities with unit weights, so only the CE/one-hot route is live."""
    n = len(labels)
    return SoftLabelSet(
        probs=np.full((n, C), 1.0 / C),
        entropy=np.full(n, np.log(C)),
        temperature=np.ones(n),
        weight=np.ones(n),
        provenance={"teachers": [], "fold_plan": None, "fold_of_row": None, "leaky": False},
    )


@dataclass
class DatasetOutcome:
    name: str
    rows: list = field(default_factory=list)
    latencies: list = field(default_factory=list)  # (model, mean_ms)
    error: str | None = None


def _split_train_test(ds: Dataset, config: ExperimentConfig):
    tr_idx, te_idx = stratified_holdout(
        ds.labels, config.test_fraction, derive_seed(config.seed, ds.name, "split")
    )
    return ds.subset(tr_idx), ds.subset(te_idx)


def _train_student(student: str, train: Dataset, soft: SoftLabelSet,
                   config: ExperimentConfig, seed: int):
    """Fit one student; returns (predict_fn, model)."""
    if student == "gbdt":
        targets = soft_logit_targets(soft, config.loss, train.labels)
        model = fit_gbdt(train.features, targets, soft.weight,
                         replace(config.gbdt, seed=seed), hard_labels=train.labels)
        return (lambda X: predict_gbdt(model, X)), model
    mlp_loss = replace(config.loss, label_smoothing=config.mlp_label_smoothing,
                       reduction="mean")
    model = fit_mlp(train.features, soft, train.labels, mlp_loss,
                    replace(config.mlp, seed=seed))
    return (lambda X: predict_mlp(model, X)), model


def run_dataset(config: ExperimentConfig, dspec: DatasetSpec) -> DatasetOutcome:
    """Full pipeline for one dataset; exceptions become an error record."""
    outcome = DatasetOutcome(name=dspec.name)
    try:
        ds = load_dataset(dspec.path, dspec.label_column, name=dspec.name,
                          min_class_count=config.folds_k)
        train, test = _split_train_test(ds, config)
        plan = make_folds(train.labels, config.folds_k,
                          derive_seed(config.folds_seed, dspec.name))
        predict_fns = {}

        teacher_test_auc: dict[str, float] = {}
        for spec in config.teachers:
            if spec.kind == "cache":
                continue  # external teachers cannot be scored on held-out rows
            teacher = fit_teacher(spec, train.features, train.labels, ds.C,
                                  seed=derive_seed(config.seed, dspec.name, spec.name))
            probs = teacher.predict_proba(test.features)
            auc = roc_auc(probs, test.labels)
            teacher_test_auc[spec.name] = auc
            ext = dict(config.external_teacher_latency_ms)
            outcome.rows.append(MetricRow(
                dataset=dspec.name, model=f"teacher:{spec.name}", auc=auc,
                ece=ece(probs, test.labels), latency_ms=ext.get(spec.name),
                n_features=ds.n_features,
            ))

        hard = hard_label_soft_set(train.labels, ds.C)
        hard_loss = replace(config.loss, alpha=0.0, label_smoothing=0.0)
        base_targets = soft_logit_targets(hard, hard_loss, train.labels)
        base_model = fit_gbdt(
            train.features, base_targets, hard.weight,
            replace(config.gbdt, seed=derive_seed(config.seed, dspec.name, BASELINE_MODEL)),
            hard_labels=train.labels,
        )
        base_probs = predict_gbdt(base_model, test.features)
        predict_fns[BASELINE_MODEL] = lambda X: predict_gbdt(base_model, X)
        outcome.rows.append(MetricRow(
            dataset=dspec.name, model=BASELINE_MODEL, auc=roc_auc(base_probs, test.labels),
            ece=ece(base_probs, test.labels), n_features=ds.n_features,
        ))

        for group in config.teacher_sets:
            specs = [config.teacher_by_name(nm) for nm in group]
            label = "+".join(group)
            soft = collect_oof(train, plan, specs,
                               derive_seed(config.seed, dspec.name, label))
            annotated = annotate(soft, config.annotation, ds.C)
            ref_auc = teacher_test_auc.get(group[0]) if len(group) == 1 else None
            for student in config.students:
                mname = _model_name(group, student)
                fn, _ = _train_student(
                    student, train, annotated, config,
                    derive_seed(config.seed, dspec.name, mname),
                )
                probs = fn(test.features)
                predict_fns[mname] = fn
                outcome.rows.append(MetricRow(
                    dataset=dspec.name, model=mname, auc=roc_auc(probs, test.labels),
                    ece=ece(probs, test.labels), n_features=ds.n_features,
                    teacher_auc=ref_auc,
                ))

        if config.bench.enabled:
            for mname in sorted(predict_fns):
                report = measure_latency(
                    predict_fns[mname], [(dspec.name, test.features)],
                    batch_size=config.bench.batch_size, warmup=config.bench.warmup,
                    iters=config.bench.iters, pin_core=config.bench.pin_core,
                    model_name=mname,
                )
                outcome.latencies.append((mname, report.macro_mean_ms))
    except Exception as exc:  # noqa: BLE001 - partial-failure isolation
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".9g")
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_sort_key(name: str):
    if name == BASELINE_MODEL:
        return (0, name)
    if name.startswith("teacher:"):
        return (1, name)
    return (2, name)


@dataclass
class ExperimentResult:
    rows: list
    macro: list
    errors: list
    output_dir: Path
    latencies: dict = field(default_factory=dict)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full pipeline over all configured datasets and emit reports.

    One dataset's failure never disturbs another's rows; failures are
    recorded in errors.csv and reflected in the CLI exit status.
    """
    config.validate()
    out_dir = config.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.workers > 1 and len(config.datasets) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(run_dataset, [config] * len(config.datasets),
                                     config.datasets))
    else:
        outcomes = [run_dataset(config, d) for d in config.datasets]

    rows: list[MetricRow] = []
    errors: list[tuple[str, str]] = []
    latencies: dict[str, dict[str, float]] = {}
    for oc in outcomes:
        if oc.error is not None:
            errors.append((oc.name, oc.error))
            continue
        rows.extend(oc.rows)
        for model, ms in oc.latencies:
            latencies.setdefault(model, {})[oc.name] = ms

    if latencies:
        lat_by_model = {m: float(np.mean(list(d.values()))) for m, d in latencies.items()}
        rows = [
            replace(r, latency_ms=lat_by_model[r.model])
            if r.model in lat_by_model else r
            for r in rows
        ]

    _write_reports(config, rows, errors, latencies, out_dir)
    macro = _macro_table(config, rows)
    return ExperimentResult(rows=rows, macro=macro, errors=errors,
                            output_dir=out_dir, latencies=latencies)


def _rows_by_model(rows):
    by_model: dict[str, list[MetricRow]] = {}
    for r in rows:
        by_model.setdefault(r.model, []).append(r)
    return by_model


def _macro_table(config: ExperimentConfig, rows: list[MetricRow]) -> list[dict]:
    by_model = _rows_by_model(rows)
    base_auc = {r.dataset: r.auc for r in by_model.get(config.baseline, [])}
    table = []
    for model in sorted(by_model, key=_model_sort_key):
        mrows = by_model[model]
        aucs = np.array([r.auc for r in mrows])
        eces = [r.ece for r in mrows if r.ece is not None]
        rets = [retention(r.auc, r.teacher_auc) for r in mrows if r.teacher_auc]
        lats = [r.latency_ms for r in mrows if r.latency_ms is not None]
        entry = {
            "model": model,
            "n_datasets": len(mrows),
            "mean_auc": float(aucs.mean()),
            "sd_auc": float(aucs.std(ddof=0)),
            "mean_ece": float(np.mean(eces)) if eces else None,
            "mean_retention": float(np.mean(rets)) if rets else None,
            "win_rate": None, "mean_win": None, "mean_loss": None,
            "wilcoxon_p": None,
            "mean_latency_ms": float(np.mean(lats)) if lats else None,
        }
        if model != config.baseline and not model.startswith("teacher:"):
            deltas = [r.auc - base_auc[r.dataset] for r in mrows if r.dataset in base_auc]
            if deltas:
                summary = win_rate(deltas)
                entry["win_rate"] = summary.win_rate
                entry["mean_win"] = summary.mean_win
                entry["mean_loss"] = summary.mean_loss
                nonzero = sum(1 for d in deltas if d != 0.0)
                if nonzero >= 5:
                    entry["wilcoxon_p"] = wilcoxon_signed_rank(deltas).p_value
        table.append(entry)
    return table


def _write_reports(config, rows, errors, latencies, out_dir: Path) -> None:
    rows_sorted = sorted(rows, key=lambda r: (r.dataset, _model_sort_key(r.model)))
    _write_csv(
        out_dir / "report.csv",
        ["dataset", "model", "auc", "ece", "retention", "latency_ms",
         "n_features", "teacher_auc"],
        [[r.dataset, r.model, r.auc, r.ece,
          retention(r.auc, r.teacher_auc) if r.teacher_auc else None,
          r.latency_ms, r.n_features, r.teacher_auc]
         for r in rows_sorted],
    )

    macro = _macro_table(config, rows)
    ext = dict(config.external_teacher_latency_ms)
    best_ext = max(ext.values()) if ext else None
    macro_rows = []
    for e in macro:
        spd = None
        if best_ext is not None and e["mean_latency_ms"]:
            spd = speedup(best_ext, e["mean_latency_ms"])
        macro_rows.append([
            e["model"], e["n_datasets"], e["mean_auc"], e["sd_auc"], e["mean_ece"],
            e["mean_retention"], e["win_rate"], e["mean_win"], e["mean_loss"],
            e["wilcoxon_p"], e["mean_latency_ms"], spd,
        ])
    _write_csv(
        out_dir / "macro.csv",
        ["model", "n_datasets", "mean_auc", "sd_auc", "mean_ece", "mean_retention",
         "win_rate", "mean_win", "mean_loss", "wilcoxon_p", "mean_latency_ms",
         "speedup_vs_external_teacher"],
        macro_rows,
    )

    # statistics: Friedman over models present on every dataset
    by_model = _rows_by_model(rows)
    datasets = sorted({r.dataset for r in rows})
    stats_rows = []
    complete = [m for m in sorted(by_model, key=_model_sort_key)
                if {r.dataset for r in by_model[m]} == set(datasets)]
    if len(complete) >= 2 and len(datasets) >= 2:
        auc_of = {(r.model, r.dataset): r.auc for r in rows}
        table = np.array([[auc_of[(m, d)] for m in complete] for d in datasets])
        fr = friedman(table)
        stats_rows.append(["friedman", "|".join(complete), fr.statistic, fr.p_value,
                           fr.n_effective, fr.method])
    for e in macro:
        if e["wilcoxon_p"] is not None:
            stats_rows.append([f"wilcoxon-vs-{config.baseline}", e["model"], None,
                               e["wilcoxon_p"], e["n_datasets"], "see-macro"])
    _write_csv(out_dir / "stats.csv",
               ["test", "models", "statistic", "p_value", "n", "method"], stats_rows)

    # feature-count split analysis per distilled model
    split_rows = []
    if len(datasets) >= 1:
        for e in macro:
            m = e["model"]
            if m == config.baseline or m.startswith("teacher:"):
                continue
            if {r.dataset for r in by_model[m]} != set(datasets):
                continue
            if {r.dataset for r in by_model.get(config.baseline, [])} != set(datasets):
                continue
            fs = feature_split_analysis(
                [r for r in rows if r.model in (m, config.baseline)],
                config.baseline, m,
            )
            split_rows.append([m, fs.median_features, fs.low_n, fs.low_mean_delta,
                               fs.high_n, fs.high_mean_delta])
    _write_csv(out_dir / "feature_split.csv",
               ["model", "median_features", "low_n", "low_mean_delta",
                "high_n", "high_mean_delta"], split_rows)

    # figure data: student/teacher AUC ratio per single-teacher pair
    ratio_rows = []
    for e in macro:
        m = e["model"]
        if m == config.baseline or m.startswith("teacher:"):
            continue
        mrows = [r for r in by_model[m] if r.teacher_auc]
        if not mrows:
            continue
        ratios = np.array([100.0 * r.auc / r.teacher_auc for r in mrows])
        teacher, student = m.split("->")
        ratio_rows.append([teacher, student, float(ratios.mean()),
                           float(ratios.std(ddof=0)), len(ratios)])
    _write_csv(out_dir / "figure_ratio.csv",
               ["teacher", "student", "mean_ratio_pct", "sd_ratio_pct", "n"],
               ratio_rows)
    _write_csv(out_dir / "figure_macro.csv",
               ["model", "macro_auc", "sd_auc"],
               [[e["model"], e["mean_auc"], e["sd_auc"]] for e in macro])

    _write_csv(out_dir / "errors.csv", ["dataset", "error"],
               [[d, msg] for d, msg in sorted(errors)])

    if latencies:
        lat_rows = []
        for model in sorted(latencies, key=_model_sort_key):
            for dname in sorted(latencies[model]):
                lat_rows.append([model, dname, latencies[model][dname]])
        _write_csv(out_dir / "latency.csv", ["model", "dataset", "mean_ms"], lat_rows)

    _write_markdown(config, macro, stats_rows, split_rows, ratio_rows, errors,
                    out_dir / "report.md")


def _write_markdown(config, macro, stats_rows, split_rows, ratio_rows, errors,
                    path: Path) -> None:
    ext = dict(config.external_teacher_latency_ms)
    lines = ["# Distillation report", ""]
    lines.append("## Macro results")
    lines.append("")
    lines.append("| Model | n | AUC | Ret.% | Win% | Wilcoxon p | ECE | Latency ms |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for e in macro:
        win = "" if e["win_rate"] is None else f"{100 * e['win_rate']:.1f}"
        lines.append(
            "| {model} | {n} | {auc:.4f} ± {sd:.4f} | {ret} | {win} | {p} | {ece} | {lat} |".format(
                model=e["model"], n=e["n_datasets"], auc=e["mean_auc"], sd=e["sd_auc"],
                ret="" if e["mean_retention"] is None else f"{e['mean_retention']:.1f}",
                win=win,
                p="" if e["wilcoxon_p"] is None else f"{e['wilcoxon_p']:.4g}",
                ece="" if e["mean_ece"] is None else f"{e['mean_ece']:.4f}",
                lat="" if e["mean_latency_ms"] is None else f"{e['mean_latency_ms']:.3g}",
            )
        )
    lines.append("")
    lines.append("Multi-teacher rows omit retention: the reference teacher varies per dataset.")
    lines.append(f"Win rate and Wilcoxon are against the baseline `{config.baseline}` "
                 "(strict inequality; ties are not wins).")
    if ext:
        lines.append("")
        lines.append("External teacher latencies (supplied, not measured): "
                     + ", ".join(f"{k}={v}ms" for k, v in sorted(ext.items())))
    if stats_rows:
        lines.append("")
        lines.append("## Statistics")
        lines.append("")
        lines.append("| Test | Models | Statistic | p | n | Method |")
        lines.append("|---|---|---|---|---|---|")
        for row in stats_rows:
            lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    if split_rows:
        lines.append("")
        lines.append("## Feature-count split (delta vs baseline)")
        lines.append("")
        lines.append("| Model | Median d | n low | mean delta low | n high | mean delta high |")
        lines.append("|---|---|---|---|---|---|")
        for row in split_rows:
            lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    if ratio_rows:
        lines.append("")
        lines.append("## Student/teacher AUC ratio (figure data)")
        lines.append("")
        lines.append("| Teacher | Student | Mean ratio % | SD | n |")
        lines.append("|---|---|---|---|---|")
        for row in ratio_rows:
            lines.append("| " + " | ".join(_fmt(v) for v in row) + " |")
    if errors:
        lines.append("")
        lines.append("## Errors")
        lines.append("")
        for dname, msg in sorted(errors):
            lines.append(f"- `{dname}`: {msg}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class AblationRow:
    configuration: str
    macro_auc: float
    delta_vs_full: float
    wilcoxon_p: float | None
    kl_evals: int
    per_dataset_auc: dict


def run_ablation(config: ExperimentConfig, datasets=None) -> list[AblationRow]:
    """Run the seven-configuration ablation grid with the MLP student.

    Emits one row per configuration in grid order. KL evaluations are counted
    per configuration so reductions (alpha=0 never touches the KL path) are
    checkable from the report itself.
    """
    config.validate()
    if "mlp" not in config.students:
        raise ConfigError("the ablation grid requires the MLP student")
    dataset_specs = datasets if datasets is not None else config.datasets
    group = config.teacher_sets[0]
    specs = [config.teacher_by_name(nm) for nm in group]

    prepared = []
    for dspec in dataset_specs:
        ds = load_dataset(dspec.path, dspec.label_column, name=dspec.name,
                          min_class_count=config.folds_k)
        train, test = _split_train_test(ds, config)
        plan = make_folds(train.labels, config.folds_k,
                          derive_seed(config.folds_seed, dspec.name))
        soft = collect_oof(train, plan, specs,
                           derive_seed(config.seed, dspec.name, "+".join(group)))
        prepared.append((dspec.name, ds, train, test, soft))

    results: list[AblationRow] = []
    for name, adjust in ABLATION_GRID:
        losses.reset_kl_eval_count()
        per_dataset = {}
        for dname, ds, train, test, soft in prepared:
            ann_cfg = config.annotation
            if "t_max" in adjust:
                ann_cfg = replace(ann_cfg, t_max=adjust["t_max"])
            annotated = annotate(soft, ann_cfg, ds.C)
            if adjust.get("fixed_temperature"):
                midpoint = (ann_cfg.t_min + ann_cfg.t_max) / 2.0
                annotated = replace(annotated,
                                    temperature=np.full(annotated.n_rows, midpoint))
            if adjust.get("unit_weights"):
                annotated = replace(annotated, weight=np.ones(annotated.n_rows))
            loss_cfg = replace(config.loss, alpha=adjust.get("alpha", config.loss.alpha),
                               label_smoothing=config.mlp_label_smoothing,
                               reduction="mean")
            # one seed per dataset, shared by every configuration, so rows
            # differ only through the ablated component
            model = fit_mlp(train.features, annotated, train.labels, loss_cfg,
                            replace(config.mlp,
                                    seed=derive_seed(config.seed, dname, "ablate")))
            per_dataset[dname] = roc_auc(predict_mlp(model, test.features), test.labels)
        results.append(AblationRow(
            configuration=name,
            macro_auc=float(np.mean(list(per_dataset.values()))),
            delta_vs_full=0.0,
            wilcoxon_p=None,
            kl_evals=losses.kl_eval_count(),
            per_dataset_auc=per_dataset,
        ))

    full = results[0]
    finished = []
    for row in results:
        deltas = [row.per_dataset_auc[d] - full.per_dataset_auc[d]
                  for d in sorted(full.per_dataset_auc)]
        p = None
        if row is not full and sum(1 for d in deltas if d != 0.0) >= 5:
            p = wilcoxon_signed_rank(deltas).p_value
        finished.append(replace(row, delta_vs_full=float(np.mean(deltas)), wilcoxon_p=p))
    return finished


def write_ablation_report(rows: list[AblationRow], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out_dir / "ablation.csv",
        ["configuration", "macro_auc", "delta_vs_full", "wilcoxon_p", "kl_evals"],
        [[r.configuration, r.macro_auc, r.delta_vs_full, r.wilcoxon_p, r.kl_evals]
         for r in rows],
    )
    lines = ["# MLP student ablation", "",
             "| Configuration | AUC | Delta vs full | Wilcoxon p | KL evals |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r.configuration} | {r.macro_auc:.4f} | {r.delta_vs_full:+.4f} | "
            f"{'' if r.wilcoxon_p is None else format(r.wilcoxon_p, '.4g')} | {r.kl_evals} |"
        )
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n", encoding="utf-8")


def leak_demo(dataset: Dataset, *, k_oof: int = 5, k_leaky: int = 1,
              smoothing: float = 1e-3, folds: int = 5, seed: int = 0) -> dict:
    """Demonstrate the in-context leakage pathology on one dataset.

    Returns mean soft-label entropies for the leaky (full-context, k=1
    memorizer) and out-of-fold paths of a knn teacher.
    """
    plan = make_folds(dataset.labels, folds, derive_seed(seed, "leak-demo"))
    oof_spec = TeacherSpec(kind="knn", name=f"knn{k_oof}", k=k_oof, smoothing=smoothing)
    leaky_spec = TeacherSpec(kind="knn", name=f"knn{k_leaky}", k=k_leaky,
                             smoothing=smoothing)
    oof = collect_oof(dataset, plan, [oof_spec], seed)
    leaky = collect_leaky(dataset, [leaky_spec], seed)
    return {
        "dataset": dataset.name,
        "n_rows": dataset.n_rows,
        "n_classes": dataset.C,
        "oof_teacher": oof_spec.name,
        "leaky_teacher": leaky_spec.name,
        "oof_mean_entropy_nats": float(entropy_nats(oof.probs).mean()),
        "leaky_mean_entropy_nats": float(entropy_nats(leaky.probs).mean()),
    }


def write_split_artifacts(ds: Dataset, plan: FoldPlan, out_dir: Path) -> tuple[Path, Path]:
    """Write the fold-plan and preprocessed-matrix files consumed by external
    teacher exporters. Returns (fold_plan_path, matrix_path)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    plan_path = out_dir / f"{ds.name}.folds.csv"
    lines = [
        "# format_version=1",
        f"# dataset={ds.name}",
        f"# n_rows={ds.n_rows}",
        f"# n_folds={plan.K}",
        f"# seed={plan.seed}",
        f"# fold_plan_hash={plan.digest()}",
        "row,fold",
    ]
    lines += [f"{i},{int(plan.assignment[i])}" for i in range(ds.n_rows)]
    plan_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    matrix_path = out_dir / f"{ds.name}.matrix.csv"
    lines = [
        "# format_version=1",
        f"# dataset={ds.name}",
        f"# n_rows={ds.n_rows}",
        f"# n_classes={ds.C}",
        f"# n_features={ds.n_features}",
        "row,label," + ",".join(f"f{j}" for j in range(ds.n_features)),
    ]
    for i in range(ds.n_rows):
        feats = ",".join(format(v, ".17g") for v in ds.features[i])
        lines.append(f"{i},{int(ds.labels[i])},{feats}")
    matrix_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return plan_path, matrix_path


def label_to_caches(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Compute OOF soft labels per (dataset, teacher) and write cache files."""
    config.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for dspec in config.datasets:
        ds = load_dataset(dspec.path, dspec.label_column, name=dspec.name,
                          min_class_count=config.folds_k)
        train, _ = _split_train_test(ds, config)
        plan = make_folds(train.labels, config.folds_k,
                          derive_seed(config.folds_seed, dspec.name))
        for spec in config.teachers:
            if spec.kind == "cache":
                continue
            soft = collect_oof(train, plan, [spec],
                               derive_seed(config.seed, dspec.name, spec.name))
            path = out_dir / f"{dspec.name}.{spec.name}.cache.csv"
            write_cache(soft, plan, path, dataset=dspec.name, teacher=spec.name,
                        extra={"mode": "oof"})
            written.append(path)
    return written
