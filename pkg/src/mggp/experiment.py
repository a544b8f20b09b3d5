"""Experiment orchestration behind the CLI subcommands.

Output directory layout::

    <out>/preprocess/   cleaned, split, normalized CSVs + report + params
    <out>/reps/rep_NN/  per-repetition model export, run logs, metrics
    <out>/summary.*     mean +/- std tables over repetitions
    <out>/report/       formula listing, variable frequency, plot data
    <out>/manifest.json
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (DataError, Dataset, Experiment, NormalizationParams, PreprocessReport,
                   align_to, clean_columns, concat_tables, correlation_filter,
                   drop_zero_variance, load_table, normalize_apply, normalize_fit, split)
from .evolve import MultiRunResult, RunConfig, log_to_csv, make_rng, multi_run
from .model import (Metrics, MultiGeneModel, compute_metrics, export_models_json,
                    export_models_text, format_model, model_complexity, parse_models_text,
                    predict, variable_frequency)

log = logging.getLogger(__name__)

SPLIT_STREAM = 7919
SPLITS = ("train", "test", "validation")
SPLIT_LABELS = {"train": "Training error", "test": "Test error", "validation": "Validation error"}
METRIC_NAMES = ("r2", "rmse", "mae", "mse")
METRIC_LABELS = {"r2": "R2", "rmse": "RMSE", "mae": "MAE", "mse": "MSE"}


class ColumnMismatch(DataError):
    def __init__(self, missing: Sequence[str]):
        super().__init__("data lacks columns for model variables: " + ", ".join(missing))
        self.missing = list(missing)


class InvariantViolation(RuntimeError):
    """Internal consistency check failed (CLI exit code 3)."""


@dataclass
class ExperimentSpec:
    preset: int = 1
    train_files: list[str] = field(default_factory=list)
    validation_file: str | None = None
    target_name: str = ""
    drop_column: str | None = None
    threshold: float = 0.9
    train_frac: float = 0.8
    repetitions: int = 10
    seed: int = 0
    output_dir: str = "mggp_out"
    config: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        if self.preset not in (1, 2, 3):
            raise ValueError("preset must be 1, 2 or 3")
        if self.preset == 2 and not self.drop_column:
            raise ValueError("preset 2 requires --drop-column")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.train_files:
            raise ValueError("no training files given")
        if not self.target_name:
            raise ValueError("no target column given")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = self.config.to_dict()
        return d

    def repetition_seed(self, rep: int) -> int:
        return self.seed * 1000 + rep

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# preprocess

@dataclass
class PreprocessResult:
    train: Dataset
    test: Dataset
    validation: Dataset | None
    params: NormalizationParams
    report: PreprocessReport


def preprocess(spec: ExperimentSpec) -> PreprocessResult:
    """Concatenate, clean, split, correlation-filter on the training rows,
    then normalize all splits with training statistics."""
    raw = concat_tables([load_table(p, spec.target_name) for p in spec.train_files])
    cleaned, report = clean_columns(raw)
    train_raw, test_raw = split(cleaned, spec.train_frac, make_rng(spec.seed, SPLIT_STREAM))
    filtered, freport = correlation_filter(train_raw, spec.threshold, Experiment(spec.preset),
                                           spec.drop_column)
    report = report.merge(freport)
    filtered, zero = drop_zero_variance(filtered)
    report.dropped_zero_variance += zero
    report.retained = list(filtered.column_names)
    if report.retained_count + report.dropped_count != report.original_count:
        raise InvariantViolation("column bookkeeping does not add up")
    names = filtered.column_names
    test_sel = test_raw.select_columns(names)
    params = normalize_fit(filtered)
    validation = None
    if spec.validation_file:
        vraw = load_table(spec.validation_file, spec.target_name)
        validation = normalize_apply(params, align_to(vraw, names, spec.target_name))
    return PreprocessResult(normalize_apply(params, filtered), normalize_apply(params, test_sel),
                            validation, params, report)


def cmd_preprocess(spec: ExperimentSpec) -> PreprocessResult:
    spec.validate()
    res = preprocess(spec)
    d = spec.out / "preprocess"
    d.mkdir(parents=True, exist_ok=True)
    res.train.to_csv(d / "train.csv")
    res.test.to_csv(d / "test.csv")
    if res.validation is not None:
        res.validation.to_csv(d / "validation.csv")
    res.params.save(d / "normalization.json")
    _write(d / "report.txt", res.report.to_text())
    _write(d / "report.json", res.report.to_json())
    retention = {
        "target": res.params.target_name,
        "inputs": [{"var": f"x{i + 1}", "column": n} for i, n in enumerate(res.train.input_names)],
    }
    _write(d / "retention.json", _dump_json(retention))
    _write(d / "spec.json", _dump_json(spec.to_dict()))
    log.info("retained %d of %d columns", res.report.retained_count, res.report.original_count)
    return res


# --------------------------------------------------------------------------
# train

def _metrics_both(y: np.ndarray, yhat: np.ndarray, params: NormalizationParams) -> dict:
    norm = compute_metrics(y, yhat)
    raw = compute_metrics(params.denormalize_target(y), params.denormalize_target(yhat))
    return {"normalized": norm.to_dict(), "target_units": raw.to_dict()}


def _predictions_csv(y: np.ndarray, yhat: np.ndarray, params: NormalizationParams) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_index", "observed", "predicted", "residual",
                "observed_raw", "predicted_raw", "residual_raw"])
    yr = params.denormalize_target(y) if y is not None else None
    pr = params.denormalize_target(yhat)
    for i in range(len(yhat)):
        if y is None:
            w.writerow([i, "", repr(float(yhat[i])), "", "", repr(float(pr[i])), ""])
        else:
            w.writerow([i, repr(float(y[i])), repr(float(yhat[i])), repr(float(y[i] - yhat[i])),
                        repr(float(yr[i])), repr(float(pr[i])), repr(float(yr[i] - pr[i]))])
    return buf.getvalue()


def _front_csv(result: MultiRunResult) -> str:
    rows = ["id,complexity,train_rmse,test_r2,test_rmse,test_mae,test_mse,selected"]
    for k, (ind, m) in enumerate(zip(result.front, result.front_test_metrics), start=1):
        t = m.to_dict() if m is not None else dict.fromkeys(METRIC_NAMES, math.nan)
        sel = int(ind is result.best)
        rows.append(f"{k},{ind.complexity},{ind.fitness!r},{t['r2']!r},{t['rmse']!r},"
                    f"{t['mae']!r},{t['mse']!r},{sel}")
    return "\n".join(rows) + "\n"


def load_preprocessed(out: Path) -> tuple[Dataset, Dataset, NormalizationParams]:
    d = out / "preprocess"
    if not (d / "normalization.json").exists():
        raise DataError(f"{d}: preprocess artifacts missing; run `preprocess` first")
    params = NormalizationParams.load(d / "normalization.json")
    train = Dataset.from_csv(d / "train.csv", params.target_name)
    test = Dataset.from_csv(d / "test.csv", params.target_name)
    return train, test, params


@dataclass
class TrainResult:
    rep_metrics: list[dict]
    models: list[MultiGeneModel]
    summary: dict
    access_log: list[str]


def cmd_train(spec: ExperimentSpec) -> TrainResult:
    spec.validate()
    out = spec.out
    access: list[str] = []
    train, test, params = load_preprocessed(out)
    access += ["read:train", "read:test"]
    validation = None
    val_path = out / "preprocess" / "validation.csv"
    models, rep_metrics, rep_dirs = [], [], []
    for rep in range(spec.repetitions):
        cfg = dataclasses.replace(spec.config, seed=spec.repetition_seed(rep))
        result = multi_run(cfg, train, test)
        access.append(f"selected:rep_{rep + 1:02d}")
        model = result.model
        rd = out / "reps" / f"rep_{rep + 1:02d}"
        rep_dirs.append(rd)
        for r, run in enumerate(result.runs, start=1):
            _write(rd / "runs" / f"run_{r:02d}.csv", log_to_csv(run.log))
        _write(rd / "model.txt", export_models_text([model], [rep + 1]))
        _write(rd / "model.json", export_models_json([model], [rep + 1]))
        front_models = [p.model for p in result.front]
        _write(rd / "front.txt", export_models_text(front_models))
        _write(rd / "front_metrics.csv", _front_csv(result))
        metrics = {
            "train": _metrics_both(train.y, predict(model, train), params),
            "test": _metrics_both(test.y, predict(model, test), params),
        }
        _write(rd / "predictions_test.csv", _predictions_csv(test.y, predict(model, test), params))
        if val_path.exists():
            if validation is None:
                validation = Dataset.from_csv(val_path, params.target_name)
                access.append("read:validation")
            vhat = predict(model, validation)
            metrics["validation"] = _metrics_both(validation.y, vhat, params)
            _write(rd / "predictions_validation.csv", _predictions_csv(validation.y, vhat, params))
        metrics["seed"] = cfg.seed
        metrics["complexity"] = model_complexity(model)
        _write(rd / "metrics.json", _dump_json(metrics))
        models.append(model)
        rep_metrics.append(metrics)
        log.info("repetition %d: test R2 %.6f", rep + 1, metrics["test"]["normalized"]["r2"])
    summary = summarize(rep_metrics)
    _write(out / "summary.txt", summary_table(summary, spec.repetitions))
    _write(out / "summary.csv", summary_csv(summary))
    _write(out / "summary.json", _dump_json(summary))
    _write(out / "models.txt", export_models_text(models))
    _write(out / "manifest.json", _dump_json(_manifest(spec, rep_dirs, access)))
    return TrainResult(rep_metrics, models, summary, access)


def summarize(rep_metrics: Sequence[dict]) -> dict:
    """Mean and population std per (units, split, metric)."""
    out: dict = {}
    for units in ("target_units", "normalized"):
        for s in SPLITS:
            rows = [m[s][units] for m in rep_metrics if s in m]
            if not rows:
                continue
            for k in METRIC_NAMES:
                vals = np.array([r[k] for r in rows], dtype=float)
                out.setdefault(units, {}).setdefault(s, {})[k] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                    "n": len(vals),
                }
    return out


def _pm(d: dict) -> str:
    return f"{d['mean']:.4g} ± {d['std']:.3g}"


def summary_table(summary: dict, repetitions: int) -> str:
    lines = []
    for units, title in (("target_units", "target units"), ("normalized", "normalized units")):
        if units not in summary:
            continue
        lines.append(f"Average error metrics (over {repetitions} runs), {title}")
        head = f"{'':<18}|" + "|".join(f" {METRIC_LABELS[k]:<22}" for k in METRIC_NAMES) + "|"
        lines.append(head)
        lines.append("-" * len(head))
        for s in SPLITS:
            if s not in summary[units]:
                continue
            cells = "|".join(f" {_pm(summary[units][s][k]):<22}" for k in METRIC_NAMES)
            lines.append(f"{SPLIT_LABELS[s]:<18}|{cells}|")
        lines.append("")
    return "\n".join(lines)


def summary_csv(summary: dict) -> str:
    rows = ["units,split,metric,mean,std,n"]
    for units, per_split in summary.items():
        for s, per_metric in per_split.items():
            for k, v in per_metric.items():
                rows.append(f"{units},{s},{k},{v['mean']!r},{v['std']!r},{v['n']}")
    return "\n".join(rows) + "\n"


def _manifest(spec: ExperimentSpec, rep_dirs: Sequence[Path], access: list[str]) -> dict:
    out = spec.out
    digest = _sha256(out / "preprocess" / "report.json")
    return {
        "software": {"package": "mggp", "version": __version__,
                     "numpy": np.__version__},
        "spec": spec.to_dict(),
        "seeds": {
            "base": spec.seed,
            "split_stream": [spec.seed, SPLIT_STREAM],
            "repetitions": [spec.repetition_seed(r) for r in range(spec.repetitions)],
            "internal_run_streams": "SeedSequence(repetition_seed, spawn_key=(run_index,))",
        },
        "preprocess_report_sha256": digest,
        "repetitions": [str(p.relative_to(out)) for p in rep_dirs],
        "access_order": access,
    }


# --------------------------------------------------------------------------
# predict

def read_model_file(path) -> MultiGeneModel:
    """First model in a text or JSON export."""
    from .model import model_from_dict
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return model_from_dict(json.loads(text)["models"][0])
    recs = parse_models_text(text)
    if not recs:
        raise ValueError(f"{path}: no model records")
    return recs[0][1]


def cmd_predict(model_file, data_file, params_file, out_file=None,
                normalized: bool = False) -> str:
    """Predictions CSV for ``data_file`` using stored retention and scaling.

    ``normalized=True`` treats the data as already scaled (e.g. the cached
    preprocess CSVs).
    """
    model = read_model_file(model_file)
    params = NormalizationParams.load(params_file)
    raw = load_table(data_file, None)
    inputs = [n for n in params.names if n != params.target_name]
    missing = []
    for i in model.used_variables():
        if i >= len(inputs):
            missing.append(f"x{i + 1}")
        elif inputs[i] not in raw.column_names:
            missing.append(f"x{i + 1} ({inputs[i]})")
    if missing:
        raise ColumnMismatch(missing)
    n = raw.row_count
    cols = np.full((len(inputs), n), np.nan)
    for i in model.used_variables():
        j = raw.column_names.index(inputs[i])
        if not raw.column_is_numeric(j):
            raise DataError(f"{data_file}: column {inputs[i]!r} has missing or non-numeric cells")
        v = raw.values[:, j]
        if not normalized:
            mu, sigma = params.stats(inputs[i])
            v = (v - mu) / sigma
        cols[i] = v
    yhat = predict(model, cols.T)
    y = None
    t = params.target_name
    if t in raw.column_names and raw.column_is_numeric(raw.column_names.index(t)):
        y = raw.values[:, raw.column_names.index(t)]
        if not normalized:
            mu, sigma = params.stats(t)
            y = (y - mu) / sigma
    text = _predictions_csv(y, yhat, params)
    if out_file is not None:
        _write(Path(out_file), text)
    return text


# --------------------------------------------------------------------------
# report

def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    obs, pred = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            obs.append(float(row["observed"]) if row["observed"] else math.nan)
            pred.append(float(row["predicted"]))
    return np.array(obs), np.array(pred)


def _svg_chart(obs: np.ndarray, pred: np.ndarray, title: str) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mggp"
    fig, ax = plt.subplots(figsize=(8, 3.5))
    idx = np.arange(len(obs))
    ax.plot(idx, obs, color="tab:blue", lw=0.8, label="observed")
    ax.plot(idx, pred, color="tab:red", lw=0.8, label="predicted")
    ax.set_xlabel("sample index")
    ax.set_ylabel("scaled target")
    ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def cmd_report(run_dir, charts: bool = True) -> dict:
    """Formula listing, variable-frequency table and overlay plot data."""
    run_dir = Path(run_dir)
    rep_dirs = sorted(p for p in (run_dir / "reps").glob("rep_*") if p.is_dir())
    if not rep_dirs:
        raise DataError(f"{run_dir}: no repetition outputs; run `train` first")
    retention = json.loads((run_dir / "preprocess" / "retention.json").read_text(encoding="utf-8"))
    models = [read_model_file(d / "model.txt") for d in rep_dirs]
    rd = run_dir / "report"
    lines = []
    for k, m in enumerate(models, start=1):
        lines.append(f"Y_{k} = {format_model(m, digits=3)}")
    lines.append("")
    lines.append("variables:")
    used = sorted({i for m in models for i in m.used_variables()})
    cols = retention["inputs"]
    for i in used:
        lines.append(f"  x{i + 1} = {cols[i]['column']}" if i < len(cols) else f"  x{i + 1}")
    _write(rd / "formulas.txt", "\n".join(lines) + "\n")
    freq = variable_frequency(models)
    _write(rd / "frequency.txt", freq.to_text())
    _write(rd / "frequency.csv", freq.to_csv())
    plot_files = []
    for k, d in enumerate(rep_dirs, start=1):
        src = d / "predictions_validation.csv"
        if not src.exists():
            src = d / "predictions_test.csv"
        obs, pred = _read_predictions(src)
        rows = ["index,observed,predicted"]
        rows += [f"{i},{o!r},{p!r}" for i, (o, p) in enumerate(zip(obs.tolist(), pred.tolist()))]
        pf = rd / "plots" / f"model_{k:02d}.csv"
        _write(pf, "\n".join(rows) + "\n")
        plot_files.append(pf)
        if charts:
            title = f"Model {k}: predicted vs observed ({src.stem.split('_')[-1]})"
            _write(rd / "plots" / f"model_{k:02d}.svg", _svg_chart(obs, pred, title))
    return {"models": models, "frequency": freq, "plot_files": plot_files}
