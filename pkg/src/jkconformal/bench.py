"""Benchmark harness: orchestrates generation/ingestion, splitting,
calibration, prediction, tuning, and evaluation into reproducible
report files.

Outputs under the configured directory:
    report.json        aggregated metrics per method (schema-validated)
    table.csv          one row per method
    plots/*.csv        plot data (interval size vs x, per-rep metrics,
                       MI-vs-scale when tuning)
    plots/*.png        rendered figures (skipped with figures=False)
    state/*.json       serialized calibration states (first repetition)
"""

import json
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import conformal, metrics
from .data import Dataset, ModelOutputs, SplitSpec, load_dataset, split
from .information import TuningParams, tune_kernel
from .kernels import KernelSpec
from .synthetic import BinnedMean, KNNRegressor, Synth1DParams, generate_1d

REPORT_FORMAT_VERSION = 1

VALID_METHODS = ("split", "madsplit", "jkplus", "jkplus_tuned")


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = ("split", "madsplit", "jkplus")
    alpha: float = 0.05
    n_train: int = 1000
    n_cal: int = 2000
    n_test: int = 10000
    n_repetitions: int = 10
    seed: int = 0
    kernel: str = "knn:10"
    regressor: str = "knnreg:25"
    dataset_csv: str | None = None  # None -> 1D synthetic
    synth_params: Synth1DParams = field(default_factory=Synth1DParams)
    tuning: TuningParams = field(default_factory=TuningParams)
    out_dir: str = "bench_out"
    figures: bool = True

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method required")
        for m in self.methods:
            if m not in VALID_METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.n_repetitions < 1:
            raise ValueError("n_repetitions must be >= 1")

    @staticmethod
    def from_json_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        if "synth_params" in d:
            d["synth_params"] = Synth1DParams(**d["synth_params"])
        if "tuning" in d:
            d["tuning"] = TuningParams(**d["tuning"])
        return ExperimentConfig(**d)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def parse_kernel(text: str) -> KernelSpec | str:
    """Parse ``knn:<k>``, ``rbf:<scale>``, or ``tuned``."""
    if text == "tuned":
        return "tuned"
    kind, _, arg = text.partition(":")
    if kind == "knn":
        return KernelSpec.knn(int(arg))
    if kind == "rbf":
        return KernelSpec.rbf(length_scale=float(arg))
    raise ValueError(f"cannot parse kernel spec {text!r}")


def make_regressor(text: str):
    kind, _, arg = text.partition(":")
    if kind == "knnreg":
        return KNNRegressor(int(arg))
    if kind == "binned":
        return BinnedMean(int(arg))
    raise ValueError(f"cannot parse regressor spec {text!r}")


def _run_repetition(config: ExperimentConfig, rep: int,
                    source: tuple[Dataset, ModelOutputs | None] | None) -> dict:
    """One repetition: split, fit, calibrate each method, evaluate."""
    if source is None:
        total = config.n_train + config.n_cal + config.n_test
        dataset = generate_1d(total, config.synth_params, seed=config.seed, stream=rep)
        outputs = None
    else:
        dataset, outputs = source
    spec = SplitSpec(
        seed=config.seed,
        n_train=config.n_train,
        n_cal=config.n_cal,
        n_test=config.n_test,
        repetition_index=rep,
    )
    train_idx, cal_idx, test_idx = split(dataset, spec)

    feats, labels = dataset.features, dataset.labels
    if outputs is not None and outputs.embeddings is not None:
        emb = outputs.embeddings
    else:
        emb = feats  # embeddings default to raw inputs
    if outputs is not None:
        preds = outputs.predictions
        train_preds = preds[train_idx]
        cal_preds = preds[cal_idx]
        test_preds = preds[test_idx]
    else:
        reg = make_regressor(config.regressor)
        reg.fit(feats[train_idx], labels[train_idx])
        train_preds = reg.predict(feats[train_idx])
        cal_preds = reg.predict(feats[cal_idx])
        test_preds = reg.predict(feats[test_idx])

    train_errors = np.abs(labels[train_idx] - train_preds)
    cal_scores = np.abs(labels[cal_idx] - cal_preds)
    inf_replacement = float(cal_scores.max()) if cal_scores.size else 0.0

    base_kernel = parse_kernel(config.kernel)
    result: dict = {"rep": rep, "methods": {}, "states": {}, "tuning": None}
    for method in config.methods:
        if method == "split":
            state = conformal.calibrate_split(cal_preds, labels[cal_idx], config.alpha)
        elif method == "madsplit":
            kern = base_kernel if base_kernel != "tuned" else KernelSpec.knn(10)
            state = conformal.calibrate_madsplit(
                emb[train_idx], train_errors, emb[cal_idx], cal_preds,
                labels[cal_idx], kern, config.alpha,
            )
        elif method == "jkplus":
            kern = base_kernel if base_kernel != "tuned" else KernelSpec.knn(10)
            state = conformal.calibrate_jkplus(
                emb[cal_idx], cal_preds, labels[cal_idx], kern, config.alpha
            )
        elif method == "jkplus_tuned":
            tuned, diag = tune_kernel(
                emb[cal_idx], cal_preds, labels[cal_idx],
                replace(config.tuning, seed=config.seed + rep),
            )
            state = conformal.calibrate_jkplus(
                emb[cal_idx], cal_preds, labels[cal_idx], tuned, config.alpha
            )
            result["tuning"] = diag
        intervals = conformal.predict_batch(state, emb[test_idx], test_preds)
        report = metrics.evaluate(
            intervals, labels[test_idx], test_preds, config.alpha,
            infinite_size_replacement=inf_replacement,
        )
        result["methods"][method] = report
        result["states"][method] = state
        if rep == 0:
            result.setdefault("plot_rows", {})[method] = {
                "x": feats[test_idx, 0] if feats.shape[1] else None,
                "y": labels[test_idx],
                "pred": test_preds,
                "half_width": np.array([iv.half_width for iv in intervals]),
            }
    return result


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def run_bench(config: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Execute the configured experiment and write all report files.

    Returns the report dictionary that was written to report.json.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "state").mkdir(parents=True, exist_ok=True)

    source = None
    if config.dataset_csv is not None:
        source = load_dataset(config.dataset_csv)

    reps = list(range(config.n_repetitions))
    results: list[dict | None] = [None] * len(reps)
    failures: list[dict] = []

    def run_one(r):
        try:
            results[r] = _run_repetition(config, r, source)
        except Exception as exc:  # noqa: BLE001 - repetition isolation
            failures.append({"rep": r, "error": f"{type(exc).__name__}: {exc}"})
            traceback.print_exc()

    workers = conformal._worker_count()
    if workers > 1 and len(reps) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, reps))
    else:
        for r in reps:
            run_one(r)

    completed = [r for r in results if r is not None]
    report: dict = {
        "format_version": REPORT_FORMAT_VERSION,
        "config": config.to_json_dict(),
        "methods": {},
        "incomplete_repetitions": sorted(f["rep"] for f in failures),
        "failures": sorted(failures, key=lambda f: f["rep"]),
    }
    for method in config.methods:
        per_rep = [r["methods"][method] for r in completed if method in r["methods"]]
        if per_rep:
            report["methods"][method] = metrics.aggregate_reports(
                per_rep, seed=config.seed
            )

    # report.json: canonical serialization so bytes are reproducible
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")

    headers = ["method", "coverage", "coverage_unc", "is_mean", "is_unc",
               "r2_sqi", "r2_unc", "tau_sqi", "tau_sqi_unc", "tau_si",
               "tau_si_unc", "n_infinite"]
    rows = []
    for method, agg in report["methods"].items():
        rows.append([
            method,
            agg["coverage"]["mean"], agg["coverage"]["unc"],
            agg["is_mean"]["mean"], agg["is_mean"]["unc"],
            agg["r2_sqi"]["mean"], agg["r2_sqi"]["unc"],
            agg["tau_sqi"]["mean"], agg["tau_sqi"]["unc"],
            agg["tau_si"]["mean"], agg["tau_si"]["unc"],
            agg["n_infinite"],
        ])
    _write_csv(out / "table.csv", headers, rows)

    # per-repetition metric rows (calibration-size scans concatenate these)
    rep_rows = []
    for r in completed:
        for method, rpt in r["methods"].items():
            d = rpt.to_json_dict()
            rep_rows.append([
                method, r["rep"], config.n_cal, d["coverage"], d["is_mean"],
                d["r2_sqi"], d["tau_sqi"], d["tau_si"], d["n_infinite"],
            ])
    _write_csv(
        out / "plots" / "metrics_by_rep.csv",
        ["method", "rep", "n_cal", "coverage", "is_mean", "r2_sqi",
         "tau_sqi", "tau_si", "n_infinite"],
        rep_rows,
    )

    first = results[0]
    if first is not None and "plot_rows" in first:
        for method, cols in first["plot_rows"].items():
            n = cols["y"].shape[0]
            _write_csv(
                out / "plots" / f"intervals_{method}.csv",
                ["x", "y", "pred", "half_width"],
                (
                    [cols["x"][i], cols["y"][i], cols["pred"][i],
                     cols["half_width"][i]]
                    for i in range(n)
                ),
            )
        for method, state in first["states"].items():
            state.save(out / "state" / f"{method}.json")
        if first.get("tuning") is not None:
            _write_csv(
                out / "plots" / "mi_scan.csv",
                ["scale", "mean_mi"],
                first["tuning"].to_rows(),
            )

    if config.figures:
        from . import plotting

        plotting.render_bench_figures(out)
    return report


def load_report_schema() -> dict:
    path = Path(__file__).parent / "schemas" / "report_schema.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def validate_report(report: dict) -> None:
    """Raise jsonschema.ValidationError on schema violations."""
    import jsonschema

    jsonschema.validate(report, load_report_schema())
