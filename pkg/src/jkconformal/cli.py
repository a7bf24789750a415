"""Command-line entry point.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on runtime
failures, which print a single machine-parsable ``error: ...`` line to
stderr.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import conformal, metrics
from .data import load_dataset, save_dataset
from .information import (
    TuningParams,
    ksg_mutual_information,
    local_coverage_bound,
    mi_objective,
    tune_kernel,
)
from .synthetic import Synth1DParams, generate_1d


def _load_with_predictions(path):
    dataset, outputs = load_dataset(path)
    if outputs is None:
        raise ValueError(f"{path}: a 'pred' column is required")
    emb = outputs.embeddings if outputs.embeddings is not None else dataset.features
    return dataset, outputs.predictions, emb


def _cmd_synth(args) -> int:
    params = Synth1DParams(noise_as_variance=args.noise_as_variance)
    dataset = generate_1d(args.n, params, seed=args.seed)
    save_dataset(args.out, dataset)
    print(f"wrote {args.n} rows to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    dataset, preds, emb = _load_with_predictions(args.data)
    if args.method == "split":
        state = conformal.calibrate_split(preds, dataset.labels, args.alpha)
    elif args.method == "madsplit":
        if args.train_data is None:
            raise ValueError("madsplit requires --train-data")
        tr_ds, tr_preds, tr_emb = _load_with_predictions(args.train_data)
        train_errors = np.abs(tr_ds.labels - tr_preds)
        state = conformal.calibrate_madsplit(
            tr_emb, train_errors, emb, preds, dataset.labels,
            _kernel_arg(args), args.alpha,
        )
    elif args.method == "jkplus":
        state = conformal.calibrate_jkplus(
            emb, preds, dataset.labels, _kernel_arg(args), args.alpha
        )
    else:
        raise ValueError(f"unknown method {args.method!r}")
    state.save(args.out)
    print(f"calibrated {args.method} on {len(dataset)} points -> {args.out}")
    return 0


def _kernel_arg(args):
    kern = bench_mod.parse_kernel(args.kernel)
    if kern == "tuned":
        raise ValueError("use the tune-kernel command to produce a tuned kernel")
    return kern


def _cmd_predict(args) -> int:
    state = conformal.CalibrationState.load(args.state)
    dataset, preds, emb = _load_with_predictions(args.data)
    intervals = conformal.predict_batch(state, emb, preds)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("pred,lower,upper,half_width\n")
        for iv in intervals:
            fh.write(f"{iv.center!r},{iv.lower!r},{iv.upper!r},{iv.half_width!r}\n")
    print(f"wrote {len(intervals)} intervals to {args.out}")
    return 0


def _cmd_tune_kernel(args) -> int:
    dataset, preds, emb = _load_with_predictions(args.data)
    params = TuningParams(
        n_sample=args.n_sample, n_scan=args.n_scan, seed=args.seed
    )
    kernel, diag = tune_kernel(emb, preds, dataset.labels, params)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(kernel.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    for scale, mi in diag.to_rows():
        print(f"scale={scale:.6g} mean_mi={mi:.6f}")
    print(f"wrote tuned kernel to {args.out}")
    return 0


def _cmd_mi(args) -> int:
    dataset, preds, emb = _load_with_predictions(args.data)
    scores = np.abs(dataset.labels - preds)
    if emb.shape[1] == 1:
        est = ksg_mutual_information(emb[:, 0], scores, k=args.k)
        mi = est.value
    else:
        mi = mi_objective(emb, scores, k=args.k)
    print(f"mi={mi:.6f}")
    if args.rho is not None:
        bound = local_coverage_bound(mi, args.rho, args.alpha, n=len(dataset))
        print(f"adjusted_risk={bound.alpha_adjusted:.6f}")
        print(f"adjusted_risk_sqrt={bound.alpha_adjusted_sqrt:.6f}")
        print(f"adjusted_risk_finite_n={bound.alpha_adjusted_finite_n:.6f}")
        print(f"adjusted_risk_sqrt_finite_n={bound.alpha_adjusted_sqrt_finite_n:.6f}")
    return 0


def _cmd_metrics(args) -> int:
    with open(args.intervals, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    required = {"y", "pred", "half_width"}
    if not rows or not required.issubset(rows[0].keys()):
        raise ValueError(
            f"{args.intervals}: columns y, pred, half_width are required"
        )
    labels = np.array([float(r["y"]) for r in rows])
    preds = np.array([float(r["pred"]) for r in rows])
    halves = np.array([float(r["half_width"]) for r in rows])
    intervals = [
        conformal.PredictionInterval(center=p, half_width=h, alpha=args.alpha)
        for p, h in zip(preds, halves)
    ]
    report = metrics.evaluate(
        intervals, labels, preds, args.alpha,
        infinite_size_replacement=args.infinite_size_replacement,
    )
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    return 0


def _cmd_bench(args) -> int:
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            config = bench_mod.ExperimentConfig.from_json_dict(json.load(fh))
    else:
        config = bench_mod.ExperimentConfig()
    overrides = {}
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.n_cal is not None:
        overrides["n_cal"] = args.n_cal
    if args.n_reps is not None:
        overrides["n_repetitions"] = args.n_reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method is not None:
        overrides["methods"] = tuple(args.method)
    if args.kernel is not None:
        overrides["kernel"] = args.kernel
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.no_figures:
        overrides["figures"] = False
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    report = bench_mod.run_bench(config)
    bench_mod.validate_report(report)
    out = Path(config.out_dir)
    for method, agg in report["methods"].items():
        cov = agg["coverage"]
        size = agg["is_mean"]
        print(
            f"{method}: coverage={cov['mean']:.4f}(±{cov['unc']:.4f}) "
            f"size={size['mean']:.4f}(±{size['unc']:.4f})"
        )
    print(f"report written to {out / 'report.json'}")
    if report["incomplete_repetitions"]:
        print(f"warning: repetitions failed: {report['incomplete_repetitions']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jkconformal",
        description="Conformal regression with locally rescaled scores",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a 1D synthetic dataset CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-as-variance", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("calibrate", help="fit a calibration state from a CSV")
    p.add_argument("--data", required=True, help="calibration CSV with pred column")
    p.add_argument("--train-data", help="training CSV (madsplit only)")
    p.add_argument("--method", default="jkplus",
                   choices=["split", "madsplit", "jkplus"])
    p.add_argument("--kernel", default="knn:10", help="knn:<k> or rbf:<scale>")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True, help="state JSON path")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("predict", help="produce intervals from a saved state")
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True, help="test CSV with pred column")
    p.add_argument("--out", required=True, help="interval CSV path")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("tune-kernel", help="scan length scales for minimal "
                       "input/score mutual information")
    p.add_argument("--data", required=True)
    p.add_argument("--n-sample", type=int, default=500_000)
    p.add_argument("--n-scan", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="kernel JSON path")
    p.set_defaults(func=_cmd_tune_kernel)

    p = sub.add_parser("mi", help="estimate input/score mutual information")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--rho", type=float, help="locality parameter for the "
                   "coverage bound (printed when given)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=_cmd_mi)

    p = sub.add_parser("metrics", help="evaluate an interval CSV")
    p.add_argument("--intervals", required=True,
                   help="CSV with y, pred, half_width columns")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--infinite-size-replacement", type=float)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("bench", help="run the full benchmark")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-cal", type=int)
    p.add_argument("--n-reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", action="append",
                   help="repeatable; overrides configured methods")
    p.add_argument("--kernel", help="knn:<k>, rbf:<scale>, or tuned")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
