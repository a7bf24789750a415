"""End-to-end acceptance gates.

Each test prints a single machine-parsable PASS/FAIL line (visible with
``pytest -s`` or in captured output on failure). Several criteria share
one full-scale benchmark run via module-scoped fixtures.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from jkconformal.bench import ExperimentConfig, run_bench
from jkconformal.conformal import calibrate_jkplus, conformal_quantile, predict_interval
from jkconformal.information import (
    TuningParams,
    ksg_mutual_information,
    local_coverage_bound,
    mi_objective,
    tune_kernel,
)
from jkconformal.kernels import KernelSpec
from jkconformal.metrics import oracle_is_ratio
from jkconformal.synthetic import KNNRegressor, generate_1d


def report(criterion: int, name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion:02d} {name}: {status} ({detail})")
    assert ok, f"criterion {criterion} ({name}): {detail}"


@pytest.fixture(scope="module")
def main_run():
    """1D benchmark at full desk scale: alpha=0.05, N_cal=2000, 10 reps."""
    cfg = ExperimentConfig(
        methods=("jkplus",),
        alpha=0.05,
        n_train=1000,
        n_cal=2000,
        n_test=10000,
        n_repetitions=10,
        seed=0,
        kernel="knn:10",
        regressor="knnreg:25",
        out_dir="unused",
        figures=False,
    )
    import tempfile

    t0 = time.time()
    with tempfile.TemporaryDirectory() as td:
        rep = run_bench(cfg, out_dir=td)
    elapsed = time.time() - t0
    return rep, elapsed


class TestCriterion1GlobalCoverage:
    def test_mean_and_per_rep_coverage(self, main_run):
        rep, elapsed = main_run
        agg = rep["methods"]["jkplus"]
        mean_cov = agg["coverage"]["mean"]
        per_rep = [r["coverage"] for r in agg["reps"]]
        ok = (
            0.94 <= mean_cov <= 0.965
            and min(per_rep) >= 0.90
            and elapsed < 120.0
            and len(per_rep) == 10
        )
        report(
            1,
            "global coverage",
            ok,
            f"mean={mean_cov:.4f}, min_rep={min(per_rep):.4f}, "
            f"elapsed={elapsed:.1f}s",
        )


class TestCriterion2Adaptivity:
    def test_adaptivity_metrics(self, main_run):
        rep, _ = main_run
        agg = rep["methods"]["jkplus"]
        tau_sqi = agg["tau_sqi"]["mean"]
        tau_si = agg["tau_si"]["mean"]
        r2 = agg["r2_sqi"]["mean"]
        ok = tau_sqi >= 0.85 and tau_si >= 0.30 and r2 >= 0.7
        report(
            2,
            "1D adaptivity",
            ok,
            f"tau_sqi={tau_sqi:.3f}, tau_si={tau_si:.3f}, r2_sqi={r2:.3f}",
        )


class TestCriterion3LowData:
    def test_small_calibration(self, tmp_path):
        cfg = ExperimentConfig(
            methods=("split", "jkplus"),
            alpha=0.05,
            n_train=1000,
            n_cal=100,
            n_test=10000,
            n_repetitions=20,
            seed=0,
            kernel="knn:10",
            regressor="knnreg:25",
            out_dir=str(tmp_path),
            figures=False,
        )
        rep = run_bench(cfg)
        jk = rep["methods"]["jkplus"]
        sp = rep["methods"]["split"]
        ok = (
            jk["n_infinite"] == 0
            and jk["coverage"]["mean"] >= 0.90
            and 0.90 <= sp["coverage"]["mean"] <= 0.99
        )
        report(
            3,
            "low-data robustness",
            ok,
            f"jk_cov={jk['coverage']['mean']:.4f}, "
            f"jk_inf={jk['n_infinite']}, split_cov={sp['coverage']['mean']:.4f}",
        )


class TestCriterion4MadsplitFailure:
    def test_overfit_base_regressor(self, tmp_path):
        cfg = ExperimentConfig(
            methods=("madsplit", "jkplus"),
            alpha=0.05,
            n_train=1000,
            n_cal=2000,
            n_test=10000,
            n_repetitions=10,
            seed=0,
            kernel="knn:10",
            regressor="knnreg:1",  # interpolates: zero training error
            out_dir=str(tmp_path),
            figures=False,
        )
        rep = run_bench(cfg)
        jk = rep["methods"]["jkplus"]
        ms = rep["methods"]["madsplit"]
        wins = sum(
            a["tau_si"] > b["tau_si"] for a, b in zip(jk["reps"], ms["reps"])
        )
        ok = (
            wins >= 8
            and jk["coverage"]["mean"] >= 0.90
            and ms["coverage"]["mean"] >= 0.90
        )
        report(
            4,
            "madsplit failure mode",
            ok,
            f"tau_si wins={wins}/10, jk_cov={jk['coverage']['mean']:.4f}, "
            f"ms_cov={ms['coverage']['mean']:.4f}",
        )


class TestCriterion5KSGAccuracy:
    def test_gaussian_and_independent(self):
        rho, n = 0.6, 5000
        analytic = -0.5 * math.log(1 - rho**2)
        gauss, indep = [], []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=n)
            s = rho * x + math.sqrt(1 - rho**2) * rng.normal(size=n)
            gauss.append(ksg_mutual_information(x, s, k=3).value)
            u, v = rng.random(n), rng.random(n)
            indep.append(ksg_mutual_information(u, v, k=3).value)
        gauss_err = abs(float(np.mean(gauss)) - analytic)
        indep_mi = float(np.mean(indep))
        ok = gauss_err <= 0.03 and abs(indep_mi) <= 0.02
        report(
            5,
            "KSG accuracy",
            ok,
            f"gauss_err={gauss_err:.4f} (analytic {analytic:.4f}), "
            f"indep_mi={indep_mi:.4f}",
        )


class TestCriterion6TuningImprovesMI:
    def test_tuned_scales_beat_fixed_kernel(self):
        total = 1000 + 2000
        ds = generate_1d(total, seed=0)
        reg = KNNRegressor(25).fit(ds.features[:1000], ds.labels[:1000])
        emb = ds.features[1000:]
        labels = ds.labels[1000:]
        preds = reg.predict(emb)

        _, diag = tune_kernel(emb, preds, labels, TuningParams(seed=0))
        tuned_mi = float(np.min(diag.mi_grid, axis=1).mean())

        fixed = calibrate_jkplus(emb, preds, labels, KernelSpec.knn(10), 0.05)
        fixed_mi = mi_objective(emb, fixed.rescaled_scores)

        best = int(np.argmin(diag.mean_mi))
        interior = 0 < best < diag.mean_mi.shape[0] - 1
        ok = tuned_mi <= fixed_mi and interior
        report(
            6,
            "kernel tuning",
            ok,
            f"tuned_mi={tuned_mi:.4f}, fixed_10nn_mi={fixed_mi:.4f}, "
            f"argmin_index={best}/{diag.mean_mi.shape[0] - 1}",
        )


class TestCriterion7QuantileOracle:
    def test_exhaustive(self):
        rng = np.random.default_rng(0)
        checked = 0
        worst = None
        for n in range(1, 21):
            scores = rng.normal(size=n)
            s = np.sort(scores)
            for alpha in (0.01, 0.05, 0.1, 0.25, 0.5):
                q = math.ceil((1 - alpha) * (n + 1))
                want = math.inf if q > n else float(s[q - 1])
                got = conformal_quantile(scores, alpha)
                checked += 1
                if got != want:
                    worst = (n, alpha, got, want)
        report(7, "quantile oracle", worst is None,
               f"{checked} (n, alpha) cases" if worst is None else str(worst))


def _brute_knn_mean(query, pts, scores, k, excluded):
    keep = [m for m in range(len(pts)) if m not in excluded]
    d = np.sqrt(np.sum((pts - query) ** 2, axis=1))
    thr = np.sort(d[keep])[min(k, len(keep)) - 1]
    members = [m for m in keep if d[m] <= thr]
    return float(np.mean(scores[members]))


def _brute_rbf_mean(query, pts, scores, scale, excluded):
    keep = [m for m in range(len(pts)) if m not in excluded]
    w = np.exp(-np.sum((pts[keep] - query) ** 2, axis=1) / scale**2)
    if w.sum() <= 0:
        return float(np.mean(scores[keep]))
    return float(np.sum(w * scores[keep]) / np.sum(w))


def _brute_half_width(kernel, emb, scores, test_emb, alpha):
    n = len(scores)
    floor = 1e-12 * (scores.max() if scores.max() > 0 else 1.0)

    def mean(query, i):
        if kernel.kind == "knn":
            return _brute_knn_mean(query, emb, scores, kernel.k, {i})
        return _brute_rbf_mean(query, emb, scores, kernel.scale_for(i), {i})

    rescaled = np.array(
        [scores[i] / max(mean(emb[i], i), floor) for i in range(n)]
    )
    products = np.array([mean(test_emb, i) * rescaled[i] for i in range(n)])
    q = math.ceil((1 - alpha) * (n + 1))
    return math.inf if q > n else float(np.sort(products)[q - 1])


class TestCriterion8EngineOracle:
    def test_fifty_random_instances(self):
        worst_rel = 0.0
        for trial in range(50):
            rng = np.random.default_rng(5000 + trial)
            n = int(rng.integers(5, 31))
            d = int(rng.integers(1, 4))
            emb = rng.normal(size=(n, d))
            preds = rng.normal(size=n)
            labels = preds + rng.normal(size=n)
            alpha = float(rng.uniform(0.05, 0.5))
            if trial % 3 == 0:
                kernel = KernelSpec.knn(int(rng.integers(1, n - 1)))
            elif trial % 3 == 1:
                kernel = KernelSpec.rbf(length_scale=float(rng.uniform(0.3, 2.0)))
            else:
                kernel = KernelSpec.rbf(per_point_scales=rng.uniform(0.3, 2.0, n))
            state = calibrate_jkplus(emb, preds, labels, kernel, alpha)
            scores = np.abs(labels - preds)
            test_emb = rng.normal(size=d)
            got = predict_interval(state, test_emb, 0.0).half_width
            want = _brute_half_width(kernel, emb, scores, test_emb, alpha)
            if math.isinf(want):
                assert math.isinf(got)
                continue
            worst_rel = max(worst_rel, abs(got - want) / abs(want))
        ok = worst_rel <= 1e-9
        report(8, "engine oracle", ok, f"worst relative error={worst_rel:.2e}")


class TestCriterion9ISRatio:
    def test_monte_carlo_mixture_oracle(self):
        from scipy.stats import norm

        beta, lam, alpha = 0.99, 10.0, 0.05
        got = oracle_is_ratio(beta, lam, alpha)
        rng = np.random.default_rng(0)
        n = 10_000_000
        sigma = np.where(rng.random(n) < beta, 1.0, lam)
        flat = np.quantile(np.abs(sigma * rng.standard_normal(n)), 1 - alpha)
        z = norm.ppf(1 - alpha / 2)
        mc = z * (beta + (1 - beta) * lam) / flat
        rel = abs(got - mc) / mc
        exact_one = oracle_is_ratio(0.5, 1.0, alpha) == 1.0
        ok = rel <= 0.01 and exact_one
        report(
            9,
            "oracle IS ratio",
            ok,
            f"analytic={got:.4f}, mc={mc:.4f}, rel={rel:.4%}, "
            f"lambda=1 exact={exact_one}",
        )


class TestCriterion10BoundSanity:
    def test_zero_mi_and_variant_gap(self):
        b0 = local_coverage_bound(0.0, rho=1.0, alpha=0.05)
        exact = b0.alpha_adjusted == 0.05 and b0.alpha_adjusted_sqrt == 0.05
        b = local_coverage_bound(0.3, rho=1.0, alpha=0.05)
        gap = abs(b.alpha_adjusted_sqrt - b.alpha_adjusted)
        ok = exact and gap < 0.04
        report(
            10,
            "bound sanity",
            ok,
            f"alpha_at_mi0={b0.alpha_adjusted}, variant_gap={gap:.4f}",
        )


class TestCriterion11Determinism:
    def test_byte_identical_across_thread_counts(self, tmp_path):
        blobs = {}
        for threads in ("1", "4"):
            cwd = tmp_path / f"threads{threads}"
            cwd.mkdir()
            code = (
                "from jkconformal.bench import ExperimentConfig, run_bench\n"
                "cfg = ExperimentConfig(methods=('split','madsplit','jkplus'),"
                " n_train=200, n_cal=300, n_test=1500, n_repetitions=3,"
                " seed=11, out_dir='out', figures=False)\n"
                "run_bench(cfg)\n"
            )
            env = dict(os.environ, CONFORMAL_THREADS=threads)
            subprocess.run(
                [sys.executable, "-c", code], check=True, env=env, cwd=cwd
            )
            blobs[threads] = (cwd / "out" / "report.json").read_bytes()
        ok = blobs["1"] == blobs["4"]
        report(11, "thread determinism", ok,
               f"{len(blobs['1'])} bytes compared")
