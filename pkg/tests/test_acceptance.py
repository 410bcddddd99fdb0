"""End-to-end acceptance criteria, each checked at its stated tolerance.

Every criterion records one ``[n] PASS|FAIL|SKIP`` line that is printed in
the terminal summary. Criterion 10 needs LETOR OHSUMED folds; point
``DRMRR_OHSUMED_DIR`` at a directory holding Fold1..Fold5 to enable it.
"""
import math
import os
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from drmrr.dataset import generate_synthetic
from drmrr.gtd import GtdParams, build_gtd_matrix, ndcg_deviation_vector, sort_by_relevance
from drmrr.harness import ExperimentConfig, emit_report, run_cv, summarize
from drmrr.metrics import ap_at_k, dcg_at_k, ideal_dcg_at_k, ndcg_at_k
from drmrr.ranker import rank_from_gtd
from drmrr.robustness import (
    AttackSpec,
    error_probability_table,
    fgsm_perturb,
    gaussian_attack,
    resample_labels,
    squared_error_gradient,
)
from drmrr.solver import (
    INF,
    ModelWeights,
    TrainingSet,
    augmented,
    fit_path,
    induced_norm,
    objective,
    regularizer,
    subgradient,
    worst_case_bound_check,
)

pytestmark = pytest.mark.acceptance

SWEEP = [round(0.01 * i, 2) for i in range(1, 11)]


def verdict(n, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"[{n:>2}] {status} {name}" + (f": {detail}" if detail else ""))
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def test_01_gtd_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, bad = 0.0, []
    for trial in range(200):
        n = int(rng.integers(1, 7))
        labels = rng.integers(0, 3, size=n)
        sq = sort_by_relevance(labels)
        matrix = build_gtd_matrix(labels, GtdParams(K=int(rng.integers(1, 7)))).values
        for d in range(n):
            lam = ndcg_deviation_vector(sq, d)
            ref = [oracles.swapped_ndcg(labels.tolist(), d, i) for i in range(n)]
            worst = max(worst, float(np.max(np.abs(lam - ref))))
            if np.any(lam < 0) or np.any(lam > 1):
                bad.append((trial, d, "range"))
            if not sq.degenerate and lam[sq.pos_of[d]] != 1.0:
                bad.append((trial, d, "self"))
            if labels[d] == 0 and np.any(matrix[d] != 0):
                bad.append((trial, d, "zero row"))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and not bad and elapsed < 5
    verdict(1, "GTD correctness", ok, f"max |lambda - swapped NDCG| = {worst:.1e}, "
            f"{len(bad)} invariant violations, {elapsed:.2f}s")


def test_02_metric_fixtures():
    # expected values are recomputed by the independent oracle before comparing
    ranked, ideal = [2, 0, 1], [2, 1, 0]
    cases = [
        ("DCG", dcg_at_k(ranked, 3), oracles.dcg(ranked), 2.5),
        ("IDCG", ideal_dcg_at_k(ranked, 3), oracles.dcg(ideal), 2.6309297535714573),
        ("NDCG", ndcg_at_k(ranked, k=3), oracles.ndcg(ranked), 0.9502344167898358),
        ("AP@5", ap_at_k([1, 1, 0, 1, 0], 5), oracles.average_precision([1, 1, 0, 1, 0], 5), 0.9166666666666666),
    ]
    errs = {name: max(abs(got - frozen), abs(ref - frozen)) for name, got, ref, frozen in cases}
    ok = all(e <= 1e-9 for e in errs.values())
    verdict(2, "metric fixtures", ok, ", ".join(f"{k} err {v:.0e}" for k, v in errs.items()))


def test_03_solver_vs_oracle(solver_fixtures):
    start = time.perf_counter()
    gaps = []
    for fx in solver_fixtures:
        data = TrainingSet(fx["X"], fx["Theta"])
        res = fit_path(data, fx["epsilon"], fx["r"])
        gaps.append((res.objective - fx["optimum"]) / fx["optimum"])
    elapsed = time.perf_counter() - start
    ok = len(gaps) == 5 and max(abs(g) for g in gaps) <= 1e-3 and elapsed < 60
    verdict(3, "solver vs convex-solver optimum", ok,
            f"relative gaps {[f'{g:.1e}' for g in gaps]}, {elapsed:.1f}s")


def test_04_gradient_check(solver_fixtures):
    rng = np.random.default_rng(4)
    h = 1e-6
    worst = 0.0
    for fx in solver_fixtures:
        data = TrainingSet(fx["X"], fx["Theta"])
        eps = fx["epsilon"]
        for _ in range(20):
            B = rng.normal(size=(data.p, data.K))
            G = subgradient(B, data, eps)
            fd = np.zeros_like(B)
            for idx in np.ndindex(*B.shape):
                E = np.zeros_like(B)
                E[idx] = h
                fd[idx] = (objective(B + E, data, eps) - objective(B - E, data, eps)) / (2 * h)
            worst = max(worst, np.linalg.norm(G - fd) / np.linalg.norm(fd))
    verdict(4, "subgradient vs finite differences", worst <= 1e-5, f"max relative error {worst:.1e}")


def test_05_norm_identities():
    rng = np.random.default_rng(5)
    worst, looser = 0.0, True
    for _ in range(100):
        B = rng.normal(size=(rng.integers(1, 8), rng.integers(1, 6))) * rng.uniform(0.01, 10)
        M = augmented(B)
        spectral = induced_norm(M, 2)
        worst = max(worst, abs(spectral ** 2 - (1 + induced_norm(B, 2) ** 2)) / spectral ** 2,
                    abs(regularizer(B) - spectral) / spectral)
        looser &= spectral <= np.linalg.norm(M, "fro")
    verdict(5, "spectral identity and Frobenius bound", worst <= 1e-8 and looser,
            f"max relative error {worst:.1e}, Frobenius bound holds: {looser}")


def test_06_duality_direction():
    rng = np.random.default_rng(6)
    total, top = 0, -np.inf
    for i in range(10):
        N, p, K = rng.integers(5, 30), rng.integers(1, 6), rng.integers(1, 4)
        X = rng.uniform(size=(N, p))
        data = TrainingSet(X, np.abs(X @ rng.normal(size=(p, K)) + rng.normal(size=(N, K))))
        r = (1.0, 2.0, INF)[i % 3]
        eps = float(rng.choice([0.01, 0.1, 1.0]))
        w = ModelWeights(rng.normal(size=(p, K)), r)
        rep = worst_case_bound_check(w, data, eps, n_samples=1000, seed=i, tol=1e-9)
        total += rep.violations
        top = max(top, (rep.max_sampled_loss - rep.objective) / rep.objective)
    verdict(6, "worst-case loss never exceeds objective", total == 0,
            f"{total} violations in 10^4 samples, max (sampled - objective)/objective = {top:.1e}")


def test_07_algorithm_one():
    hand = rank_from_gtd([[0.9, 0.2], [0.5, 0.8], [0.1, 0.3]]).order + 1
    rng = np.random.default_rng(7)
    perms, shifts = True, True
    for _ in range(10_000):
        n, K = rng.integers(1, 15), rng.integers(1, 5)
        T = rng.integers(-64, 64, size=(n, K)) / 8.0  # dyadic so T + c is exact
        order = rank_from_gtd(T).order
        perms &= sorted(order.tolist()) == list(range(n))
        shifts &= np.array_equal(order, rank_from_gtd(T + rng.integers(1, 100)).order)
    ok = hand.tolist() == [1, 2, 3] and perms and shifts
    verdict(7, "greedy column-cycling ranking", ok,
            f"hand trace {tuple(hand.tolist())}, permutations {perms}, shift invariant {shifts}")


def test_08_attack_machinery():
    rng = np.random.default_rng(8)
    eta = 0.125
    step_ok = True
    for _ in range(500):
        w = rng.normal(size=6)
        x = rng.integers(0, 1024, size=6) / 1024.0  # dyadic so x + eta*s - x is exact
        y = float(rng.integers(0, 3))
        delta = fgsm_perturb(x, y, squared_error_gradient(w), eta) - x
        step_ok &= set(np.unique(delta).tolist()) <= {-eta, 0.0, eta}
    freq_err = 0.0
    for e in (0.85, 0.5):
        table = error_probability_table(e)
        for g in range(3):
            out = resample_labels(np.full(100_000, g), e, rng)
            freq_err = max(freq_err, float(np.max(np.abs(np.bincount(out, minlength=3) / out.size - table[g]))))
    counts_ok = True
    for T in (1, 10, 33, 50):
        ds = generate_synthetic(T, 5, 3, seed=T)
        out = gaussian_attack(ds, AttackSpec("gaussian", mu=0.05, seed=T))
        changed = sum(not np.array_equal(a.features, b.features) for a, b in zip(ds.queries, out.queries))
        counts_ok &= changed == math.ceil(0.75 * T)
    ok = step_ok and freq_err <= 0.02 and counts_ok
    verdict(8, "attack machinery", ok,
            f"FGSM steps in {{-eta,0,eta}}: {step_ok}, max transition error {freq_err:.4f}, "
            f"ceil(0.75T) perturbed: {counts_ok}")


def _sweep_means(records):
    rows = [r for r in summarize(records) if r["metric"] == "ndcg" and r["k"] == 5]
    return {(r["model"], r["attack"], r["level"]): r["mean"] for r in rows}


@pytest.mark.slow
def test_09_robustness_trend(tmp_path):
    start = time.perf_counter()
    per_seed = []
    for seed in range(10):
        config = ExperimentConfig(
            dataset={"synthetic": {"n_queries": 50, "docs_per_query": 20, "p": 20}},
            attacks=[{"kind": "gaussian", "mu": SWEEP}, {"kind": "universal_fgsm", "eta": SWEEP}],
            seed=seed,
        )
        records = run_cv(config)
        emit_report(records, tmp_path / f"seed{seed}")
        per_seed.append(_sweep_means(records))
    elapsed = time.perf_counter() - start
    mean = {key: float(np.mean([m[key] for m in per_seed])) for key in per_seed[0]}
    fractions = {}
    for kind in ("gaussian", "universal_fgsm"):
        wins = [mean[("drmrr", kind, lv)] >= mean[("erm", kind, lv)] for lv in SWEEP]
        fractions[kind] = sum(wins) / len(wins)
    ok = all(f >= 0.7 for f in fractions.values()) and elapsed < 600
    gaps = {kind: max(mean[("erm", kind, lv)] - mean[("drmrr", kind, lv)] for lv in SWEEP) for kind in fractions}
    verdict(9, "robustness trend vs ERM", ok,
            f"DRMRR >= ERM on {fractions['gaussian']:.0%} of Gaussian and {fractions['universal_fgsm']:.0%} "
            f"of FGSM points (need 70%), largest ERM lead {max(gaps.values()):.4f}, {elapsed:.0f}s")


def test_10_ohsumed():
    root = os.environ.get("DRMRR_OHSUMED_DIR")
    if not root or not os.path.isdir(os.path.join(root, "Fold1")):
        ACCEPTANCE_LINES.append("[10] SKIP OHSUMED check: set DRMRR_OHSUMED_DIR to a directory with Fold1..Fold5")
        pytest.skip("OHSUMED folds not supplied")
    config = ExperimentConfig(dataset={"path": root}, models=["drmrr"])
    records = run_cv(config, attacks=[])
    rows = {(r["metric"], r["k"]): r["mean"] for r in summarize(records)}
    ndcg10, ap10 = rows[("ndcg", 10)], rows[("ap", 10)]
    verdict(10, "OHSUMED 5-fold", ndcg10 >= 0.40 and ap10 >= 0.58,
            f"NDCG@10 {ndcg10:.4f} (need 0.40), AP@10 {ap10:.4f} (need 0.58)")
