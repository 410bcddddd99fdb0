import csv
import json
import statistics

import numpy as np
import pytest
import yaml

from drmrr.dataset import generate_synthetic, split_folds
from drmrr.harness import (
    ConfigError,
    ExperimentConfig,
    RunRecord,
    emit_report,
    fold_splits,
    load_dataset,
    load_records,
    run_cv,
    summarize,
    train_models,
    tune_epsilon,
)
from drmrr.metrics import MetricsReport
from drmrr.robustness import poison_labels
from drmrr.solver import SolverConfig

FAST_SOLVER = {"max_iters": 600}


def small_config(**kw):
    base = dict(dataset={"synthetic": {"n_queries": 15, "docs_per_query": 8, "p": 4}},
                epsilons=[0.0, 0.1], solver=FAST_SOLVER, seed=1)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def clean_records():
    return run_cv(small_config(), attacks=[])


def test_config_defaults_and_hash():
    cfg = ExperimentConfig()
    assert cfg.ks == [5, 10] and cfg.folds == 5 and cfg.tune_k == 5
    assert cfg.gtd_params().alpha == 10.0 and cfg.gtd_params().beta == 2.0
    assert cfg.config_hash() == ExperimentConfig().config_hash()
    assert cfg.config_hash() != ExperimentConfig(seed=1).config_hash()


@pytest.mark.parametrize("bad", [
    {"epsilons": []},
    {"epsilons": [-1.0]},
    {"ks": []},
    {"folds": 2},
    {"models": ["svm"]},
    {"dataset": {"path": "/no/such/file.txt"}},
    {"dataset": {}},
    {"gtd": {"K": 0}},
    {"gtd": {"gamma": 1}},
    {"K_grid": [0, 1]},
    {"alpha_grid": [-1.0]},
    {"attacks": [{"kind": "pgd"}]},
    {"attacks": [{"kind": "gaussian", "sigma": -1}]},
    {"solver": {"max_iter": 5}},
    {"unknown_key": 1},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_attack_expansion():
    cfg = ExperimentConfig(attacks=[{"kind": "gaussian", "mu": [0.01, 0.02]},
                                    {"kind": "label_poison", "e": 0.85}], seed=4)
    specs = cfg.attack_specs()
    assert [s.attack_id for s in specs] == ["gaussian:0.01", "gaussian:0.02", "label_poison:0.85"]
    assert all(s.seed == 4 for s in specs)


def test_load_yaml_resolves_relative_paths(tmp_path):
    (tmp_path / "d.txt").write_text("1 qid:1 1:0.5\n0 qid:1 1:0.1\n")
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"dataset": {"path": "d.txt"}, "seed": 3}))
    cfg = ExperimentConfig.load(tmp_path / "c.yaml")
    assert cfg.dataset["path"] == str(tmp_path / "d.txt")
    assert cfg.seed == 3


def test_fold_splits_disjoint():
    data = load_dataset(small_config())
    splits = fold_splits(data)
    assert [s.fold for s in splits] == [1, 2, 3, 4, 5]
    for s in splits:
        parts = [set(s.train.qids), set(s.val.qids), set(s.test.qids)]
        assert sum(map(len, parts)) == len(data)
        assert set.union(*parts) == set(data.qids)
    assert sorted(q for s in splits for q in s.test.qids) == sorted(data.qids)


def test_completeness(clean_records):
    assert len(clean_records) == 15
    assert {(r.model, r.fold) for r in clean_records} == {
        (m, f) for m in ("drmrr", "erm", "pointwise") for f in range(1, 6)}
    for r in clean_records:
        assert r.attack == "clean"
        assert set(r.metrics.keys) == {"ndcg@5", "ndcg@10", "ap@5", "ap@10"}
        assert len(r.metrics.per_query) == 3
        assert r.run
    erm = [r for r in clean_records if r.model == "erm"]
    assert all(r.epsilon == 0.0 for r in erm)


def test_determinism(clean_records):
    again = run_cv(small_config(), attacks=[])
    assert again == clean_records
    dump = lambda recs: json.dumps([{**r.to_dict(), "wall_clock": 0} for r in recs], sort_keys=True)
    assert dump(again) == dump(clean_records)


def test_zero_relevance_training_fold_errors():
    ds = generate_synthetic(6, 4, 3, seed=0)
    ds = ds.with_queries([q.with_labels(np.zeros(4, dtype=int)) for q in ds.queries])
    with pytest.raises(ValueError, match="no training query"):
        run_cv(small_config(folds=3), attacks=[], data=split_folds(ds, 3, 0))


def test_tune_single_point_grid():
    split = fold_splits(load_dataset(small_config()))[0]
    cfg = small_config()
    res = tune_epsilon(split.train, split.val, [0.0], cfg.gtd_params(), solver=SolverConfig(**FAST_SOLVER))
    assert res.epsilon == 0.0
    assert list(res.scores) == [(0.0, cfg.gtd_params())]


def test_tune_is_argmax_with_small_epsilon_ties():
    cfg = ExperimentConfig(dataset={"synthetic": {"noise_scale": 0.0, "n_queries": 20, "p": 5}},
                           solver=FAST_SOLVER)
    split = fold_splits(load_dataset(cfg))[0]
    res = tune_epsilon(split.train, split.val, cfg.epsilons, cfg.gtd_params(),
                       solver=SolverConfig(**FAST_SOLVER))
    best = res.scores[(res.epsilon, res.params)]
    assert np.isfinite(res.epsilon)
    assert all(best >= s for s in res.scores.values())
    assert all(e > res.epsilon for (e, _), s in res.scores.items() if s == best and e != res.epsilon)


def test_tune_over_gtd_grids():
    cfg = small_config(K_grid=[1, 2], alpha_grid=[5.0, 10.0])
    split = fold_splits(load_dataset(cfg))[0]
    models, tuned = train_models(split, cfg)
    assert len(tuned.scores) == 2 * 2 * 2
    assert {(p.K, p.alpha) for _, p in tuned.scores} == {(1, 5.0), (1, 10.0), (2, 5.0), (2, 10.0)}
    assert models["erm"].gtd == tuned.params


def test_label_poison_never_touches_test():
    cfg = small_config(models=["pointwise"], attacks=[{"kind": "label_poison", "e": 0.5}])
    recs = run_cv(cfg)
    clean = {r.fold: r for r in recs if r.attack == "clean"}
    for r in recs:
        if r.attack != "clean":
            assert r.metrics.per_query.keys() == clean[r.fold].metrics.per_query.keys()
            assert r.run == []


def test_attack_records_present():
    cfg = small_config(models=["erm", "pointwise"], mlp={"max_epochs": 2, "hidden": [4, 4]},
                       attacks=[{"kind": "gaussian", "mu": [0.0, 0.05]},
                                {"kind": "universal_fgsm", "eta": 0.1},
                                {"kind": "blackbox_fgsm", "eta": 0.1}])
    recs = run_cv(cfg)
    assert len(recs) == 5 * 2 * 5
    assert {r.attack for r in recs} == {"clean", "gaussian:0", "gaussian:0.05",
                                        "universal_fgsm:0.1", "blackbox_fgsm:0.1"}


def test_emit_report_roundtrip(clean_records, tmp_path):
    written = emit_report(clean_records, tmp_path / "out")
    assert load_records(written["json"]) == clean_records
    runs = sorted((tmp_path / "out" / "runs").iterdir())
    assert len(runs) == 15
    first = runs[0].read_text().splitlines()[0].split()
    assert first[1] == "Q0" and first[3] == "1"


def test_two_records_two_rows(tmp_path):
    rep = MetricsReport(fold=1)
    rep.add("q1", np.array([2, 0, 1]), [5])
    recs = [RunRecord("h", 1, "erm", "clean", None, rep),
            RunRecord("h", 1, "pointwise", "clean", None, rep)]
    path = emit_report(recs, tmp_path, formats=("csv",))["csv"]
    rows = list(csv.reader(open(path)))
    assert rows[0][:3] == ["model", "attack", "level"]
    assert len(rows) == 1 + 2 * 2


def test_summary_matches_recomputation(clean_records, tmp_path):
    path = emit_report(clean_records, tmp_path, formats=("csv",))["csv"]
    rows = list(csv.DictReader(open(path)))
    for row in rows:
        recs = [r for r in clean_records if r.model == row["model"]]
        key = f"{row['metric']}@{row['k']}"
        fold_means = [statistics.fmean(r.metrics.per_query[q][key] for q in r.metrics.per_query)
                      for r in sorted(recs, key=lambda r: r.fold)]
        pooled = statistics.fmean(r.metrics.per_query[q][key] for r in recs for q in r.metrics.per_query)
        assert abs(float(row["mean"]) - statistics.fmean(fold_means)) <= 1e-12
        assert abs(float(row["sd"]) - statistics.stdev(fold_means)) <= 1e-12
        assert abs(float(row["pooled"]) - pooled) <= 1e-12
        assert row["n_folds"] == "5"


def test_summarize_groups_by_level():
    rep = MetricsReport(fold=1)
    rep.add("q1", np.array([1, 0]), [5])
    spec = {"kind": "gaussian", "mu": 0.02, "fraction": 0.75, "sigma": 0.001, "eta": 0.0, "e": 1.0, "seed": 0}
    rows = summarize([RunRecord("h", 1, "erm", "gaussian:0.02", spec, rep)])
    assert {r["level"] for r in rows} == {0.02}
    # a single fold has no spread to report
    assert rows[0]["cell"] == "100.00% (0.00%)"


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([], blocker / "sub")


@pytest.mark.slow
def test_poisoning_selects_larger_epsilon():
    wins = 0
    for seed in range(10):
        cfg = ExperimentConfig(seed=seed)
        split = fold_splits(load_dataset(cfg))[0]
        params = cfg.gtd_params()
        clean = tune_epsilon(split.train, split.val, cfg.epsilons, params).epsilon
        poisoned = tune_epsilon(poison_labels(split.train, 0.7, seed), split.val, cfg.epsilons, params).epsilon
        wins += poisoned >= clean
    assert wins >= 6, f"poisoned epsilon >= clean epsilon on {wins}/10 seeds"
