"""Cross-validated experiments: training, tuning, attack sweeps and reports."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .dataset import (
    RankingDataset,
    generate_synthetic,
    load_letor,
    load_letor_folds,
    normalize_features,
    split_folds,
)
from .gtd import GtdParams, build_gtd_matrix
from .metrics import MetricsReport, pooled_summary
from .ranker import Ranking, fit_pointwise_linear, rank_by_scores, rank_from_gtd, trec_run_lines
from .robustness import (
    AttackSpec,
    MLPConfig,
    blackbox_fgsm_attack,
    gaussian_attack,
    poison_labels,
    train_linear_adversary,
    train_substitute_mlp,
    universal_fgsm_attack,
)
from .solver import ModelWeights, SolverConfig, TrainingSet, fit, predict_gtd

log = logging.getLogger(__name__)

MODELS = ("drmrr", "erm", "pointwise")
CLEAN = "clean"
DEFAULT_EPSILONS = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
_LEVEL_FIELD = {"gaussian": "mu", "universal_fgsm": "eta", "blackbox_fgsm": "eta", "label_poison": "e"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    normalize: bool = True
    gtd: dict = field(default_factory=dict)
    K_grid: list[int] = field(default_factory=list)
    alpha_grid: list[float] = field(default_factory=list)
    beta_grid: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    r: float = 2.0
    solver: dict = field(default_factory=dict)
    ks: list[int] = field(default_factory=lambda: [5, 10])
    tune_k: int = 5
    models: list[str] = field(default_factory=lambda: list(MODELS))
    attacks: list[dict] = field(default_factory=list)
    mlp: dict = field(default_factory=dict)
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.epsilons:
            raise ConfigError("epsilon grid must be nonempty")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be nonnegative")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("metric ks must be positive")
        if self.folds < 3:
            raise ConfigError("need at least 3 folds (train, validation, test)")
        unknown = set(self.models) - set(MODELS)
        if unknown or not self.models:
            raise ConfigError(f"unknown models {sorted(unknown)}")
        if "path" in self.dataset and not os.path.exists(self.dataset["path"]):
            raise ConfigError(f"dataset path {self.dataset['path']} does not exist")
        if not ("path" in self.dataset or "synthetic" in self.dataset):
            raise ConfigError("dataset needs 'path' or 'synthetic'")
        base = self.gtd_params()
        try:
            for K, a, b in itertools.product(self.K_grid or [base.K], self.alpha_grid or [base.alpha],
                                             self.beta_grid or [base.beta]):
                replace(base, K=K, alpha=a, beta=b)
        except ValueError as exc:
            raise ConfigError(f"bad tuning grid: {exc}") from None
        self.attack_specs()
        SolverConfig(**self.solver)
        MLPConfig(**self._mlp_kwargs())

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        base = os.path.dirname(os.path.abspath(path))
        ds = data.get("dataset", {})
        if "path" in ds and not os.path.isabs(ds["path"]):
            ds["path"] = os.path.join(base, ds["path"])
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _mlp_kwargs(self) -> dict:
        kw = dict(self.mlp)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return kw

    def mlp_config(self, seed: int) -> MLPConfig:
        kw = {"seed": seed, **self._mlp_kwargs()}
        return MLPConfig(**kw)

    def gtd_params(self, K: int | None = None, y_max: int = 2) -> GtdParams:
        kw = {"K": 1, **self.gtd, "y_max": y_max}
        if K is not None:
            kw["K"] = K
        try:
            return GtdParams(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def attack_specs(self) -> list[AttackSpec]:
        """Expand attack entries; a list under the swept field gives one spec per level."""
        specs = []
        for entry in self.attacks:
            entry = dict(entry)
            kind = entry.get("kind")
            if kind not in _LEVEL_FIELD:
                raise ConfigError(f"unknown attack kind {kind!r}")
            entry.setdefault("seed", self.seed)
            levels = entry.pop(_LEVEL_FIELD[kind], None)
            if levels is None:
                levels = [AttackSpec.__dataclass_fields__[_LEVEL_FIELD[kind]].default]
            elif not isinstance(levels, (list, tuple)):
                levels = [levels]
            try:
                specs.extend(AttackSpec(**{**entry, _LEVEL_FIELD[kind]: float(v)}) for v in levels)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from None
        return specs


def load_dataset(config: ExperimentConfig) -> RankingDataset:
    ds = config.dataset
    if "path" in ds:
        path = ds["path"]
        data = load_letor_folds(path) if os.path.isdir(path) else load_letor(path)
    else:
        syn = {"n_queries": 50, "docs_per_query": 20, "p": 20, "y_max": 2,
               "noise_scale": 0.5, "seed": config.seed, **ds["synthetic"]}
        data = generate_synthetic(**syn)
    if config.normalize:
        data = normalize_features(data)
    if not data.folds:
        data = split_folds(data, config.folds, config.seed)
    return data


@dataclass
class FoldSplit:
    fold: int
    train: RankingDataset
    val: RankingDataset
    test: RankingDataset


def fold_splits(data: RankingDataset) -> list[FoldSplit]:
    """Rotate folds: test = f, validation = f+1 (cyclic), the rest train."""
    folds = sorted(set(data.folds.values()))
    F = len(folds)
    splits = []
    for i, f in enumerate(folds):
        v = folds[(i + 1) % F]
        test = data.subset(data.fold_qids(f))
        val = data.subset(data.fold_qids(v))
        train = data.subset(q for q in data.qids if data.folds[q] not in (f, v))
        splits.append(FoldSplit(f, train, val, test))
    return splits


# --- models ------------------------------------------------------------------

@dataclass
class TrainedModel:
    name: str
    weights: ModelWeights | None = None
    w: np.ndarray | None = None
    gtd: GtdParams | None = None

    @property
    def epsilon(self) -> float | None:
        return None if self.weights is None else self.weights.epsilon

    def rank(self, X) -> Ranking:
        if self.weights is not None:
            return rank_from_gtd(predict_gtd(self.weights, X))
        return rank_by_scores(np.asarray(X) @ self.w)

    def scalar_scores(self, X) -> np.ndarray:
        """The score a substitute imitates: first GTD column, or the pointwise score."""
        if self.weights is not None:
            return predict_gtd(self.weights, X)[:, 0]
        return np.asarray(X) @ self.w


def evaluate(model: TrainedModel, data: RankingDataset, ks: Sequence[int], fold=None,
             log_base: float = 2.0, runs: list[str] | None = None) -> MetricsReport:
    report = MetricsReport(fold=fold)
    for q in data:
        ranking = model.rank(q.features)
        report.add(q.qid, ranking.apply(q.labels), ks, log_base)
        if runs is not None:
            runs.extend(trec_run_lines(q.qid, q.doc_ids, ranking, model.name))
    return report


def validation_score(model: TrainedModel, val: RankingDataset, k: int = 5, log_base: float = 2.0) -> float:
    return evaluate(model, val, [k], log_base=log_base).means[f"ndcg@{k}"]


@dataclass
class TuneResult:
    """Best grid point plus every (epsilon, GtdParams) score and model."""

    epsilon: float
    params: GtdParams
    scores: dict
    models: dict

    @property
    def K(self) -> int:
        return self.params.K


def tune_epsilon(
    train: RankingDataset,
    val: RankingDataset,
    grid: Iterable[float],
    gtd_params: GtdParams,
    r: float = 2.0,
    solver: SolverConfig | None = None,
    k: int = 5,
    K_grid: Sequence[int] = (),
    alpha_grid: Sequence[float] = (),
    beta_grid: Sequence[float] = (),
) -> TuneResult:
    """Pick the (epsilon, GTD params) maximizing validation NDCG@k.

    K, alpha and beta stay at ``gtd_params`` unless a grid is given. Ties
    go to the smaller epsilon, then smaller K, alpha, beta.
    """
    grid = sorted(set(float(e) for e in grid))
    if not grid:
        raise ValueError("epsilon grid must be nonempty")
    Ks = sorted(set(K_grid)) or [gtd_params.K]
    alphas = sorted(set(alpha_grid)) or [gtd_params.alpha]
    betas = sorted(set(beta_grid)) or [gtd_params.beta]
    scores, models = {}, {}
    best = None
    for eps, K, alpha, beta in itertools.product(grid, Ks, alphas, betas):
        params = replace(gtd_params, K=K, alpha=alpha, beta=beta)
        model = train_gtd_model(train, params, eps, r, solver)
        score = validation_score(model, val, k, params.log_base)
        scores[(eps, params)] = score
        models[(eps, params)] = model
        if best is None or score > scores[best]:
            best = (eps, params)
    return TuneResult(best[0], best[1], scores, models)


def train_gtd_model(train: RankingDataset, params: GtdParams, epsilon: float, r: float = 2.0,
                    solver: SolverConfig | None = None, name: str = "drmrr") -> TrainedModel:
    data = TrainingSet.from_dataset(train, params)
    return TrainedModel(name, weights=fit(data, epsilon, r, solver), gtd=params)


def train_pointwise(train: RankingDataset) -> TrainedModel:
    X, y = train.stacked()
    return TrainedModel("pointwise", w=fit_pointwise_linear(X, y))


def train_models(split: FoldSplit, config: ExperimentConfig, train: RankingDataset | None = None):
    """Train every configured model; returns (models, tuned epsilon)."""
    train = split.train if train is None else train
    if not any(q.labels.max() > 0 for q in train):
        raise ValueError(f"fold {split.fold}: no training query has a relevant document")
    params = config.gtd_params(y_max=train.y_max)
    solver = SolverConfig(**config.solver)
    models = {}
    tuned = None
    if "drmrr" in config.models:
        tuned = tune_epsilon(train, split.val, config.epsilons, params, config.r, solver,
                             config.tune_k, config.K_grid, config.alpha_grid, config.beta_grid)
        best = tuned.models[(tuned.epsilon, tuned.params)]
        models["drmrr"] = replace(best, name="drmrr")
    if "erm" in config.models:
        # ERM shares the tuned GTD params so the two differ only in epsilon
        erm_params = tuned.params if tuned else params
        if tuned and (0.0, erm_params) in tuned.models:
            models["erm"] = replace(tuned.models[(0.0, erm_params)], name="erm")
        else:
            models["erm"] = train_gtd_model(train, erm_params, 0.0, config.r, solver, "erm")
    if "pointwise" in config.models:
        models["pointwise"] = train_pointwise(train)
    return models, tuned


# --- records -----------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    fold: int
    model: str
    attack: str
    attack_spec: dict | None
    metrics: MetricsReport
    epsilon: float | None = None
    K: int | None = None
    run: list[str] = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple:
        spec = self.attack_spec or {}
        return (self.model, spec.get("kind", CLEAN), _level(spec), self.fold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        d = dict(d)
        d["metrics"] = MetricsReport.from_dict(d["metrics"])
        return cls(**d)


def _level(spec: Mapping) -> float:
    if not spec:
        return 0.0
    return float(spec[_LEVEL_FIELD[spec["kind"]]])


def _victim_targets(model: TrainedModel, data: RankingDataset) -> dict:
    """Per-document y of the substitute's cost, on the victim's score scale."""
    if model.weights is None:
        return {q.qid: q.labels.astype(float) for q in data}
    return {q.qid: build_gtd_matrix(q.labels, model.gtd).values[:, 0] for q in data}


def run_cv(config: ExperimentConfig, attacks: Sequence[AttackSpec] | None = None,
           data: RankingDataset | None = None) -> list[RunRecord]:
    """Cross-validate every model on clean test data and under each attack.

    ``attacks`` defaults to the config's attack list; pass ``[]`` for a
    clean-only run.
    """
    data = load_dataset(config) if data is None else data
    attacks = config.attack_specs() if attacks is None else list(attacks)
    h = config.config_hash()
    log_base = config.gtd_params(y_max=data.y_max).log_base
    records: list[RunRecord] = []

    def emit(fold, model, spec, test, t0, runs=None):
        report = evaluate(model, test, config.ks, fold, log_base, runs)
        K = model.weights.K if model.weights is not None else None
        records.append(RunRecord(h, fold, model.name, spec.attack_id if spec else CLEAN,
                                 spec.to_dict() if spec else None, report, model.epsilon, K,
                                 runs or [], time.perf_counter() - t0))

    for split in fold_splits(data):
        t0 = time.perf_counter()
        models, tuned = train_models(split, config)
        log.info("fold %s: tuned epsilon=%s K=%s", split.fold, tuned and tuned.epsilon, tuned and tuned.K)
        for model in models.values():
            emit(split.fold, model, None, split.test, t0, [])

        adversary = None
        substitutes: dict[str, object] = {}
        X_train, _ = split.train.stacked()
        for spec in attacks:
            t0 = time.perf_counter()
            if spec.kind == "gaussian":
                test = gaussian_attack(split.test, spec)
                for model in models.values():
                    emit(split.fold, model, spec, test, t0)
            elif spec.kind == "universal_fgsm":
                if adversary is None:
                    adversary = train_linear_adversary(split.train)
                test = universal_fgsm_attack(split.test, adversary, spec)
                for model in models.values():
                    emit(split.fold, model, spec, test, t0)
            elif spec.kind == "blackbox_fgsm":
                for model in models.values():
                    if model.name not in substitutes:
                        substitutes[model.name] = train_substitute_mlp(
                            X_train, model.scalar_scores(X_train), config.mlp_config(spec.seed))
                    test = blackbox_fgsm_attack(split.test, substitutes[model.name],
                                                _victim_targets(model, split.test), spec)
                    emit(split.fold, model, spec, test, t0)
            elif spec.kind == "label_poison":
                poisoned = poison_labels(split.train, spec.e, spec.seed)
                poisoned_models, _ = train_models(split, config, poisoned)
                for model in poisoned_models.values():
                    emit(split.fold, model, spec, split.test, t0)
    return sorted(records, key=lambda r: r.key)


# --- reports -----------------------------------------------------------------

def summarize(records: Sequence[RunRecord]) -> list[dict]:
    """One row per (model, attack kind, level, metric): fold mean (SD) and pooled mean."""
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        spec = rec.attack_spec or {}
        groups.setdefault((rec.model, spec.get("kind", CLEAN), _level(spec)), []).append(rec)
    rows = []
    for (model, kind, level), recs in sorted(groups.items()):
        recs = sorted(recs, key=lambda r: r.fold)
        for key, stats in pooled_summary([r.metrics for r in recs]).items():
            metric, k = key.split("@")
            rows.append({
                "model": model, "attack": kind, "level": level, "metric": metric, "k": int(k),
                "mean": stats["fold_mean"], "sd": stats["fold_sd"], "pooled": stats["pooled"],
                "n_folds": len(recs),
                "cell": f"{100 * stats['fold_mean']:.2f}% ({100 * stats['fold_sd']:.2f}%)",
            })
    return rows


SUMMARY_FIELDS = ["model", "attack", "level", "metric", "k", "mean", "sd", "pooled", "n_folds", "cell"]


def emit_report(records: Sequence[RunRecord], out_dir: str | os.PathLike,
                formats: Sequence[str] = ("json", "csv", "runs")) -> dict[str, str]:
    """Write ``records.json``, ``summary.csv`` and per-fold run files under ``out_dir``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = {}
    records = sorted(records, key=lambda r: r.key)
    if "json" in formats:
        path = os.path.join(out_dir, "records.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in records], fh, indent=1, sort_keys=True)
        written["json"] = path
    if "csv" in formats:
        path = os.path.join(out_dir, "summary.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(summarize(records))
        written["csv"] = path
    if "runs" in formats:
        run_dir = os.path.join(out_dir, "runs")
        for rec in records:
            if not rec.run:
                continue
            os.makedirs(run_dir, exist_ok=True)
            path = os.path.join(run_dir, f"fold{rec.fold}_{rec.model}.run")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(rec.run) + "\n")
            written.setdefault("runs", run_dir)
    return written


def load_records(path: str | os.PathLike) -> list[RunRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RunRecord.from_dict(d) for d in json.load(fh)]
