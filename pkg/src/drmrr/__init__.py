"""Distributionally robust multi-output regression ranking."""
from .dataset import (
    Document,
    ParseError,
    Query,
    RankingDataset,
    generate_synthetic,
    load_letor,
    load_letor_folds,
    normalize_features,
    parse_letor,
    split_folds,
    write_letor,
)
from .gtd import GtdMatrix, GtdParams, build_gtd_matrix
from .metrics import MetricsReport, ap_at_k, dcg_at_k, ndcg_at_k, precision_at_k
from .ranker import Ranking, rank_from_gtd, rank_pointwise
from .robustness import AttackSpec
from .solver import ModelWeights, SolverConfig, TrainingSet, fit, objective, predict_gtd

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "Document",
    "GtdMatrix",
    "GtdParams",
    "MetricsReport",
    "ModelWeights",
    "ParseError",
    "Query",
    "Ranking",
    "RankingDataset",
    "SolverConfig",
    "TrainingSet",
    "ap_at_k",
    "build_gtd_matrix",
    "dcg_at_k",
    "fit",
    "generate_synthetic",
    "load_letor",
    "load_letor_folds",
    "ndcg_at_k",
    "normalize_features",
    "objective",
    "parse_letor",
    "precision_at_k",
    "predict_gtd",
    "rank_from_gtd",
    "rank_pointwise",
    "split_folds",
    "write_letor",
]
