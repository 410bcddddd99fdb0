"""Turning scores into rankings.

``rank_from_gtd`` ranks a query from its predicted GTD matrix by cycling
through the importance columns; ``rank_pointwise`` sorts a scalar score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SOURCES = ("drmrr", "pointwise", "external")


@dataclass(frozen=True)
class Ranking:
    """Document indices (0-based), best first."""

    order: np.ndarray
    source: str = "external"
    scores: np.ndarray | None = None

    def __post_init__(self):
        order = np.asarray(self.order, dtype=int)
        if not np.array_equal(np.sort(order), np.arange(order.size)):
            raise ValueError("order must be a permutation of 0..n-1")
        if self.source not in SOURCES:
            raise ValueError(f"unknown ranking source {self.source!r}")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return self.order.size

    def apply(self, labels) -> np.ndarray:
        """Labels rearranged into ranked order."""
        return np.asarray(labels)[self.order]

    def run_scores(self) -> np.ndarray:
        """Per-rank scores for run files: the model score if any, else n - rank."""
        if self.scores is not None:
            return np.asarray(self.scores, dtype=float)[self.order]
        return np.arange(self.order.size, 0, -1, dtype=float)


def rank_from_gtd(theta_hat) -> Ranking:
    """Greedy column-cycling selection over a predicted GTD matrix.

    Rank j takes the remaining row with the largest entry in the current
    column; the column advances after each pick and wraps back to the first
    after every K picks. Equal maxima go to the lowest row index.
    """
    T = np.asarray(theta_hat, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if T.ndim != 2 or T.shape[0] == 0 or T.shape[1] == 0:
        raise ValueError("theta_hat must be a nonempty n x K matrix")
    if not np.all(np.isfinite(T)):
        raise ValueError("theta_hat contains non-finite values")
    n, K = T.shape
    remaining = np.ones(n, dtype=bool)
    order = np.empty(n, dtype=int)
    col = 0
    for j in range(1, n + 1):
        candidates = np.where(remaining, T[:, col], -np.inf)
        pick = int(np.argmax(candidates))  # first index among ties
        order[j - 1] = pick
        remaining[pick] = False
        col = 0 if j % K == 0 else col + 1
    return Ranking(order, "drmrr")


def fit_pointwise_linear(X, y, jitter: float = 1e-8) -> np.ndarray:
    """Least-squares weights for y ~ X w via ridge-jittered normal equations."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    A = X.T @ X + jitter * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ y)


def rank_by_scores(scores, source: str = "pointwise") -> Ranking:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no documents to rank")
    return Ranking(np.argsort(-scores, kind="stable"), source, scores)


def rank_pointwise(w, X) -> Ranking:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return rank_by_scores(X @ np.asarray(w, dtype=float))


def trec_run_lines(qid: str, doc_ids: Sequence[str], ranking: Ranking, tag: str | None = None) -> list[str]:
    """TREC run format: ``qid Q0 doc_id rank score tag``."""
    tag = tag or ranking.source
    scores = ranking.run_scores()
    return [
        f"{qid} Q0 {doc_ids[d]} {rank} {score!r} {tag}"
        for rank, (d, score) in enumerate(zip(ranking.order.tolist(), scores.tolist()), start=1)
    ]
