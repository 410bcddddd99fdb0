"""Ground Truth Deviation (GTD) targets.

Each document of a query gets a K-vector whose i-th entry scores how well
the document fits rank i. It is the product of three parts:

* an NDCG deviation: NDCG of the ideal list after swapping the document
  into slot i,
* a position deviation: a cosh-shaped penalty on the distance between the
  document's ideal slot and i, milder when the document moves up,
* an importance weight from the document's grade alone.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .dataset import Query
from .metrics import DEFAULT_LOG_BASE, discount


@dataclass(frozen=True)
class GtdParams:
    K: int = 1
    alpha: float = 10.0
    beta: float = 2.0
    log_base: float = DEFAULT_LOG_BASE
    y_max: int = 2

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.log_base <= 1:
            raise ValueError("log_base must exceed 1")
        if self.y_max < 1:
            raise ValueError("y_max must be >= 1")


@dataclass(frozen=True)
class SortedQuery:
    """A query's labels in ideal (descending, stable) order.

    ``order[r]`` is the original index of the document at 0-based sorted
    position r, ``pos_of[d]`` is the inverse map, and ``idcg`` is the DCG of
    the full ideal list.
    """

    order: np.ndarray
    y_sorted: np.ndarray
    pos_of: np.ndarray
    idcg: float
    labels: np.ndarray
    log_base: float = DEFAULT_LOG_BASE

    @property
    def degenerate(self) -> bool:
        return self.idcg <= 0.0

    @property
    def n(self) -> int:
        return self.order.size


def sort_by_relevance(labels, log_base: float = DEFAULT_LOG_BASE) -> SortedQuery:
    if isinstance(labels, Query):
        labels = labels.labels
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty query")
    order = np.argsort(-labels, kind="stable")
    pos_of = np.empty_like(order)
    pos_of[order] = np.arange(order.size)
    y_sorted = labels[order]
    idcg = float(np.sum(y_sorted * discount(np.arange(1, order.size + 1), log_base)))
    return SortedQuery(order, y_sorted, pos_of, idcg, labels, log_base)


def ndcg_deviation_vector(sq: SortedQuery, d: int) -> np.ndarray:
    """NDCG of the ideal list with document ``d`` swapped into each slot.

    Entry i (0-based) is
    ``1 + [(y_d - y_i)/log(2+i) + (y_i - y_d)/log(2+pos_d)] / IDCG``
    where y_i is the grade in sorted slot i. Degenerate queries give zeros.
    """
    if sq.degenerate:
        return np.zeros(sq.n)
    y_d = float(sq.labels[d])
    disc = discount(np.arange(1, sq.n + 1), sq.log_base)
    own = disc[sq.pos_of[d]]
    diff = y_d - sq.y_sorted
    return 1.0 + (diff * disc - diff * own) / sq.idcg


def position_deviation_vector(sq: SortedQuery, d: int, params: GtdParams) -> np.ndarray:
    # h > 0: document placed above its ideal slot, penalized at half rate
    h = float(sq.pos_of[d]) - np.arange(sq.n)
    arg = np.minimum(params.beta * h, 0.5 * params.beta * h)
    return params.alpha / np.sqrt(np.abs(np.cosh(arg)))


def importance_score(y_d: float, y_max: float) -> float:
    if y_max < 1 or not 0 <= y_d <= y_max:
        raise ValueError(f"grade {y_d} outside [0, {y_max}]")
    return math.log(y_d * y_max + 1.0) / math.log(y_max * y_max + 1.0)


def _fit_length(v: np.ndarray, K: int) -> np.ndarray:
    if v.size >= K:
        return v[:K]
    return np.concatenate([v, np.full(K - v.size, v[-1])])


def gtd_vector(sq: SortedQuery, d: int, params: GtdParams) -> np.ndarray:
    if sq.degenerate:
        return np.zeros(params.K)
    xi_i = importance_score(float(sq.labels[d]), params.y_max)
    lam = _fit_length(ndcg_deviation_vector(sq, d), params.K)
    rho = _fit_length(position_deviation_vector(sq, d, params), params.K)
    return xi_i * (rho * lam)


@dataclass(frozen=True)
class GtdMatrix:
    values: np.ndarray
    params: GtdParams
    degenerate: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"level_{i + 1}" for i in range(self.params.K)])
        writer.writerows([repr(float(v)) for v in row] for row in self.values)
        return buf.getvalue()


def build_gtd_matrix(query, params: GtdParams) -> GtdMatrix:
    """Stack the GTD vectors of every document of ``query`` (labels or Query)."""
    sq = sort_by_relevance(query, params.log_base)
    values = np.vstack([gtd_vector(sq, d, params) for d in range(sq.n)])
    return GtdMatrix(values, params, sq.degenerate)
