"""Ranking metrics: DCG, NDCG@k, P@k, AP@k and their query means.

Every function takes relevance grades in *ranked order* (position 1 first).
Gain is the raw grade and the discount is 1/log(1 + position).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_LOG_BASE = 2.0


def discount(positions, log_base: float = DEFAULT_LOG_BASE):
    """1 / log_base(1 + position) for 1-based positions."""
    positions = np.asarray(positions, dtype=float)
    return math.log(log_base) / np.log1p(positions)


def dcg_at_k(ranked, k: int, log_base: float = DEFAULT_LOG_BASE) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    gains = np.asarray(ranked, dtype=float)[:k]
    return float(np.sum(gains * discount(np.arange(1, gains.size + 1), log_base)))


def ideal_dcg_at_k(labels, k: int, log_base: float = DEFAULT_LOG_BASE) -> float:
    return dcg_at_k(np.sort(np.asarray(labels))[::-1], k, log_base)


def ndcg_at_k(ranked, ideal_labels=None, k: int = 10, log_base: float = DEFAULT_LOG_BASE) -> float:
    """DCG@k normalized by the ideal DCG@k; 0 when the ideal DCG is 0.

    ``ideal_labels`` defaults to the grades in ``ranked`` (the usual case
    where the whole query list is ranked).
    """
    if ideal_labels is None:
        ideal_labels = ranked
    idcg = ideal_dcg_at_k(ideal_labels, k, log_base)
    if idcg <= 0.0:
        return 0.0
    return dcg_at_k(ranked, k, log_base) / idcg


def _binary(ranked) -> np.ndarray:
    return np.asarray(ranked) >= 1


def precision_at_k(ranked, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.count_nonzero(_binary(ranked)[:k])) / k


def ap_at_k(ranked, k: int) -> float:
    """Average of P@j over the relevant positions j <= k.

    The denominator is the number of relevant documents inside the top k;
    a list with none scores 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = _binary(ranked)[:k]
    m = np.count_nonzero(rel)
    if m == 0:
        return 0.0
    hits = np.cumsum(rel)
    positions = np.arange(1, rel.size + 1)
    return float(np.sum((hits / positions)[rel]) / m)


METRICS = ("ndcg", "ap")


def query_metrics(ranked, ks: Sequence[int], log_base: float = DEFAULT_LOG_BASE) -> dict[str, float]:
    """All configured metrics for one ranked query, keyed like ``ndcg@5``."""
    out = {}
    for k in ks:
        out[f"ndcg@{k}"] = ndcg_at_k(ranked, None, k, log_base)
        out[f"ap@{k}"] = ap_at_k(ranked, k)
    return out


def mean_metric(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("no values to average")
    return float(np.mean(values))


@dataclass
class MetricsReport:
    """Per-query metric values for one evaluation run (usually one fold)."""

    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    fold: int | None = None

    @property
    def keys(self) -> list[str]:
        seen: dict[str, None] = {}
        for vals in self.per_query.values():
            seen.update(dict.fromkeys(vals))
        return list(seen)

    @property
    def means(self) -> dict[str, float]:
        return {
            key: mean_metric(v[key] for v in self.per_query.values()) for key in self.keys
        }

    def add(self, qid: str, ranked, ks: Sequence[int], log_base: float = DEFAULT_LOG_BASE):
        self.per_query[qid] = query_metrics(ranked, ks, log_base)

    def rows(self) -> list[dict]:
        """One row per (fold, metric, k) with the fold mean."""
        rows = []
        for key, value in self.means.items():
            metric, k = key.split("@")
            rows.append({"fold": self.fold, "metric": metric, "k": int(k), "value": value})
        return rows

    def to_dict(self) -> dict:
        return {"fold": self.fold, "per_query": self.per_query, "means": self.means}

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        return cls(
            per_query={q: dict(v) for q, v in data["per_query"].items()},
            fold=data.get("fold"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["fold", "metric", "k", "value"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


def pooled_summary(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Pooled mean over all queries plus mean and SD of the fold means.

    Returns ``{metric_key: {"pooled": ..., "fold_mean": ..., "fold_sd": ...}}``;
    the SD is the sample SD (ddof=1) and is 0 for a single fold.
    """
    keys: dict[str, None] = {}
    for r in reports:
        keys.update(dict.fromkeys(r.keys))
    out = {}
    for key in keys:
        pooled = [v[key] for r in reports for v in r.per_query.values()]
        fold_means = np.array([r.means[key] for r in reports if r.per_query])
        sd = float(np.std(fold_means, ddof=1)) if fold_means.size > 1 else 0.0
        out[key] = {
            "pooled": mean_metric(pooled),
            "fold_mean": float(fold_means.mean()),
            "fold_sd": sd,
        }
    return out
