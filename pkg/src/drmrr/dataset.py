"""Ranking datasets in LETOR / SVMLight-with-qid format.

A dataset is an immutable collection of queries; each query holds a dense
``n_q x p`` feature matrix and integer relevance grades in file order.
"""
from __future__ import annotations

import io
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np


class ParseError(ValueError):
    """Raised for malformed LETOR input."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class Document:
    features: np.ndarray
    label: int
    doc_id: str


@dataclass(frozen=True, eq=False)
class Query:
    qid: str
    features: np.ndarray
    labels: np.ndarray
    doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.labels, dtype=int)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError(f"query {self.qid}: features must be a nonempty 2-D array")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"query {self.qid}: one label per document required")
        if not np.all(np.isfinite(features)):
            raise ValueError(f"query {self.qid}: non-finite feature value")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        doc_ids = tuple(self.doc_ids) or tuple(f"{self.qid}-{i}" for i in range(len(labels)))
        if len(doc_ids) != len(labels):
            raise ValueError(f"query {self.qid}: doc_ids length mismatch")
        object.__setattr__(self, "doc_ids", doc_ids)

    @property
    def n_docs(self) -> int:
        return self.features.shape[0]

    @property
    def documents(self) -> list[Document]:
        return [
            Document(self.features[i], int(self.labels[i]), self.doc_ids[i])
            for i in range(self.n_docs)
        ]

    def with_features(self, features: np.ndarray) -> "Query":
        return replace(self, features=features)

    def with_labels(self, labels: np.ndarray) -> "Query":
        return replace(self, labels=labels)

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.qid == other.qid
            and self.doc_ids == other.doc_ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class RankingDataset:
    queries: tuple[Query, ...]
    p: int
    y_max: int
    folds: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        queries = tuple(self.queries)
        object.__setattr__(self, "queries", queries)
        object.__setattr__(self, "folds", dict(self.folds))
        qids = [q.qid for q in queries]
        if len(set(qids)) != len(qids):
            raise ValueError("duplicate qid in dataset")
        for q in queries:
            if q.features.shape[1] != self.p:
                raise ValueError(f"query {q.qid}: expected {self.p} features")
            if q.labels.min() < 0 or q.labels.max() > self.y_max:
                raise ValueError(f"query {q.qid}: label outside 0..{self.y_max}")
        if self.folds and set(self.folds) != set(qids):
            raise ValueError("fold map must cover exactly the dataset's qids")

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def __eq__(self, other):
        if not isinstance(other, RankingDataset):
            return NotImplemented
        return (
            self.p == other.p
            and self.y_max == other.y_max
            and dict(self.folds) == dict(other.folds)
            and self.queries == other.queries
        )

    @property
    def n_documents(self) -> int:
        return sum(q.n_docs for q in self.queries)

    @property
    def qids(self) -> list[str]:
        return [q.qid for q in self.queries]

    def query(self, qid: str) -> Query:
        for q in self.queries:
            if q.qid == qid:
                return q
        raise KeyError(qid)

    def subset(self, qids: Iterable[str]) -> "RankingDataset":
        """Queries whose qid is in ``qids``, keeping dataset order."""
        keep = set(qids)
        queries = tuple(q for q in self.queries if q.qid in keep)
        folds = {q.qid: self.folds[q.qid] for q in queries if q.qid in self.folds}
        return RankingDataset(queries, self.p, self.y_max, folds)

    def fold_qids(self, fold: int) -> list[str]:
        return [q.qid for q in self.queries if self.folds.get(q.qid) == fold]

    def with_queries(self, queries: Sequence[Query]) -> "RankingDataset":
        return replace(self, queries=tuple(queries))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Features (N x p) and labels (N,) stacked over queries."""
        X = np.vstack([q.features for q in self.queries])
        y = np.concatenate([q.labels for q in self.queries])
        return X, y


_QID = re.compile(r"^qid:(\S+)$")


def _parse_line(line: str, line_no: int):
    body, _, comment = line.partition("#")
    tokens = body.split()
    if not tokens:
        return None
    if len(tokens) < 2:
        raise ParseError("expected '<label> qid:<qid> <idx>:<val> ...'", line_no)
    try:
        label = int(tokens[0])
    except ValueError:
        raise ParseError(f"non-integer label {tokens[0]!r}", line_no) from None
    if label < 0:
        raise ParseError(f"negative label {label}", line_no)
    m = _QID.match(tokens[1])
    if m is None:
        raise ParseError(f"expected qid:<qid>, got {tokens[1]!r}", line_no)
    feats: dict[int, float] = {}
    for tok in tokens[2:]:
        idx, sep, val = tok.partition(":")
        try:
            i = int(idx)
            v = float(val)
        except ValueError:
            raise ParseError(f"malformed feature {tok!r}", line_no) from None
        if not sep or i < 1:
            raise ParseError(f"malformed feature {tok!r}", line_no)
        if not math.isfinite(v):
            raise ParseError(f"non-finite feature value {tok!r}", line_no)
        feats[i] = v
    doc_id = _doc_id_from_comment(comment.strip())
    return label, m.group(1), feats, doc_id


def _doc_id_from_comment(comment: str) -> str | None:
    # LETOR comments look like "docid = 244338 inc = 1 prob = 0.3"
    m = re.search(r"docid\s*=\s*(\S+)", comment)
    return m.group(1) if m else None


def parse_letor(stream: TextIO | str, y_max: int | None = None) -> RankingDataset:
    """Parse LETOR text into a dataset.

    ``stream`` is an open text stream or a string of file contents. Missing
    sparse feature indices are filled with 0.0 and ``p`` is the largest index
    seen. ``y_max`` defaults to the largest label present.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows: dict[str, list] = {}
    p = 0
    for line_no, line in enumerate(stream, start=1):
        parsed = _parse_line(line, line_no)
        if parsed is None:
            continue
        label, qid, feats, doc_id = parsed
        if feats:
            p = max(p, max(feats))
        rows.setdefault(qid, []).append((label, feats, doc_id))
    if not rows:
        raise ParseError("empty input: no documents found")
    if p == 0:
        raise ParseError("no features found")

    queries = []
    top = 0
    for qid, docs in rows.items():
        X = np.zeros((len(docs), p))
        labels = np.empty(len(docs), dtype=int)
        ids = []
        for i, (label, feats, doc_id) in enumerate(docs):
            for j, v in feats.items():
                X[i, j - 1] = v
            labels[i] = label
            ids.append(doc_id if doc_id is not None else f"{qid}-{i}")
        top = max(top, int(labels.max()))
        queries.append(Query(qid, X, labels, tuple(ids)))
    if y_max is None:
        y_max = max(top, 1)
    elif top > y_max:
        raise ParseError(f"label {top} exceeds y_max={y_max}")
    return RankingDataset(tuple(queries), p, y_max)


def load_letor(path: str | os.PathLike, y_max: int | None = None) -> RankingDataset:
    with open(path, encoding="utf-8") as fh:
        return parse_letor(fh, y_max=y_max)


def load_letor_folds(root: str | os.PathLike, y_max: int | None = None) -> RankingDataset:
    """Load a LETOR fold directory (``Fold1/test.txt`` ... ``FoldF/test.txt``).

    Each query's fold is the fold whose test file contains it, so the test
    files must partition the queries.
    """
    fold_dirs = sorted(
        (d for d in os.listdir(root) if re.fullmatch(r"Fold\d+", d)),
        key=lambda d: int(d[4:]),
    )
    if not fold_dirs:
        raise ParseError(f"no FoldN directories under {root}")
    queries: list[Query] = []
    folds: dict[str, int] = {}
    p = 0
    top = 0
    for d in fold_dirs:
        part = load_letor(os.path.join(root, d, "test.txt"))
        for q in part:
            if q.qid in folds:
                raise ParseError(f"qid {q.qid} appears in more than one test fold")
            folds[q.qid] = int(d[4:])
            queries.append(q)
        p = max(p, part.p)
        top = max(top, part.y_max)
    queries = [_pad_features(q, p) for q in queries]
    if y_max is None:
        y_max = top
    return RankingDataset(tuple(queries), p, y_max, folds)


def _pad_features(q: Query, p: int) -> Query:
    if q.features.shape[1] == p:
        return q
    X = np.zeros((q.n_docs, p))
    X[:, : q.features.shape[1]] = q.features
    return q.with_features(X)


def serialize_letor(dataset: RankingDataset) -> str:
    """Write dense LETOR lines: label, qid, then every feature in index order."""
    out = []
    for q in dataset:
        for i in range(q.n_docs):
            feats = " ".join(f"{j + 1}:{v!r}" for j, v in enumerate(q.features[i].tolist()))
            out.append(f"{int(q.labels[i])} qid:{q.qid} {feats} # docid = {q.doc_ids[i]}")
    return "\n".join(out) + "\n"


def write_letor(dataset: RankingDataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_letor(dataset))


def normalize_features(dataset: RankingDataset) -> RankingDataset:
    """Per-query min-max scaling of every feature to [0, 1].

    Features that are constant within a query map to 0.0.
    """
    queries = []
    for q in dataset:
        X = q.features
        lo = X.min(axis=0)
        span = X.max(axis=0) - lo
        safe = np.where(span > 0, span, 1.0)
        Z = np.where(span > 0, (X - lo) / safe, 0.0)
        queries.append(q.with_features(np.clip(Z, 0.0, 1.0)))
    return dataset.with_queries(queries)


def split_folds(dataset: RankingDataset, n_folds: int, seed: int) -> RankingDataset:
    """Assign whole queries to ``n_folds`` folds (1-based) of near-equal size."""
    T = len(dataset)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_folds > T:
        raise ValueError(f"cannot split {T} queries into {n_folds} folds")
    order = np.random.default_rng(seed).permutation(T)
    folds = {}
    for f, idx in enumerate(np.array_split(order, n_folds), start=1):
        for i in idx:
            folds[dataset.queries[i].qid] = f
    return replace(dataset, folds=folds)


def generate_synthetic(
    n_queries: int,
    docs_per_query: int,
    p: int,
    y_max: int = 2,
    noise_scale: float = 0.0,
    seed: int = 0,
) -> RankingDataset:
    """Random ranking data with labels driven by a hidden linear score.

    Features are uniform on [0, 1]^p. A hidden weight vector gives each
    document a latent score, standardized over the whole dataset; Gaussian
    noise of size ``noise_scale`` is added and labels are the per-query
    quantile bins of the noisy score, so every query uses all grades when it
    has at least ``y_max + 1`` documents.
    """
    if min(n_queries, docs_per_query, p, y_max) <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(p)
    X = rng.uniform(size=(n_queries, docs_per_query, p))
    latent = X @ w
    latent = (latent - latent.mean()) / (latent.std() or 1.0)
    noisy = latent + noise_scale * rng.standard_normal(latent.shape)
    queries = []
    width = len(str(n_queries))
    for t in range(n_queries):
        # rank 0 = lowest score; grade = floor(rank * (y_max+1) / n)
        ranks = np.argsort(np.argsort(noisy[t], kind="stable"), kind="stable")
        labels = (ranks * (y_max + 1)) // docs_per_query
        qid = f"{t + 1:0{width}d}"
        queries.append(Query(qid, X[t], labels))
    return RankingDataset(tuple(queries), p, y_max)
