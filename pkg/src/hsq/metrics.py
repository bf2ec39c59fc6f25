"""Retrieval quality: MAP@R, precision-recall and precision@N.

A database item is relevant to a query when the two share at least one
ground-truth label. AP@R divides by min(R, relevant items in the database).
PR points are not interpolated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

DEFAULT_NS = (1, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)


def relevance(q_labels, x_labels) -> bool:
    return not set(q_labels).isdisjoint(x_labels)


def average_precision(flags, total_relevant: int, R: int) -> float:
    """sum_{k<=R} P(k) rel(k) / min(R, total_relevant); 0 without relevant items."""
    if total_relevant <= 0:
        return 0.0
    rel = np.asarray(flags, dtype=bool)[:R]
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, rel.size + 1)
    return float(prec[rel].sum() / min(R, total_relevant))


def pr_curve(flags, total_relevant: int):
    """(recall, precision) at every relevant rank, plus (0, 1) and the list end."""
    rel = np.asarray(flags, dtype=bool)
    if total_relevant <= 0 or rel.size == 0:
        return []
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    pts = [(0.0, 1.0)]
    for k in np.flatnonzero(rel):
        pts.append((hits[k] / total_relevant, hits[k] / ranks[k]))
    if not rel[-1]:
        pts.append((hits[-1] / total_relevant, hits[-1] / ranks[-1]))
    return [(float(r), float(p)) for r, p in pts]


def precision_at_n(flags, ns, total_relevant: int | None = None):
    rel = np.asarray(flags, dtype=bool)
    hits = np.concatenate([[0], np.cumsum(rel)])
    out = []
    for n in ns:
        if total_relevant == 0:
            out.append((int(n), 0.0))
            continue
        out.append((int(n), float(hits[min(n, rel.size)] / n)))
    return out


class LabelIndex:
    """Sparse image x label incidence for fast relevance lookups."""

    def __init__(self, labels: dict):
        self.row = {img: i for i, img in enumerate(sorted(labels))}
        vocab = sorted({l for ls in labels.values() for l in ls})
        self.col = {l: j for j, l in enumerate(vocab)}
        rows, cols = [], []
        for img, ls in labels.items():
            for l in ls:
                rows.append(self.row[img])
                cols.append(self.col[l])
        self.mat = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                     shape=(len(self.row), max(1, len(self.col))))
        self.labels = labels

    def query_vector(self, image):
        v = np.zeros(self.mat.shape[1])
        for l in self.labels.get(image, ()):
            v[self.col[l]] = 1.0
        return v

    def relevant(self, image, others) -> np.ndarray:
        rows = np.array([self.row.get(int(o), -1) for o in others], dtype=np.int64)
        out = np.zeros(len(rows), dtype=bool)
        known = rows >= 0
        if known.any():
            out[known] = (self.mat[rows[known]] @ self.query_vector(image)) > 0
        return out


@dataclass
class MetricReport:
    map: float
    pr_curve: list
    p_at_n: list
    R: int
    queries: int

    def to_dict(self):
        return asdict(self)


def _query_flags(results, labels, database, index):
    database = np.array(sorted(database), dtype=np.int64)
    db_rel_cache = {}
    for q, ranked in results.items():
        ids = [i for i, _ in ranked if i != q]
        flags = index.relevant(q, ids)
        key = q
        if key not in db_rel_cache:
            pool = database[database != q]
            db_rel_cache[key] = int(index.relevant(q, pool).sum())
        yield q, flags, db_rel_cache[key]


def _database(results, labels, database):
    if database is not None:
        return set(int(i) for i in database)
    return set(labels) - set(results)


def map_at(results: dict, labels: dict, R: int = 5000, database=None) -> float:
    """Mean AP@R over queries. ``database`` defaults to labelled ids that are
    not queries; a query never counts as its own result."""
    if not results:
        raise ValueError("no queries")
    idx = LabelIndex(labels)
    db = _database(results, labels, database)
    aps = [average_precision(f, tot, R) for _, f, tot in _query_flags(results, labels, db, idx)]
    return float(np.mean(aps))


def evaluate(results: dict, labels: dict, R: int = 5000, ns=DEFAULT_NS, database=None,
             pr_points: int = 50) -> MetricReport:
    idx = LabelIndex(labels)
    db = _database(results, labels, database)
    aps, pns, curves = [], [], []
    longest = max((len(r) for r in results.values()), default=0)
    cut = np.unique(np.linspace(1, max(longest, 1), min(max(longest, 1), pr_points)).round().astype(int))
    for _, flags, tot in _query_flags(results, labels, db, idx):
        aps.append(average_precision(flags, tot, R))
        pns.append([p for _, p in precision_at_n(flags, ns, tot)])
        if tot > 0:
            hits = np.concatenate([[0], np.cumsum(flags)])
            h = hits[np.minimum(cut, len(flags))]
            curves.append(np.stack([h / tot, h / cut], axis=1))
    pr = np.mean(curves, axis=0).tolist() if curves else []
    p_at_n = [[int(n), float(p)] for n, p in zip(ns, np.mean(pns, axis=0))] if pns else []
    return MetricReport(float(np.mean(aps)) if aps else 0.0, [[float(r), float(p)] for r, p in pr],
                        p_at_n, int(R), len(aps))
