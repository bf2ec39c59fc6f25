"""Asymmetric quantizer distance (AQD) search over an encoded database."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, kernels
from .errors import ValidationError
from .quantizer import icm_encode


@dataclass
class RetrievalIndex:
    codebooks: np.ndarray  # (M, K, D)
    codes: np.ndarray  # (N, M)
    ids: np.ndarray  # (N,) image ids aligned with code rows

    def __post_init__(self):
        self.codebooks = np.asarray(self.codebooks, dtype=np.float64)
        self.codes = np.ascontiguousarray(self.codes, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.codebooks.ndim != 3:
            raise ValidationError(f"codebooks must be (M, K, D), got {self.codebooks.shape}")
        if self.codes.ndim != 2 or self.codes.shape[1] != self.codebooks.shape[0]:
            raise ValidationError(
                f"codes shape {self.codes.shape} does not match M={self.codebooks.shape[0]}"
            )
        if len(self.ids) != len(self.codes):
            raise ValidationError(f"{len(self.ids)} ids for {len(self.codes)} codes")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.codebooks.shape[1]):
            raise ValidationError("code entry outside [0, K)")

    def __len__(self):
        return len(self.ids)

    @property
    def M(self):
        return self.codebooks.shape[0]

    @property
    def K(self):
        return self.codebooks.shape[1]

    @classmethod
    def build(cls, codebooks, R, sigma, ids=None, sweeps: int = 3):
        codes = icm_encode(R, codebooks, sigma, sweeps)
        ids = np.arange(len(codes)) if ids is None else ids
        return cls(codebooks, codes, ids)

    def save(self, directory):
        d = Path(directory)
        io.write_codebooks(d / "codebooks.hsqc", self.codebooks)
        io.write_codes(d / "codes.hsqb", self.codes, self.K)
        io.write_json(d / "ids.json", [int(i) for i in self.ids])

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        C = io.read_codebooks(d / "codebooks.hsqc")
        codes, _ = io.read_codes(d / "codes.hsqb", K=C.shape[1])
        ids_path = d / "ids.json"
        ids = io.read_json(ids_path) if ids_path.exists() else np.arange(len(codes))
        return cls(C, codes, ids)


def build_lookup_table(r_q, codebooks) -> np.ndarray:
    """table[m, k] = r_q . c_mk, an (M, K) array; O(MKD) whatever the database size."""
    C = np.asarray(codebooks, dtype=np.float64)
    r_q = np.asarray(r_q, dtype=np.float64)
    if r_q.shape != (C.shape[2],):
        raise ValidationError(f"query of shape {r_q.shape} for codewords of length {C.shape[2]}")
    return C @ r_q


def aqd_score(table, code) -> float:
    return float(sum(table[m, c] for m, c in enumerate(code)))


def aqd_scores(table, codes) -> np.ndarray:
    return kernels.aqd_scan(np.ascontiguousarray(table, dtype=np.float64),
                            np.ascontiguousarray(codes, dtype=np.int64))


def rank(scores, ids, topN: int):
    """Descending score, ties to the smaller id."""
    order = np.lexsort((ids, -scores))[:topN]
    return [(int(ids[i]), float(scores[i])) for i in order]


def search(r_q, index: RetrievalIndex, topN: int):
    """Top ``topN`` (id, score) pairs by maximum inner product."""
    if topN < 1:
        raise ValidationError(f"topN must be >= 1, got {topN}")
    if len(index) == 0:
        return []
    table = build_lookup_table(r_q, index.codebooks)
    return rank(aqd_scores(table, index.codes), index.ids, topN)


def search_batch(Rq, index: RetrievalIndex, topN: int, query_ids=None) -> dict:
    Rq = np.atleast_2d(Rq)
    query_ids = range(len(Rq)) if query_ids is None else query_ids
    return {int(q): search(r, index, topN) for q, r in zip(query_ids, Rq)}
