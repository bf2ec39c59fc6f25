"""Tag correlation graph, semantic enhancement, synonym merging and the
semantic sphere that supervises both embedding and quantization.

Tag matrices are stored one tag per row, shape ``(n_tags, D)``; the column
convention ``T in R^{D x |T|}`` is simply the transpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import io, kernels
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class TagEmbeddingMatrix:
    vectors: np.ndarray  # (n_tags, D) float64
    vocab: dict  # tag id -> row index
    names: list | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValidationError(f"tag embeddings must be a non-empty 2-D matrix, got {self.vectors.shape}")
        if len(self.vocab) != self.vectors.shape[0]:
            raise ValidationError(f"vocab has {len(self.vocab)} entries for {self.vectors.shape[0]} tags")
        zero = np.flatnonzero(~np.any(self.vectors != 0, axis=1))
        if zero.size:
            raise ValidationError(f"zero-norm embedding at record {zero[0]}")

    @property
    def dims(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def from_array(cls, X, names=None):
        X = np.asarray(X, dtype=np.float64)
        return cls(X, {i: i for i in range(X.shape[0])}, names)


def _load_text(path):
    # word2vec text layout: "N D" header then "name v1 ... vD" per line
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: malformed header: file is empty")
    head = lines[0].split()
    try:
        N, D = int(head[0]), int(head[1])
        if len(head) != 2 or N <= 0 or D <= 0:
            raise ValueError
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed header {lines[0]!r}, expected 'N D'") from None
    if len(lines) - 1 != N:
        raise FormatError(f"{path}: header declares {N} records, found {len(lines) - 1}")
    X = np.empty((N, D))
    names = []
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) - 1 != D:
            raise FormatError(
                f"{path}: dimension mismatch at record {i} ({parts[0]!r}): "
                f"{len(parts) - 1} values, header declares D={D}"
            )
        names.append(parts[0])
        try:
            X[i] = [float(p) for p in parts[1:]]
        except ValueError:
            raise FormatError(f"{path}: non-numeric value in record {i} ({parts[0]!r})") from None
    return X, names


def load_tag_embeddings(path) -> TagEmbeddingMatrix:
    """Read tag vectors from an HSQV1 file or a word2vec-style text file."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
    if magic == io.MAGIC_EMBEDDINGS:
        X, names = io.read_embeddings(path)
    else:
        X, names = _load_text(path)
    X = np.asarray(X, dtype=np.float64)
    zero = np.flatnonzero(~np.any(X != 0, axis=1))
    if zero.size:
        label = f" ({names[zero[0]]!r})" if names and names[zero[0]] else ""
        raise FormatError(f"{path}: zero-norm embedding at record {zero[0]}{label}")
    return TagEmbeddingMatrix.from_array(X, names)


# -- correlation graph -------------------------------------------------------


@dataclass
class CorrelationGraph:
    neighbors: list  # row i -> sorted int array, always contains i
    k: int
    tau: float

    @property
    def size(self) -> int:
        return len(self.neighbors)

    def adjacency(self) -> np.ndarray:
        n = self.size
        A = np.zeros((n, n), dtype=np.int8)
        for i, nb in enumerate(self.neighbors):
            A[i, nb] = 1
        return A

    def row_normalized(self) -> sparse.csr_matrix:
        """Sparse A~ with 1/deg(i) on every neighbour of row i."""
        indptr = np.zeros(self.size + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(nb) for nb in self.neighbors])
        indices = np.concatenate(self.neighbors).astype(np.int64)
        data = np.concatenate([np.full(len(nb), 1.0 / len(nb)) for nb in self.neighbors])
        return sparse.csr_matrix((data, indices, indptr), shape=(self.size, self.size))


def _unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def build_correlation_graph(T: TagEmbeddingMatrix, k: int = 20, tau: float = 0.75,
                            block: int = 512) -> CorrelationGraph:
    """k-NN by cosine (self excluded, ties to the smaller index), kept when
    cosine >= tau, plus a self-loop on every row."""
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    if not -1.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [-1, 1], got {tau}")
    U = _unit_rows(T.vectors)
    n = U.shape[0]
    kk = min(k, n - 1)
    neighbors = []
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        sims = U[lo:hi] @ U.T
        rows = np.arange(hi - lo)
        sims[rows, rows + lo] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
        for r in rows:
            cand = order[r]
            keep = cand[sims[r, cand] >= tau]
            neighbors.append(np.union1d(keep, [lo + r]).astype(np.int64))
    return CorrelationGraph(neighbors, k, tau)


def enhance(T: TagEmbeddingMatrix, G: CorrelationGraph) -> np.ndarray:
    """Row i becomes the mean of its neighbours' embeddings (A~ T)."""
    if G.size != T.count:
        raise ValidationError(f"graph over {G.size} tags, matrix has {T.count}")
    return np.asarray(G.row_normalized() @ T.vectors)


# -- synonym merging ---------------------------------------------------------


@dataclass
class MergeRemap:
    old_to_new: np.ndarray  # (n_old,) int64
    embeddings: np.ndarray  # (n_new, D)
    members: list = field(default_factory=list)  # new index -> sorted old indices

    @property
    def count(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def identity(cls, X):
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        return cls(np.arange(n, dtype=np.int64), X.copy(), [np.array([i]) for i in range(n)])


def merge_sparse_tags(X, epsilon: float = 0.1) -> MergeRemap:
    """Single ascending pass: each unprocessed anchor absorbs every unprocessed
    point closer than ``epsilon`` (l2, strict) and all are replaced by their mean."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    labels = kernels.merge_pass(X, float(epsilon))
    order = np.argsort(labels, kind="stable")
    cuts = np.flatnonzero(np.diff(labels[order])) + 1
    members = np.split(order, cuts)
    emb = np.stack([X[g].mean(axis=0) for g in members])
    merged = sum(len(g) > 1 for g in members)
    if merged:
        log.info("merged %d tags into %d groups", X.shape[0] - len(members) + merged, merged)
    return MergeRemap(labels, emb, members)


def refresh_image_tag_sets(assignments: dict, remap: MergeRemap, vocab: dict | None = None):
    """Map every image's tag ids through vocab and remap, deduplicate.

    Returns ``(sets, excluded)``; ``excluded`` lists images left without tags.
    """
    sets, excluded = {}, []
    n_old = remap.old_to_new.shape[0]
    for image in sorted(assignments):
        new = set()
        for t in assignments[image]:
            col = vocab.get(t) if vocab is not None else (t if 0 <= t < n_old else None)
            if col is None or not 0 <= col < n_old:
                raise ValidationError(f"image {image}: unknown tag id {t}")
            new.add(int(remap.old_to_new[col]))
        sets[image] = tuple(sorted(new))
        if not new:
            excluded.append(image)
    if excluded:
        log.warning("%d images have no tags and are excluded from training", len(excluded))
    return sets, excluded


# -- semantic sphere ---------------------------------------------------------


@dataclass
class SemanticSphere:
    S: np.ndarray  # (n_tags, D), unit rows when normalized
    sigma: np.ndarray  # (D, D) = sum_i s_i s_i^T
    sets: dict  # image id -> sorted int array of tag rows (non-empty)
    excluded: list = field(default_factory=list)
    normalized: bool = True
    names: list | None = None

    @property
    def count(self) -> int:
        return self.S.shape[0]

    @property
    def dims(self) -> int:
        return self.S.shape[1]


def semantic_covariance(S) -> np.ndarray:
    sigma = S.T @ S
    return 0.5 * (sigma + sigma.T)


def build_semantic_sphere(merged, sets: dict, normalize: bool = True, names=None) -> SemanticSphere:
    X = np.asarray(merged.embeddings if isinstance(merged, MergeRemap) else merged, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"merged tag {zero[0]} has zero norm")
    S = X / norms[:, None] if normalize else X.copy()
    keep, excluded = {}, []
    for image, tags in sets.items():
        tags = np.unique(np.asarray(tags, dtype=np.int64))
        if tags.size == 0:
            excluded.append(image)
            continue
        if tags[0] < 0 or tags[-1] >= S.shape[0]:
            raise ValidationError(f"image {image}: tag index outside sphere of {S.shape[0]}")
        keep[image] = tags
    return SemanticSphere(S, semantic_covariance(S), keep, sorted(excluded), normalize, names)


def merged_names(names, remap: MergeRemap):
    if names is None:
        return None
    return ["|".join(str(names[i]) for i in g) for g in remap.members]


def build_sphere_from_tags(T: TagEmbeddingMatrix, assignments: dict, k: int = 20, tau: float = 0.75,
                           epsilon: float = 0.1, use_graph: bool = True, normalize: bool = True):
    """Graph -> enhancement -> merging -> refreshed sets -> sphere.

    ``use_graph=False`` skips the graph, enhancement and merging entirely.
    Returns ``(sphere, remap)``.
    """
    if use_graph:
        G = build_correlation_graph(T, k, tau)
        remap = merge_sparse_tags(enhance(T, G), epsilon)
    else:
        remap = MergeRemap.identity(T.vectors)
    sets, _ = refresh_image_tag_sets(assignments, remap, T.vocab)
    sphere = build_semantic_sphere(remap, sets, normalize, merged_names(T.names, remap))
    return sphere, remap


def save_sphere(directory, sphere: SemanticSphere, remap: MergeRemap | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_embeddings(d / "sphere.hsqv", sphere.S, sphere.names)
    io.write_assignments(d / "sets.jsonl", {k: v.tolist() for k, v in sphere.sets.items()})
    meta = {"normalized": sphere.normalized, "n_tags": sphere.count, "dims": sphere.dims,
            "excluded": [int(i) for i in sphere.excluded]}
    if remap is not None:
        meta["old_to_new"] = remap.old_to_new.tolist()
    io.write_json(d / "meta.json", meta)


def load_sphere(directory) -> SemanticSphere:
    d = Path(directory)
    S, names = io.read_embeddings(d / "sphere.hsqv")
    meta = io.read_json(d / "meta.json")
    S = S.astype(np.float64)
    if meta.get("normalized", True):
        S /= np.linalg.norm(S, axis=1, keepdims=True)
    sets = {k: np.asarray(sorted(v), dtype=np.int64) for k, v in io.read_assignments(d / "sets.jsonl").items()}
    return SemanticSphere(S, semantic_covariance(S), sets, list(meta.get("excluded", [])),
                          bool(meta.get("normalized", True)), names)
