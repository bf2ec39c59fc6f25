"""Desk-scale synthetic corpus: clustered tags, linear-image features, noisy
tag assignments and cluster labels, written in the standard file formats."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .errors import ValidationError


@dataclass
class SynthSpec:
    G: int = 4  # semantic clusters (= ground-truth labels)
    per_cluster: int = 50  # database images per cluster
    queries_per_cluster: int = 10
    D: int = 16  # tag embedding dims
    V: int = 32  # image feature dims
    noise: float = 0.1  # feature noise std, relative to the signal norm
    tags_per_cluster: int = 3
    max_tags_per_image: int = 2
    tag_jitter: float = 0.15  # spread of tags around their cluster prototype
    synonyms: bool = False  # add one near-duplicate partner for every tag
    synonym_jitter: float = 0.3
    tag_noise: float = 0.0  # chance an image also gets a tag from another cluster
    overlap: float = 0.0  # 0 = orthogonal prototypes, towards 1 = shared direction
    seed: int = 0

    def validate(self):
        for name in ("G", "per_cluster", "D", "V", "tags_per_cluster", "max_tags_per_image"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.queries_per_cluster < 0 or self.noise < 0 or self.tag_jitter < 0:
            raise ValidationError("queries_per_cluster, noise and tag_jitter must be >= 0")
        if not 0.0 <= self.tag_noise <= 1.0 or not 0.0 <= self.overlap < 1.0:
            raise ValidationError("tag_noise must lie in [0, 1] and overlap in [0, 1)")
        return self


@dataclass
class SynthData:
    tags: np.ndarray  # (n_tags, D)
    tag_names: list
    tag_cluster: np.ndarray
    features: np.ndarray  # (n_db, V), row = image id
    queries: np.ndarray  # (n_q, V)
    query_ids: list
    assignments: dict
    labels: dict
    prototypes: np.ndarray
    projection: np.ndarray  # (V, D) feature map


def _prototypes(G, D, overlap, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((max(D, G), max(D, G))))
    P = Q[:G, :D] if G <= D else rng.standard_normal((G, D))
    if overlap > 0:
        common = rng.standard_normal(D)
        common /= np.linalg.norm(common)
        P = (1.0 - overlap) * P + overlap * common
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def generate(spec: SynthSpec) -> SynthData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    G, D, V = spec.G, spec.D, spec.V
    P = _prototypes(G, D, spec.overlap, rng)

    tags, names, owner = [], [], []
    for g in range(G):
        for j in range(spec.tags_per_cluster):
            t = P[g] + spec.tag_jitter * rng.standard_normal(D) / np.sqrt(D)
            t /= np.linalg.norm(t)
            tags.append(t)
            names.append(f"c{g}_t{j}")
            owner.append(g)
            if spec.synonyms:
                s = t + spec.synonym_jitter * rng.standard_normal(D) / np.sqrt(D)
                tags.append(s / np.linalg.norm(s))
                names.append(f"c{g}_t{j}_syn")
                owner.append(g)
    tags = np.array(tags)
    owner = np.array(owner)
    by_cluster = [np.flatnonzero(owner == g) for g in range(G)]

    A = rng.standard_normal((V, D)) / np.sqrt(D)

    def feats(cluster):
        X = P[cluster] @ A.T
        if spec.noise > 0:
            scale = np.linalg.norm(X, axis=1, keepdims=True) / np.sqrt(V)
            X = X + spec.noise * scale * rng.standard_normal(X.shape)
        return X

    db_cluster = np.repeat(np.arange(G), spec.per_cluster)
    q_cluster = np.repeat(np.arange(G), spec.queries_per_cluster)
    features = feats(db_cluster)
    queries = feats(q_cluster) if len(q_cluster) else np.zeros((0, V))

    assignments = {}
    for i, g in enumerate(db_cluster):
        n = int(rng.integers(1, spec.max_tags_per_image + 1))
        pool = by_cluster[g]
        chosen = set(rng.choice(pool, size=min(n, len(pool)), replace=False).tolist())
        if spec.tag_noise > 0 and G > 1 and rng.random() < spec.tag_noise:
            other = int(rng.choice([h for h in range(G) if h != g]))
            chosen.add(int(rng.choice(by_cluster[other])))
        assignments[i] = sorted(int(t) for t in chosen)

    n_db = len(db_cluster)
    query_ids = list(range(n_db, n_db + len(q_cluster)))
    labels = {i: {int(g)} for i, g in enumerate(db_cluster)}
    labels.update({q: {int(g)} for q, g in zip(query_ids, q_cluster)})
    return SynthData(tags, names, owner, features, queries, query_ids, assignments, labels, P, A)


def write(data: SynthData, spec: SynthSpec, out_dir) -> dict:
    """Write the corpus; returns the paths written, keyed by role."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "tags": d / "tags.hsqv",
        "features": d / "features.hsqv",
        "queries": d / "queries.hsqv",
        "assignments": d / "assignments.jsonl",
        "labels": d / "labels.jsonl",
        "query_ids": d / "query_ids.json",
        "database_ids": d / "database_ids.json",
    }
    io.write_embeddings(paths["tags"], data.tags, data.tag_names)
    io.write_embeddings(paths["features"], data.features)
    io.write_embeddings(paths["queries"], data.queries)
    io.write_assignments(paths["assignments"], data.assignments)
    io.write_labels(paths["labels"], data.labels)
    io.write_json(paths["query_ids"], data.query_ids)
    io.write_json(paths["database_ids"], list(range(len(data.features))))
    io.write_json(d / "synth.json", asdict(spec))
    return {k: str(v) for k, v in paths.items()}
