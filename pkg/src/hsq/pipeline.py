"""Pipeline stages. Each stage reads its inputs from files and writes its
outputs to a directory, so the CLI commands and ``run_pipeline`` share one
code path."""

from __future__ import annotations

import logging
import platform
import shutil
from pathlib import Path

import numpy as np

from . import __version__, io, kernels
from .config import PipelineConfig, config_hash, to_dict
from .embed import TransformLayer, make_training_set
from .errors import HSQError, ValidationError
from .metrics import DEFAULT_NS, evaluate
from .retrieval import RetrievalIndex, search_batch
from .tags import build_sphere_from_tags, load_sphere, load_tag_embeddings, save_sphere
from .train import alternate_optimize, fit_quantizer

log = logging.getLogger(__name__)


class StageError(HSQError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.exit_code = getattr(exc, "exit_code", 1)


def _save_config(directory, cfg):
    io.write_json(Path(directory) / "config.json", to_dict(cfg))


def load_layer(checkpoint, config_dir=None):
    W, _, _ = io.read_checkpoint(checkpoint)
    normalize = True
    if config_dir is not None and (Path(config_dir) / "config.json").exists():
        normalize = bool(io.read_json(Path(config_dir) / "config.json").get("normalize_mode", True))
    return TransformLayer(W.astype(np.float64), normalize)


def build_sphere(embeddings, assignments, cfg: PipelineConfig, out_dir):
    T = load_tag_embeddings(embeddings)
    sphere, remap = build_sphere_from_tags(T, io.read_assignments(assignments), cfg.k, cfg.tau,
                                           cfg.epsilon, cfg.use_graph, cfg.normalize_mode)
    save_sphere(out_dir, sphere, remap)
    _save_config(out_dir, cfg)
    log.info("sphere: %d tags -> %d, %d training images, %d excluded",
             T.count, sphere.count, len(sphere.sets), len(sphere.excluded))
    return sphere


def train(features, sphere_dir, cfg: PipelineConfig, out_dir):
    """Joint training; writes checkpoint, codebooks, training codes and history."""
    X, _ = io.read_embeddings(features)
    sphere = load_sphere(sphere_dir)
    data = make_training_set(X, sphere)
    layer = TransformLayer.init(sphere.dims, X.shape[1], cfg.seed, cfg.normalize_mode)
    res = alternate_optimize(data, layer, sphere, cfg.train_config())
    out = Path(out_dir)
    io.write_checkpoint(out / "checkpoint.hsqw", res.layer.W, res.optimizer.m, res.optimizer.v)
    io.write_codebooks(out / "codebooks.hsqc", res.codebooks)
    io.write_codes(out / "codes.hsqb", res.codes, cfg.K)
    io.write_json(out / "train_ids.json", data.image_ids.tolist())
    io.write_json(out / "history.json", {"iterations": res.history, "phases": res.phases})
    _save_config(out, cfg)
    return res


def _embeddings_for(path, layer=None):
    X, _ = io.read_embeddings(path)
    X = X.astype(np.float64)
    if layer is not None and X.shape[1] == layer.W.shape[1]:
        return layer.forward_batch(X)
    return X


def quantize_train(embeddings, sphere_dir, cfg: PipelineConfig, out_dir, checkpoint=None):
    """Quantizer only, on fixed embeddings (or features pushed through ``checkpoint``)."""
    sphere = load_sphere(sphere_dir)
    layer = load_layer(checkpoint, Path(checkpoint).parent) if checkpoint else None
    R = _embeddings_for(embeddings, layer)
    if layer is None and cfg.normalize_mode:
        R = R / np.linalg.norm(R, axis=1, keepdims=True)
    if R.shape[1] != sphere.dims:
        raise ValidationError(f"embeddings have {R.shape[1]} dims, sphere has {sphere.dims}")
    C, B, history = fit_quantizer(R, sphere.sigma, cfg.train_config())
    out = Path(out_dir)
    io.write_codebooks(out / "codebooks.hsqc", C)
    io.write_codes(out / "codes.hsqb", B, cfg.K)
    io.write_json(out / "history.json", {"iterations": history})
    _save_config(out, cfg)
    return C, B


def encode(embeddings, codebooks, sphere_dir, out_dir, cfg: PipelineConfig,
           checkpoint=None, ids=None):
    """Encode a database into an index directory (codebooks, codes, ids)."""
    sphere = load_sphere(sphere_dir)
    C = io.read_codebooks(codebooks).astype(np.float64)
    layer = load_layer(checkpoint, Path(checkpoint).parent) if checkpoint else None
    R = _embeddings_for(embeddings, layer)
    if layer is None and cfg.normalize_mode:
        R = R / np.linalg.norm(R, axis=1, keepdims=True)
    if R.shape[1] != C.shape[2]:
        raise ValidationError(f"embeddings have {R.shape[1]} dims, codewords have {C.shape[2]}")
    ids = io.read_json(ids) if ids else None
    index = RetrievalIndex.build(C, R, sphere.sigma, ids, cfg.icm_sweeps)
    out = Path(out_dir)
    index.save(out)
    if checkpoint:
        shutil.copyfile(checkpoint, out / "checkpoint.hsqw")
    _save_config(out, cfg)
    return index


def search(index_dir, queries, topN, out_path, query_ids=None):
    """Queries are raw features when the index carries a checkpoint and the
    dimensions match its input; otherwise they are taken as embeddings."""
    d = Path(index_dir)
    index = RetrievalIndex.load(d)
    layer = load_layer(d / "checkpoint.hsqw", d) if (d / "checkpoint.hsqw").exists() else None
    Rq = _embeddings_for(queries, layer)
    if layer is None:
        Rq = Rq / np.maximum(np.linalg.norm(Rq, axis=1, keepdims=True), 1e-300)
    qids = io.read_json(query_ids) if query_ids else list(range(len(Rq)))
    if len(qids) != len(Rq):
        raise ValidationError(f"{len(qids)} query ids for {len(Rq)} queries")
    results = search_batch(Rq, index, topN, qids)
    io.write_results(out_path, results)
    return results


def evaluate_results(results_path, labels_path, R, out_path, database=None, ns=DEFAULT_NS):
    results = io.read_results(results_path)
    labels = io.read_labels(labels_path)
    db = io.read_json(database) if database else None
    report = evaluate(results, labels, R, ns, db)
    io.write_json(out_path, report.to_dict())
    return report


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except HSQError as exc:
        raise StageError(name, exc) from exc


def run_pipeline(data_dir, cfg: PipelineConfig, out_dir, tags=None, features=None, queries=None,
                 assignments=None, labels=None, query_ids=None, database_ids=None):
    """build-sphere -> train -> encode -> search -> eval, plus a manifest.

    Input paths default to the file names ``hsq synth`` writes in ``data_dir``.
    """
    d = Path(data_dir) if data_dir else None

    def pick(given, name):
        if given:
            return Path(given)
        if d is None:
            raise ValidationError(f"missing input {name!r}")
        return d / name

    tags = pick(tags, "tags.hsqv")
    features = pick(features, "features.hsqv")
    queries = pick(queries, "queries.hsqv")
    assignments = pick(assignments, "assignments.jsonl")
    labels = pick(labels, "labels.jsonl")
    query_ids = query_ids or (d / "query_ids.json" if d and (d / "query_ids.json").exists() else None)
    database_ids = database_ids or (d / "database_ids.json" if d and (d / "database_ids.json").exists() else None)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_config(out, cfg)
    _stage("build-sphere", build_sphere, tags, assignments, cfg, out / "sphere")
    res = _stage("train", train, features, out / "sphere", cfg, out / "model")
    _stage("encode", encode, features, out / "model" / "codebooks.hsqc", out / "sphere", out / "index",
           cfg, checkpoint=out / "model" / "checkpoint.hsqw", ids=database_ids)
    _stage("search", search, out / "index", queries, cfg.topN, out / "results.jsonl", query_ids)
    report = _stage("eval", evaluate_results, out / "results.jsonl", labels, cfg.R,
                    out / "report.json", database_ids)
    manifest = {
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seeds": {"seed": cfg.seed},
        "phases": res.phases,
        "stages": ["build-sphere", "train", "encode", "search", "eval"],
        "versions": {"hsq": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "backend": kernels.BACKEND,
        "map": report.map,
    }
    io.write_json(out / "manifest.json", manifest)
    return report, manifest
