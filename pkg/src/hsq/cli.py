"""Command line entry point: ``hsq <command> ...``.

Exit codes: 0 success, 1 validation / format error, 2 numerical failure.
Settings resolve as defaults < ``--config`` file < explicit flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

from . import __version__, pipeline
from ._jit import set_threads
from .config import PipelineConfig, from_mapping, read_config_file
from .errors import HSQError
from .synth import SynthSpec, generate, write

log = logging.getLogger("hsq")

# flags that map straight onto PipelineConfig fields (dest -> field)
_CFG_FLAGS = {
    "k": "k", "tau": "tau", "epsilon": "epsilon", "M": "M", "K": "K",
    "iters": "iterations", "iterations": "iterations", "seed": "seed",
    "gamma": "gamma", "lambda_": "lambda", "K_n": "K_n", "learning_rate": "learning_rate",
    "batch_size": "batch_size", "epochs": "epochs", "R": "R", "topN": "topN",
    "staged_mode": "staged_mode", "normalize_mode": "normalize_mode",
    "use_graph": "use_graph", "perturb": "perturb", "icm_sweeps": "icm_sweeps",
}


def _flag(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_config(p, *names):
    """Attach ``--config`` plus the listed hyperparameter flags (default None,
    so only flags actually given override the config file)."""
    p.add_argument("--config", help="flat TOML or JSON file with config keys")
    spec = {
        "k": (int, "graph neighbours"), "tau": (float, "graph cosine threshold"),
        "epsilon": (float, "merge radius"), "M": (int, "codebooks"), "K": (int, "codewords per codebook"),
        "iters": (int, "outer alternations"), "seed": (int, None), "gamma": (float, "margin exponent"),
        "lambda_": (float, "quantization loss weight"), "K_n": (int, "hard negatives per image"),
        "learning_rate": (float, None), "batch_size": (int, None), "epochs": (int, None),
        "R": (int, "MAP cutoff"), "topN": (int, "results per query"),
        "staged_mode": (_flag, None), "normalize_mode": (_flag, None),
        "use_graph": (_flag, "false disables enhancement and merging"), "perturb": (_flag, None),
        "icm_sweeps": (int, None),
    }
    for name in names:
        typ, help_ = spec[name]
        flag = "--lambda" if name == "lambda_" else "--" + (name if name == "K_n" else name.replace("_", "-"))
        p.add_argument(flag, dest=name, type=typ, default=None, help=help_, metavar=name.rstrip("_").upper())


def _resolve_config(args) -> PipelineConfig:
    data = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in fields(PipelineConfig)} | {"lambda"}
    for dest, key in _CFG_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None and key in known:
            data[key] = val
    return from_mapping(PipelineConfig, data)


def _threads(args):
    n = args.threads if args.threads is not None else os.environ.get("HSQ_THREADS")
    if n in (None, ""):
        return None
    try:
        n = int(n)
    except ValueError:
        raise HSQError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise HSQError(f"thread count must be >= 1, got {n}")
    return set_threads(n)


# -- commands -----------------------------------------------------------------

def cmd_build_sphere(args):
    cfg = _resolve_config(args)
    sphere = pipeline.build_sphere(args.embeddings, args.assignments, cfg, args.out)
    print(f"sphere: {sphere.count} tags, {len(sphere.sets)} images -> {args.out}")


def cmd_train(args):
    cfg = _resolve_config(args)
    res = pipeline.train(args.features, args.sphere, cfg, args.out)
    last = res.history[-1] if res.history else {}
    print(f"trained: objective {last.get('objective', float('nan')):.6g} -> {args.out}")


def cmd_quantize_train(args):
    cfg = _resolve_config(args)
    C, _ = pipeline.quantize_train(args.embeddings, args.sphere, cfg, args.out, args.checkpoint)
    print(f"codebooks {C.shape} -> {args.out}")


def cmd_quantize_encode(args):
    cfg = _resolve_config(args)
    index = pipeline.encode(args.embeddings, args.codebooks, args.sphere, args.out, cfg,
                            checkpoint=args.checkpoint, ids=args.ids)
    print(f"encoded {len(index.ids)} points -> {args.out}")


def cmd_search(args):
    results = pipeline.search(args.index, args.queries, args.topN, args.out, args.query_ids)
    print(f"{len(results)} queries -> {args.out}")


def cmd_eval(args):
    report = pipeline.evaluate_results(args.results, args.labels, args.R, args.out, args.database)
    print(f"MAP@{report.R} = {report.map:.4f} over {report.queries} queries -> {args.out}")


def cmd_synth(args):
    values = {f.name: getattr(args, f.name) for f in fields(SynthSpec)
              if getattr(args, f.name, None) is not None}
    spec = SynthSpec(**values)
    paths = write(generate(spec), spec, args.out)
    print(f"synthetic corpus -> {args.out} ({len(paths)} files)")


def cmd_pipeline(args):
    cfg = _resolve_config(args)
    report, manifest = pipeline.run_pipeline(
        args.data, cfg, args.out, tags=args.embeddings, features=args.features, queries=args.queries,
        assignments=args.assignments, labels=args.labels, query_ids=args.query_ids,
        database_ids=args.database)
    print(f"MAP@{report.R} = {report.map:.4f}; manifest {manifest['config_hash'][:12]} -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsq", description="Hyperspherical quantization for tag-supervised retrieval.")
    p.add_argument("--version", action="version", version=f"hsq {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap (env HSQ_THREADS)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    tags = sub.add_parser("tags", help="tag-side preprocessing")
    tsub = tags.add_subparsers(dest="tags_command", required=True)
    b = tsub.add_parser("build-sphere", help="graph enhancement, merging, semantic sphere")
    b.add_argument("--embeddings", required=True)
    b.add_argument("--assignments", required=True)
    b.add_argument("--out", required=True)
    _add_config(b, "k", "tau", "epsilon", "use_graph", "normalize_mode")
    b.set_defaults(func=cmd_build_sphere)

    t = sub.add_parser("train", help="joint embedding and quantizer training")
    t.add_argument("--features", required=True)
    t.add_argument("--sphere", required=True)
    t.add_argument("--out", required=True)
    _add_config(t, "M", "K", "iters", "seed", "gamma", "lambda_", "K_n", "learning_rate",
                "batch_size", "epochs", "staged_mode", "normalize_mode", "perturb", "icm_sweeps")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="quantizer only")
    qsub = q.add_subparsers(dest="quantize_command", required=True)
    qt = qsub.add_parser("train", help="learn codebooks for fixed embeddings")
    qe = qsub.add_parser("encode", help="encode a database into an index")
    for sp in (qt, qe):
        sp.add_argument("--embeddings", required=True, help="embeddings, or raw features with --checkpoint")
        sp.add_argument("--sphere", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--checkpoint", help="layer weights used to embed raw features")
    qe.add_argument("--codebooks", required=True)
    qe.add_argument("--ids", help="JSON list of database ids (default 0..N-1)")
    _add_config(qt, "M", "K", "iters", "seed", "normalize_mode", "perturb", "icm_sweeps")
    _add_config(qe, "K", "normalize_mode", "icm_sweeps")
    qt.set_defaults(func=cmd_quantize_train)
    qe.set_defaults(func=cmd_quantize_encode)

    s = sub.add_parser("search", help="AQD search")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--topN", type=int, default=5000)
    s.add_argument("--out", required=True)
    s.add_argument("--query-ids", help="JSON list of query ids (default 0..Q-1)")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="MAP@R, PR curve and P@N")
    e.add_argument("--results", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--R", type=int, default=5000)
    e.add_argument("--out", required=True)
    e.add_argument("--database", help="JSON list of database ids (default: labelled non-queries)")
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("synth", help="write a synthetic corpus")
    y.add_argument("--out", required=True)
    for f in fields(SynthSpec):
        typ = _flag if isinstance(f.default, bool) else type(f.default)
        y.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ, default=None)
    y.set_defaults(func=cmd_synth)

    pl = sub.add_parser("pipeline", help="build-sphere, train, encode, search, eval")
    pl.add_argument("--data", help="directory written by 'hsq synth'")
    pl.add_argument("--out", required=True)
    for name in ("embeddings", "features", "queries", "assignments", "labels", "query-ids", "database"):
        pl.add_argument("--" + name, default=None)
    _add_config(pl, *[n for n in _CFG_FLAGS if n != "iterations"])
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads(args)
        args.func(args)
    except HSQError as exc:
        print(f"hsq: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hsq: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
