"""Alternating optimisation of the layer W, the codes B and the codebooks C."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .embed import Adam, TrainingSet, TransformLayer, objective_terms, train_epoch
from .quantizer import (
    PerturbationSchedule,
    icm_encode,
    init_codebooks,
    perturb_codebooks,
    quantization_objective,
    reconstruct,
    update_codebooks,
)

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    layer: TransformLayer
    codebooks: np.ndarray
    codes: np.ndarray  # rows aligned with the training set
    optimizer: Adam
    history: list = field(default_factory=list)
    phases: list = field(default_factory=list)


def alternate_optimize(data: TrainingSet, layer: TransformLayer, sphere, config: TrainConfig,
                       codebooks=None) -> TrainResult:
    """Run ``config.iterations`` rounds of {update W; update B; update C}.

    B is found by ICM against codebooks perturbed with the annealed noise
    schedule (unless ``config.perturb`` is off); C is refit in closed form.
    The returned codes come from a final clean ICM pass on unperturbed C.

    In staged mode W is first trained on the margin loss alone for
    ``iterations * epochs`` epochs, then frozen while B and C are learned.
    """
    S, sigma = sphere.S, sphere.sigma
    cfg = config
    opt = Adam(layer.W.shape, cfg.learning_rate)
    epoch = 0
    phases = []

    if cfg.staged_mode:
        reports = []
        for _ in range(cfg.iterations * cfg.epochs):
            reports.append(train_epoch(data, layer, S, opt, cfg, None, epoch, stage_one=True))
            epoch += 1
        phases.append({"phase": "embedding", "epochs": epoch,
                       "final_margin": reports[-1].margin if reports else None})

    R = layer.forward_batch(data.features)
    C = init_codebooks(R, cfg.M, cfg.K, cfg.seed, cfg.kmeans_iters) if codebooks is None \
        else np.array(codebooks, dtype=np.float64)
    B = icm_encode(R, C, sigma, cfg.icm_sweeps)
    history = []
    lam = cfg.lambda_
    for it in range(cfg.iterations):
        if not cfg.staged_mode:
            R_hat = reconstruct(C, B)
            for _ in range(cfg.epochs):
                train_epoch(data, layer, S, opt, cfg, R_hat, epoch)
                epoch += 1
            R = layer.forward_batch(data.features)
        if cfg.perturb:
            sched = PerturbationSchedule.from_embeddings(R, cfg.iterations, cfg.seed)
            C_used = perturb_codebooks(C, it, sched)
        else:
            C_used = C
        B = icm_encode(R, C_used, sigma, cfg.icm_sweeps, init=B)
        C = update_codebooks(R, B, cfg.K)
        L, Q = objective_terms(data.features, data.positives, layer, S, cfg, reconstruct(C, B))
        qerr = quantization_objective(R, B, C, sigma)
        history.append({"iteration": it, "margin": L, "quantization": Q,
                        "objective": L + lam * Q, "quantization_error": qerr})
        log.info("iter %d: objective %.6g (margin %.6g, Q %.6g), quantization error %.6g",
                 it, L + lam * Q, L, Q, qerr)
    if cfg.staged_mode:
        phases.append({"phase": "quantization", "iterations": cfg.iterations})
    else:
        phases.append({"phase": "joint", "iterations": cfg.iterations, "epochs": epoch})

    R = layer.forward_batch(data.features)
    B = icm_encode(R, C, sigma, cfg.icm_sweeps, init=B)
    return TrainResult(layer, C, B, opt, history, phases)


def fit_quantizer(R, sigma, config: TrainConfig, codebooks=None):
    """Codes and codebooks for fixed embeddings (no layer update).

    Returns ``(codebooks, codes, history)``; history holds the quantization
    error after every codebook refit.
    """
    cfg = config
    R = np.asarray(R, dtype=np.float64)
    C = init_codebooks(R, cfg.M, cfg.K, cfg.seed, cfg.kmeans_iters) if codebooks is None \
        else np.array(codebooks, dtype=np.float64)
    B = icm_encode(R, C, sigma, cfg.icm_sweeps)
    sched = PerturbationSchedule.from_embeddings(R, cfg.iterations, cfg.seed)
    history = []
    for it in range(cfg.iterations):
        C_used = perturb_codebooks(C, it, sched) if cfg.perturb else C
        B = icm_encode(R, C_used, sigma, cfg.icm_sweeps, init=B)
        C = update_codebooks(R, B, cfg.K)
        history.append({"iteration": it, "quantization_error": quantization_objective(R, B, C, sigma)})
    B = icm_encode(R, C, sigma, cfg.icm_sweeps, init=B)
    return C, B, history
