"""Transform layer onto the semantic hypersphere, the adaptive cosine margin
loss with hard-negative mining, analytic gradients and Adam updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .errors import NumericalError, ValidationError
from .quantizer import reconstruction_cosines

log = logging.getLogger(__name__)


class DegenerateInputError(NumericalError):
    """tanh activation collapsed to (near) zero norm."""


@dataclass
class TransformLayer:
    """r = tanh(W v) / |tanh(W v)|; W has shape (D, V)."""

    W: np.ndarray
    normalize: bool = True
    eps_norm: float = 1e-12

    @classmethod
    def init(cls, D: int, V: int, seed: int = 0, normalize: bool = True):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(V)
        return cls(rng.uniform(-bound, bound, size=(D, V)), normalize)

    @property
    def shape(self):
        return self.W.shape

    def activations(self, X):
        return np.tanh(np.atleast_2d(X) @ self.W.T)

    def forward_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.W.shape[1]:
            raise ValidationError(f"feature length {X.shape[1]} != layer input {self.W.shape[1]}")
        U = self.activations(X)
        if not self.normalize:
            return U
        nrm = np.linalg.norm(U, axis=1)
        dead = np.flatnonzero(nrm <= self.eps_norm)
        if dead.size:
            raise DegenerateInputError(
                f"activation norm {nrm[dead[0]]:.3e} <= {self.eps_norm:g} for input row {dead[0]}"
            )
        return U / nrm[:, None]

    def forward(self, v) -> np.ndarray:
        return self.forward_batch(np.asarray(v)[None, :])[0]


# -- loss pieces -------------------------------------------------------------


def hard_negatives(r, S, positives, K_n: int) -> np.ndarray:
    """The min(K_n, |S \\ S_n|) non-positive rows of S with the largest
    similarity to r; ties go to the smaller index."""
    n = S.shape[0]
    mask = np.ones(n, dtype=bool)
    mask[np.asarray(positives, dtype=np.int64)] = False
    cand = np.flatnonzero(mask)
    if cand.size == 0:
        log.debug("positive set covers every tag; no negatives")
        return cand
    sims = S[cand] @ r
    order = np.argsort(-sims, kind="stable")[:K_n]
    return cand[order]


def margin_matrix(S_pos, S_neg, gamma: float) -> np.ndarray:
    base = np.clip(1.0 - S_pos @ S_neg.T, 0.0, None)
    return 2.0 ** (1.0 - gamma) * base ** gamma


def adaptive_margin(s_pos, s_neg, gamma: float) -> float:
    """Delta = 2^(1-gamma) (1 - cos(s+, s-))^gamma."""
    return float(margin_matrix(np.atleast_2d(s_pos), np.atleast_2d(s_neg), gamma)[0, 0])


def _hinge(r, S_pos, S_neg, gamma):
    delta = margin_matrix(S_pos, S_neg, gamma)
    return delta - (S_pos @ r)[:, None] + (S_neg @ r)[None, :]


def margin_loss(r, S_pos, S_neg, gamma: float) -> float:
    """sum over (positive, negative) pairs of [Delta - cos(s+, r) + cos(s-, r)]_+."""
    S_pos, S_neg = np.atleast_2d(S_pos), np.atleast_2d(S_neg)
    if S_neg.shape[0] == 0 or S_pos.shape[0] == 0:
        return 0.0
    h = _hinge(np.asarray(r, dtype=np.float64), S_pos, S_neg, gamma)
    return float(h[h > 0].sum())


@dataclass
class GradientAccumulator:
    grad: np.ndarray  # dJ/dW, same shape as W
    margin: float = 0.0  # summed over the batch
    quantization: float = 0.0
    count: int = 0
    no_negatives: int = 0


def total_gradient(X, positives, layer: TransformLayer, S, config: TrainConfig,
                   R_hat=None, stage_one: bool = False) -> GradientAccumulator:
    """Gradient of sum_n (L_n + lambda Q_n) with respect to W.

    ``R_hat`` holds the (frozen) reconstructions of the batch; it is ignored
    when lambda is 0 or during stage one of staged training. The hinge
    subgradient is 0 at the kink.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lam = 0.0 if (stage_one or R_hat is None) else config.lambda_
    U = layer.activations(X)
    if layer.normalize:
        nu = np.linalg.norm(U, axis=1)
        if np.any(nu <= layer.eps_norm):
            raise DegenerateInputError("dead activation in batch")
        R = U / nu[:, None]
    else:
        R = U
    G_R = np.zeros_like(R)
    acc = GradientAccumulator(np.zeros_like(layer.W))
    for n in range(R.shape[0]):
        r = R[n]
        pos = np.asarray(positives[n], dtype=np.int64)
        neg = hard_negatives(r, S, pos, config.K_n)
        if neg.size == 0:
            acc.no_negatives += 1
        else:
            h = _hinge(r, S[pos], S[neg], config.gamma)
            act = h > 0
            acc.margin += float(h[act].sum())
            G_R[n] += act.sum(0) @ S[neg] - act.sum(1) @ S[pos]
        if lam > 0.0:
            c_hat, _ = reconstruction_cosines(S, R_hat[n], layer.normalize)
            d = S @ r - c_hat
            acc.quantization += float(d @ d)
            G_R[n] += lam * 2.0 * (d @ S)
    if acc.no_negatives:
        log.info("%d images in batch had no negative tags", acc.no_negatives)
    if layer.normalize:
        G_U = (G_R - R * np.einsum("nd,nd->n", R, G_R)[:, None]) / nu[:, None]
    else:
        G_U = G_R
    G_Z = G_U * (1.0 - U * U)
    acc.grad = G_Z.T @ X
    acc.count = R.shape[0]
    if not np.all(np.isfinite(acc.grad)):
        raise NumericalError(
            f"non-finite gradient (batch of {acc.count}, margin={acc.margin:.3g}, "
            f"quantization={acc.quantization:.3g})"
        )
    return acc


def objective_terms(X, positives, layer, S, config: TrainConfig, R_hat=None):
    """(sum_n L_n, sum_n Q_n) at the current parameters."""
    R = layer.forward_batch(X)
    L = Q = 0.0
    for n in range(R.shape[0]):
        pos = np.asarray(positives[n], dtype=np.int64)
        neg = hard_negatives(R[n], S, pos, config.K_n)
        L += margin_loss(R[n], S[pos], S[neg], config.gamma)
        if R_hat is not None:
            c_hat, _ = reconstruction_cosines(S, R_hat[n], layer.normalize)
            d = S @ R[n] - c_hat
            Q += float(d @ d)
    return L, Q


# -- optimisation ------------------------------------------------------------


class Adam:
    def __init__(self, shape, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, W, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        W -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return W


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, V), rows aligned with image_ids
    image_ids: np.ndarray
    positives: list

    def __len__(self):
        return len(self.image_ids)


def make_training_set(features, sphere) -> TrainingSet:
    """Images with a non-empty refreshed tag set; feature row = image id."""
    features = np.asarray(features, dtype=np.float64)
    ids = np.array(sorted(i for i in sphere.sets if 0 <= i < features.shape[0]), dtype=np.int64)
    missing = [i for i in sphere.sets if not 0 <= i < features.shape[0]]
    if missing:
        raise ValidationError(f"image {missing[0]} has tags but no feature row")
    return TrainingSet(features[ids], ids, [sphere.sets[i] for i in ids])


@dataclass
class LossReport:
    margin: float
    quantization: float
    total: float
    batches: int


def train_epoch(data: TrainingSet, layer: TransformLayer, S, opt: Adam, config: TrainConfig,
                R_hat=None, epoch: int = 0, stage_one: bool = False) -> LossReport:
    """One shuffled pass of mini-batch Adam over ``data``.

    Shuffling is keyed by (seed, epoch) so a run is reproducible. Losses in
    the report are per-image means taken before each update.
    """
    n = len(data)
    if n == 0:
        raise ValidationError("no training images")
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    margin = quant = 0.0
    batches = 0
    for lo in range(0, n, config.batch_size):
        idx = order[lo:lo + config.batch_size]
        acc = total_gradient(data.features[idx], [data.positives[i] for i in idx], layer, S,
                             config, None if R_hat is None else R_hat[idx], stage_one)
        opt.step(layer.W, acc.grad / len(idx))
        margin += acc.margin
        quant += acc.quantization
        batches += 1
    lam = 0.0 if stage_one or R_hat is None else config.lambda_
    rep = LossReport(margin / n, quant / n, (margin + lam * quant) / n, batches)
    if not np.isfinite(rep.total) or rep.total > 1e6:
        raise NumericalError(
            f"training diverged at epoch {epoch}: mean loss {rep.total:.3g} "
            f"(margin {rep.margin:.3g}, quantization {rep.quantization:.3g}, lr {config.learning_rate:g})"
        )
    return rep
