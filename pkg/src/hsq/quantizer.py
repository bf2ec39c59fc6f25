"""Additive quantizer on the semantic hypersphere.

Codebooks are ``(M, K, D)`` arrays, codes are ``(N, M)`` integer arrays with
entries in ``[0, K)``. Encoding minimises the Sigma_S-weighted residual
``(r - sum_m c_{m,b_m})^T Sigma_S (r - sum_m c_{m,b_m})`` by ICM; codebooks are
refit in closed form from code histograms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import kernels
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)


def code_length_bits(M: int, K: int) -> int:
    """B = M * log2(K) bits per point."""
    return M * max(1, math.ceil(math.log2(K)))


# -- k-means -----------------------------------------------------------------


def _sqdist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X, K, rng):
    N = X.shape[0]
    chosen = np.zeros(N, dtype=bool)
    first = int(rng.integers(N))
    chosen[first] = True
    idx = [first]
    d2 = ((X - X[first]) ** 2).sum(1)
    for _ in range(1, K):
        tot = d2.sum()
        if tot > 0:
            j = int(rng.choice(N, p=d2 / tot))
        else:  # only duplicates of chosen points remain
            j = int(rng.choice(np.flatnonzero(~chosen)))
        chosen[j] = True
        idx.append(j)
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(1))
    return X[idx].copy()


def kmeans(points, K: int, iters: int = 25, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters are re-seeded with the points farthest from their centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    N = X.shape[0]
    if N < K:
        raise ValidationError(f"k-means needs at least K={K} points, got {N}")
    rng = np.random.default_rng(seed)
    C = _plusplus(X, K, rng)
    assign = None
    for _ in range(iters):
        dist = _sqdist(X, C)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, new, X)
        live = counts > 0
        C[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        if empty.size:
            far = np.argsort(-dist[np.arange(N), new], kind="stable")
            for e, j in zip(empty, far):
                C[e] = X[j]
        elif assign is not None and np.array_equal(new, assign):
            break
        assign = new
    return C


def init_codebooks(R, M: int, K: int, seed: int = 0, iters: int = 25) -> np.ndarray:
    """Residual chaining: book m is k-means on what books 0..m-1 leave over."""
    resid = np.array(R, dtype=np.float64)
    C = np.empty((M, K, resid.shape[1]))
    for m in range(M):
        C[m] = kmeans(resid, K, iters, seed + m)
        resid -= C[m, np.argmin(_sqdist(resid, C[m]), axis=1)]
    return C


def reconstruct(C, codes) -> np.ndarray:
    codes = np.atleast_2d(codes)
    out = np.zeros((codes.shape[0], C.shape[2]))
    for m in range(C.shape[0]):
        out += C[m, codes[:, m]]
    return out


# -- encoding ----------------------------------------------------------------


def encoding_cost(r, code, C, sigma) -> float:
    e = np.asarray(r, dtype=np.float64) - reconstruct(C, np.asarray(code)[None, :])[0]
    return float(e @ sigma @ e)


def encoding_costs(R, codes, C, sigma) -> np.ndarray:
    E = np.asarray(R, dtype=np.float64) - reconstruct(C, codes)
    return np.einsum("nd,de,ne->n", E, sigma, E)


def quantization_objective(R, codes, C, sigma) -> float:
    """tr((R - CB)^T Sigma (R - CB)) with points as rows."""
    return float(encoding_costs(R, codes, C, sigma).sum())


def icm_tables(R, C, sigma):
    SC = C @ sigma  # (M, K, D), sigma symmetric
    unary = np.einsum("nd,mkd->nmk", R, SC)
    gram = np.einsum("mkd,jld->mkjl", SC, C)
    return unary, gram


def icm_encode(R, C, sigma, sweeps: int = 3, init=None, batch: int = 4096,
               return_trace: bool = False):
    """Encode rows of ``R`` by iterated conditional modes.

    Without ``init`` the codes are seeded greedily (book m chosen given books
    0..m-1) before the ``sweeps`` full passes. Each update takes the exact
    argmin over all K codewords of one book, ties to the smaller index.

    With ``return_trace`` also returns the full cost after the starting code
    and after every single-book update, shape ``(N, 1 + sweeps * M)``.
    """
    if sweeps < 1:
        raise ValidationError(f"sweeps must be >= 1, got {sweeps}")
    single = np.ndim(R) == 1
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    C = np.ascontiguousarray(C, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    N = R.shape[0]
    M = C.shape[0]
    if init is None:
        codes = np.zeros((N, M), dtype=np.int64)
    else:
        codes = np.array(np.atleast_2d(init), dtype=np.int64)
        if codes.shape != (N, M):
            raise ValidationError(f"init codes have shape {codes.shape}, expected {(N, M)}")
    trace = np.zeros((N, 1 + sweeps * M) if return_trace else (0, 0))
    SC = C @ sigma
    gram = np.ascontiguousarray(np.einsum("mkd,jld->mkjl", SC, C))
    for lo in range(0, N, batch):
        hi = min(N, lo + batch)
        unary = np.ascontiguousarray(np.einsum("nd,mkd->nmk", R[lo:hi], SC))
        sub = np.ascontiguousarray(codes[lo:hi])
        tr = trace[lo:hi] if return_trace else trace
        kernels.icm_kernel(unary, gram, sub, sweeps, init is None, tr)
        codes[lo:hi] = sub
        if return_trace:
            trace[lo:hi] = tr
    if return_trace:
        trace += np.einsum("nd,de,ne->n", R, sigma, R)[:, None]
    out = codes[0] if single else codes
    return (out, trace[0] if single else trace) if return_trace else out


# -- stochastic relaxation ---------------------------------------------------


@dataclass
class PerturbationSchedule:
    """Temperature T(i) = sqrt(1 - i/I); noise ~ N(0, diag(variance))."""

    iterations: int
    variance: np.ndarray  # (D,) per-coordinate variance of the embeddings
    seed: int = 0

    def temperature(self, i: int) -> float:
        if not 0 <= i <= self.iterations:
            raise ValidationError(f"iteration {i} outside [0, {self.iterations}]")
        if self.iterations == 0:
            return 0.0
        return math.sqrt(max(0.0, 1.0 - i / self.iterations))

    @classmethod
    def from_embeddings(cls, R, iterations, seed=0):
        R = np.asarray(R, dtype=np.float64)
        var = R.var(axis=0, ddof=1) if R.shape[0] > 1 else np.zeros(R.shape[1])
        return cls(iterations, var, seed)


def perturb_codebooks(C, i: int, schedule: PerturbationSchedule) -> np.ndarray:
    """C + (T(i)/M) * eps with one seeded Gaussian stream per (i, m, k)."""
    C = np.asarray(C, dtype=np.float64)
    T = schedule.temperature(i)
    if T == 0.0:
        return C.copy()
    M, K, D = C.shape
    std = np.sqrt(schedule.variance)
    noise = np.empty_like(C)
    for m in range(M):
        for k in range(K):
            rng = np.random.default_rng([schedule.seed, i, m, k])
            noise[m, k] = rng.standard_normal(D)
    return C + (T / M) * noise * std


# -- closed-form codebook update ---------------------------------------------


def normal_equations(R, codes, K):
    """B B^T (exact integer counts) and B R, both assembled from codes."""
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    BBt = kernels.code_gram(codes, K)
    BR = kernels.code_sums(np.ascontiguousarray(R, dtype=np.float64), codes, K)
    return BBt, BR.reshape(codes.shape[1] * K, -1)


def update_codebooks(R, codes, K: int, sigma=None, ridge: float = 1e-6) -> np.ndarray:
    """Least-squares codebooks for fixed codes, with a small ridge.

    Solves ``(B B^T + delta I) C = B R`` where
    ``delta = ridge * trace(B B^T) / (M K)``. Passing ``sigma`` solves the
    Sigma-weighted normal equations instead (a Kronecker system of size
    M*K*D); for nonsingular sigma the answer is the same.
    """
    R = np.asarray(R, dtype=np.float64)
    codes = np.asarray(codes)
    N, M = codes.shape
    if N == 0:
        raise NumericalError("cannot fit codebooks to zero points")
    D = R.shape[1]
    BBt, BR = normal_equations(R, codes, K)
    MK = M * K
    delta = ridge * np.trace(BBt) / MK
    A = BBt.astype(np.float64) + delta * np.eye(MK)
    try:
        if sigma is None:
            C = linalg.solve(A, BR, assume_a="pos")
        else:
            sigma = np.asarray(sigma, dtype=np.float64)
            rhs = (BR @ sigma).ravel()
            C = linalg.solve(np.kron(A, sigma), rhs, assume_a="sym").reshape(MK, D)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"codebook normal equations are singular ({exc}); use a larger ridge or more data"
        ) from None
    if not np.all(np.isfinite(C)):
        raise NumericalError("codebook solve produced non-finite values; increase the ridge")
    resid = np.abs(BR - A @ C).max() if sigma is None else 0.0
    scale = max(np.abs(R).max(), 1e-300)
    if resid >= 1e-6 * scale:
        raise NumericalError(f"codebook solve residual {resid:.3e} too large; increase the ridge")
    return C.reshape(M, K, D)


# -- supervised cosine quantization loss ------------------------------------


def reconstruction_cosines(S, r_hat, cosine: bool = True):
    """``S r_hat / |r_hat|``; zero vector (and a flag) when ``r_hat`` is zero."""
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if not cosine:
        return S @ r_hat, False
    nrm = np.linalg.norm(r_hat)
    if nrm == 0.0:
        return np.zeros(S.shape[0]), True
    return (S @ r_hat) / nrm, False


def quantization_cosine_loss(S, r, r_hat, cosine: bool = True) -> float:
    """sum_i (cos(s_i, r) - cos(s_i, r_hat))^2 over every sphere row."""
    c_hat, flagged = reconstruction_cosines(S, r_hat, cosine)
    if flagged:
        log.warning("zero-norm reconstruction; its cosines are taken as 0")
    d = S @ np.asarray(r, dtype=np.float64) - c_hat
    return float(d @ d)
