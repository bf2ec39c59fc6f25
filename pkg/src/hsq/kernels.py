"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public names at the bottom of the module are bound to one flavour at
import time (see :mod:`hsq._jit`). Both flavours stay importable under their
private names so tests and the benchmark can compare them directly.
"""

import numpy as np

from ._jit import USE_NUMBA, njit, prange

# ---------------------------------------------------------------------------
# ICM encoding
#
# unary[n, m, k] = r_n^T Sigma c_mk
# gram[m, k, m', k'] = c_mk^T Sigma c_m'k'
# energy(b) = -2 sum_m unary[n, m, b_m] + sum_{m, m'} gram[m, b_m, m', b_m']
# (the r^T Sigma r constant is added by the caller)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _energy_numba(u, gram, b):
    M = b.shape[0]
    e = 0.0
    for m in range(M):
        e -= 2.0 * u[m, b[m]]
        for mm in range(M):
            e += gram[m, b[m], mm, b[mm]]
    return e


@njit(cache=True, parallel=True)
def _icm_numba(unary, gram, codes, sweeps, greedy, trace):
    N, M, K = unary.shape
    record = trace.shape[0] == N and trace.shape[1] > 0
    for n in prange(N):
        b = codes[n]
        u = unary[n]
        if greedy:
            for m in range(M):
                best = np.inf
                arg = 0
                for k in range(K):
                    c = gram[m, k, m, k] - 2.0 * u[m, k]
                    for mm in range(m):
                        c += 2.0 * gram[m, k, mm, b[mm]]
                    if c < best:
                        best = c
                        arg = k
                b[m] = arg
        if record:
            trace[n, 0] = _energy_numba(u, gram, b)
        for s in range(sweeps):
            for m in range(M):
                best = np.inf
                arg = 0
                for k in range(K):
                    c = gram[m, k, m, k] - 2.0 * u[m, k]
                    for mm in range(M):
                        if mm != m:
                            c += 2.0 * gram[m, k, mm, b[mm]]
                    if c < best:
                        best = c
                        arg = k
                b[m] = arg
                if record:
                    trace[n, 1 + s * M + m] = _energy_numba(u, gram, b)
    return codes


def _energy_numpy(unary, gram, codes):
    N, M, _ = unary.shape
    rows = np.arange(N)
    e = np.zeros(N)
    for m in range(M):
        e -= 2.0 * unary[rows, m, codes[:, m]]
        for mm in range(M):
            e += gram[m, codes[:, m], mm, codes[:, mm]]
    return e


def _icm_numpy(unary, gram, codes, sweeps, greedy, trace):
    N, M, K = unary.shape
    record = trace.shape[0] == N and trace.shape[1] > 0
    ks = np.arange(K)
    if greedy:
        for m in range(M):
            cost = gram[m, ks, m, ks][None, :] - 2.0 * unary[:, m, :]
            for mm in range(m):
                cost += 2.0 * gram[m, :, mm, codes[:, mm]]
            codes[:, m] = np.argmin(cost, axis=1)
    if record:
        trace[:, 0] = _energy_numpy(unary, gram, codes)
    for s in range(sweeps):
        for m in range(M):
            cost = gram[m, ks, m, ks][None, :] - 2.0 * unary[:, m, :]
            for mm in range(M):
                if mm != m:
                    cost += 2.0 * gram[m, :, mm, codes[:, mm]]
            codes[:, m] = np.argmin(cost, axis=1)
            if record:
                trace[:, 1 + s * M + m] = _energy_numpy(unary, gram, codes)
    return codes


# ---------------------------------------------------------------------------
# Normal-equation assembly from codes
# ---------------------------------------------------------------------------


@njit(cache=True)
def _code_gram_numba(codes, K):
    N, M = codes.shape
    out = np.zeros((M * K, M * K), dtype=np.int64)
    for n in range(N):
        for m in range(M):
            row = m * K + codes[n, m]
            for mm in range(M):
                out[row, mm * K + codes[n, mm]] += 1
    return out


def _code_gram_numpy(codes, K):
    N, M = codes.shape
    out = np.zeros((M * K, M * K), dtype=np.int64)
    for m in range(M):
        for mm in range(M):
            joint = np.bincount(codes[:, m].astype(np.int64) * K + codes[:, mm], minlength=K * K)
            out[m * K:(m + 1) * K, mm * K:(mm + 1) * K] = joint.reshape(K, K)
    return out


@njit(cache=True)
def _code_sums_numba(R, codes, K):
    N, D = R.shape
    M = codes.shape[1]
    out = np.zeros((M, K, D))
    for n in range(N):
        for m in range(M):
            k = codes[n, m]
            for d in range(D):
                out[m, k, d] += R[n, d]
    return out


def _code_sums_numpy(R, codes, K):
    N, D = R.shape
    M = codes.shape[1]
    out = np.zeros((M, K, D))
    for m in range(M):
        np.add.at(out[m], codes[:, m], R)
    return out


# ---------------------------------------------------------------------------
# Lookup-table scan
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _aqd_scan_numba(table, codes):
    N, M = codes.shape
    out = np.empty(N)
    for n in prange(N):
        s = 0.0
        for m in range(M):
            s += table[m, codes[n, m]]
        out[n] = s
    return out


def _aqd_scan_numpy(table, codes):
    N, M = codes.shape
    out = np.zeros(N)
    for m in range(M):
        out += table[m, codes[:, m]]
    return out


# ---------------------------------------------------------------------------
# Single-pass density merge
# ---------------------------------------------------------------------------


@njit(cache=True)
def _merge_pass_numba(X, eps):
    n, D = X.shape
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for i in range(n):
        if labels[i] >= 0:
            continue
        labels[i] = nxt
        for j in range(i + 1, n):
            if labels[j] >= 0:
                continue
            acc = 0.0
            for d in range(D):
                t = X[i, d] - X[j, d]
                acc += t * t
            if np.sqrt(acc) < eps:
                labels[j] = nxt
        nxt += 1
    return labels


def _merge_pass_numpy(X, eps):
    n = X.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for i in range(n):
        if labels[i] >= 0:
            continue
        labels[i] = nxt
        rest = np.flatnonzero(labels[i + 1:] < 0) + i + 1
        if rest.size:
            diff = X[rest] - X[i]
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            labels[rest[dist < eps]] = nxt
        nxt += 1
    return labels


if USE_NUMBA:
    icm_kernel = _icm_numba
    code_gram = _code_gram_numba
    code_sums = _code_sums_numba
    aqd_scan = _aqd_scan_numba
    merge_pass = _merge_pass_numba
else:
    icm_kernel = _icm_numpy
    code_gram = _code_gram_numpy
    code_sums = _code_sums_numpy
    aqd_scan = _aqd_scan_numpy
    merge_pass = _merge_pass_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
