import numpy as np
import pytest

from hsq import kernels
from hsq.config import TrainConfig
from hsq.embed import TrainingSet, TransformLayer
from hsq.errors import NumericalError, ValidationError
from hsq.quantizer import (
    PerturbationSchedule,
    code_length_bits,
    encoding_cost,
    icm_encode,
    init_codebooks,
    kmeans,
    normal_equations,
    perturb_codebooks,
    quantization_cosine_loss,
    quantization_objective,
    reconstruct,
    update_codebooks,
)
from hsq.tags import build_semantic_sphere
from hsq.train import alternate_optimize, fit_quantizer

from oracles import dense_codebooks, exhaustive_min, icm_instance, scalar_cost


def _psd(D, rng):
    A = rng.standard_normal((D, D))
    return A @ A.T


def test_code_length():
    assert [code_length_bits(m, 256) for m in (1, 2, 3, 4)] == [8, 16, 24, 32]


# -- k-means -----------------------------------------------------------------


def test_kmeans_k_equals_n_is_permutation():
    X = np.random.default_rng(0).standard_normal((7, 3))
    C = kmeans(X, 7, seed=1)
    assert sorted(map(tuple, C)) == sorted(map(tuple, X))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((40, 2)) * 0.1 + [10, 0]
    b = rng.standard_normal((60, 2)) * 0.1 + [-10, 5]
    C = kmeans(np.vstack([a, b]), 2, seed=3)
    C = C[np.argsort(C[:, 0])]
    assert np.allclose(C, [b.mean(0), a.mean(0)], atol=1e-6, rtol=0)


def test_kmeans_deterministic_and_validates():
    X = np.random.default_rng(2).standard_normal((50, 4))
    assert np.array_equal(kmeans(X, 5, seed=9), kmeans(X, 5, seed=9))
    with pytest.raises(ValidationError):
        kmeans(X[:3], 5)


def test_kmeans_duplicate_points():
    X = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 5, axis=0)
    C = kmeans(X, 3, seed=0)
    assert C.shape == (3, 2) and np.all(np.isfinite(C))


# -- initialisation ----------------------------------------------------------


def test_init_single_book_is_kmeans():
    R = np.random.default_rng(3).standard_normal((60, 5))
    assert np.array_equal(init_codebooks(R, 1, 8, seed=4)[0], kmeans(R, 8, seed=4))


def test_init_lattice_data_reconstructs_exactly():
    a = np.array([[5.0, 0, 0, 0], [-5.0, 0, 0, 0]])
    b = np.array([[0, 0.5, 0, 0], [0, -0.5, 0.2, 0]])
    R = np.array([x + y for x in a for y in b] * 5)
    C = init_codebooks(R, 2, 2, seed=0)
    B = icm_encode(R, C, np.eye(4))
    assert quantization_objective(R, B, C, np.eye(4)) < 1e-20


def test_init_beats_random_samples():
    rng = np.random.default_rng(5)
    R = rng.standard_normal((300, 8))
    sigma = np.eye(8)
    C = init_codebooks(R, 2, 8, seed=0)
    rand = R[rng.choice(300, 16, replace=False)].reshape(2, 8, 8) / 2
    ours = quantization_objective(R, icm_encode(R, C, sigma), C, sigma)
    theirs = quantization_objective(R, icm_encode(R, rand, sigma), rand, sigma)
    assert ours <= theirs


# -- encoding ----------------------------------------------------------------


def test_cost_perfect_identity_and_oracle():
    rng = np.random.default_rng(6)
    C = rng.standard_normal((3, 4, 5))
    code = np.array([1, 0, 3])
    r = reconstruct(C, code[None])[0]
    sigma = _psd(5, rng)
    assert encoding_cost(r, code, C, sigma) == pytest.approx(0.0, abs=1e-12)
    r2 = rng.standard_normal(5)
    assert encoding_cost(r2, code, C, np.eye(5)) == pytest.approx(np.sum((r2 - r) ** 2))
    assert encoding_cost(r2, code, C, sigma) == pytest.approx(scalar_cost(r2, code, C, sigma), abs=1e-9)


def test_icm_single_book_nearest():
    rng = np.random.default_rng(7)
    C = rng.standard_normal((1, 10, 4))
    R = rng.standard_normal((30, 4))
    want = np.argmin(((R[:, None, :] - C[0][None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(icm_encode(R, C, np.eye(4))[:, 0], want)


def test_icm_vs_exhaustive():
    hits = 0
    for seed in range(100):
        r, C, sigma = icm_instance(seed)
        code, trace = icm_encode(r, C, sigma, return_trace=True)
        cost = scalar_cost(r, code, C, sigma)
        best = exhaustive_min(r, C, sigma)
        assert cost >= best - 1e-9
        assert np.all(np.diff(trace) <= 1e-9)
        assert trace[-1] == pytest.approx(cost, rel=1e-9, abs=1e-9)
        hits += abs(cost - best) <= 1e-9 * max(1.0, best)
    assert hits >= 80


def test_icm_fixed_point():
    rng = np.random.default_rng(8)
    C = rng.standard_normal((3, 8, 6))
    R = rng.standard_normal((50, 6))
    sigma = _psd(6, rng)
    B = icm_encode(R, C, sigma, sweeps=20)
    assert np.array_equal(icm_encode(R, C, sigma, sweeps=2, init=B), B)


def test_icm_batching_invariant_and_validation():
    rng = np.random.default_rng(9)
    C = rng.standard_normal((2, 5, 3))
    R = rng.standard_normal((23, 3))
    assert np.array_equal(icm_encode(R, C, np.eye(3), batch=4), icm_encode(R, C, np.eye(3)))
    with pytest.raises(ValidationError):
        icm_encode(R, C, np.eye(3), sweeps=0)
    with pytest.raises(ValidationError):
        icm_encode(R, C, np.eye(3), init=np.zeros((2, 2), dtype=int))


# -- perturbation ------------------------------------------------------------


def test_temperature_schedule():
    s = PerturbationSchedule(4, np.ones(2))
    assert [s.temperature(i) for i in range(5)] == pytest.approx([1, np.sqrt(0.75), np.sqrt(0.5), 0.5, 0])
    with pytest.raises(ValidationError):
        s.temperature(5)


def test_last_iteration_no_noise():
    C = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert np.array_equal(perturb_codebooks(C, 5, PerturbationSchedule(5, np.ones(4))), C)


def test_noise_variance_monte_carlo():
    M, K, D = 2, 500, 3
    var = np.array([0.5, 2.0, 0.01])
    C = np.zeros((M, K, D))
    for i, I in ((0, 4), (1, 4), (3, 4)):
        draws = np.concatenate([
            perturb_codebooks(C, i, PerturbationSchedule(I, var, seed=s)).reshape(-1, D) for s in range(10)
        ])
        assert draws.shape[0] == 10 ** 4
        T = np.sqrt(1 - i / I)
        assert np.allclose(draws.var(axis=0), (T / M) ** 2 * var, rtol=0.05)


def test_perturbation_seeded():
    C = np.zeros((2, 3, 4))
    s = PerturbationSchedule(3, np.ones(4), seed=11)
    assert np.array_equal(perturb_codebooks(C, 1, s), perturb_codebooks(C, 1, s))
    assert not np.array_equal(perturb_codebooks(C, 1, s), perturb_codebooks(C, 0, s))


def test_schedule_uses_sample_variance():
    R = np.random.default_rng(1).standard_normal((20, 3))
    assert np.allclose(PerturbationSchedule.from_embeddings(R, 5).variance, R.var(0, ddof=1))


# -- closed-form codebooks ---------------------------------------------------


def test_single_book_codewords_are_means():
    rng = np.random.default_rng(2)
    R = rng.standard_normal((40, 3))
    codes = rng.integers(0, 5, (40, 1))
    codes[:5, 0] = np.arange(5)
    C = update_codebooks(R, codes, 5)
    for k in range(5):
        assert np.allclose(C[0, k], R[codes[:, 0] == k].mean(0), rtol=1e-5, atol=1e-5)


def test_histogram_gram_equals_naive_product():
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 4, (50, 3))
    R = rng.standard_normal((50, 6))
    BBt, BR = normal_equations(R, codes, 4)
    _, B = dense_codebooks(R, codes, 4)
    assert np.array_equal(BBt, (B.T @ B).astype(BBt.dtype))
    assert np.allclose(BR, B.T @ R, atol=1e-12)


def test_update_matches_dense_least_squares():
    rng = np.random.default_rng(4)
    R = rng.standard_normal((50, 8))
    codes = rng.integers(0, 4, (50, 2))
    sigma = np.eye(8)
    C = update_codebooks(R, codes, 4)
    oracle, _ = dense_codebooks(R, codes, 4)
    ours = quantization_objective(R, codes, C, sigma)
    best = quantization_objective(R, codes, oracle, sigma)
    assert abs(ours - best) <= 1e-8 * best


def test_update_is_stationary():
    rng = np.random.default_rng(5)
    R = rng.standard_normal((80, 4))
    codes = rng.integers(0, 3, (80, 2))
    C = update_codebooks(R, codes, 3)
    base = quantization_objective(R, codes, C, np.eye(4))
    for _ in range(20):
        dC = rng.standard_normal(C.shape) * 1e-3
        assert quantization_objective(R, codes, C + dC, np.eye(4)) > base


def test_sigma_weighted_solution_agrees():
    rng = np.random.default_rng(6)
    R = rng.standard_normal((60, 5))
    codes = rng.integers(0, 4, (60, 2))
    sigma = _psd(5, rng) + np.eye(5)
    a = update_codebooks(R, codes, 4)
    b = update_codebooks(R, codes, 4, sigma=sigma)
    assert np.allclose(a, b, atol=1e-8, rtol=0)


def test_update_rejects_empty():
    with pytest.raises(NumericalError):
        update_codebooks(np.zeros((0, 3)), np.zeros((0, 2), dtype=int), 4)


# -- cosine quantization loss ----------------------------------------------


def test_q_loss_scale_invariant():
    rng = np.random.default_rng(7)
    S = rng.standard_normal((5, 4))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    r = rng.standard_normal(4)
    r /= np.linalg.norm(r)
    for c in (0.1, 1.0, 7.0):
        assert quantization_cosine_loss(S, r, c * r) == pytest.approx(0.0, abs=1e-24)


def test_q_loss_orthogonal_substitution_and_oracle():
    s = np.array([[1.0, 0.0]])
    assert quantization_cosine_loss(s, np.array([0.0, 1.0]), np.array([1.0, 0.0])) == 1.0
    rng = np.random.default_rng(8)
    S = rng.standard_normal((6, 3))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    r = rng.standard_normal(3)
    r /= np.linalg.norm(r)
    r_hat = rng.standard_normal(3)
    want = 0.0
    for si in S:
        want += (si @ r - si @ r_hat / np.sqrt(r_hat @ r_hat)) ** 2
    assert quantization_cosine_loss(S, r, r_hat) == pytest.approx(want, abs=1e-9)


# -- alternation -------------------------------------------------------------


def _setup(seed=0, N=120, D=6, V=10, n_tags=8):
    rng = np.random.default_rng(seed)
    tags = rng.standard_normal((n_tags, D))
    sets = {i: [int(rng.integers(n_tags))] for i in range(N)}
    sphere = build_semantic_sphere(tags, sets)
    X = rng.standard_normal((N, V))
    data = TrainingSet(X, np.arange(N), [np.asarray(sets[i]) for i in range(N)])
    return data, sphere


def test_one_iteration_degenerates_to_encode_and_update():
    data, sphere = _setup()
    layer = TransformLayer.init(6, 10, seed=1)
    cfg = TrainConfig(learning_rate=0.0, perturb=False, iterations=1, M=2, K=4)
    res = alternate_optimize(data, layer, sphere, cfg)
    R = layer.forward_batch(data.features)
    C0 = init_codebooks(R, 2, 4, cfg.seed, cfg.kmeans_iters)
    B = icm_encode(R, C0, sphere.sigma, cfg.icm_sweeps)
    B = icm_encode(R, C0, sphere.sigma, cfg.icm_sweeps, init=B)
    C = update_codebooks(R, B, 4)
    assert np.array_equal(res.codebooks, C)
    assert np.array_equal(res.codes, icm_encode(R, C, sphere.sigma, cfg.icm_sweeps, init=B))


def test_alternation_monotone_without_noise():
    data, sphere = _setup(1)
    cfg = TrainConfig(learning_rate=0.0, perturb=False, iterations=10, M=3, K=4)
    res = alternate_optimize(data, TransformLayer.init(6, 10, seed=2), sphere, cfg)
    q = [h["quantization_error"] for h in res.history]
    assert all(b <= a + 1e-8 * q[0] for a, b in zip(q, q[1:])), q


def test_alternation_deterministic_and_staged_phases():
    data, sphere = _setup(2)
    cfg = TrainConfig(learning_rate=1e-2, iterations=3, M=2, K=4, batch_size=32)
    a = alternate_optimize(data, TransformLayer.init(6, 10, seed=3), sphere, cfg)
    b = alternate_optimize(data, TransformLayer.init(6, 10, seed=3), sphere, cfg)
    assert np.array_equal(a.codes, b.codes) and np.array_equal(a.layer.W, b.layer.W)
    assert [p["phase"] for p in a.phases] == ["joint"]
    cfg.staged_mode = True
    s = alternate_optimize(data, TransformLayer.init(6, 10, seed=3), sphere, cfg)
    assert [p["phase"] for p in s.phases] == ["embedding", "quantization"]


def test_fit_quantizer_improves_on_init_without_noise():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((200, 6))
    R /= np.linalg.norm(R, axis=1, keepdims=True)
    sigma = np.eye(6)
    cfg = TrainConfig(M=2, K=8, iterations=8, perturb=False)
    C, B, hist = fit_quantizer(R, sigma, cfg)
    C0 = init_codebooks(R, 2, 8, 0, cfg.kmeans_iters)
    assert quantization_objective(R, B, C, sigma) <= quantization_objective(R, icm_encode(R, C0, sigma), C0, sigma)
    assert len(hist) == 8
    q = [h["quantization_error"] for h in hist]
    assert all(b <= a + 1e-8 * q[0] for a, b in zip(q, q[1:]))


def test_fit_quantizer_with_noise_is_seeded():
    R = np.random.default_rng(4).standard_normal((100, 4))
    cfg = TrainConfig(M=2, K=4, iterations=4)
    a, b = fit_quantizer(R, np.eye(4), cfg), fit_quantizer(R, np.eye(4), cfg)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0], b[0])


def test_backend_recorded():
    assert kernels.BACKEND in ("numba", "numpy")
