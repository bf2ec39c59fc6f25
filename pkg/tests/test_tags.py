import numpy as np
import pytest

from hsq import io
from hsq.errors import FormatError, ValidationError
from hsq.tags import (
    CorrelationGraph,
    MergeRemap,
    TagEmbeddingMatrix,
    build_correlation_graph,
    build_semantic_sphere,
    build_sphere_from_tags,
    enhance,
    load_sphere,
    load_tag_embeddings,
    merge_sparse_tags,
    refresh_image_tag_sets,
    save_sphere,
)


def _unit(X):
    X = np.asarray(X, dtype=float)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


# -- loading ---------------------------------------------------------------


def test_load_binary(tmp_path):
    X = np.arange(1, 13, dtype=float).reshape(3, 4)
    io.write_embeddings(tmp_path / "t.hsqv", X, ["a", "b", "c"])
    T = load_tag_embeddings(tmp_path / "t.hsqv")
    assert T.vectors.shape == (3, 4) and len(T.vocab) == 3
    assert T.names == ["a", "b", "c"]


def test_load_text(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("2 3\ncat 1 0 0\ndog 0 1 0.5\n")
    T = load_tag_embeddings(p)
    assert T.names == ["cat", "dog"]
    assert np.allclose(T.vectors[1], [0, 1, 0.5])


def test_text_dimension_mismatch(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("1 300\nx " + " ".join(["1"] * 299) + "\n")
    with pytest.raises(FormatError, match="dimension mismatch"):
        load_tag_embeddings(p)


def test_text_malformed_header(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("abc\n")
    with pytest.raises(FormatError, match="malformed header"):
        load_tag_embeddings(p)


def test_zero_row_rejected(tmp_path):
    io.write_embeddings(tmp_path / "t.hsqv", np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(FormatError, match="zero-norm embedding"):
        load_tag_embeddings(tmp_path / "t.hsqv")


# -- graph -----------------------------------------------------------------


def test_single_tag_self_loop():
    G = build_correlation_graph(TagEmbeddingMatrix.from_array([[0.3, 0.4]]), k=5, tau=0.9)
    assert G.adjacency().tolist() == [[1]]


def _three_tags():
    # cos(0,1)=0.9, cos(0,2)=0.5, cos(1,2)=0.5 via a Gram factorization
    gram = np.array([[1, 0.9, 0.5], [0.9, 1, 0.5], [0.5, 0.5, 1]])
    return np.linalg.cholesky(gram)


def test_three_tag_graph_matches_bruteforce():
    X = _three_tags()
    G = build_correlation_graph(TagEmbeddingMatrix.from_array(X), k=2, tau=0.75)
    cos = _unit(X) @ _unit(X).T
    oracle = (cos >= 0.75).astype(int)  # k=2 keeps every other tag here
    assert np.array_equal(G.adjacency(), oracle)
    assert G.adjacency().tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]


def test_knn_cap_and_tie_order():
    # four identical directions: every pair ties, so the k smallest indices win
    X = np.ones((4, 3))
    G = build_correlation_graph(TagEmbeddingMatrix.from_array(X), k=1, tau=0.5)
    assert [nb.tolist() for nb in G.neighbors] == [[0, 1], [0, 1], [0, 2], [0, 3]]
    assert not np.array_equal(G.adjacency(), G.adjacency().T)


def test_graph_blocking_invariant():
    X = np.random.default_rng(0).standard_normal((40, 5))
    T = TagEmbeddingMatrix.from_array(X)
    a = build_correlation_graph(T, 4, 0.2, block=512).adjacency()
    b = build_correlation_graph(T, 4, 0.2, block=7).adjacency()
    assert np.array_equal(a, b)


def test_bad_graph_params():
    T = TagEmbeddingMatrix.from_array(np.eye(2))
    with pytest.raises(ValidationError):
        build_correlation_graph(T, k=-1)
    with pytest.raises(ValidationError):
        build_correlation_graph(T, tau=1.5)


# -- enhancement -----------------------------------------------------------


def test_identity_enhancement_is_noop():
    X = np.random.default_rng(1).standard_normal((6, 4))
    G = CorrelationGraph([np.array([i]) for i in range(6)], 0, 1.0)
    assert np.array_equal(enhance(TagEmbeddingMatrix.from_array(X), G), X)


def test_mutual_pair_averages():
    X = np.array([[1.0, 0.0], [0.8, 0.6]])
    G = CorrelationGraph([np.array([0, 1]), np.array([0, 1])], 1, 0.0)
    out = enhance(TagEmbeddingMatrix.from_array(X), G)
    assert np.allclose(out, [(X[0] + X[1]) / 2] * 2)


def test_enhance_matches_dense_oracle():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((10, 5))
    G = build_correlation_graph(TagEmbeddingMatrix.from_array(X), k=3, tau=-0.2)
    A = G.adjacency().astype(float)
    oracle = (A / A.sum(1, keepdims=True)) @ X
    assert np.allclose(enhance(TagEmbeddingMatrix.from_array(X), G), oracle, atol=1e-9, rtol=0)


def test_enhanced_rows_are_convex_combinations():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((30, 4))
    G = build_correlation_graph(TagEmbeddingMatrix.from_array(X), k=5, tau=0.0)
    E = enhance(TagEmbeddingMatrix.from_array(X), G)
    for i, nb in enumerate(G.neighbors):
        assert np.all(E[i] <= X[nb].max(0) + 1e-12) and np.all(E[i] >= X[nb].min(0) - 1e-12)


# -- merging ---------------------------------------------------------------


def test_far_points_identity_remap():
    X = np.eye(4)
    r = merge_sparse_tags(X, 0.1)
    assert r.old_to_new.tolist() == [0, 1, 2, 3] and r.count == 4


def test_close_pair_merges_to_midpoint():
    X = np.array([[0.0, 0.0], [0.05, 0.0], [1.0, 1.0]])
    r = merge_sparse_tags(X, 0.1)
    assert r.old_to_new.tolist() == [0, 0, 1]
    assert np.allclose(r.embeddings[0], [0.025, 0.0])


def test_distance_exactly_epsilon_not_merged():
    X = np.array([[0.0], [0.5]])
    assert merge_sparse_tags(X, 0.5).count == 2


def test_cluster_recovery_exact_means():
    rng = np.random.default_rng(4)
    eps = 0.1
    centers = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    groups, X = [], []
    for c in centers:
        n = rng.integers(1, 5)
        pts = c + rng.uniform(-1, 1, (n, 3)) * (eps / 4 / np.sqrt(3))  # diameter < eps
        groups.append(pts)
        X.extend(pts)
    X = np.array(X)
    perm = rng.permutation(len(X))
    r = merge_sparse_tags(X[perm], eps)
    assert r.count == len(centers)
    got = sorted(map(tuple, np.round(r.embeddings, 12)))
    want = sorted(map(tuple, np.round([g.mean(0) for g in groups], 12)))
    assert np.allclose(got, want, atol=1e-12)


def test_merge_rejects_bad_epsilon():
    with pytest.raises(ValidationError):
        merge_sparse_tags(np.eye(2), 0.0)


# -- refreshed sets ----------------------------------------------------------


def test_refresh_dedups_merged():
    remap = MergeRemap(np.array([0, 0, 1]), np.eye(2))
    sets, excluded = refresh_image_tag_sets({7: [0, 1], 8: [0, 2], 9: []}, remap)
    assert sets[7] == (0,) and sets[8] == (0, 1)
    assert excluded == [9]


def test_refresh_matches_set_oracle():
    rng = np.random.default_rng(5)
    n_old = 30
    old_to_new = rng.integers(0, 12, n_old)
    remap = MergeRemap(old_to_new, np.eye(12))
    assignments = {i: rng.choice(n_old, size=rng.integers(0, 6), replace=False).tolist() for i in range(100)}
    sets, _ = refresh_image_tag_sets(assignments, remap)
    for i, tags in assignments.items():
        assert len(sets[i]) == len({int(old_to_new[t]) for t in tags})


def test_refresh_unknown_tag():
    with pytest.raises(ValidationError, match="unknown tag"):
        refresh_image_tag_sets({0: [5]}, MergeRemap.identity(np.eye(2)))


# -- sphere ----------------------------------------------------------------


def test_single_tag_sigma_rank_one():
    s = np.array([[3.0, 4.0]])
    sp = build_semantic_sphere(s, {0: [0]})
    assert np.allclose(sp.sigma, np.outer([0.6, 0.8], [0.6, 0.8]))
    assert np.linalg.matrix_rank(sp.sigma) == 1 and np.isclose(np.trace(sp.sigma), 1)


def test_orthonormal_sigma_identity():
    Q, _ = np.linalg.qr(np.random.default_rng(6).standard_normal((5, 5)))
    assert np.allclose(build_semantic_sphere(Q, {}).sigma, np.eye(5))


def test_sigma_naive_accumulation_psd_trace():
    X = np.random.default_rng(7).standard_normal((50, 6))
    sp = build_semantic_sphere(X, {0: [1, 2]})
    naive = np.zeros((6, 6))
    for s in _unit(X):
        naive += np.outer(s, s)
    assert np.allclose(sp.sigma, naive, atol=1e-9, rtol=0)
    assert abs(np.trace(sp.sigma) - 50) <= 1e-6
    assert np.linalg.eigvalsh(sp.sigma).min() >= -1e-10


def test_sphere_excludes_empty_sets():
    sp = build_semantic_sphere(np.eye(2), {0: [1], 1: []})
    assert list(sp.sets) == [0] and sp.excluded == [1]


def test_pipeline_and_persistence(tmp_path):
    rng = np.random.default_rng(8)
    base = _unit(rng.standard_normal((3, 8)))
    X = np.repeat(base, 2, axis=0) + 0.01 * rng.standard_normal((6, 8))
    T = TagEmbeddingMatrix.from_array(X, [f"t{i}" for i in range(6)])
    sp, remap = build_sphere_from_tags(T, {0: [0, 1], 1: [2], 2: [5, 4]}, k=2, tau=0.9, epsilon=0.1)
    assert sp.count == 3
    assert {k: v.tolist() for k, v in sp.sets.items()} == {0: [0], 1: [1], 2: [2]}
    save_sphere(tmp_path, sp, remap)
    back = load_sphere(tmp_path)
    assert np.allclose(back.S, sp.S, atol=1e-6)
    assert back.names == sp.names
    flat, _ = build_sphere_from_tags(T, {0: [0]}, use_graph=False)
    assert flat.count == 6


def test_deterministic():
    X = np.random.default_rng(9).standard_normal((25, 4))
    T = TagEmbeddingMatrix.from_array(X)
    a, _ = build_sphere_from_tags(T, {0: [1]}, 5, 0.3, 0.8)
    b, _ = build_sphere_from_tags(T, {0: [1]}, 5, 0.3, 0.8)
    assert np.array_equal(a.S, b.S)
