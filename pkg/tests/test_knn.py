import math

import numpy as np
import pytest

from corepick.data import DatasetManifest, EmbeddingStore
from corepick.knn import NeighborTable, build_neighbor_table, read_neighbors, write_neighbors


def store_from(data, normalized=False, c=2):
    data = np.asarray(data, dtype=np.float32)
    manifest = DatasetManifest(
        name="t",
        num_examples=data.shape[0],
        embed_dim=data.shape[1],
        num_classes=c,
        normalized=normalized,
        seed=0,
    )
    return EmbeddingStore(manifest=manifest, data=data).validate()


def cosine(a, b):
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    return num / (math.sqrt(sum(float(x) ** 2 for x in a)) * math.sqrt(sum(float(y) ** 2 for y in b)))


def oracle_neighbors(data, k):
    """Quadratic reference: sort every other point by (-cosine, index)."""
    n = len(data)
    out = []
    for i in range(n):
        ranked = sorted(
            (j for j in range(n) if j != i),
            key=lambda j: (-cosine(data[i], data[j]), j),
        )
        out.append(ranked[:k])
    return np.asarray(out, dtype=np.int64)


def test_matches_quadratic_oracle():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((100, 8)).astype(np.float32)
    store = store_from(data)
    table = build_neighbor_table(store, k=10)
    expected = oracle_neighbors(data, k=10)
    # where float noise flips near-equal ranks, the similarities must agree
    x = data.astype(np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    for i in range(100):
        if not np.array_equal(table.indices[i], expected[i]):
            got = x[i] @ x[table.indices[i]].T
            want = x[i] @ x[expected[i]].T
            assert np.allclose(got, want, atol=1e-12)


def test_identical_vectors_tie_break_ascending():
    data = np.ones((5, 3), dtype=np.float32)
    table = build_neighbor_table(store_from(data), k=4)
    assert np.array_equal(table.indices[0], [1, 2, 3, 4])
    assert np.array_equal(table.indices[3], [0, 1, 2, 4])


def test_orthogonal_vectors_tie_break_ascending():
    data = np.eye(4, dtype=np.float32)
    table = build_neighbor_table(store_from(data, normalized=True), k=3)
    # all cross similarities are exactly 0
    assert np.array_equal(table.indices[2], [0, 1, 3])


def test_self_excluded_everywhere():
    rng = np.random.default_rng(1)
    data = rng.standard_normal((40, 4)).astype(np.float32)
    table = build_neighbor_table(store_from(data), k=39)
    for i in range(40):
        assert i not in table.indices[i]
        assert len(set(table.indices[i].tolist())) == 39


def test_scale_invariance():
    # cosine ignores row scale, so scaling rows must not change neighbours
    rng = np.random.default_rng(2)
    data = rng.standard_normal((30, 6)).astype(np.float32)
    scaled = data * rng.uniform(0.5, 4.0, size=(30, 1)).astype(np.float32)
    a = build_neighbor_table(store_from(data), k=5)
    b = build_neighbor_table(store_from(scaled), k=5)
    # allow rank swaps only between equal-similarity pairs
    x = data.astype(np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    for i in range(30):
        if not np.array_equal(a.indices[i], b.indices[i]):
            got = x[i] @ x[a.indices[i]].T
            want = x[i] @ x[b.indices[i]].T
            assert np.allclose(got, want, atol=1e-9)


def test_similarity_is_symmetric():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((25, 5)).astype(np.float32)
    x = data.astype(np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sims = x @ x.T
    assert np.max(np.abs(sims - sims.T)) < 1e-6


def test_two_clusters_stay_separate():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((10, 8)).astype(np.float32) * 0.01 + np.float32(10.0)
    b = rng.standard_normal((10, 8)).astype(np.float32) * 0.01 - np.float32(10.0)
    data = np.vstack([a, b])
    table = build_neighbor_table(store_from(data), k=9)
    assert np.all(table.indices[:10] < 10)
    assert np.all(table.indices[10:] >= 10)


def test_k_bounds_checked():
    data = np.eye(4, dtype=np.float32)
    with pytest.raises(ValueError, match="k must be"):
        build_neighbor_table(store_from(data), k=0)
    with pytest.raises(ValueError, match="k must be"):
        build_neighbor_table(store_from(data), k=4)


def test_zero_row_rejected():
    data = np.asarray([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    with pytest.raises(ValueError, match="zero norm"):
        build_neighbor_table(store_from(data, c=3), k=1)


def test_table_validation_catches_self():
    bad = np.asarray([[0], [0]], dtype=np.int64)
    with pytest.raises(ValueError, match="itself"):
        NeighborTable(k=1, indices=bad).validate()


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.standard_normal((12, 4)).astype(np.float32)
    table = build_neighbor_table(store_from(data), k=3)
    path = tmp_path / "knn.csv"
    write_neighbors(table, path)
    first = path.read_text().splitlines()[0]
    assert first == "index,neighbor_1,neighbor_2,neighbor_3"
    back = read_neighbors(path)
    assert back.k == 3
    assert np.array_equal(back.indices, table.indices)


def test_csv_bad_header_rejected(tmp_path):
    path = tmp_path / "knn.csv"
    path.write_text("a,b\n0,1\n")
    with pytest.raises(ValueError, match="header"):
        read_neighbors(path)
