"""Cosine nearest neighbours over an embedding store.

Brute-force with row blocking: exact, no index structures, memory bounded by
the block size. Neighbour lists exclude the query point itself and are sorted
by descending cosine similarity with ties broken toward the smaller index.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .data import EmbeddingStore, row_norms

BLOCK_ROWS = 1024


@dataclass(frozen=True)
class NeighborTable:
    k: int
    indices: np.ndarray  # N x k int64

    def validate(self) -> "NeighborTable":
        if self.indices.ndim != 2 or self.indices.shape[1] != self.k:
            raise ValueError(
                f"neighbour matrix shape {self.indices.shape} does not match k={self.k}"
            )
        n = self.indices.shape[0]
        if self.k < 1 or self.k > n - 1:
            raise ValueError(f"k must be in [1, N-1], got k={self.k} with N={n}")
        if self.indices.min() < 0 or self.indices.max() >= n:
            raise ValueError("neighbour index out of range")
        if np.any(self.indices == np.arange(n)[:, None]):
            raise ValueError("a point lists itself as a neighbour")
        self.indices.setflags(write=False)
        return self

    @property
    def num_examples(self) -> int:
        return self.indices.shape[0]


def build_neighbor_table(store: EmbeddingStore, k: int) -> NeighborTable:
    """Exact k nearest neighbours under cosine similarity."""
    n = store.num_examples
    if not (1 <= k <= n - 1):
        raise ValueError(f"k must be in [1, N-1], got k={k} with N={n}")
    x = store.data.astype(np.float64)
    if not store.manifest.normalized:
        norms = row_norms(store.data)
        zero = np.nonzero(norms == 0.0)[0]
        if len(zero):
            raise ValueError(f"row {int(zero[0])} has zero norm, cosine undefined")
        x = x / norms[:, None]
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, BLOCK_ROWS):
        hi = min(lo + BLOCK_ROWS, n)
        sims = x[lo:hi] @ x.T
        sims[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf
        # stable sort on -sims: equal similarities keep ascending index order
        order = np.argsort(-sims, axis=1, kind="stable")
        out[lo:hi] = order[:, :k]
    return NeighborTable(k=k, indices=out).validate()


def write_neighbors(table: NeighborTable, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        cols = ",".join(f"neighbor_{j + 1}" for j in range(table.k))
        fh.write(f"index,{cols}\n")
        for i, row in enumerate(table.indices):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in row) + "\n")
    audit.record_write(path)


def read_neighbors(path) -> NeighborTable:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) < 2 or header[0] != "index" or header[1] != "neighbor_1":
            raise ValueError(f"{path}: expected header 'index,neighbor_1,...'")
        k = len(header) - 1
        rows = [line.strip().split(",") for line in fh if line.strip()]
    audit.record_read(path)
    indices = np.asarray([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)
    stated = np.asarray([int(r[0]) for r in rows], dtype=np.int64)
    if len(stated) and not np.array_equal(stated, np.arange(len(stated))):
        raise ValueError(f"{path}: rows must cover indices 0..N-1 in order")
    return NeighborTable(k=k, indices=indices).validate()
