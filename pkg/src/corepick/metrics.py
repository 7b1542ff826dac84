"""Clustering agreement metrics and the assignment solver behind them.

Pseudo-label quality is judged against a reference labelling three ways:
best-bijection accuracy (Hungarian matching on the contingency table),
normalized mutual information, and adjusted Rand index. Cluster ids carry no
meaning across labelings, so every metric here is invariant to relabeling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _label_array(labels) -> np.ndarray:
    arr = getattr(labels, "labels", labels)
    return np.asarray(arr, dtype=np.int64)


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Min-cost assignment of every row to a distinct column, n <= m.

    Potentials plus shortest augmenting paths, O(n^2 m). Returns
    (assignment, total) where assignment[i] is the column taken by row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"need rows <= columns, got {n} x {m}")
    u = np.zeros(n)  # row potentials
    v = np.zeros(m + 1)  # column potentials, slot m is the virtual source
    match = np.full(m + 1, -1, dtype=np.int64)  # column -> row

    for i in range(n):
        match[m] = i
        j0 = m
        minv = np.full(m, np.inf)  # cheapest slack seen per free column
        way = np.full(m, -1, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while match[j0] != -1:
            used[j0] = True
            i0 = match[j0]
            slack = cost[i0] - u[i0] - v[:m]
            slack[used[:m]] = np.inf
            better = slack < minv
            minv[better] = slack[better]
            way[better] = j0
            open_slack = np.where(used[:m], np.inf, minv)
            j1 = int(np.argmin(open_slack))
            delta = open_slack[j1]
            used_cols = np.nonzero(used)[0]
            u[match[used_cols]] += delta
            v[used_cols] -= delta
            minv[~used[:m]] -= delta
            j0 = j1
        while j0 != m:  # walk the augmenting path back to the source
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        if match[j] >= 0:
            assignment[match[j]] = j
    total = float(cost[np.arange(n), assignment].sum())
    return assignment, total


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray  # K_a x K_b joint counts

    @classmethod
    def from_labels(cls, a, b, num_a: int | None = None, num_b: int | None = None):
        a = _label_array(a)
        b = _label_array(b)
        if len(a) != len(b):
            raise ValueError(f"label lengths differ: {len(a)} vs {len(b)}")
        ka = num_a if num_a is not None else int(a.max()) + 1
        kb = num_b if num_b is not None else int(b.max()) + 1
        flat = np.bincount(a * kb + b, minlength=ka * kb)
        counts = flat.reshape(ka, kb)
        return cls(counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def matched_accuracy(truth, pred) -> float:
    """Accuracy under the best one-to-one relabeling of predicted clusters."""
    a = _label_array(truth)
    b = _label_array(pred)
    table = ContingencyTable.from_labels(a, b)
    ka, kb = table.counts.shape
    size = max(ka, kb)
    square = np.zeros((size, size), dtype=np.float64)
    square[:ka, :kb] = table.counts
    _, neg_total = hungarian(-square)
    return -neg_total / len(a)


def nmi(a, b) -> float:
    """Mutual information over the arithmetic mean of entropies; 0/0 -> 0."""
    table = ContingencyTable.from_labels(a, b).counts.astype(np.float64)
    n = table.sum()
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    pab = table / n
    mask = pab > 0
    outer = pa[:, None] * pb[None, :]
    mi = float(np.sum(pab[mask] * np.log(pab[mask] / outer[mask])))
    ha = float(-np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    hb = float(-np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    denom = 0.5 * (ha + hb)
    if denom == 0.0:
        return 0.0
    return mi / denom


def _comb2(x: int) -> int:
    return x * (x - 1) // 2


def ari(a, b) -> float:
    """Adjusted Rand index by pair counting, exact integer arithmetic inside."""
    counts = ContingencyTable.from_labels(a, b).counts
    n = int(counts.sum())
    index = sum(_comb2(int(v)) for v in counts.ravel())
    sa = sum(_comb2(int(v)) for v in counts.sum(axis=1))
    sb = sum(_comb2(int(v)) for v in counts.sum(axis=0))
    cn = _comb2(n)
    # ARI = (index - sa*sb/cn) / ((sa+sb)/2 - sa*sb/cn), cleared of fractions
    num = 2 * (index * cn - sa * sb)
    den = (sa + sb) * cn - 2 * sa * sb
    if den == 0:
        # both partitions all-singletons or single-cluster: agreement is total
        return 1.0
    return num / den
