"""End-to-end experiment harness.

Generates synthetic Gaussian-blob datasets with known labels, evaluates
coresets by training a probe on the selected examples and scoring it on a
held-out test split, and compares selection methods across pruning rates and
seeds. Ground-truth labels appear only here and in the metrics: the pipeline
stages invoked internally receive embeddings and pseudo-labels alone.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audit
from .cluster import TrainConfig, assign_pseudo_labels, train_ensemble
from .data import DatasetManifest, EmbeddingStore, LabelVector, ScoreVector, l2_normalize
from .dynamics import ProbeConfig, aum_score, train_probe, train_probe_with_dynamics
from .knn import build_neighbor_table
from .metrics import ari, matched_accuracy, nmi
from .selection import (
    CoresetPlan,
    beta_grid_search,
    ccs_coreset,
    coreset_size,
    double_end_prune,
    random_coreset,
)

METHODS = ("elfs", "random", "ccs")
REPORT_HEADER = "method,alpha,beta,k,test_acc,test_acc_std,pseudo_acc,nmi,ari"
HISTOGRAM_HEADER = "bin_lo,bin_hi,count_all,count_selected"
DEFAULT_TEST_FRACTION = 0.2

# default experiment recipe, sized for desk-scale blob benchmarks
BLOB_CLUSTER_CONFIG = TrainConfig(num_heads=10, num_epochs=100, batch_size=128, lr=1e-3)
BLOB_DYNAMICS_CONFIG = ProbeConfig()
BLOB_SEARCH_CONFIG = ProbeConfig(hidden_dim=128, num_epochs=20)
BLOB_EVAL_CONFIG = ProbeConfig()


def make_blobs(
    num_examples: int,
    embed_dim: int,
    num_classes: int,
    separation: float,
    label_noise: float,
    seed: int,
) -> tuple[EmbeddingStore, LabelVector]:
    """Gaussian clusters with unit-variance components and pairwise center
    distance >= separation; label_noise fraction of labels flipped uniformly
    to another class.

    Geometry and noise draw from separate seed streams, so runs that differ
    only in label_noise share their points and noise-free labels.
    """
    if num_classes > num_examples:
        raise ValueError(
            f"num_classes ({num_classes}) exceeds num_examples ({num_examples})"
        )
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if separation <= 0.0:
        raise ValueError(f"separation must be > 0, got {separation}")
    if not 0.0 <= label_noise <= 1.0:
        raise ValueError(f"label_noise must be in [0, 1], got {label_noise}")

    geom = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    # Haar-random orthonormal frame; sign fix keeps the QR factorisation unique
    g = geom.normal(size=(embed_dim, embed_dim))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))
    if num_classes <= embed_dim:
        # orthogonal directions at radius separation/sqrt(2): every pair of
        # centers is exactly `separation` apart
        centers = (separation / math.sqrt(2.0)) * q[:, :num_classes].T
    else:
        # more classes than dimensions: string centers along one direction
        centers = np.arange(num_classes)[:, None] * separation * q[:, 0]

    counts = np.full(num_classes, num_examples // num_classes)
    counts[: num_examples % num_classes] += 1
    base_labels = np.repeat(np.arange(num_classes), counts)
    x = centers[base_labels] + geom.normal(size=(num_examples, embed_dim))
    perm = geom.permutation(num_examples)
    x = x[perm]
    labels = base_labels[perm]

    num_flips = round(label_noise * num_examples)
    if num_flips:
        noise = np.random.default_rng(np.random.SeedSequence([seed, 10]))
        flip_idx = noise.choice(num_examples, size=num_flips, replace=False)
        offset = noise.integers(0, num_classes - 1, size=num_flips)
        labels = labels.copy()
        labels[flip_idx] = offset + (offset >= labels[flip_idx])

    manifest = DatasetManifest(
        name=f"blobs-n{num_examples}-d{embed_dim}-c{num_classes}",
        num_examples=num_examples,
        embed_dim=embed_dim,
        num_classes=num_classes,
        normalized=False,
        seed=seed,
    )
    store = EmbeddingStore(
        manifest=manifest, data=np.ascontiguousarray(x, dtype=np.float32)
    ).validate()
    truth = LabelVector(labels=labels, kind="ground_truth", num_classes=num_classes).validate()
    return store, truth


def evaluate_coreset(
    store: EmbeddingStore,
    plan: CoresetPlan,
    truth: LabelVector,
    test_indices: np.ndarray,
    probe_config: ProbeConfig,
) -> float:
    """Train a probe on the selected examples with their true labels and
    return its accuracy on the disjoint test split."""
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if len(truth) != store.num_examples:
        raise ValueError("labels must cover the full store")
    if len(test_indices) == 0:
        raise ValueError("test split is empty")
    if test_indices.min() < 0 or test_indices.max() >= store.num_examples:
        raise ValueError("test indices out of range")
    if plan.selected.max() >= store.num_examples:
        raise ValueError("plan indices out of range")
    overlap = np.intersect1d(plan.selected, test_indices)
    if len(overlap):
        raise ValueError(
            f"plan overlaps the test split on {len(overlap)} indices "
            f"(first: {int(overlap[0])})"
        )
    sub_store = store.restrict(plan.selected, "coreset")
    sub_labels = LabelVector(
        labels=truth.labels[plan.selected].copy(),
        kind=truth.kind,
        num_classes=truth.num_classes,
    ).validate()
    probe = train_probe(sub_store, sub_labels, probe_config)
    return probe.accuracy(store.data[test_indices], truth.labels[test_indices])


@dataclass(frozen=True)
class ReportRow:
    method: str
    alpha: float
    beta: float
    k: int
    seed: int
    test_acc: float
    pseudo_acc: float
    nmi: float
    ari: float


@dataclass(frozen=True)
class AggregateRow:
    method: str
    alpha: float
    beta: float
    k: int
    test_acc: float
    test_acc_std: float
    pseudo_acc: float
    nmi: float
    ari: float


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> list[AggregateRow]:
        """Mean over seeds per (method, alpha) cell, NaN cells excluded."""
        order: list[tuple[str, float]] = []
        groups: dict[tuple[str, float], list[ReportRow]] = {}
        for row in self.rows:
            key = (row.method, row.alpha)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
        out = []
        for key in order:
            rows = groups[key]
            out.append(
                AggregateRow(
                    method=key[0],
                    alpha=key[1],
                    beta=_finite_mean([r.beta for r in rows]),
                    k=rows[0].k,
                    test_acc=_finite_mean([r.test_acc for r in rows]),
                    test_acc_std=_finite_std([r.test_acc for r in rows]),
                    pseudo_acc=_finite_mean([r.pseudo_acc for r in rows]),
                    nmi=_finite_mean([r.nmi for r in rows]),
                    ari=_finite_mean([r.ari for r in rows]),
                )
            )
        return out


def _finite_mean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    return float(finite.mean()) if len(finite) else float("nan")


def _finite_std(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    return float(finite.std()) if len(finite) else float("nan")


def _timed(timings: dict, stage: str, fn):
    start = time.perf_counter()
    result = fn()
    timings[stage] = timings.get(stage, 0.0) + (time.perf_counter() - start)
    return result


def compare_methods(
    store: EmbeddingStore,
    truth: LabelVector,
    methods: list[str],
    alphas: list[float],
    seeds: list[int],
    knn_k: int = 50,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    cluster_config: TrainConfig | None = None,
    dynamics_config: ProbeConfig | None = None,
    search_config: ProbeConfig | None = None,
    eval_config: ProbeConfig | None = None,
) -> ExperimentReport:
    """Run each selection method across pruning rates and seeds.

    Per seed: hold out a test fraction, l2-normalize, and (when any method
    needs difficulty scores) cluster the train side, assign pseudo-labels,
    and record probe dynamics once, reusing the artifacts for every alpha.
    The hard-pruning rate comes from the pseudo-label grid search; "random"
    needs none of that and skips it. Failed cells carry NaN accuracy instead
    of aborting the table.
    """
    if not methods or not alphas or not seeds:
        raise ValueError("need at least one method, one alpha, and one seed")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    cluster_config = cluster_config or BLOB_CLUSTER_CONFIG
    dynamics_config = dynamics_config or BLOB_DYNAMICS_CONFIG
    search_config = search_config or BLOB_SEARCH_CONFIG
    eval_config = eval_config or BLOB_EVAL_CONFIG

    needs_scores = any(m in ("elfs", "ccs") for m in methods)
    n = store.num_examples
    norm_store = l2_normalize(store)
    report = ExperimentReport()

    for seed in seeds:
        split_rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
        perm = split_rng.permutation(n)
        n_test = max(1, round(test_fraction * n))
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:])
        train_store = norm_store.restrict(train_idx, f"train{seed}")
        truth_train = truth.labels[train_idx]

        pseudo = scores = None
        pseudo_acc = nmi_val = ari_val = float("nan")
        if needs_scores:
            table = _timed(
                report.timings, "knn", lambda: build_neighbor_table(train_store, knn_k)
            )
            ensemble, _ = _timed(
                report.timings,
                "cluster",
                lambda: train_ensemble(train_store, table, replace(cluster_config, seed=seed)),
            )
            pseudo = assign_pseudo_labels(ensemble, train_store)
            _, record = _timed(
                report.timings,
                "dynamics",
                lambda: train_probe_with_dynamics(
                    train_store, pseudo, replace(dynamics_config, seed=seed)
                ),
            )
            scores = aum_score(record)
            pseudo_acc = matched_accuracy(pseudo, truth_train)
            nmi_val = nmi(pseudo, truth_train)
            ari_val = ari(pseudo, truth_train)

        for alpha in alphas:
            k = coreset_size(len(train_idx), alpha)
            beta_star = float("nan")
            if needs_scores:
                try:
                    beta_star, _ = _timed(
                        report.timings,
                        "search",
                        lambda: beta_grid_search(
                            train_store,
                            pseudo,
                            scores,
                            alpha,
                            replace(search_config, seed=seed),
                            seed=seed,
                        ),
                    )
                except (ValueError, RuntimeError):
                    beta_star = float("nan")

            for method in methods:
                row = _run_cell(
                    method=method,
                    alpha=alpha,
                    k=k,
                    seed=seed,
                    beta_star=beta_star,
                    scores=scores,
                    train_idx=train_idx,
                    norm_store=norm_store,
                    truth=truth,
                    test_idx=test_idx,
                    eval_config=eval_config,
                    timings=report.timings,
                    pseudo_acc=pseudo_acc,
                    nmi_val=nmi_val,
                    ari_val=ari_val,
                )
                report.rows.append(row)
    return report


def _run_cell(
    method,
    alpha,
    k,
    seed,
    beta_star,
    scores,
    train_idx,
    norm_store,
    truth,
    test_idx,
    eval_config,
    timings,
    pseudo_acc,
    nmi_val,
    ari_val,
) -> ReportRow:
    nan = float("nan")
    clusterless = method == "random"
    try:
        if method == "random":
            local = random_coreset(len(train_idx), alpha, seed)
        elif method == "elfs":
            if not math.isfinite(beta_star):
                raise ValueError("no usable beta")
            local = double_end_prune(scores, alpha, beta_star, seed)
        else:  # ccs
            if not math.isfinite(beta_star):
                raise ValueError("no usable beta")
            local = ccs_coreset(scores, alpha, beta_star, seed=seed)
        plan = CoresetPlan(
            alpha=alpha,
            beta=local.beta,
            k=k,
            seed=seed,
            metric=local.metric,
            selected=train_idx[local.selected],
        ).validate()
        acc = _timed(
            timings,
            "evaluate",
            lambda: evaluate_coreset(norm_store, plan, truth, test_idx, replace(eval_config, seed=seed)),
        )
        beta_out = local.beta
    except (ValueError, RuntimeError):
        acc, beta_out = nan, beta_star if method != "random" else 0.0
    return ReportRow(
        method=method,
        alpha=alpha,
        beta=beta_out,
        k=k,
        seed=seed,
        test_acc=acc,
        pseudo_acc=nan if clusterless else pseudo_acc,
        nmi=nan if clusterless else nmi_val,
        ari=nan if clusterless else ari_val,
    )


def write_report(report: ExperimentReport, path) -> None:
    """Aggregated CSV, one row per (method, alpha)."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(REPORT_HEADER + "\n")
        for row in report.aggregate():
            fh.write(
                f"{row.method},{row.alpha!r},{row.beta!r},{row.k},"
                f"{row.test_acc!r},{row.test_acc_std!r},"
                f"{row.pseudo_acc!r},{row.nmi!r},{row.ari!r}\n"
            )
    audit.record_write(path)


def read_report(path) -> list[AggregateRow]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header: {header!r}")
        rows = []
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 9:
                raise ValueError(f"malformed report row: {line!r}")
            rows.append(
                AggregateRow(
                    method=parts[0],
                    alpha=float(parts[1]),
                    beta=float(parts[2]),
                    k=int(parts[3]),
                    test_acc=float(parts[4]),
                    test_acc_std=float(parts[5]),
                    pseudo_acc=float(parts[6]),
                    nmi=float(parts[7]),
                    ari=float(parts[8]),
                )
            )
    audit.record_read(path)
    return rows


def score_histogram(
    scores: ScoreVector, plan: CoresetPlan, bins: int
) -> list[tuple[float, float, int, int]]:
    """Per-bin counts over the full hardness range, for all data and for the
    selected subset, so distribution shift can be plotted externally."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    h = scores.hardness
    lo, hi = float(h.min()), float(h.max())
    counts_all, edges = np.histogram(h, bins=bins, range=(lo, hi))
    counts_sel, _ = np.histogram(h[plan.selected], bins=bins, range=(lo, hi))
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts_all[i]), int(counts_sel[i]))
        for i in range(bins)
    ]


def write_histogram(rows, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(HISTOGRAM_HEADER + "\n")
        for lo, hi, all_count, sel_count in rows:
            fh.write(f"{lo!r},{hi!r},{all_count},{sel_count}\n")
    audit.record_write(path)
