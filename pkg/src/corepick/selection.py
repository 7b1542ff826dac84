"""Coreset construction from hardness scores.

All samplers produce a CoresetPlan with k = round(N * (1 - alpha)) selected
indices, alpha being the pruning rate. The main sampler prunes both ends of
the difficulty ranking: the hardest floor(beta * N) examples are dropped as
likely label noise, then the k next-hardest are kept, discarding the easy
tail. beta is picked by a grid search validated entirely on pseudo-labels, so
ground truth never enters selection.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audit
from .data import EmbeddingStore, LabelVector, ScoreVector
from .dynamics import ProbeConfig, train_probe

DEFAULT_GRID_STEP = 0.1
DEFAULT_NUM_STRATA = 50
VALIDATION_FRACTION = 0.1

PLAN_METHODS = ("double_end", "random", "ccs")


@dataclass(frozen=True)
class CoresetPlan:
    alpha: float
    beta: float
    k: int
    seed: int
    metric: str
    selected: np.ndarray  # sorted ascending, unique

    def validate(self) -> "CoresetPlan":
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        sel = self.selected
        if sel.ndim != 1 or len(sel) != self.k:
            raise ValueError(f"plan holds {len(sel)} indices but k={self.k}")
        if self.k < 1:
            raise ValueError("plan must select at least one example")
        if np.any(sel[:-1] >= sel[1:]):
            raise ValueError("selected indices must be strictly increasing")
        if sel[0] < 0:
            raise ValueError("selected indices must be non-negative")
        sel.setflags(write=False)
        return self


def coreset_size(n: int, alpha: float) -> int:
    """Budget after pruning at rate alpha: round(N * (1 - alpha)), >= 1."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    k = round(n * (1.0 - alpha))
    return max(k, 1)


def max_feasible_beta(n: int, k: int) -> float:
    """Largest beta for which k examples remain below the dropped hard head."""
    return (n - k) / n


def _hardness_ranking(hardness: np.ndarray) -> np.ndarray:
    # descending hardness, ties resolved toward the smaller index
    return np.argsort(-hardness, kind="stable")


def _check_feasible(n: int, k: int, beta: float) -> None:
    if beta * n + k > n:
        raise ValueError(
            f"beta={beta} is infeasible: dropping beta*N={beta * n:.6g} hardest plus "
            f"keeping k={k} exceeds N={n}; maximum feasible beta is "
            f"{max_feasible_beta(n, k)!r}"
        )


def _prune_window(hardness: np.ndarray, k: int, beta: float) -> np.ndarray:
    """Indices of the k hardest examples after dropping the floor(beta*N) hardest."""
    n = len(hardness)
    _check_feasible(n, k, beta)
    ranked = _hardness_ranking(hardness)
    drop = math.floor(beta * n)
    return np.sort(ranked[drop : drop + k])


def double_end_prune(scores: ScoreVector, alpha: float, beta: float, seed: int = 0) -> CoresetPlan:
    """Keep the k hardest examples after removing the very hardest head."""
    n = len(scores)
    k = coreset_size(n, alpha)
    selected = _prune_window(scores.hardness, k, beta)
    return CoresetPlan(
        alpha=alpha, beta=beta, k=k, seed=seed, metric=scores.metric, selected=selected
    ).validate()


def random_coreset(n: int, alpha: float, seed: int) -> CoresetPlan:
    """Uniform sample without replacement, the baseline every method must beat."""
    k = coreset_size(n, alpha)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    selected = np.sort(rng.choice(n, size=k, replace=False))
    return CoresetPlan(
        alpha=alpha, beta=0.0, k=k, seed=seed, metric="random", selected=selected
    ).validate()


def stratified_allocation(populations: np.ndarray, budget: int) -> np.ndarray:
    """Spread budget across bins, topping up small bins first.

    Bins are processed from least to most populated (ties by bin index). While
    a bin fits entirely within an equal share of what remains, it is taken
    whole; the still-open bins then split the remainder as evenly as integers
    allow, earlier-processed bins receiving the extra units. The result always
    sums to budget and never exceeds a bin's population.
    """
    pops = np.asarray(populations, dtype=np.int64)
    if budget > pops.sum():
        raise ValueError(f"budget {budget} exceeds total population {pops.sum()}")
    alloc = np.zeros(len(pops), dtype=np.int64)
    order = np.lexsort((np.arange(len(pops)), pops))
    remaining = int(budget)
    for rank, b in enumerate(order):
        m = len(order) - rank
        share = remaining // m
        if pops[b] <= share:
            alloc[b] = pops[b]
            remaining -= int(pops[b])
        else:
            # every bin left holds more than the share, so distribute exactly
            extras = remaining - share * m
            for j, c in enumerate(order[rank:]):
                alloc[c] = share + 1 if j < extras else share
            remaining = 0
            break
    if remaining != 0:
        raise AssertionError("allocation failed to place the full budget")
    return alloc


def ccs_coreset(
    scores: ScoreVector,
    alpha: float,
    beta: float,
    num_strata: int = DEFAULT_NUM_STRATA,
    seed: int = 0,
) -> CoresetPlan:
    """Coverage-spread baseline: equal-width hardness strata, evened budget.

    Drops the floor(beta*N) hardest examples, splits the surviving hardness
    range into num_strata equal-width bins, allocates the budget across bins
    favouring sparse ones, and samples uniformly inside each bin.
    """
    if num_strata < 1:
        raise ValueError(f"num_strata must be >= 1, got {num_strata}")
    n = len(scores)
    k = coreset_size(n, alpha)
    _check_feasible(n, k, beta)
    ranked = _hardness_ranking(scores.hardness)
    kept = ranked[math.floor(beta * n) :]
    h = scores.hardness[kept]
    lo, hi = float(h.min()), float(h.max())
    width = (hi - lo) / num_strata
    if width == 0.0:
        bins = np.zeros(len(kept), dtype=np.int64)
    else:
        bins = np.minimum(((h - lo) / width).astype(np.int64), num_strata - 1)
    populations = np.bincount(bins, minlength=num_strata)
    alloc = stratified_allocation(populations, k)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    pieces = []
    for b in range(num_strata):
        if alloc[b] == 0:
            continue
        members = kept[bins == b]
        pieces.append(rng.choice(members, size=alloc[b], replace=False))
    selected = np.sort(np.concatenate(pieces))
    return CoresetPlan(
        alpha=alpha, beta=beta, k=k, seed=seed, metric=scores.metric, selected=selected
    ).validate()


def _stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Per-class validation split; classes with a single example stay in train."""
    val = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        if len(members) < 2:
            continue
        n_val = max(1, round(fraction * len(members)))
        picked = rng.permutation(members)[:n_val]
        val.append(picked)
    val_idx = np.sort(np.concatenate(val)) if val else np.empty(0, dtype=np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[val_idx] = False
    return np.nonzero(mask)[0], val_idx


def beta_grid_search(
    store: EmbeddingStore,
    pseudo_labels: LabelVector,
    scores: ScoreVector,
    alpha: float,
    probe_config: ProbeConfig,
    step: float = DEFAULT_GRID_STEP,
    seed: int = 0,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the hard-pruning rate by validating candidate coresets on held-out
    pseudo-labels.

    The pseudo-labeled data is split 90/10 per class; for each feasible beta
    on the 90% side, a coreset of round(0.9 * k) examples is selected there, a
    probe is trained on it against pseudo-labels, and its accuracy on the 10%
    side (again versus pseudo-labels) fills the grid table. Ties take the
    smaller beta. Cells whose probe diverges are recorded as NaN and skipped.
    Ground-truth labels are rejected outright: selection never sees them.
    """
    if pseudo_labels.kind != "pseudo":
        raise ValueError(
            f"beta search runs on pseudo-labels only, got kind={pseudo_labels.kind!r}"
        )
    if len(pseudo_labels) != store.num_examples or len(scores) != store.num_examples:
        raise ValueError("store, labels, and scores must cover the same examples")
    if step <= 0.0:
        raise ValueError(f"step must be > 0, got {step}")

    n = store.num_examples
    k = coreset_size(n, alpha)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train_idx, val_idx = _stratified_split(pseudo_labels.labels, VALIDATION_FRACTION, rng)
    if len(val_idx) == 0:
        raise ValueError("validation split is empty; need at least one class with 2+ examples")

    n_split = len(train_idx)
    k_split = max(1, round(0.9 * k))
    if k_split < store.num_classes:
        raise ValueError(
            f"split budget k_split={k_split} is smaller than num_classes="
            f"{store.num_classes}; alpha={alpha} leaves too little data to search"
        )
    split_hardness = scores.hardness[train_idx]
    val_x = store.data[val_idx]
    val_labels = pseudo_labels.labels[val_idx]

    table: list[tuple[float, float]] = []
    best_beta, best_acc = None, -np.inf
    i = 0
    while True:
        beta = round(i * step, 12)
        # the winner must be usable both on the split and for the final
        # full-set selection, so the grid stops at the tighter of the two
        if beta >= 1.0 or beta * n_split + k_split > n_split or beta * n + k > n:
            break
        window = _prune_window(split_hardness, k_split, beta)
        chosen = train_idx[window]
        sub_store = store.restrict(chosen, "search")
        sub_labels = LabelVector(
            labels=pseudo_labels.labels[chosen].copy(),
            kind="pseudo",
            num_classes=pseudo_labels.num_classes,
        ).validate()
        try:
            probe = train_probe(sub_store, sub_labels, probe_config)
            acc = probe.accuracy(val_x, val_labels)
        except (FloatingPointError, RuntimeError):
            acc = float("nan")
        table.append((beta, acc))
        if np.isfinite(acc) and acc > best_acc:
            best_beta, best_acc = beta, acc
        i += 1

    if best_beta is None:
        raise RuntimeError("every grid cell failed; no usable beta")
    return best_beta, table


def write_plan(plan: CoresetPlan, path) -> None:
    """One JSON header line, then one selected index per line."""
    path = Path(path)
    header = {
        "alpha": plan.alpha,
        "beta": plan.beta,
        "k": plan.k,
        "seed": plan.seed,
        "metric": plan.metric,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for idx in plan.selected:
            fh.write(f"{int(idx)}\n")
    audit.record_write(path)


def read_plan(path) -> CoresetPlan:
    path = Path(path)
    with open(path) as fh:
        header = json.loads(fh.readline())
        indices = [int(line) for line in fh if line.strip()]
    audit.record_read(path)
    return CoresetPlan(
        alpha=float(header["alpha"]),
        beta=float(header["beta"]),
        k=int(header["k"]),
        seed=int(header["seed"]),
        metric=str(header["metric"]),
        selected=np.asarray(indices, dtype=np.int64),
    ).validate()
