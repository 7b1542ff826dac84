"""Label-free coreset selection on frozen embeddings.

Submodules import lazily so the command-line entry point can configure
threading environment variables before numpy loads.
"""
from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # data
    "DatasetManifest": ".data",
    "EmbeddingStore": ".data",
    "LabelVector": ".data",
    "ScoreVector": ".data",
    "l2_normalize": ".data",
    "read_embeddings": ".data",
    "write_embeddings": ".data",
    "read_labels": ".data",
    "write_labels": ".data",
    "read_scores": ".data",
    "write_scores": ".data",
    # knn
    "NeighborTable": ".knn",
    "build_neighbor_table": ".knn",
    "read_neighbors": ".knn",
    "write_neighbors": ".knn",
    # cluster
    "TrainConfig": ".cluster",
    "HeadEnsemble": ".cluster",
    "train_ensemble": ".cluster",
    "assign_pseudo_labels": ".cluster",
    "temi_loss": ".cluster",
    "read_ensemble": ".cluster",
    "write_ensemble": ".cluster",
    # dynamics
    "ProbeConfig": ".dynamics",
    "ProbeModel": ".dynamics",
    "DynamicsRecord": ".dynamics",
    "train_probe": ".dynamics",
    "train_probe_with_dynamics": ".dynamics",
    "aum_score": ".dynamics",
    "forgetting_score": ".dynamics",
    "el2n_score": ".dynamics",
    "read_dynamics": ".dynamics",
    "write_dynamics": ".dynamics",
    # metrics
    "ContingencyTable": ".metrics",
    "hungarian": ".metrics",
    "matched_accuracy": ".metrics",
    "nmi": ".metrics",
    "ari": ".metrics",
    # selection
    "CoresetPlan": ".selection",
    "coreset_size": ".selection",
    "max_feasible_beta": ".selection",
    "double_end_prune": ".selection",
    "beta_grid_search": ".selection",
    "random_coreset": ".selection",
    "ccs_coreset": ".selection",
    "read_plan": ".selection",
    "write_plan": ".selection",
    # harness
    "make_blobs": ".harness",
    "evaluate_coreset": ".harness",
    "compare_methods": ".harness",
    "score_histogram": ".harness",
    "ExperimentReport": ".harness",
    "read_report": ".harness",
    "write_report": ".harness",
    "write_histogram": ".harness",
}

__all__ = ["__version__", *sorted(_EXPORTS)]


def __getattr__(name: str):
    target = _EXPORTS.get(name)
    if target is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(importlib.import_module(target, __name__), name)


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
