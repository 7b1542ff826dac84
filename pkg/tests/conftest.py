"""Shared pytest wiring.

After a run that touched tests/test_acceptance.py, print one PASS/FAIL line
per acceptance check so the gate can be read off the bottom of the log.
"""
from __future__ import annotations

CRITERIA = [
    (
        "test_gradients_match_finite_differences",
        "clustering and probe gradients match central finite differences",
    ),
    (
        "test_score_and_metric_formulas_match_oracles",
        "pmi/pair-weight/AUM/EL2N/NMI/ARI match brute-force oracles; assignment matches exhaustive search",
    ),
    (
        "test_double_end_window_matches_rank_oracle",
        "double-end pruning equals the rank-window oracle and survives monotone rescaling",
    ),
    (
        "test_infeasible_plans_are_rejected",
        "infeasible (alpha, beta) pairs are rejected and the reported maximum beta is usable",
    ),
    (
        "test_blob_clustering_recovers_classes",
        "ensemble clustering reaches matched accuracy >= 0.95 on separated blobs, 3 seeds",
    ),
    (
        "test_pipeline_beats_random_under_label_noise",
        "full pipeline >= random selection on noisy blobs at alpha 0.5 and 0.9, 5 seeds",
    ),
    (
        "test_pseudo_beta_search_tracks_truth_search",
        "pseudo-label beta search lands within one grid step of the truth-label search, >= 4 of 5 seeds",
    ),
    (
        "test_selection_never_reads_ground_truth",
        "beta search and the select command never open the ground-truth label file",
    ),
]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[str, bool] = {}
    for key in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(key, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1].split("[")[0]
            outcomes[name] = outcomes.get(name, True) and key == "passed"
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, label in CRITERIA:
        if name not in outcomes:
            continue
        if outcomes[name]:
            terminalreporter.write_line(f"ACCEPTANCE PASS - {label}", green=True)
        else:
            terminalreporter.write_line(f"ACCEPTANCE FAIL - {label}", red=True)
