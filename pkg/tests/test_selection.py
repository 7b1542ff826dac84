"""Tests for coreset construction.

The window sampler is checked against a rank-then-slice oracle built from
sorted() on (hardness, index) pairs, plus an invariance: any strictly
increasing transform of the hardness scores leaves the selection unchanged.
"""
from __future__ import annotations

import json
import math

import numpy as np
import pytest

from corepick.data import EmbeddingStore, DatasetManifest, LabelVector, ScoreVector, l2_normalize
from corepick.dynamics import ProbeConfig
from corepick.selection import (
    CoresetPlan,
    beta_grid_search,
    ccs_coreset,
    coreset_size,
    double_end_prune,
    max_feasible_beta,
    random_coreset,
    read_plan,
    stratified_allocation,
    write_plan,
)


def window_oracle(hardness, k, beta):
    """Rank by descending hardness (ties to the smaller index), drop the
    floor(beta*N) hardest, keep the next k."""
    n = len(hardness)
    ranked = sorted(range(n), key=lambda i: (-hardness[i], i))
    drop = math.floor(beta * n)
    return sorted(ranked[drop : drop + k])


def scores_of(values) -> ScoreVector:
    return ScoreVector(metric="aum", hardness=np.asarray(values, dtype=np.float64)).validate()


class TestCoresetSize:
    def test_half(self):
        assert coreset_size(10, 0.5) == 5

    def test_rounding(self):
        assert coreset_size(10, 0.4) == 6
        assert coreset_size(1000, 0.9) == 100

    def test_floor_of_one(self):
        assert coreset_size(10, 0.99) == 1

    def test_alpha_zero_keeps_all(self):
        assert coreset_size(7, 0.0) == 7

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            coreset_size(10, 1.0)
        with pytest.raises(ValueError):
            coreset_size(10, -0.1)


class TestDoubleEndPrune:
    def test_beta_zero_keeps_hardest(self):
        scores = scores_of([0.1, 0.9, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4, 0.0])
        plan = double_end_prune(scores, alpha=0.5, beta=0.0)
        assert plan.k == 5
        assert list(plan.selected) == window_oracle(scores.hardness, 5, 0.0)
        # hardest five are indices with hardness .9 .8 .7 .6 .5
        assert list(plan.selected) == [1, 2, 3, 5, 7]

    def test_beta_shifts_window(self):
        scores = scores_of([0.1, 0.9, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4, 0.0])
        plan = double_end_prune(scores, alpha=0.5, beta=0.3)
        # drop the 3 hardest (.9 .8 .7), keep next 5 (.6 .5 .4 .3 .2)
        assert list(plan.selected) == [2, 4, 6, 7, 8]

    def test_infeasible_beta_rejected(self):
        scores = scores_of(np.arange(10.0))
        with pytest.raises(ValueError, match="infeasible"):
            double_end_prune(scores, alpha=0.5, beta=0.6)

    def test_fractional_overrun_rejected(self):
        # beta*N + k exceeds N in reals even though floor(beta*N) + k fits
        scores = scores_of(np.arange(10.0))
        with pytest.raises(ValueError, match="infeasible"):
            double_end_prune(scores, alpha=0.5, beta=0.55)

    def test_max_feasible_beta_is_accepted(self):
        scores = scores_of(np.arange(10.0))
        limit = max_feasible_beta(10, 5)
        assert limit == 0.5
        plan = double_end_prune(scores, alpha=0.5, beta=limit)
        assert plan.k == 5
        # drops the 5 hardest, keeps the 5 easiest
        assert list(plan.selected) == [0, 1, 2, 3, 4]

    def test_error_reports_max_feasible(self):
        scores = scores_of(np.arange(10.0))
        with pytest.raises(ValueError, match="0.5"):
            double_end_prune(scores, alpha=0.5, beta=0.55)

    def test_matches_oracle_random_instances(self):
        rng = np.random.default_rng(42)
        for trial in range(1000):
            n = int(rng.integers(2, 40))
            hardness = rng.normal(size=n)
            if trial % 3 == 0:
                # force ties
                hardness = np.round(hardness)
            alpha = float(rng.uniform(0.0, 0.9))
            k = coreset_size(n, alpha)
            beta = float(rng.uniform(0.0, max_feasible_beta(n, k)))
            scores = scores_of(hardness)
            plan = double_end_prune(scores, alpha=alpha, beta=beta)
            assert list(plan.selected) == window_oracle(hardness, k, beta), (
                f"trial {trial}: n={n} alpha={alpha} beta={beta}"
            )

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(3, 30))
            hardness = rng.normal(size=n)
            alpha = float(rng.uniform(0.0, 0.8))
            k = coreset_size(n, alpha)
            beta = float(rng.uniform(0.0, max_feasible_beta(n, k)))
            base = double_end_prune(scores_of(hardness), alpha=alpha, beta=beta)
            for transform in (lambda h: 3.0 * h + 1.0, np.tanh, lambda h: h**3):
                mapped = double_end_prune(scores_of(transform(hardness)), alpha=alpha, beta=beta)
                assert np.array_equal(base.selected, mapped.selected)

    def test_ties_resolved_by_index(self):
        scores = scores_of([1.0, 1.0, 1.0, 0.0])
        plan = double_end_prune(scores, alpha=0.5, beta=0.25)
        # ranking is 0,1,2,3; drop 1, keep 2
        assert list(plan.selected) == [1, 2]

    def test_plan_metric_carried(self):
        plan = double_end_prune(scores_of([3.0, 2.0, 1.0]), alpha=0.5, beta=0.0)
        assert plan.metric == "aum"
        assert plan.alpha == 0.5 and plan.beta == 0.0


class TestRandomCoreset:
    def test_size_and_range(self):
        plan = random_coreset(100, alpha=0.7, seed=3)
        assert plan.k == 30
        assert len(np.unique(plan.selected)) == 30
        assert plan.selected.min() >= 0 and plan.selected.max() < 100

    def test_deterministic(self):
        a = random_coreset(50, alpha=0.5, seed=9)
        b = random_coreset(50, alpha=0.5, seed=9)
        assert np.array_equal(a.selected, b.selected)

    def test_seed_changes_sample(self):
        a = random_coreset(200, alpha=0.5, seed=0)
        b = random_coreset(200, alpha=0.5, seed=1)
        assert not np.array_equal(a.selected, b.selected)

    def test_marginal_inclusion_uniform(self):
        # each index should appear with frequency k/n across many seeds
        n, alpha, trials = 40, 0.5, 2000
        counts = np.zeros(n)
        for seed in range(trials):
            counts[random_coreset(n, alpha, seed).selected] += 1
        freq = counts / trials
        assert np.all(np.abs(freq - 0.5) < 0.05)


class TestStratifiedAllocation:
    def test_sums_to_budget_and_respects_populations(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            m = int(rng.integers(1, 12))
            pops = rng.integers(0, 30, size=m)
            total = int(pops.sum())
            if total == 0:
                continue
            budget = int(rng.integers(1, total + 1))
            alloc = stratified_allocation(pops, budget)
            assert alloc.sum() == budget
            assert np.all(alloc <= pops)
            assert np.all(alloc >= 0)

    def test_small_bins_taken_whole(self):
        alloc = stratified_allocation(np.array([1, 100, 2]), 10)
        assert alloc[0] == 1 and alloc[2] == 2
        assert alloc[1] == 7

    def test_even_split_when_abundant(self):
        alloc = stratified_allocation(np.array([50, 50, 50]), 9)
        assert list(alloc) == [3, 3, 3]

    def test_remainder_goes_to_sparsest(self):
        alloc = stratified_allocation(np.array([50, 10, 50]), 11)
        # bin 1 is sparsest but still above share 3; it gets the extra
        assert alloc.sum() == 11
        assert alloc[1] == 4 and alloc[0] == 4 and alloc[2] == 3

    def test_budget_exceeds_population(self):
        with pytest.raises(ValueError):
            stratified_allocation(np.array([2, 2]), 5)


class TestCcsCoreset:
    def test_size_and_uniqueness(self):
        rng = np.random.default_rng(0)
        scores = scores_of(rng.normal(size=500))
        plan = ccs_coreset(scores, alpha=0.8, beta=0.1, seed=4)
        assert plan.k == 100
        assert len(np.unique(plan.selected)) == 100

    def test_hard_head_dropped(self):
        hardness = np.arange(100, dtype=np.float64)
        plan = ccs_coreset(scores_of(hardness), alpha=0.5, beta=0.2, seed=0)
        # the 20 hardest (indices 80..99) are excluded before binning
        assert plan.selected.max() < 80

    def test_degenerate_constant_scores(self):
        plan = ccs_coreset(scores_of(np.zeros(30)), alpha=0.5, beta=0.0, seed=1)
        assert plan.k == 15
        assert len(np.unique(plan.selected)) == 15

    def test_covers_sparse_tail(self):
        # 90 easy examples at hardness ~0, 10 spread to 1.0: even coverage
        # must pick from the sparse hard region too
        hardness = np.concatenate([np.zeros(90), np.linspace(0.5, 1.0, 10)])
        plan = ccs_coreset(scores_of(hardness), alpha=0.8, beta=0.0, num_strata=10, seed=2)
        assert plan.k == 20
        assert (plan.selected >= 90).sum() == 10  # whole sparse tail kept

    def test_deterministic(self):
        scores = scores_of(np.random.default_rng(3).normal(size=200))
        a = ccs_coreset(scores, alpha=0.6, beta=0.1, seed=8)
        b = ccs_coreset(scores, alpha=0.6, beta=0.1, seed=8)
        assert np.array_equal(a.selected, b.selected)

    def test_infeasible_beta_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            ccs_coreset(scores_of(np.arange(10.0)), alpha=0.5, beta=0.6)

    def test_bad_strata(self):
        with pytest.raises(ValueError):
            ccs_coreset(scores_of(np.arange(10.0)), alpha=0.5, beta=0.0, num_strata=0)


def make_store(x: np.ndarray, num_classes: int, name="toy", seed=0) -> EmbeddingStore:
    manifest = DatasetManifest(
        name=name,
        num_examples=x.shape[0],
        embed_dim=x.shape[1],
        num_classes=num_classes,
        normalized=False,
        seed=seed,
    )
    return EmbeddingStore(manifest=manifest, data=np.ascontiguousarray(x, dtype=np.float32)).validate()


def two_blob_setup(n=200, noise_frac=0.2, seed=0):
    """Two separable blobs with pseudo-labels; the hardest tail (by a planted
    hardness score) is exactly the mislabeled group."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.vstack(
        [
            rng.normal(0.0, 0.05, size=(half, 8)) + np.eye(8)[0] * 4.0,
            rng.normal(0.0, 0.05, size=(half, 8)) + np.eye(8)[1] * 4.0,
        ]
    ).astype(np.float32)
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    n_noise = int(round(noise_frac * n))
    noisy = rng.choice(n, size=n_noise, replace=False)
    labels[noisy] = 1 - labels[noisy]
    # planted hardness: mislabeled points are the hardest, rest mild noise
    hardness = rng.uniform(0.0, 1.0, size=n)
    hardness[noisy] += 10.0
    store = l2_normalize(make_store(x, 2))
    pseudo = LabelVector(labels=labels, kind="pseudo", num_classes=2).validate()
    return store, pseudo, scores_of(hardness), noisy


class TestBetaGridSearch:
    CONFIG = ProbeConfig(hidden_dim=16, num_epochs=12, batch_size=32, seed=0)

    def test_rejects_ground_truth_labels(self):
        store, pseudo, scores, _ = two_blob_setup()
        truth = LabelVector(labels=pseudo.labels.copy(), kind="ground_truth", num_classes=2)
        with pytest.raises(ValueError, match="pseudo"):
            beta_grid_search(store, truth, scores, alpha=0.5, probe_config=self.CONFIG)

    def test_grid_covers_feasible_range_only(self):
        store, pseudo, scores, _ = two_blob_setup(n=100)
        _, table = beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG)
        betas = [b for b, _ in table]
        assert betas[0] == 0.0
        assert np.allclose(np.diff(betas), 0.1)
        # reconstruct the split: per class, max(1, round(0.1 * n_c)) held out
        counts = np.bincount(pseudo.labels, minlength=2)
        n_val = sum(max(1, round(0.1 * int(c))) for c in counts if c >= 2)
        n_split = 100 - n_val
        k = coreset_size(100, 0.5)
        k_split = round(0.9 * k)
        # every listed beta fits on the split, the next step would not
        assert betas[-1] * n_split + k_split <= n_split
        nxt = betas[-1] + 0.1
        assert (
            nxt >= 1.0
            or nxt * n_split + k_split > n_split
            or nxt * 100 + k > 100
        )

    def test_prefers_dropping_noisy_tail(self):
        # 20% planted-noise examples sit at the top of the ranking; at
        # alpha=0.8 the beta=0 window is almost entirely mislabeled, so the
        # search must move beta up to reach clean data
        store, pseudo, scores, _ = two_blob_setup(n=200, noise_frac=0.2, seed=1)
        best, table = beta_grid_search(
            store, pseudo, scores, alpha=0.8, probe_config=self.CONFIG, seed=1
        )
        assert best >= 0.1
        accs = dict(table)
        assert accs[best] >= accs[0.0]

    def test_tie_takes_smaller_beta(self, monkeypatch):
        store, pseudo, scores, _ = two_blob_setup(n=100)
        import corepick.selection as sel

        class FlatProbe:
            def accuracy(self, x, labels):
                return 0.75

        monkeypatch.setattr(sel, "train_probe", lambda *a, **k: FlatProbe())
        best, table = beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG)
        assert best == 0.0
        assert all(acc == 0.75 for _, acc in table)

    def test_failed_cells_skipped(self, monkeypatch):
        store, pseudo, scores, _ = two_blob_setup(n=100)
        import corepick.selection as sel

        calls = []

        class Probe:
            def __init__(self, acc):
                self.acc = acc

            def accuracy(self, x, labels):
                return self.acc

        def flaky(sub_store, sub_labels, config):
            calls.append(1)
            if len(calls) == 1:
                raise RuntimeError("non-finite loss")
            return Probe(0.5 + 0.01 * len(calls))

        monkeypatch.setattr(sel, "train_probe", flaky)
        best, table = beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG)
        assert math.isnan(table[0][1])
        assert best == max(b for b, acc in table if not math.isnan(acc))

    def test_all_cells_failing_raises(self, monkeypatch):
        store, pseudo, scores, _ = two_blob_setup(n=100)
        import corepick.selection as sel

        def broken(*a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(sel, "train_probe", broken)
        with pytest.raises(RuntimeError, match="every grid cell failed"):
            beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG)

    def test_deterministic(self):
        store, pseudo, scores, _ = two_blob_setup(n=120)
        r1 = beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG, seed=5)
        r2 = beta_grid_search(store, pseudo, scores, alpha=0.5, probe_config=self.CONFIG, seed=5)
        assert r1[0] == r2[0]
        assert r1[1] == r2[1]

    def test_singleton_class_stays_in_train(self):
        # one class has a single member; split must not steal it
        rng = np.random.default_rng(2)
        x = rng.normal(size=(21, 4)).astype(np.float32)
        labels = np.array([0] * 10 + [1] * 10 + [2])
        store = l2_normalize(make_store(x, 3))
        pseudo = LabelVector(labels=labels, kind="pseudo", num_classes=3).validate()
        scores = scores_of(rng.normal(size=21))
        cfg = ProbeConfig(hidden_dim=8, num_epochs=3, batch_size=8, seed=0)
        best, table = beta_grid_search(store, pseudo, scores, alpha=0.2, probe_config=cfg)
        assert len(table) >= 1
        # every candidate must stay feasible for the final full-set selection
        k = coreset_size(21, 0.2)
        for beta, _ in table:
            assert beta * 21 + k <= 21


class TestPlanIO:
    def test_round_trip(self, tmp_path):
        plan = double_end_prune(scores_of(np.arange(20.0)), alpha=0.5, beta=0.2, seed=3)
        path = tmp_path / "plan.txt"
        write_plan(plan, path)
        loaded = read_plan(path)
        assert loaded.alpha == plan.alpha
        assert loaded.beta == plan.beta
        assert loaded.k == plan.k
        assert loaded.seed == plan.seed
        assert loaded.metric == plan.metric
        assert np.array_equal(loaded.selected, plan.selected)

    def test_header_is_json_line(self, tmp_path):
        plan = random_coreset(10, alpha=0.5, seed=1)
        path = tmp_path / "plan.txt"
        write_plan(plan, path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header == {"alpha": 0.5, "beta": 0.0, "k": 5, "seed": 1, "metric": "random"}
        assert [int(v) for v in lines[1:]] == list(plan.selected)

    def test_corrupt_count_rejected(self, tmp_path):
        plan = random_coreset(10, alpha=0.5, seed=1)
        path = tmp_path / "plan.txt"
        write_plan(plan, path)
        with open(path, "a") as fh:
            fh.write("9999\n")
        with pytest.raises(ValueError, match="k="):
            read_plan(path)

    def test_unsorted_file_rejected(self, tmp_path):
        path = tmp_path / "plan.txt"
        with open(path, "w") as fh:
            fh.write(json.dumps({"alpha": 0.5, "beta": 0.0, "k": 2, "seed": 0, "metric": "aum"}) + "\n")
            fh.write("5\n3\n")
        with pytest.raises(ValueError, match="increasing"):
            read_plan(path)


class TestPlanValidation:
    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            CoresetPlan(
                alpha=0.5, beta=0.0, k=2, seed=0, metric="aum",
                selected=np.array([3, 3]),
            ).validate()

    def test_wrong_k_rejected(self):
        with pytest.raises(ValueError, match="k="):
            CoresetPlan(
                alpha=0.5, beta=0.0, k=3, seed=0, metric="aum",
                selected=np.array([1, 2]),
            ).validate()

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            CoresetPlan(
                alpha=0.5, beta=0.0, k=2, seed=0, metric="aum",
                selected=np.array([-1, 2]),
            ).validate()
