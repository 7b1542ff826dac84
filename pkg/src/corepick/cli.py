"""Command-line pipeline driver.

One subcommand per stage plus end-to-end helpers. Every run writes its
artifacts under --out together with a run_manifest.json recording the
resolved configuration, library versions, and the exact files read and
written. Ground-truth label files are accepted only by the evaluation
commands (metrics, eval, compare); the pipeline commands never open them.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

EVAL_COMMANDS = ("metrics", "eval", "compare")


class UsageError(Exception):
    """Bad flags, missing files, or invalid configuration (exit code 2)."""


def load_config(path) -> dict:
    """Flat key = value file; values parse as JSON scalars when possible."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"--config: no such file: {path}")
    config = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config: line {lineno} is not 'key = value': {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise UsageError(f"--config: line {lineno} has an empty key")
        try:
            config[key] = json.loads(value)
        except json.JSONDecodeError:
            config[key] = value
    return config


def _apply_threads(n: int) -> None:
    # must run before numpy is imported for the limits to take effect
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _require_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}")


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}")


def _global_flags() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="flat key = value config file; flags win")
    shared.add_argument("--seed", type=int, default=0, help="base random seed")
    shared.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    shared.add_argument("--out", default=".", help="output directory")
    return shared


def _add_cluster_flags(p: argparse.ArgumentParser) -> None:
    from .cluster import TrainConfig

    d = TrainConfig()
    p.add_argument("--heads", type=int, default=d.num_heads)
    p.add_argument("--epochs", type=int, default=d.num_epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--pmi-exponent", type=float, default=d.pmi_exponent)
    p.add_argument("--ema-momentum", type=float, default=d.ema_momentum)
    p.add_argument("--temperature", type=float, default=d.temperature)


def _add_probe_flags(p: argparse.ArgumentParser) -> None:
    from .dynamics import ProbeConfig

    d = ProbeConfig()
    p.add_argument("--probe-hidden", type=int, default=d.hidden_dim)
    p.add_argument("--probe-epochs", type=int, default=d.num_epochs)
    p.add_argument("--probe-batch-size", type=int, default=d.batch_size)
    p.add_argument("--probe-lr", type=float, default=d.lr)
    p.add_argument("--probe-min-lr", type=float, default=d.min_lr)
    p.add_argument("--probe-momentum", type=float, default=d.momentum)
    p.add_argument("--probe-weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--el2n-epochs", type=int, default=d.el2n_epochs)


def _probe_config(args, seed: int):
    from .dynamics import ProbeConfig

    return ProbeConfig(
        hidden_dim=args.probe_hidden,
        num_epochs=args.probe_epochs,
        batch_size=args.probe_batch_size,
        lr=args.probe_lr,
        min_lr=args.probe_min_lr,
        momentum=args.probe_momentum,
        weight_decay=args.probe_weight_decay,
        el2n_epochs=args.el2n_epochs,
        seed=seed,
    )


def build_parser() -> argparse.ArgumentParser:
    shared = _global_flags()
    parser = argparse.ArgumentParser(
        prog="corepick",
        description="Label-free coreset selection on frozen embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", parents=[shared], help="convert raw arrays to the binary embedding format")
    p.add_argument("--input", default=None, help=".npy or .csv array of shape N x d")
    p.add_argument("--name", default=None, help="dataset name (default: input stem)")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--normalize", action="store_true", help="l2-normalize rows before writing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("knn", parents=[shared], help="build the cosine nearest-neighbor table")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--k", type=int, default=50)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("cluster", parents=[shared], help="train the clustering ensemble and emit pseudo-labels")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--neighbors", default=None, help="reuse a neighbor table CSV instead of rebuilding")
    p.add_argument("--knn-k", type=int, default=50)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("metrics", parents=[shared], help="score predicted labels against ground truth")
    p.add_argument("--pred", default=None, help="predicted (pseudo) label file")
    p.add_argument("--truth", default=None, help="ground-truth label file")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("dynamics", parents=[shared], help="train a probe on pseudo-labels and export difficulty scores")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--labels", default=None, help="pseudo-label file from the cluster stage")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--metric", choices=("aum", "forgetting", "el2n"), default="aum")
    _add_probe_flags(p)
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("select", parents=[shared], help="build a coreset plan from difficulty scores")
    p.add_argument("--scores", default=None, help="hardness CSV from the dynamics stage")
    p.add_argument("--metric", choices=("aum", "forgetting", "el2n"), default="aum")
    p.add_argument("--method", choices=("double_end", "random", "ccs"), default="double_end")
    p.add_argument("--alpha", type=float, default=None, help="pruning rate")
    p.add_argument("--beta", type=float, default=None, help="hard-prune rate")
    p.add_argument("--search-beta", action="store_true", help="pick beta by pseudo-label grid search")
    p.add_argument("--search-step", type=float, default=0.1)
    p.add_argument("--embeddings", default=None, help="needed with --search-beta")
    p.add_argument("--labels", default=None, help="pseudo-labels, needed with --search-beta")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--strata", type=int, default=50, help="bins for the ccs method")
    p.add_argument(
        "--exclude",
        default=None,
        help="file of indices (one per line) barred from selection, e.g. a test split",
    )
    _add_probe_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", parents=[shared], help="train a probe on a coreset and score it on a test split")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--truth", default=None, help="ground-truth label file")
    p.add_argument("--test-indices", default=None, help="file with one test index per line")
    _add_probe_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[shared], help="run selection methods across pruning rates and seeds")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--truth", default=None, help="ground-truth label file")
    p.add_argument("--methods", default="elfs,random", help="comma-separated: elfs,random,ccs")
    p.add_argument("--alphas", default="0.5", help="comma-separated pruning rates")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--knn-k", type=int, default=50)
    _add_cluster_flags(p)
    _add_probe_flags(p)
    p.add_argument("--search-hidden", type=int, default=128)
    p.add_argument("--search-epochs", type=int, default=20)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("histogram", parents=[shared], help="bin hardness scores for all data versus a coreset")
    p.add_argument("--scores", default=None)
    p.add_argument("--metric", choices=("aum", "forgetting", "el2n"), default="aum")
    p.add_argument("--plan", default=None)
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_histogram)

    parser.subcommand_parsers = dict(sub.choices)
    return parser


def cmd_ingest(args) -> None:
    import numpy as np

    from .data import DatasetManifest, EmbeddingStore, l2_normalize, write_embeddings

    if args.num_classes is None:
        raise UsageError("--num-classes is required")
    path = _require_file(args.input, "--input")
    if path.suffix == ".npy":
        data = np.load(path, allow_pickle=False)
    elif path.suffix in (".csv", ".txt"):
        data = np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2)
    else:
        raise UsageError(f"--input: unsupported format {path.suffix!r} (use .npy, .csv, or .txt)")
    if data.ndim != 2:
        raise UsageError(f"--input: expected a 2-D array, got shape {data.shape}")
    manifest = DatasetManifest(
        name=args.name or path.stem,
        num_examples=data.shape[0],
        embed_dim=data.shape[1],
        num_classes=args.num_classes,
        normalized=False,
        seed=args.seed,
    )
    store = EmbeddingStore(
        manifest=manifest, data=np.ascontiguousarray(data, dtype=np.float32)
    ).validate()
    if args.normalize:
        store = l2_normalize(store)
    write_embeddings(store, Path(args.out) / "embeddings.elfs")


def cmd_knn(args) -> None:
    from .data import read_embeddings
    from .knn import build_neighbor_table, write_neighbors

    store = read_embeddings(_require_file(args.embeddings, "--embeddings"))
    table = build_neighbor_table(store, args.k)
    write_neighbors(table, Path(args.out) / "neighbors.csv")


def cmd_cluster(args) -> None:
    from .cluster import TrainConfig, assign_pseudo_labels, train_ensemble, write_ensemble
    from .data import l2_normalize, read_embeddings, write_labels
    from .knn import build_neighbor_table, read_neighbors

    store = l2_normalize(read_embeddings(_require_file(args.embeddings, "--embeddings")))
    if args.neighbors is not None:
        table = read_neighbors(_require_file(args.neighbors, "--neighbors"))
    else:
        table = build_neighbor_table(store, args.knn_k)
    config = TrainConfig(
        num_heads=args.heads,
        num_epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        pmi_exponent=args.pmi_exponent,
        ema_momentum=args.ema_momentum,
        temperature=args.temperature,
        seed=args.seed,
    )
    ensemble, history = train_ensemble(store, table, config)
    out = Path(args.out)
    write_labels(assign_pseudo_labels(ensemble, store), out / "pseudo_labels.txt")
    write_ensemble(ensemble, out / "ensemble.elfshead")
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch},{float(loss)!r}\n")
    from . import audit

    audit.record_write(out / "loss_curve.csv")


def cmd_metrics(args) -> None:
    from .data import read_labels
    from .metrics import ari, matched_accuracy, nmi

    pred = read_labels(_require_file(args.pred, "--pred"), kind="pseudo")
    truth = read_labels(_require_file(args.truth, "--truth"), kind="ground_truth")
    if len(pred) != len(truth):
        raise ValueError(f"label files disagree on N: {len(pred)} vs {len(truth)}")
    values = [
        ("matched_acc", matched_accuracy(pred, truth)),
        ("nmi", nmi(pred, truth)),
        ("ari", ari(pred, truth)),
    ]
    out = Path(args.out)
    with open(out / "metrics.csv", "w") as fh:
        fh.write("metric,value\n")
        for name, value in values:
            fh.write(f"{name},{float(value)!r}\n")
    from . import audit

    audit.record_write(out / "metrics.csv")
    for name, value in values:
        print(f"{name}={value:.6f}")


def cmd_dynamics(args) -> None:
    from .data import l2_normalize, read_embeddings, read_labels, write_scores
    from .dynamics import aum_score, el2n_score, forgetting_score, train_probe_with_dynamics, write_dynamics

    store = l2_normalize(read_embeddings(_require_file(args.embeddings, "--embeddings")))
    labels = read_labels(
        _require_file(args.labels, "--labels"), kind="pseudo", num_classes=args.num_classes
    )
    config = _probe_config(args, args.seed)
    _, record = train_probe_with_dynamics(store, labels, config)
    out = Path(args.out)
    write_dynamics(record, out / "dynamics.elfsdyn")
    if args.metric == "aum":
        scores = aum_score(record)
    elif args.metric == "forgetting":
        scores = forgetting_score(record)
    else:
        scores = el2n_score(record, config.el2n_epochs)
    write_scores(scores, out / "scores.csv")


def _read_index_file(path, flag: str):
    import numpy as np

    from . import audit

    path = _require_file(path, flag)
    indices = np.array(
        [int(line) for line in path.read_text().splitlines() if line.strip()],
        dtype=np.int64,
    )
    audit.record_read(path)
    return indices


def cmd_select(args) -> None:
    import numpy as np

    from .data import ScoreVector, read_scores
    from .selection import CoresetPlan, ccs_coreset, double_end_prune, random_coreset, write_plan

    if args.alpha is None:
        raise UsageError("--alpha is required")
    scores = read_scores(_require_file(args.scores, "--scores"), metric=args.metric)
    out = Path(args.out)

    # selection runs over the candidate pool; --exclude keeps e.g. a test
    # split out of every plan so downstream evaluation stays disjoint
    pool = np.arange(len(scores))
    if args.exclude is not None:
        excluded = _read_index_file(args.exclude, "--exclude")
        if len(excluded) and (excluded.min() < 0 or excluded.max() >= len(scores)):
            raise UsageError(f"--exclude: indices out of range for {len(scores)} examples")
        mask = np.ones(len(scores), dtype=bool)
        mask[excluded] = False
        pool = np.nonzero(mask)[0]
        if len(pool) == 0:
            raise UsageError("--exclude: every example is excluded")
    pool_scores = ScoreVector(
        metric=scores.metric, hardness=scores.hardness[pool].copy()
    ).validate()

    if args.method == "random":
        local = random_coreset(len(pool), args.alpha, args.seed)
    else:
        if args.search_beta:
            beta = _searched_beta(args, pool, pool_scores, out)
        elif args.beta is not None:
            beta = args.beta
        else:
            raise UsageError("--beta or --search-beta is required for this method")
        if args.method == "double_end":
            local = double_end_prune(pool_scores, args.alpha, beta, args.seed)
        else:
            local = ccs_coreset(
                pool_scores, args.alpha, beta, num_strata=args.strata, seed=args.seed
            )
    plan = CoresetPlan(
        alpha=local.alpha,
        beta=local.beta,
        k=local.k,
        seed=local.seed,
        metric=local.metric,
        selected=pool[local.selected],
    ).validate()
    write_plan(plan, out / "plan.txt")


def _searched_beta(args, pool, pool_scores, out: Path) -> float:
    from . import audit
    from .data import LabelVector, l2_normalize, read_embeddings, read_labels
    from .selection import beta_grid_search

    if args.embeddings is None or args.labels is None:
        raise UsageError("--search-beta needs --embeddings and --labels (pseudo)")
    store = l2_normalize(read_embeddings(_require_file(args.embeddings, "--embeddings")))
    pseudo = read_labels(
        _require_file(args.labels, "--labels"), kind="pseudo", num_classes=args.num_classes
    )
    if len(pseudo) != store.num_examples or len(pool_scores) > store.num_examples:
        raise ValueError("embeddings, labels, and scores must cover the same examples")
    pool_store = store.restrict(pool, "pool")
    pool_pseudo = LabelVector(
        labels=pseudo.labels[pool].copy(), kind="pseudo", num_classes=pseudo.num_classes
    ).validate()
    beta, table = beta_grid_search(
        pool_store,
        pool_pseudo,
        pool_scores,
        args.alpha,
        _probe_config(args, args.seed),
        step=args.search_step,
        seed=args.seed,
    )
    with open(out / "beta_table.csv", "w") as fh:
        fh.write("beta,val_acc\n")
        for b, acc in table:
            fh.write(f"{b!r},{acc!r}\n")
    audit.record_write(out / "beta_table.csv")
    return beta


def cmd_eval(args) -> None:
    from . import audit
    from .data import l2_normalize, read_embeddings, read_labels
    from .harness import evaluate_coreset
    from .selection import read_plan

    store = l2_normalize(read_embeddings(_require_file(args.embeddings, "--embeddings")))
    plan = read_plan(_require_file(args.plan, "--plan"))
    truth = read_labels(_require_file(args.truth, "--truth"), kind="ground_truth")
    test_indices = _read_index_file(args.test_indices, "--test-indices")
    acc = evaluate_coreset(store, plan, truth, test_indices, _probe_config(args, args.seed))
    out = Path(args.out)
    with open(out / "eval.csv", "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"test_acc,{float(acc)!r}\n")
    audit.record_write(out / "eval.csv")
    print(f"test_acc={acc:.6f}")


def cmd_compare(args) -> None:
    from .cluster import TrainConfig
    from .data import read_embeddings, read_labels
    from .dynamics import ProbeConfig
    from .harness import compare_methods, write_report

    store = read_embeddings(_require_file(args.embeddings, "--embeddings"))
    truth = read_labels(_require_file(args.truth, "--truth"), kind="ground_truth")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    alphas = _parse_floats(args.alphas, "--alphas")
    seeds = _parse_ints(args.seeds, "--seeds")
    cluster_config = TrainConfig(
        num_heads=args.heads,
        num_epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        pmi_exponent=args.pmi_exponent,
        ema_momentum=args.ema_momentum,
        temperature=args.temperature,
        seed=args.seed,
    )
    probe_config = _probe_config(args, args.seed)
    search_config = ProbeConfig(
        hidden_dim=args.search_hidden, num_epochs=args.search_epochs, seed=args.seed
    )
    report = compare_methods(
        store,
        truth,
        methods,
        alphas,
        seeds,
        knn_k=args.knn_k,
        test_fraction=args.test_fraction,
        cluster_config=cluster_config,
        dynamics_config=probe_config,
        search_config=search_config,
        eval_config=probe_config,
    )
    write_report(report, Path(args.out) / "report.csv")
    for row in report.aggregate():
        print(
            f"{row.method} alpha={row.alpha} beta={row.beta:.3f} k={row.k} "
            f"test_acc={row.test_acc:.4f}+-{row.test_acc_std:.4f}"
        )


def cmd_histogram(args) -> None:
    from .data import read_scores
    from .harness import score_histogram, write_histogram
    from .selection import read_plan

    scores = read_scores(_require_file(args.scores, "--scores"), metric=args.metric)
    plan = read_plan(_require_file(args.plan, "--plan"))
    rows = score_histogram(scores, plan, args.bins)
    write_histogram(rows, Path(args.out) / "histogram.csv")


def _manifest_value(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return repr(value)


def write_run_manifest(args, started: float, out_dir: Path) -> None:
    from . import __version__, audit

    import numpy as np

    config = {
        k: _manifest_value(v)
        for k, v in sorted(vars(args).items())
        if k != "func" and not k.startswith("_")
    }
    manifest = {
        "command": args.command,
        "config": config,
        "versions": {
            "corepick": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "audit": audit.snapshot(),
        "wall_seconds": time.perf_counter() - started,
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv=None) -> int:
    from . import audit

    audit.reset()
    started = time.perf_counter()

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads", type=int, default=None)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.threads is not None:
        _apply_threads(known.threads)

    try:
        config = load_config(known.config) if known.config else {}
        parser = build_parser()
        if config:
            # config keys feed whichever subcommands define them; flags win
            for subparser in parser.subcommand_parsers.values():
                dests = {a.dest for a in subparser._actions}
                subparser.set_defaults(**{k: v for k, v in config.items() if k in dests})
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args)
        write_run_manifest(args, started, out_dir)
        return 0
    except UsageError as exc:
        print(f"corepick: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"corepick: invalid input: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, OSError) as exc:
        print(f"corepick: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
