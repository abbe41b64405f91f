"""Command-line entry point.

Subcommands:

  group      aggregate a per-sample dataset into labeled groups
  embed      learn label embeddings from an aggregated dataset
  assign     impute per-sample labels with existing embeddings
  pipeline   embed + assign in one shot
  simulate   regression/classification Monte Carlo sweeps (CSV + figure)
  oracle     compare the learner against exhaustive search for one label
  eval       precision@k of the nearest-embedding scorer against true labels

Exit codes: 0 success, 2 unparsable input, 3 invalid configuration or
mismatched inputs, 4 infeasible exhaustive computation.
"""

from __future__ import annotations

import argparse
import os
import sys

from .core import (
    AggLabelError,
    BoundsError,
    ConfigError,
    InfeasibleError,
    InvalidInputError,
    ParseError,
    SparseMatrix,
)
from .dataio import (
    AggregatedDataset,
    XmcDataset,
    parse_sparse_matrix,
    parse_xmc,
    write_sparse_matrix,
    write_xmc,
)
from .embeddings import (
    LabelEmbeddings,
    LearnConfig,
    brute_force_embedding,
    learn_all_embeddings,
    learn_embedding,
    selection_objective,
)
from .grouping import hierarchical_grouping, random_grouping
from .assign import assign_labels, run_pipeline
from .metrics import metrics_to_csv, nearest_embedding_classifier, precision_at_k
from .simlab import (
    ClassificationSimConfig,
    RegressionSimConfig,
    run_classification_sim,
    run_regression_sweep,
    sweep_to_csv,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_INFEASIBLE = 4


def _read_xmc(path: str) -> XmcDataset:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_xmc(f)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _read_aggregated(args) -> AggregatedDataset:
    ds = _read_xmc(args.input)
    try:
        with open(args.y1, "r", encoding="utf-8") as f:
            y1 = parse_sparse_matrix(f)
        with open(args.y2, "r", encoding="utf-8") as f:
            y2_raw = parse_sparse_matrix(f)
    except OSError as exc:
        raise ParseError(f"cannot read aggregation files: {exc}") from exc
    # multiplicity counts ride along as values > 1 in the group-label file
    mult: dict[tuple[int, int], int] = {}
    trip = []
    for j in range(y2_raw.rows):
        cols, vals = y2_raw.row_slice(j)
        for c, v in zip(cols, vals):
            trip.append((j, int(c), 1.0))
            if v > 1:
                mult[(j, int(c))] = int(round(v))
    y2 = SparseMatrix.from_triplets(y2_raw.rows, y2_raw.cols, trip)
    if ds.num_samples != y1.rows:
        raise InvalidInputError(
            f"shape mismatch: features are {ds.num_samples} x {ds.num_features}, "
            f"membership is {y1.rows} x {y1.cols}"
        )
    return AggregatedDataset(
        features=ds.features,
        sample_to_group=y1,
        group_to_label=y2,
        label_multiplicity=mult or None,
    )


def _write_text(path: str, content: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(content)


def _learn_config(args) -> LearnConfig:
    try:
        return LearnConfig(
            iters=args.iters,
            step=args.lr,
            normalize_features=not args.no_normalize_features,
        )
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc


def _add_learn_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=20, help="learner iterations (0 = init only)")
    p.add_argument("--lr", type=float, default=0.1, help="learner step size")
    p.add_argument(
        "--no-normalize-features",
        action="store_true",
        help="keep raw feature magnitudes during learning and assignment",
    )
    p.add_argument("--threads", type=int, default=1, help="parallel label workers")


def cmd_group(args) -> int:
    ds = _read_xmc(args.input)
    if args.rule == "random":
        if args.group_size is None:
            raise ConfigError("--group-size is required for the random rule")
        agg, truth = random_grouping(ds, args.group_size, args.seed)
    else:
        if args.depth is None:
            raise ConfigError("--depth is required for the hierarchical rule")
        agg, truth = hierarchical_grouping(
            ds,
            args.depth,
            feature_noise_sigma=args.feature_noise,
            kmeans_max_iters=args.kmeans_iters,
            seed=args.seed,
        )
    os.makedirs(args.outdir, exist_ok=True)
    _write_text(os.path.join(args.outdir, "y1.txt"), write_sparse_matrix(agg.sample_to_group))
    trip = []
    for j in range(agg.num_groups):
        for k in agg.group_labels(j):
            trip.append((j, int(k), float(agg.multiplicity(j, int(k)))))
    y2_counts = SparseMatrix.from_triplets(agg.num_groups, agg.num_labels, trip)
    _write_text(os.path.join(args.outdir, "y2.txt"), write_sparse_matrix(y2_counts))
    lines = ["group,label,sample"]
    for (j, k) in sorted(truth.carriers):
        for i in truth.carriers[(j, k)]:
            lines.append(f"{j},{k},{i}")
    _write_text(os.path.join(args.outdir, "truth.csv"), "\n".join(lines) + "\n")
    print(f"groups={agg.num_groups} avg_group_size={agg.avg_group_size!r}")
    return EXIT_OK


def cmd_embed(args) -> int:
    agg = _read_aggregated(args)
    cfg = _learn_config(args)
    emb = learn_all_embeddings(agg, cfg, threads=args.threads)
    emb.save(args.output)
    print(f"labels={emb.num_labels} dim={emb.dim} empty={int(emb.empty_flags.sum())}")
    return EXIT_OK


def cmd_assign(args) -> int:
    agg = _read_aggregated(args)
    emb = LabelEmbeddings.load(args.embeddings)
    result = assign_labels(agg, emb, normalize_features=not args.no_normalize_features)
    out = XmcDataset(features=agg.features, labels=result.filtered)
    _write_text(args.output, write_xmc(out))
    if args.choices:
        lines = ["group,label,sample"]
        for (j, k) in sorted(result.choices):
            lines.append(f"{j},{k},{result.choices[(j, k)]}")
        _write_text(args.choices, "\n".join(lines) + "\n")
    print(f"assigned={len(result.choices)} fallback={len(result.fallback_pairs)}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    agg = _read_aggregated(args)
    cfg = _learn_config(args)
    result = run_pipeline(agg, cfg, threads=args.threads)
    _write_text(args.output, write_xmc(result.dataset))
    if args.embeddings_out:
        result.embeddings.save(args.embeddings_out)
    if args.choices:
        lines = ["group,label,sample"]
        for (j, k) in sorted(result.assignment.choices):
            lines.append(f"{j},{k},{result.assignment.choices[(j, k)]}")
        _write_text(args.choices, "\n".join(lines) + "\n")
    print(
        f"assigned={len(result.assignment.choices)} "
        f"fallback={len(result.assignment.fallback_pairs)}"
    )
    return EXIT_OK


def _parse_float_list(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise ConfigError(f"bad numeric list {text!r}") from None
    if not values:
        raise ConfigError("sigma list is empty")
    return values


def cmd_simulate(args) -> int:
    sigma2_list = _parse_float_list(args.sigma2_list)
    if args.task == "regression":
        cfg = RegressionSimConfig(
            n=args.n, g=args.g, d=args.d, l=args.l,
            sigma1=args.sigma1, sigma_e=args.sigma_e,
            trials=args.trials, seed=args.seed,
        )
        table = run_regression_sweep(cfg, sigma2_list, threads=args.threads)
    else:
        cfg = ClassificationSimConfig(
            n=args.n, g=args.g, d=args.d, l=args.l,
            sigma1=args.sigma1, sigma_e=args.sigma_e,
            trials=args.trials, seed=args.seed,
        )
        table = run_classification_sim(cfg, sigma2_list, threads=args.threads)
    csv_text = sweep_to_csv(table)
    _write_text(args.output, csv_text)
    if not args.no_plot:
        from .figures import render_sweep_figure

        base, _ = os.path.splitext(args.output)
        render_sweep_figure(table, base + ".png")
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    agg = _read_aggregated(args)
    cfg = _learn_config(args)
    _, best_val = brute_force_embedding(
        agg, args.label, normalize_features=cfg.normalize_features
    )
    e, _ = learn_embedding(agg, args.label, cfg)
    learned_val = selection_objective(e, args.label, agg)
    ratio = learned_val / best_val if best_val != 0 else float("nan")
    print(f"exhaustive_objective={best_val!r}")
    print(f"learned_objective={learned_val!r}")
    print(f"ratio={ratio!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read_xmc(args.input)
    emb = LabelEmbeddings.load(args.embeddings)
    ks = [int(x) for x in args.k_list.split(",") if x != ""]
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"bad k list {args.k_list!r}")
    pred = nearest_embedding_classifier(ds.features, emb, max(ks))
    rows = [("precision", k, precision_at_k(pred, ds.labels, k)) for k in ks]
    text = metrics_to_csv(rows)
    if args.output:
        _write_text(args.output, text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agglabel",
        description="Group-aggregated multi-label learning tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("group", help="aggregate samples into labeled groups")
    p.add_argument("input", help="per-sample dataset file")
    p.add_argument("outdir", help="directory for y1.txt / y2.txt / truth.csv")
    p.add_argument("--rule", choices=["random", "hierarchical"], default="random")
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--feature-noise", type=float, default=0.0)
    p.add_argument("--kmeans-iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("embed", help="learn label embeddings")
    p.add_argument("input")
    p.add_argument("--y1", required=True, help="sample-to-group file")
    p.add_argument("--y2", required=True, help="group-to-label file")
    p.add_argument("-o", "--output", required=True, help="embedding container path")
    _add_learn_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("assign", help="impute per-sample labels")
    p.add_argument("input")
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--choices", default=None, help="also write group,label,sample CSV")
    p.add_argument("--no-normalize-features", action="store_true")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("pipeline", help="embed then assign")
    p.add_argument("input")
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--embeddings-out", default=None)
    p.add_argument("--choices", default=None)
    _add_learn_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("simulate", help="Monte Carlo sweeps")
    p.add_argument("--task", choices=["regression", "classification"], default="regression")
    p.add_argument("--sigma2-list", default="0.0,0.1,1.0,5.0,10.0")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--g", type=int, default=10)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--l", type=int, default=5)
    p.add_argument("--sigma1", type=float, default=None)
    p.add_argument("--sigma-e", type=float, default=None)
    p.add_argument("--threads", type=int, default=1, help="parallel trial workers")
    p.add_argument("-o", "--output", required=True, help="CSV path (figure lands beside it)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="learner vs exhaustive search for one label")
    p.add_argument("input")
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("--label", type=int, required=True)
    _add_learn_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="precision@k of the embedding scorer")
    p.add_argument("input", help="dataset with true labels")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k-list", default="1,3,5")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "sigma1", None) is None and args.command == "simulate":
        args.sigma1 = 1.0 if args.task == "regression" else 0.1
    if getattr(args, "sigma_e", None) is None and args.command == "simulate":
        args.sigma_e = 1.0 if args.task == "regression" else 0.0
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, InvalidInputError, BoundsError, AggLabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
