"""Command-line interface.

Exit codes: 0 success, 2 input or schema error, 3 numerical divergence,
4 file-system error.  ``MIXCOURSE_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as mio
from .evaluation import (align_labels, classification_metrics, metric_ci, select_n_clusters,
                         trajectory_curves)
from .experiments import (METHODS, classification_rows, mean_confusion, recovery_rows, run_study)
from .likelihood import icl, normalized_entropy
from .model import ModelError
from .posthoc import posthoc_classify
from .saem import FitConfig, FitDivergenceError, fit, personalize
from .simulate import PRESETS, default_fixed_effects, scenario_preset, simulate

log = logging.getLogger("mixcourse")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _int_list(text: str) -> list:
    try:
        values = [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("cluster counts must be positive integers")
    return values


def _fit_config(args, n_clusters: int) -> FitConfig:
    return FitConfig(n_clusters=n_clusters, n_sources=args.sources, n_iterations=args.iters,
                     burn_in=args.burnin, seed=args.seed, indicator_update=args.indicator)


def _add_fit_flags(p, clusters_default=None):
    p.add_argument("--data", required=True, help="long-format CSV: patient_id,time,<features>")
    p.add_argument("--clusters", type=_int_list, default=clusters_default, required=clusters_default is None,
                   help="cluster count, or a comma-separated list of candidates")
    p.add_argument("--sources", type=int, default=1, help="number of independent sources (<= d - 1)")
    p.add_argument("--iters", type=int, default=10000, help="SAEM iterations")
    p.add_argument("--burnin", type=float, default=0.9, help="burn-in fraction of the iterations")
    p.add_argument("--indicator", choices=("sample", "argmax"), default="sample",
                   help="cluster indicator refresh inside the sampler")


def _summary_line(row) -> str:
    return "(" + ", ".join(f"{x:.2f}" for x in row) + ")"


def _cluster_rows(model):
    table = model.cluster_summary()
    return [(c + 1, float(model.mixture.proportions[c]), *map(float, table[c])) for c in range(model.n_clusters)]


def _cluster_header(feature_names):
    return ["cluster", "proportion", "tau", "xi", *[f"w_{f}" for f in feature_names]]


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    overrides = {"n_patients": args.n_patients, "n_visits": args.visits}
    if args.noise is not None:
        overrides["noise_sd"] = args.noise
    scenario = scenario_preset(args.scenario, **overrides)
    cohort = simulate(scenario, seed=args.seed)
    out = Path(args.out)
    mio.write_dataset(out / "data.csv", cohort.data)
    mio.write_truth(out / "truth.csv", cohort.data.patient_ids, cohort.labels, cohort.individual)
    table = cohort.truth_table()
    rows = [(c + 1, float(scenario.proportions[c]), *map(float, table[c])) for c in range(scenario.n_clusters)]
    mio.write_csv(out / "truth_clusters.csv", _cluster_header(scenario.feature_names), rows)
    print(f"wrote {cohort.data.n_rows} rows for {cohort.data.n_patients} patients to {out / 'data.csv'}")
    return EXIT_OK


def _fit_candidates(data, args, trace_path=None):
    """Fit every requested k; returns ``(chosen_k, {k: icl}, {k: model})``."""
    ks = list(dict.fromkeys(args.clusters))
    base = _fit_config(args, ks[0])
    if len(ks) == 1:
        model = fit(data, replace(base, trace_path=trace_path))
        return ks[0], {ks[0]: icl(model, data)}, {ks[0]: model}
    sel = select_n_clusters(data, ks, base, keep_models=True)
    if not sel.models:
        raise FitDivergenceError("every candidate fit diverged")
    if trace_path:
        # rerun the chosen k with the trace enabled; same seed, same result
        sel.models[sel.chosen] = fit(data, replace(base, n_clusters=sel.chosen, trace_path=trace_path))
    return sel.chosen, sel.table, sel.models


def _write_icl(path, table, chosen):
    rows = [(k, float(v) if v is not None else float("nan"), int(k == chosen)) for k, v in sorted(table.items())]
    mio.write_csv(path, ["k", "icl", "selected"], rows)


def cmd_fit(args) -> int:
    data = mio.read_dataset(args.data)
    out = Path(args.out)
    trace_path = str(out / "trace.csv") if args.trace else None
    if trace_path:
        out.mkdir(parents=True, exist_ok=True)
    chosen, table, models = _fit_candidates(data, args, trace_path)
    model = models[chosen]
    mio.save_model(out / "model.json", model)
    for k, m in models.items():
        if len(models) > 1:
            mio.save_model(out / f"model_k{k}.json", m)
    mio.write_membership(out / "membership.csv", data.patient_ids, model.membership)
    mio.write_csv(out / "clusters.csv", _cluster_header(data.feature_names), _cluster_rows(model))
    _write_icl(out / "icl.csv", table, chosen)
    print("ICL (lower is better):")
    for k, v in sorted(table.items()):
        print(f"  k={k}: {'failed' if v is None else f'{v:.2f}'}{'  <- selected' if k == chosen else ''}")
    print(f"selected k = {chosen}")
    print("cluster summaries (tau, xi, " + ", ".join(f"w_{f}" for f in data.feature_names) + "):")
    for row in _cluster_rows(model):
        print(f"  cluster {row[0]} ({100 * row[1]:.1f}%): {_summary_line(row[2:])}")
    ent = normalized_entropy(model.membership) if model.n_clusters > 1 else 0.0
    print(f"normalized entropy: {ent:.4f}")
    return EXIT_OK


def cmd_personalize(args) -> int:
    model = mio.load_model(args.model)
    data = mio.read_dataset(args.data)
    ind, membership = personalize(model, data, n_iterations=args.iters, seed=args.seed)
    out = Path(args.out)
    ns = ind.n_sources
    header = ["patient_id", "tau", "xi", *[f"s{l + 1}" for l in range(ns)],
              *[f"p{c + 1}" for c in range(model.n_clusters)], "cluster"]
    labels = np.argmax(membership, axis=1)
    rows = [(pid, float(ind.tau[i]), float(ind.xi[i]), *map(float, ind.sources[i]),
             *map(float, membership[i]), int(labels[i]) + 1) for i, pid in enumerate(data.patient_ids)]
    mio.write_csv(out / "personalized.csv", header, rows)
    print(f"personalised {data.n_patients} patients -> {out / 'personalized.csv'}")
    return EXIT_OK


def cmd_classify_posthoc(args) -> int:
    data = mio.read_dataset(args.data)
    if len(args.clusters) != 1:
        raise ModelError("classify-posthoc takes a single cluster count")
    k = args.clusters[0]
    res = posthoc_classify(data, k, _fit_config(args, 1))
    out = Path(args.out)
    mio.write_membership(out / "membership.csv", data.patient_ids, res.membership)
    rows = [(c + 1, float(res.proportions[c]), *map(float, res.cluster_table[c])) for c in range(k)]
    mio.write_csv(out / "clusters.csv", _cluster_header(data.feature_names), rows)
    mio.save_model(out / "single_model.json", res.single_fit)
    for row in rows:
        print(f"  cluster {row[0]} ({100 * row[1]:.1f}%): {_summary_line(row[2:])}")
    return EXIT_OK


def _evaluate_files(args, out: Path) -> int:
    ids, true_labels, latents = mio.read_truth(args.truth)
    pred_ids, membership, pred_labels = mio.read_membership(args.pred)
    order = mio.align_ids(ids, pred_ids, f"{args.truth} and {args.pred}")
    membership, pred_labels = membership[order], pred_labels[order]
    k = membership.shape[1]
    if true_labels.max() + 1 > k:
        raise ModelError(f"truth has {true_labels.max() + 1} clusters but predictions only {k}")
    # align on the mean true (tau, xi) inside each true and each predicted cluster
    z = np.column_stack([latents.tau, latents.xi])
    true_tab = np.array([z[true_labels == c].mean(axis=0) if np.any(true_labels == c) else np.zeros(2)
                         for c in range(k)])
    pred_tab = np.array([z[pred_labels == c].mean(axis=0) if np.any(pred_labels == c) else np.full(2, 1e6)
                         for c in range(k)])
    perm = align_labels(true_tab, pred_tab)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(k)
    aligned = inverse[pred_labels]
    metrics = classification_metrics(true_labels, aligned, k)
    ent = normalized_entropy(membership) if k > 1 else 0.0
    point = lambda x: (float(x),) * 3   # one run: degenerate interval
    rows = [("accuracy", "", *point(metrics.accuracy))]
    rows += [("recall", str(c + 1), *point(metrics.recall[c])) for c in range(k)]
    rows += [("precision", str(c + 1), *point(metrics.precision[c])) for c in range(k)]
    rows.append(("entropy", "", *point(ent)))
    mio.write_csv(out / "table2.csv", ["metric", "cluster", "mean", "lower", "upper"], rows)
    _write_confusion(out / "confusion.csv", metrics.confusion_normalized)
    if args.model:
        model = mio.load_model(args.model)
        table = model.cluster_summary()[perm]
        _write_curves(out / "curves.csv", model.population, table, model.mixture.proportions[perm],
                      model.feature_names)
    print(f"accuracy {metrics.accuracy:.4f}; entropy {ent:.4f}")
    return EXIT_OK


def _write_confusion(path, conf):
    k = conf.shape[0]
    mio.write_csv(path, ["true_cluster", *[f"pred_{c + 1}" for c in range(k)]],
                  [(c + 1, *map(float, conf[c])) for c in range(k)])


def _write_curves(path, pop, table, proportions, feature_names, n_points: int = 201):
    lo, hi = float(np.min(table[:, 0])) - 20.0, float(np.max(table[:, 0])) + 20.0
    rows = trajectory_curves(pop, table, proportions, np.linspace(lo, hi, n_points))
    mio.write_csv(path, ["curve", "time", *feature_names], rows)


def _evaluate_study(args, out: Path) -> int:
    scenario = scenario_preset(args.scenario, n_patients=args.n_patients)
    config = FitConfig(n_iterations=args.iters, burn_in=args.burnin, seed=args.seed,
                       indicator_update=args.indicator)
    candidates = args.candidates
    results = run_study(scenario, args.replicates, config, seed=args.seed, methods=METHODS,
                        candidate_ks=candidates, workers=args.workers)
    if not results:
        raise FitDivergenceError("every replicate diverged")
    header2 = ["metric", "cluster", "mean", "lower", "upper"]
    header3 = ["parameter", "true", "estimate", "bias", "se", "rmse"]
    for method in METHODS:
        rows = classification_rows(results, method)
        if not rows:
            continue
        mio.write_csv(out / f"table2_{method}.csv", header2, rows)
        mio.write_csv(out / f"table3_{method}.csv", header3, recovery_rows(results, method))
        _write_confusion(out / f"confusion_{method}.csv", mean_confusion(results, method))
        acc = metric_ci([r.accuracy for r in results if r.method == method])
        print(f"{method}: accuracy {acc[0]:.3f} ({acc[1]:.3f}-{acc[2]:.3f})")
    mio.write_csv(out / "replicates.csv", ["replicate", "method", "accuracy", "entropy", "selected_k"],
                  [(r.replicate, r.method, float(r.accuracy), float(r.entropy),
                    "" if r.selected_k is None else r.selected_k) for r in results])
    if candidates:
        chosen = [r.selected_k for r in results if r.method == "mixture"]
        share = np.mean([c == scenario.n_clusters for c in chosen])
        print(f"ICL chose k={scenario.n_clusters} in {100 * share:.1f}% of replicates")
    pop = default_fixed_effects(scenario)
    first = results[0]
    _write_curves(out / "curves_truth.csv", pop, first.true_params, first.true_proportions,
                  scenario.feature_names)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    if args.scenario:
        return _evaluate_study(args, out)
    if not (args.truth and args.pred):
        raise ModelError("evaluate needs either --scenario or both --truth and --pred")
    return _evaluate_files(args, out)


def cmd_select(args) -> int:
    data = mio.read_dataset(args.data)
    ks = list(dict.fromkeys(args.clusters))
    sel = select_n_clusters(data, ks, _fit_config(args, ks[0]))
    out = Path(args.out)
    _write_icl(out / "icl.csv", sel.table, sel.chosen)
    for k, v in sorted(sel.table.items()):
        print(f"k={k}: {'failed' if v is None else f'{v:.2f}'}")
    print(f"selected k = {sel.chosen}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixcourse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic cohort from a scenario preset")
    p.add_argument("--scenario", required=True, choices=sorted(PRESETS))
    p.add_argument("--n-patients", type=int, default=1000)
    p.add_argument("--visits", type=int, default=6)
    p.add_argument("--noise", type=float, default=None, help="observation noise SD (default: preset)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the mixture model; several --clusters values trigger ICL selection")
    _add_fit_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", action="store_true", help="write the per-iteration diagnostics trace")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("personalize", help="individual parameters of new patients under a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("classify-posthoc", help="single-cluster fit followed by a Gaussian mixture")
    _add_fit_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify_posthoc)

    p = sub.add_parser("evaluate", help="score predictions against truth, or run a replicated study")
    p.add_argument("--truth")
    p.add_argument("--pred", help="membership CSV")
    p.add_argument("--model", help="model JSON; adds trajectory curves")
    p.add_argument("--scenario", choices=sorted(PRESETS), help="run a replicated simulation study")
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--n-patients", type=int, default=300)
    p.add_argument("--candidates", type=_int_list, default=None, help="ICL candidates for the mixture fit")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--burnin", type=float, default=0.9)
    p.add_argument("--indicator", choices=("sample", "argmax"), default="sample")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="fit candidate cluster counts and keep the ICL minimiser")
    _add_fit_flags(p, clusters_default=[2, 3, 4])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MIXCOURSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FitDivergenceError as exc:
        print(f"error: fit diverged: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
