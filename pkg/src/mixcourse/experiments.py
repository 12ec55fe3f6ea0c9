"""Replicated simulation study: simulate, fit both methods, align, score."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .evaluation import (align_labels, classification_metrics, metric_ci, recovery_metrics,
                         relabel, select_n_clusters)
from .likelihood import normalized_entropy
from .posthoc import posthoc_classify
from .saem import FitConfig, FitDivergenceError, fit
from .simulate import Scenario, simulate

log = logging.getLogger(__name__)

METHODS = ("mixture", "posthoc")


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    method: str
    true_labels: np.ndarray
    pred_labels: np.ndarray            # already mapped onto the true labelling
    true_params: np.ndarray            # (k, 2 + d) rows (tau, xi, w_1..w_d)
    est_params: np.ndarray             # aligned to true_params
    true_proportions: np.ndarray
    est_proportions: np.ndarray
    accuracy: float
    recall: np.ndarray
    precision: np.ndarray
    confusion: np.ndarray              # row-normalised
    entropy: float
    selected_k: int | None = None
    icl_table: dict | None = None


def _score(rep, method, truth, cohort, labels, table, props, membership, **extra):
    perm = align_labels(truth, table)
    aligned = relabel(labels, perm)
    metrics = classification_metrics(cohort.labels, aligned, truth.shape[0])
    ent = normalized_entropy(membership) if membership.shape[1] > 1 else 0.0
    return ReplicateResult(rep, method, cohort.labels, aligned, truth, table[perm],
                           np.asarray(cohort.scenario.proportions, dtype=float), props[perm],
                           metrics.accuracy, metrics.recall, metrics.precision,
                           metrics.confusion_normalized, ent, **extra)


def run_replicate(scenario: Scenario, replicate: int, config: FitConfig, seed: int,
                  methods=METHODS, candidate_ks=None) -> list:
    """Simulate one cohort and score each requested method against its truth.

    With ``candidate_ks`` the mixture fit is chosen by ICL among the
    candidates; scores then use the correct ``k`` fit when the selection
    differs, as the classification tables assume the true cluster count.
    """
    ss = np.random.SeedSequence([seed, replicate])
    sim_seed, fit_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    cohort = simulate(scenario, seed=sim_seed)
    truth = cohort.truth_table()
    k = scenario.n_clusters
    cfg = replace(config, n_clusters=k, n_sources=scenario.n_sources, seed=fit_seed)
    out = []
    if "mixture" in methods:
        extra = {}
        if candidate_ks:
            sel = select_n_clusters(cohort.data, candidate_ks, cfg, keep_models=True)
            extra = {"selected_k": sel.chosen, "icl_table": sel.table}
            model = sel.models.get(k) or fit(cohort.data, cfg)
        else:
            model = fit(cohort.data, cfg)
        out.append(_score(replicate, "mixture", truth, cohort, model.labels, model.cluster_summary(),
                          model.mixture.proportions, model.membership, **extra))
    if "posthoc" in methods:
        ph = posthoc_classify(cohort.data, k, cfg)
        out.append(_score(replicate, "posthoc", truth, cohort, ph.labels, ph.cluster_table,
                          ph.proportions, ph.membership))
    return out


def _run_one(args):
    scenario, rep, config, seed, methods, candidate_ks = args
    try:
        return run_replicate(scenario, rep, config, seed, methods, candidate_ks)
    except FitDivergenceError as exc:
        log.warning("replicate %d diverged: %s", rep, exc)
        return []


def run_study(scenario: Scenario, n_replicates: int, config: FitConfig, seed: int = 0,
              methods=METHODS, candidate_ks=None, workers: int = 1) -> list:
    """Replicates are independent; results come back in replicate order for
    any worker count."""
    jobs = [(scenario, r, config, seed, tuple(methods), candidate_ks) for r in range(n_replicates)]
    if workers <= 1:
        batches = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_one, jobs))
    return [res for batch in batches for res in batch]


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))


# ---------------------------------------------------------------- summaries

def parameter_names(k: int, d: int) -> list:
    names = [f"pi^{c + 1}" for c in range(k)]
    names += [f"tau^{c + 1}" for c in range(k)]
    names += [f"xi^{c + 1}" for c in range(k)]
    names += [f"w{j + 1}^{c + 1}" for j in range(d) for c in range(k)]
    return names


def _param_vector(props, table):
    k, cols = table.shape
    vec = [props, table[:, 0], table[:, 1]]
    vec += [table[:, 2 + j] for j in range(cols - 2)]
    return np.concatenate(vec)


def classification_rows(results, method: str) -> list:
    """Table-2 style rows: metric, cluster, mean, lower, upper."""
    res = [r for r in results if r.method == method]
    if not res:
        return []
    k = res[0].recall.shape[0]
    rows = [("accuracy", "", *metric_ci([r.accuracy for r in res]))]
    for c in range(k):
        rows.append(("recall", str(c + 1), *metric_ci([r.recall[c] for r in res])))
    for c in range(k):
        rows.append(("precision", str(c + 1), *metric_ci([r.precision[c] for r in res])))
    rows.append(("entropy", "", *metric_ci([r.entropy for r in res])))
    return rows


def recovery_rows(results, method: str) -> list:
    """Table-3/4/5 style rows: parameter, true, estimate, bias, SE, RMSE."""
    res = [r for r in results if r.method == method]
    if not res:
        return []
    k, cols = res[0].true_params.shape
    truth = _param_vector(res[0].true_proportions, res[0].true_params)
    est = np.array([_param_vector(r.est_proportions, r.est_params) for r in res])
    rec = recovery_metrics(est, truth)
    names = parameter_names(k, cols - 2)
    return [(names[i], truth[i], rec.estimate[i], rec.bias[i], rec.se[i], rec.rmse[i])
            for i in range(len(names))]


def mean_confusion(results, method: str) -> np.ndarray:
    res = [r for r in results if r.method == method]
    return np.nanmean(np.stack([r.confusion for r in res]), axis=0)
