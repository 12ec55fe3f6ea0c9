"""Label alignment, classification metrics and parameter-recovery summaries."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .likelihood import icl, select_by_icl
from .model import Dataset, ModelError, PopulationParams, logistic_curve
from .saem import FitConfig, FitDivergenceError, fit

log = logging.getLogger(__name__)


def _zscore_pooled(true_params, est_params):
    both = np.vstack([true_params, est_params])
    mu = both.mean(axis=0)
    sd = both.std(axis=0)
    keep = sd > 1e-12
    if not np.all(keep):
        log.warning("dropping zero-variance column(s) %s from the alignment distance",
                    np.flatnonzero(~keep).tolist())
    sd = np.where(keep, sd, 1.0)
    return ((true_params - mu) / sd)[:, keep], ((est_params - mu) / sd)[:, keep]


def alignment_cost(true_params, est_params) -> np.ndarray:
    """Euclidean distances between z-scored true rows and estimated rows."""
    t = np.atleast_2d(np.asarray(true_params, dtype=float))
    e = np.atleast_2d(np.asarray(est_params, dtype=float))
    if t.shape != e.shape:
        raise ModelError(f"parameter tables differ in shape: {t.shape} vs {e.shape}")
    tz, ez = _zscore_pooled(t, e)
    return np.sqrt(np.sum((tz[:, None, :] - ez[None, :, :]) ** 2, axis=2))


def align_labels(true_params, est_params) -> np.ndarray:
    """``perm[c]`` is the estimated cluster matched to true cluster ``c``
    (minimum total distance after pooled z-scoring)."""
    cost = alignment_cost(true_params, est_params)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def brute_force_alignment(true_params, est_params) -> np.ndarray:
    """Exhaustive search over permutations; only for small ``k``."""
    cost = alignment_cost(true_params, est_params)
    k = cost.shape[0]
    best = min(itertools.permutations(range(k)), key=lambda p: (sum(cost[i, p[i]] for i in range(k)), p))
    return np.array(best)


def relabel(pred_labels, perm) -> np.ndarray:
    """Map estimated labels onto true labels given ``perm`` from :func:`align_labels`."""
    perm = np.asarray(perm)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.shape[0])
    return inverse[np.asarray(pred_labels)]


@dataclass(frozen=True)
class ClassificationMetrics:
    confusion: np.ndarray          # counts, rows = true clusters
    confusion_normalized: np.ndarray
    accuracy: float
    recall: np.ndarray             # NaN where a true cluster is empty
    precision: np.ndarray          # NaN where a predicted cluster is empty


def classification_metrics(true_labels, pred_labels, k: int) -> ClassificationMetrics:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    if true_labels.shape != pred_labels.shape:
        raise ModelError("label vectors differ in length")
    conf = np.zeros((k, k))
    np.add.at(conf, (true_labels, pred_labels), 1.0)
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    diag = np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(row > 0, diag / row, np.nan)
        precision = np.where(col > 0, diag / col, np.nan)
        norm = np.where(row[:, None] > 0, conf / row[:, None], np.nan)
    return ClassificationMetrics(conf, norm, float(diag.sum() / conf.sum()), recall, precision)


def metric_ci(values, level: float = 0.95):
    """``(mean, lower, upper)`` with empirical percentiles across replicates."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return (np.nan, np.nan, np.nan)
    mean = float(values.mean())
    if values.size < 2:
        log.warning("a single replicate gives a degenerate interval")
        return (mean, mean, mean)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return (mean, float(lo), float(hi))


@dataclass(frozen=True)
class RecoveryMetrics:
    estimate: np.ndarray
    bias: np.ndarray
    se: np.ndarray
    rmse: np.ndarray
    n_replicates: int


def recovery_metrics(estimates, truth) -> RecoveryMetrics:
    """Bias, SE (sample SD across replicates) and RMSE per parameter.

    ``estimates`` has one row per replicate.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.broadcast_to(np.asarray(truth, dtype=float), est.shape[1:])
    r = est.shape[0]
    mean = est.mean(axis=0)
    bias = mean - truth
    se = est.std(axis=0, ddof=1) if r > 1 else np.zeros_like(mean)
    rmse = np.sqrt(np.mean((est - truth) ** 2, axis=0))
    if r > 1:
        gap = rmse ** 2 - (bias ** 2 + se ** 2 * (r - 1) / r)
        scale = np.maximum(1.0, rmse ** 2)
        if np.any(np.abs(gap) > 1e-10 * scale):
            raise AssertionError("RMSE^2 = bias^2 + (R-1)/R SE^2 violated")
    return RecoveryMetrics(mean, bias, se, rmse, r)


@dataclass
class SelectionResult:
    chosen: int
    table: dict = field(default_factory=dict)      # k -> ICL (None if the fit failed)
    models: dict = field(default_factory=dict)


def select_n_clusters(data: Dataset, candidate_ks, config: FitConfig, keep_models: bool = False,
                      fitter=None) -> SelectionResult:
    """Fit every candidate cluster count and keep the ICL minimiser.

    A divergent fit is recorded as ``None`` and selection runs over the rest.
    """
    from dataclasses import replace

    fitter = fitter or fit
    candidate_ks = list(candidate_ks)
    if not candidate_ks:
        raise ModelError("candidate list is empty")
    table, models = {}, {}
    for k in candidate_ks:
        try:
            model = fitter(data, replace(config, n_clusters=int(k)))
        except FitDivergenceError as exc:
            log.warning("fit with k=%d diverged: %s", k, exc)
            table[k] = None
            continue
        table[k] = icl(model, data)
        if keep_models:
            models[k] = model
    if all(v is None for v in table.values()):
        raise FitDivergenceError(f"every candidate fit diverged (k in {candidate_ks})")
    return SelectionResult(select_by_icl(table), table, models)


def trajectory_curves(pop: PopulationParams, cluster_table, proportions, times) -> list:
    """Average trajectories for plotting: one curve per cluster plus the
    proportion-weighted population curve.

    ``cluster_table`` has rows ``(tau_bar, xi_bar, w_1..w_d)``.  Returns rows
    ``(curve, time, y_1..y_d)`` where ``curve`` is ``"cluster_<c>"`` (1-based)
    or ``"population"``.
    """
    table = np.atleast_2d(np.asarray(cluster_table, dtype=float))
    pi = np.asarray(proportions, dtype=float)
    times = np.asarray(times, dtype=float)
    curves = [(f"cluster_{c + 1}", table[c]) for c in range(table.shape[0])]
    curves.append(("population", pi @ table))
    rows = []
    for name, row in curves:
        psi = np.exp(row[1]) * (times - row[0])
        values = logistic_curve(pop.g_tilde, pop.v_tilde, psi, row[2:])
        rows.extend((name, float(t), *map(float, v)) for t, v in zip(times, values))
    return rows
