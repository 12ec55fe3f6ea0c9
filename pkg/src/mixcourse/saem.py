"""Mixture MCMC-SAEM estimation.

Each iteration runs three steps:

1. simulation -- one Metropolis-Hastings-within-Gibbs sweep over the
   population block ``(g_tilde, v_tilde, beta)``, the individual blocks
   ``tau``, ``xi``, ``sources`` (vectorised over patients, one independent
   accept/reject per patient) and a refresh of the cluster indicators;
2. stochastic approximation of the complete-data sufficient statistics;
3. closed-form maximisation per cluster followed by the centering projection.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp

from .gmm import kmeans_plus_plus
from .likelihood import (LOG_SQRT_2PI, LatentState, cluster_log_joint, complete_loglik,
                         posterior_membership)
from .model import (Dataset, HyperParams, IndividualParams, MixtureParams, ModelError,
                    PopulationParams, build_mixing_matrix, logistic_curve, orthonormal_complement)

log = logging.getLogger(__name__)

CLUSTER_SD_FLOOR = 1e-3
NOISE_SD_FLOOR = 1e-4
EMPTY_CLUSTER_COUNT = 1e-10
DIVERGENCE_PATIENCE = 100
INITIAL_XI_SD = 1.0

POP_BLOCKS = ("g_tilde", "v_tilde", "beta")
IND_BLOCKS = ("tau", "xi", "sources")


class FitDivergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SchemaError(ModelError):
    """Feature set of new data does not match the fitted model."""


@dataclass(frozen=True)
class FitConfig:
    n_clusters: int = 1
    n_sources: int = 1
    n_iterations: int = 10000
    burn_in: float = 0.9
    step_exponent: float = 0.65
    proposal_sd: dict = field(default_factory=lambda: {
        "g_tilde": 0.01, "v_tilde": 0.01, "beta": 0.01,
        "tau": 1.0, "xi": 0.1, "sources": 0.5})
    adapt_window: int = 50
    target_accept: float = 0.3
    seed: int = 0
    trace_stride: int = 1
    trace_path: Optional[str] = None
    # "sample" draws r_i from the responsibilities, "argmax" takes the hard assignment
    indicator_update: str = "sample"
    # joint label/latent moves between clusters before the indicator refresh
    cluster_jumps: bool = True
    # cluster SDs of tau and xi may shrink by at most this factor per iteration
    # during the first ``anneal_fraction`` of burn-in
    variance_decay: float = 0.95
    anneal_fraction: float = 0.25
    # with k > 1, a single-cluster run of this fraction of n_iterations seeds
    # the clusters through a Gaussian mixture on its individual estimates
    warm_start: float = 0.2
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_sources < 1:
            raise ModelError("n_clusters and n_sources must be >= 1")
        if self.n_iterations < 2 or self.adapt_window < 1 or self.trace_stride < 1:
            raise ModelError("iteration counts must be positive (n_iterations >= 2)")
        if not 0.0 < self.burn_in < 1.0:
            raise ModelError("burn_in must lie in (0, 1)")
        if not 0.5 < self.step_exponent <= 1.0:
            raise ModelError("step_exponent must lie in (0.5, 1]")
        if self.indicator_update not in ("argmax", "sample"):
            raise ModelError("indicator_update must be 'argmax' or 'sample'")
        if not 0.0 < self.variance_decay <= 1.0 or not 0.0 <= self.anneal_fraction <= 1.0:
            raise ModelError("variance_decay must lie in (0, 1] and anneal_fraction in [0, 1]")
        if not 0.0 <= self.warm_start < 1.0:
            raise ModelError("warm_start must lie in [0, 1)")
        missing = set(POP_BLOCKS + IND_BLOCKS) - set(self.proposal_sd)
        if missing:
            raise ModelError(f"proposal_sd lacks {sorted(missing)}")

    @property
    def burn_in_iterations(self) -> int:
        return min(int(np.floor(self.burn_in * self.n_iterations)), self.n_iterations - 1)

    @property
    def anneal_iterations(self) -> int:
        return int(np.floor(self.anneal_fraction * self.burn_in_iterations))

    @property
    def warm_start_iterations(self) -> int:
        if self.n_clusters == 1 or self.warm_start == 0.0:
            return 0
        return max(int(np.floor(self.warm_start * self.n_iterations)), 2)


def step_size(k: int, config: FitConfig) -> float:
    """Robbins-Monro weight: 1 during burn-in, ``(k - k_burn) ** -alpha`` after."""
    if k < 1:
        raise ValueError("iterations are counted from 1")
    k_burn = config.burn_in_iterations
    if k <= k_burn:
        return 1.0
    return float((k - k_burn) ** (-config.step_exponent))


# ---------------------------------------------------------------- statistics

@dataclass(frozen=True)
class SufficientStats:
    counts: np.ndarray          # (k,)  sum_i r_i^c
    tau_sum: np.ndarray         # (k,)
    tau_sq: np.ndarray          # (k,)
    xi_sum: np.ndarray          # (k,)
    xi_sq: np.ndarray           # (k,)
    source_sum: np.ndarray      # (k, Ns)
    g_tilde: np.ndarray         # (d,)
    v_tilde: np.ndarray         # (d,)
    beta: np.ndarray            # (d-1, Ns)
    rss: np.ndarray             # (d,)
    n_obs: np.ndarray           # (d,)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_stats(state: LatentState, n_clusters: int, sq_resid: np.ndarray, mask: np.ndarray) -> SufficientStats:
    """Sufficient statistics of the current latent draw."""
    lab = state.indicators
    ind = state.individuals
    k = n_clusters

    def csum(x):
        return np.bincount(lab, weights=x, minlength=k)

    src = np.column_stack([csum(ind.sources[:, j]) for j in range(ind.n_sources)])
    return SufficientStats(
        counts=np.bincount(lab, minlength=k).astype(float),
        tau_sum=csum(ind.tau), tau_sq=csum(ind.tau ** 2),
        xi_sum=csum(ind.xi), xi_sq=csum(ind.xi ** 2),
        source_sum=src,
        g_tilde=np.array(state.pop.g_tilde), v_tilde=np.array(state.pop.v_tilde),
        beta=np.array(state.pop.beta),
        rss=sq_resid.sum(axis=0), n_obs=mask.sum(axis=0).astype(float))


def update_stats(stats: SufficientStats, current: SufficientStats, eps: float) -> SufficientStats:
    """``S + eps * (s(z) - S)`` componentwise."""
    if eps == 1.0:
        return current
    new = {}
    for name, old in stats.as_dict().items():
        cur = getattr(current, name)
        new[name] = old + eps * (cur - old)
    return SufficientStats(**new)


@dataclass(frozen=True)
class MStepResult:
    population: PopulationParams
    mixture: MixtureParams
    xi_shift: float
    source_shift: np.ndarray
    g_shift: np.ndarray
    empty_clusters: tuple


def _floored_sd(sq, total, count, floor):
    var = sq / count - (total / count) ** 2
    return max(np.sqrt(max(var, 0.0)), floor)


def maximize(stats: SufficientStats, previous: Optional[MixtureParams] = None) -> MStepResult:
    """Closed-form M-step plus centering of the cluster means of ``xi`` and sources.

    The ``xi`` centering shift ``m`` is compensated in ``v_tilde`` (``v_tilde + m``)
    so model predictions are unchanged.  Re-centring the source means by ``u``
    moves every space shift by ``-A u``; ``g_tilde`` absorbs this to first
    order at ``psi = 0`` (``g_shift``).  Clusters whose count is zero keep their
    previous parameters.
    """
    counts = stats.counts
    k = counts.shape[0]
    n_total = counts.sum()
    if n_total <= 0:
        raise ModelError("sufficient statistics carry no patients")
    pi = counts / n_total
    pi = pi / pi.sum()
    ns = stats.source_sum.shape[1]
    tau_mean, tau_sd = np.empty(k), np.empty(k)
    xi_mean, xi_sd = np.empty(k), np.empty(k)
    src_mean = np.empty((k, ns))
    empty = []
    for c in range(k):
        n_c = counts[c]
        if n_c <= EMPTY_CLUSTER_COUNT:
            empty.append(c)
            pi[c] = 0.0
            if previous is None:
                tau_mean[c], tau_sd[c], xi_mean[c], xi_sd[c] = 0.0, 1.0, 0.0, 1.0
                src_mean[c] = 0.0
            else:
                tau_mean[c], tau_sd[c] = previous.tau_mean[c], previous.tau_sd[c]
                xi_mean[c], xi_sd[c] = previous.xi_mean[c], previous.xi_sd[c]
                src_mean[c] = previous.source_means[c]
            continue
        tau_mean[c] = stats.tau_sum[c] / n_c
        tau_sd[c] = _floored_sd(stats.tau_sq[c], stats.tau_sum[c], n_c, CLUSTER_SD_FLOOR)
        xi_mean[c] = stats.xi_sum[c] / n_c
        xi_sd[c] = _floored_sd(stats.xi_sq[c], stats.xi_sum[c], n_c, CLUSTER_SD_FLOOR)
        src_mean[c] = stats.source_sum[c] / n_c
    if empty:
        log.debug("empty cluster(s) %s keep their previous parameters", empty)
        pi = pi / pi.sum()

    xi_shift = float(pi @ xi_mean)
    source_shift = pi @ src_mean
    xi_mean = xi_mean - xi_shift
    src_mean = src_mean - source_shift
    # second pass removes the rounding residue of the first subtraction
    xi_mean -= pi @ xi_mean
    src_mean -= pi @ src_mean

    p = expit(-stats.g_tilde)
    g_shift = -(build_mixing_matrix(stats.v_tilde, stats.beta) @ source_shift) / (p * (1.0 - p))

    noise = np.maximum(np.sqrt(stats.rss / np.maximum(stats.n_obs, 1.0)), NOISE_SD_FLOOR)
    pop = PopulationParams(stats.g_tilde + g_shift, stats.v_tilde + xi_shift, stats.beta)
    mix = MixtureParams(pi, tau_mean, tau_sd, xi_mean, xi_sd, src_mean, noise)
    return MStepResult(pop, mix, xi_shift, source_shift, g_shift, tuple(empty))


def center_stats(stats: SufficientStats, xi_shift: float, source_shift, g_shift=0.0) -> SufficientStats:
    """Re-express the statistics after shifting ``xi`` by ``-xi_shift`` (and
    ``v_tilde`` by ``+xi_shift``), the sources by ``-source_shift`` and
    ``g_tilde`` by ``+g_shift``."""
    m = xi_shift
    n = stats.counts
    return replace(
        stats,
        xi_sum=stats.xi_sum - m * n,
        xi_sq=stats.xi_sq - 2.0 * m * stats.xi_sum + m * m * n,
        source_sum=stats.source_sum - np.outer(n, source_shift),
        g_tilde=stats.g_tilde + g_shift,
        v_tilde=stats.v_tilde + m,
    )


# ---------------------------------------------------------------- evaluation core

class _Evaluator:
    """Vectorised residuals over the long-format rows of a dataset."""

    def __init__(self, data: Dataset):
        self.idx = data.patient_index
        self.t = data.times
        self.mask = data.mask
        self.y = np.where(self.mask, data.values, 0.0)
        self.n = data.n_patients
        self.d = data.n_features

    def sq_resid(self, g, vt, mixing, tau, xi, src):
        idx = self.idx
        w = src @ mixing.T
        psi = np.exp(xi)[idx] * (self.t - tau[idx])
        r = (self.y - logistic_curve(g, vt, psi, w[idx])) * self.mask
        return r * r

    def patient_quad(self, sq, inv_var):
        return -0.5 * np.bincount(self.idx, weights=sq @ inv_var, minlength=self.n)


class _Chain:
    """Mutable sampler state; arrays are replaced, never shared with callers."""

    def __init__(self, ev: _Evaluator, g, vt, beta, tau, xi, src, noise):
        self.ev = ev
        self.g, self.vt, self.beta = g.copy(), vt.copy(), beta.copy()
        self.tau, self.xi, self.src = tau.copy(), xi.copy(), src.copy()
        self.basis = orthonormal_complement(np.exp(self.vt))
        self.set_noise(noise)

    @property
    def mixing(self):
        return self.basis @ self.beta

    def set_noise(self, noise):
        self.inv_var = 1.0 / np.asarray(noise, dtype=float) ** 2
        if not hasattr(self, "sq"):
            self.refresh()
        self.pq = self.ev.patient_quad(self.sq, self.inv_var)

    def refresh(self):
        self.sq = self.ev.sq_resid(self.g, self.vt, self.mixing, self.tau, self.xi, self.src)
        self.pq = self.ev.patient_quad(self.sq, self.inv_var)

    def individuals(self) -> IndividualParams:
        return IndividualParams(self.tau, self.xi, self.src)

    def population(self) -> PopulationParams:
        return PopulationParams(self.g, self.vt, self.beta)

    # -- population block
    def population_step(self, name, sd, prior_mean, prior_sd, rng) -> float:
        attr = {"g_tilde": "g", "v_tilde": "vt", "beta": "beta"}[name]
        cur = getattr(self, attr)
        if sd == 0:
            return 1.0
        prop = cur + sd * rng.standard_normal(cur.shape)
        g, vt, beta = self.g, self.vt, self.beta
        basis = self.basis
        if name == "g_tilde":
            g = prop
        elif name == "v_tilde":
            vt = prop
            basis = orthonormal_complement(np.exp(vt))
        else:
            beta = prop
        sq = self.ev.sq_resid(g, vt, basis @ beta, self.tau, self.xi, self.src)
        pq = self.ev.patient_quad(sq, self.inv_var)
        d_prior = -0.5 * (np.sum(((prop - prior_mean) / prior_sd) ** 2)
                          - np.sum(((cur - prior_mean) / prior_sd) ** 2))
        log_ratio = pq.sum() - self.pq.sum() + d_prior
        if np.isfinite(log_ratio) and np.log(rng.random()) < log_ratio:
            setattr(self, attr, prop)
            if name == "v_tilde":
                self.basis = basis
            self.sq, self.pq = sq, pq
            return 1.0
        return 0.0

    # -- individual blocks
    def individual_step(self, name, sd, prior_fn, rng) -> np.ndarray:
        """One random-walk proposal per patient for block ``name``; returns the
        per-patient acceptance indicator."""
        cur = getattr(self, "src" if name == "sources" else name)
        sd = np.asarray(sd, dtype=float)
        noise = rng.standard_normal(cur.shape)
        if np.all(sd == 0):
            return np.ones(self.ev.n)
        step = sd[:, None] * noise if cur.ndim == 2 else sd * noise
        prop = cur + step
        blocks = {"tau": self.tau, "xi": self.xi, "sources": self.src}
        old_prior = prior_fn(self.tau, self.xi, self.src)
        blocks[name] = prop
        new_prior = prior_fn(blocks["tau"], blocks["xi"], blocks["sources"])
        sq = self.ev.sq_resid(self.g, self.vt, self.mixing, blocks["tau"], blocks["xi"], blocks["sources"])
        pq = self.ev.patient_quad(sq, self.inv_var)
        with np.errstate(invalid="ignore"):
            log_ratio = pq - self.pq + new_prior - old_prior
        u = np.log(rng.random(self.ev.n))
        acc = np.isfinite(log_ratio) & (u < log_ratio)
        if np.any(acc):
            row_acc = acc[self.ev.idx]
            self.sq = np.where(row_acc[:, None], sq, self.sq)
            self.pq = np.where(acc, pq, self.pq)
            if cur.ndim == 2:
                new = np.where(acc[:, None], prop, cur)
            else:
                new = np.where(acc, prop, cur)
            setattr(self, "src" if name == "sources" else name, new)
        return acc.astype(float)

    def cluster_jump(self, labels, mix: MixtureParams, rng):
        """Joint move of ``(r_i, tau_i, xi_i, s_i)`` to another cluster.

        Latents keep their standardised position within the cluster, so the
        prior densities and the Jacobian cancel and only the data term and the
        proportions enter the ratio.  Returns ``(labels, acceptance)``.
        """
        k = mix.n_clusters
        n = self.ev.n
        if k == 1:
            return labels, np.zeros(n)
        new_lab = (labels + rng.integers(1, k, size=n)) % k
        scale_t = mix.tau_sd[new_lab] / mix.tau_sd[labels]
        scale_x = mix.xi_sd[new_lab] / mix.xi_sd[labels]
        tau = mix.tau_mean[new_lab] + (self.tau - mix.tau_mean[labels]) * scale_t
        xi = mix.xi_mean[new_lab] + (self.xi - mix.xi_mean[labels]) * scale_x
        src = self.src - mix.source_means[labels] + mix.source_means[new_lab]
        sq = self.ev.sq_resid(self.g, self.vt, self.mixing, tau, xi, src)
        pq = self.ev.patient_quad(sq, self.inv_var)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_pi = np.log(mix.proportions)
            log_ratio = pq - self.pq + log_pi[new_lab] - log_pi[labels]
        acc = np.isfinite(log_ratio) & (np.log(rng.random(n)) < log_ratio)
        if np.any(acc):
            self.sq = np.where(acc[self.ev.idx][:, None], sq, self.sq)
            self.pq = np.where(acc, pq, self.pq)
            self.tau = np.where(acc, tau, self.tau)
            self.xi = np.where(acc, xi, self.xi)
            self.src = np.where(acc[:, None], src, self.src)
            labels = np.where(acc, new_lab, labels)
        return labels, acc.astype(float)

    def data_loglik(self) -> float:
        log_norm = np.sum(self.ev.mask.sum(axis=0) * (0.5 * np.log(self.inv_var) - LOG_SQRT_2PI))
        return float(self.pq.sum() + log_norm)


def _gaussian_quad(x, mean, sd):
    return -0.5 * ((x - mean) / sd) ** 2 - np.log(sd)


def conditional_prior_fn(labels, mix: MixtureParams, hyper: HyperParams) -> Callable:
    """Per-patient log prior of (tau, xi, s) given hard cluster labels (up to a constant)."""
    tm, ts = mix.tau_mean[labels], mix.tau_sd[labels]
    xm, xs = mix.xi_mean[labels], mix.xi_sd[labels]
    sm = mix.source_means[labels]
    ss = hyper.sigma_source

    def prior(tau, xi, src):
        return (_gaussian_quad(tau, tm, ts) + _gaussian_quad(xi, xm, xs)
                + (-0.5 * ((src - sm) / ss) ** 2).sum(axis=1))
    return prior


def marginal_prior_fn(mix: MixtureParams, hyper: HyperParams) -> Callable:
    """Per-patient log density of the full Gaussian mixture."""
    def prior(tau, xi, src):
        joint = cluster_log_joint(IndividualParams(tau, xi, src), mix, hyper)
        return logsumexp(joint, axis=1)
    return prior


def mh_gibbs_sweep(chain: _Chain, labels, mix: MixtureParams, pop_means: PopulationParams,
                   hyper: HyperParams, sds: dict, rng, indicator_update="argmax", jumps=False):
    """One full sweep; mutates ``chain`` and returns ``(labels, acceptance)``."""
    acc = {}
    prior_sd = {"g_tilde": hyper.sigma_g_tilde, "v_tilde": hyper.sigma_v_tilde, "beta": hyper.sigma_beta}
    for name in POP_BLOCKS:
        acc[name] = chain.population_step(name, sds[name], getattr(pop_means, name), prior_sd[name], rng)
    prior = conditional_prior_fn(labels, mix, hyper)
    for name in IND_BLOCKS:
        acc[name] = chain.individual_step(name, sds[name], prior, rng)
    if jumps:
        labels, acc["jump"] = chain.cluster_jump(labels, mix, rng)
    probs = posterior_membership(chain.individuals(), mix, hyper)
    if indicator_update == "argmax":
        labels = np.argmax(probs, axis=1)
    else:
        cum = np.cumsum(probs, axis=1)
        u = rng.random(probs.shape[0])[:, None]
        labels = np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1)
    return labels, acc


# ---------------------------------------------------------------- fitted model

@dataclass(frozen=True)
class FittedModel:
    population: PopulationParams
    mixture: MixtureParams
    individual: IndividualParams
    membership: np.ndarray
    hyper: HyperParams
    patient_ids: tuple
    feature_names: tuple
    config: Optional[FitConfig] = None
    trace: tuple = ()

    @property
    def n_clusters(self) -> int:
        return self.mixture.n_clusters

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.membership, axis=1)

    def cluster_space_shifts(self) -> np.ndarray:
        """Per-cluster mean space shifts ``A s_bar^c``; shape ``(k, d)``."""
        return self.mixture.source_means @ self.population.mixing_matrix.T

    def cluster_summary(self) -> np.ndarray:
        """Rows ``(tau_bar, xi_bar, w_1, ..., w_d)`` per cluster."""
        return np.column_stack([self.mixture.tau_mean, self.mixture.xi_mean, self.cluster_space_shifts()])


# ---------------------------------------------------------------- initialisation

def _patient_slopes(data: Dataset, feature: int = 0) -> np.ndarray:
    slopes = np.full(data.n_patients, np.nan)
    y = data.values[:, feature]
    for i in range(data.n_patients):
        rows = data.patient_index == i
        ok = rows & ~np.isnan(y)
        if ok.sum() >= 2:
            t = data.times[ok]
            slopes[i] = np.polyfit(t - t.mean(), y[ok], 1)[0]
    return slopes


def _pooled_slope(data: Dataset, k: int) -> float:
    """Within-patient OLS slope of feature ``k`` pooled across patients."""
    y = data.values[:, k]
    ok = ~np.isnan(y)
    idx = data.patient_index[ok]
    t, yk = data.times[ok], y[ok]
    n = np.bincount(idx, minlength=data.n_patients).astype(float)
    safe = np.maximum(n, 1)
    tc = t - (np.bincount(idx, t, data.n_patients) / safe)[idx]
    yc = yk - (np.bincount(idx, yk, data.n_patients) / safe)[idx]
    den = np.sum(tc * tc)
    return float(np.sum(tc * yc) / den) if den > 0 else 0.0


def initialize(data: Dataset, config: FitConfig):
    """Deterministic data-driven starting point.

    Returns ``(chain_arrays, pop_means, mixture, labels)``.
    """
    d, n, k, ns = data.n_features, data.n_patients, config.n_clusters, config.n_sources
    if ns > d - 1:
        raise ModelError(f"n_sources={ns} must not exceed d - 1 = {d - 1}")
    idx = data.patient_index
    tmin = np.full(n, np.inf)
    tmax = np.full(n, -np.inf)
    np.minimum.at(tmin, idx, data.times)
    np.maximum.at(tmax, idx, data.times)
    tau = 0.5 * (tmin + tmax)
    xi = np.zeros(n)
    src = np.zeros((n, ns))

    positions = np.clip(np.nanmean(data.values, axis=0), 0.05, 0.95)
    positions = np.where(np.isnan(positions), 0.5, positions)
    velocities = np.array([max(_pooled_slope(data, j), 1e-3) for j in range(d)])
    g = np.log1p(-positions) - np.log(positions)
    vt = np.log(velocities)

    # mixing coefficients from the leading directions of per-patient offsets
    basis = orthonormal_complement(velocities)
    psi = data.times - tau[idx]
    fitted = logistic_curve(g, vt, psi, np.zeros(d))
    resid = np.where(data.mask, data.values - fitted, 0.0)
    cnt = np.maximum(np.stack([np.bincount(idx, data.mask[:, j], n) for j in range(d)], axis=1), 1)
    offsets = np.stack([np.bincount(idx, resid[:, j], n) for j in range(d)], axis=1) / cnt
    u = offsets @ basis
    u = u - u.mean(axis=0)
    cov = np.atleast_2d(np.cov(u, rowvar=False)) if n > 1 else np.eye(d - 1) * 1e-4
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:ns]
    beta = evecs[:, order] * np.sqrt(np.maximum(evals[order], 1e-6))
    # fix the sign convention so initialisation is reproducible across LAPACK builds
    beta = beta * np.where(beta[np.argmax(np.abs(beta), axis=0), np.arange(ns)] < 0, -1.0, 1.0)

    noise = np.maximum(np.sqrt(np.sum(resid ** 2, axis=0) / np.maximum(data.mask.sum(axis=0), 1)), 0.01)

    # seed clusters by quantiles of the leading component of (midpoint, slope)
    slopes = _patient_slopes(data, 0)
    med = np.nanmedian(slopes) if np.any(np.isfinite(slopes)) else 0.0
    slopes = np.where(np.isfinite(slopes), slopes, med)
    scale = np.nanmedian(np.abs(slopes)) or 1.0
    rate = np.clip(np.log(np.maximum(slopes, 0.05 * scale) / max(abs(med), 1e-12)) if med > 0
                   else np.zeros(n), -1.0, 1.0)
    feats = np.column_stack([tau, slopes])
    sd = feats.std(axis=0)
    feats = (feats - feats.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    if k > 1 and n > 1:
        _, _, vh = np.linalg.svd(feats, full_matrices=False)
        direction = vh[0] * (1.0 if vh[0][0] >= 0 else -1.0)
        score = feats @ direction
        ranks = np.argsort(np.argsort(score, kind="stable"), kind="stable")
        labels = np.minimum(ranks * k // n, k - 1)
    else:
        labels = np.zeros(n, dtype=np.int64)

    pi = np.full(k, 1.0 / k)
    tau_mean, tau_sd = np.empty(k), np.empty(k)
    xi_mean, xi_sd = np.empty(k), np.empty(k)
    for c in range(k):
        sel = labels == c
        if not np.any(sel):
            sel = np.ones(n, dtype=bool)
        tau_mean[c] = tau[sel].mean()
        tau_sd[c] = max(tau.std(), 1.0)
        xi_mean[c] = rate[sel].mean()
        xi_sd[c] = INITIAL_XI_SD
    xi_mean -= pi @ xi_mean
    mix = MixtureParams(pi, tau_mean, tau_sd, xi_mean, xi_sd, np.zeros((k, ns)), noise)
    pop_means = PopulationParams(g, vt, beta)
    return (g, vt, beta, tau, xi, src), pop_means, mix, labels.astype(np.int64)


def seed_mixture(z, k: int, n_init: int = 20, max_iter: int = 300, tol: float = 1e-8, seed: int = 0):
    """EM on point estimates ``z = (tau, xi, s)`` for the random-effects mixture.

    Components are diagonal Gaussians.  Source coordinates share one
    isotropic within-cluster SD across clusters, because the model fixes that
    SD and the scale of ``s`` in ``z`` is arbitrary until it is set.  Starts
    come from k-means++ on the column-standardised points; the best final
    log-likelihood wins.

    Returns ``(weights, means, sds, source_sd, responsibilities)`` where
    ``sds`` holds the tau and xi SDs, shape ``(k, 2)``.
    """
    z = np.asarray(z, dtype=float)
    n, q = z.shape
    ns = q - 2
    scale = z.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    best = None
    for ss in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(ss)
        mu = z[kmeans_plus_plus(z / scale, k, rng)].copy()
        sd = np.tile(scale, (k, 1))
        sd[:, 2:] = np.sqrt(np.mean(scale[2:] ** 2))
        pi = np.full(k, 1.0 / k)
        prev = -np.inf
        for _ in range(max_iter):
            with np.errstate(divide="ignore"):
                lj = np.log(pi) + np.sum(-0.5 * ((z[:, None, :] - mu[None]) / sd[None]) ** 2
                                         - np.log(sd[None]), axis=2)
            norm = logsumexp(lj, axis=1)
            ll = float(norm.sum())
            resp = np.exp(lj - norm[:, None])
            nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
            pi = nk / nk.sum()
            mu = (resp.T @ z) / nk[:, None]
            var = (resp.T @ z ** 2) / nk[:, None] - mu ** 2
            sd = np.sqrt(np.maximum(var, CLUSTER_SD_FLOOR ** 2))
            pooled = np.sum(nk[:, None] * np.maximum(var[:, 2:], 0.0)) / (n * ns)
            sd[:, 2:] = max(np.sqrt(pooled), CLUSTER_SD_FLOOR)
            if abs(ll - prev) / n < tol:
                break
            prev = ll
        if best is None or ll > best[0]:
            best = (ll, pi, mu, sd, resp)
    _, pi, mu, sd, resp = best
    return pi, mu, sd[:, :2], float(sd[0, 2]), resp


def warm_start_state(data: Dataset, config: FitConfig):
    """Starting point for ``k > 1`` built from a short single-cluster run.

    The run's posterior-mean ``(tau, xi, s)`` vectors are clustered by
    :func:`seed_mixture`.  Sources are then rescaled so their within-cluster
    SD equals the model's fixed value, with ``beta`` scaled inversely so the
    space shifts are unchanged.  Same return layout as :func:`initialize`.
    """
    k = config.n_clusters
    single = fit(data, replace(config, n_clusters=1, n_iterations=config.warm_start_iterations,
                               trace_path=None))
    pi, means, sd, source_sd, resp = seed_mixture(single.individual.as_matrix(), k, seed=config.seed)
    rescale = config.hyper.sigma_source / source_sd
    xi_shift = float(pi @ means[:, 1])
    src_means = (means[:, 2:] - pi @ means[:, 2:]) * rescale
    pop = single.population
    ind = single.individual
    mix = MixtureParams(pi, means[:, 0], sd[:, 0], means[:, 1] - xi_shift, sd[:, 1],
                        src_means, single.mixture.noise_sd)
    vt = pop.v_tilde + xi_shift
    beta = pop.beta / rescale
    arrays = (pop.g_tilde.copy(), vt, beta, ind.tau.copy(), ind.xi - xi_shift, ind.sources * rescale)
    pop_means = PopulationParams(pop.g_tilde, vt, beta)
    return arrays, pop_means, mix, np.argmax(resp, axis=1).astype(np.int64)


# ---------------------------------------------------------------- driver

def _write_trace(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def fit(data: Dataset, config: FitConfig, initial=None) -> FittedModel:
    """Run the mixture MCMC-SAEM for ``config.n_iterations`` iterations.

    ``initial`` optionally replaces the built-in initialisation with a tuple as
    returned by :func:`initialize`.  Without it, multi-cluster fits start from
    :func:`warm_start_state` unless ``config.warm_start`` is 0.
    """
    hyper = config.hyper
    k = config.n_clusters
    rng = np.random.default_rng(config.seed)
    if initial is None:
        initial = warm_start_state(data, config) if config.warm_start_iterations else initialize(data, config)
    arrays, pop_means, mix, labels = initial
    ev = _Evaluator(data)
    chain = _Chain(ev, *arrays, mix.noise_sd)
    sds = {name: (np.full(data.n_patients, float(config.proposal_sd[name])) if name in IND_BLOCKS
                  else float(config.proposal_sd[name])) for name in POP_BLOCKS + IND_BLOCKS}
    window = {name: 0.0 for name in sds}
    k_burn = config.burn_in_iterations
    k_anneal = config.anneal_iterations
    stats = None
    post_sum = None
    n_post = 0
    bad_streak = 0
    warned_empty = False
    trace = []
    for it in range(1, config.n_iterations + 1):
        labels, acc = mh_gibbs_sweep(chain, labels, mix, pop_means, hyper, sds, rng,
                                     config.indicator_update, config.cluster_jumps and k > 1)
        for name in sds:
            window[name] = window[name] + acc[name]

        state = LatentState(chain.population(), chain.individuals(), labels)
        current = compute_stats(state, k, chain.sq, ev.mask)
        eps = step_size(it, config)
        stats = current if stats is None else update_stats(stats, current, eps)
        res = maximize(stats, mix)
        if res.empty_clusters and not warned_empty:
            log.warning("iteration %d: empty cluster(s) %s keep their previous parameters",
                        it, list(res.empty_clusters))
            warned_empty = True
        stats = center_stats(stats, res.xi_shift, res.source_shift, res.g_shift)
        pop_means, new_mix = res.population, res.mixture
        if it <= k_anneal:
            new_mix = replace(new_mix,
                              tau_sd=np.maximum(new_mix.tau_sd, config.variance_decay * mix.tau_sd),
                              xi_sd=np.maximum(new_mix.xi_sd, config.variance_decay * mix.xi_sd))
        mix = new_mix
        # xi shift is compensated in v_tilde: the likelihood is unchanged
        chain.xi = chain.xi - res.xi_shift
        chain.vt = chain.vt + res.xi_shift
        if np.any(res.source_shift):
            chain.src = chain.src - res.source_shift
            chain.g = chain.g + res.g_shift
            chain.refresh()
        chain.set_noise(mix.noise_sd)

        if it > k_burn:
            z = np.column_stack([chain.tau, chain.xi, chain.src])
            post_sum = z if post_sum is None else post_sum + z
            n_post += 1

        if it <= k_burn and it % config.adapt_window == 0:
            for name in sds:
                rate = window[name] / config.adapt_window
                sds[name] = sds[name] * np.exp(rate - config.target_accept)
        if it % config.adapt_window == 0:
            window = {name: 0.0 for name in sds}

        data_ll = chain.data_loglik()
        re_ll = float(np.sum(cluster_log_joint(chain.individuals(), mix, hyper)[np.arange(len(labels)), labels]))
        total = data_ll + re_ll
        bad_streak = 0 if np.isfinite(total) else bad_streak + 1
        if bad_streak > DIVERGENCE_PATIENCE:
            raise FitDivergenceError(
                f"non-finite log-likelihood for {bad_streak} consecutive iterations",
                {"iteration": it, "noise_sd": mix.noise_sd.tolist(),
                 "proportions": mix.proportions.tolist(), "trace_tail": trace[-5:]})
        if it % config.trace_stride == 0 or it == config.n_iterations:
            row = {"iteration": it, "loglik": total}
            for name in POP_BLOCKS + IND_BLOCKS:
                row[f"acc_{name}"] = float(np.mean(acc[name]))
            if "jump" in acc:
                row["acc_jump"] = float(np.mean(acc["jump"]))
            for c in range(k):
                row[f"pi_{c + 1}"] = float(mix.proportions[c])
            for c in range(k):
                row[f"tau_mean_{c + 1}"] = float(mix.tau_mean[c])
                row[f"tau_sd_{c + 1}"] = float(mix.tau_sd[c])
                row[f"xi_mean_{c + 1}"] = float(mix.xi_mean[c])
                row[f"xi_sd_{c + 1}"] = float(mix.xi_sd[c])
            for j in range(data.n_features):
                row[f"noise_sd_{j + 1}"] = float(mix.noise_sd[j])
            trace.append(row)

    if config.trace_path:
        _write_trace(config.trace_path, trace)
    z_mean = post_sum / n_post
    individual = IndividualParams.from_matrix(z_mean)
    membership = posterior_membership(individual, mix, hyper)
    return FittedModel(pop_means, mix, individual, membership, hyper,
                       data.patient_ids, data.feature_names, config, tuple(trace))


# ---------------------------------------------------------------- personalisation

def personalize(model: FittedModel, data: Dataset, n_iterations: int = 1000, seed: int = 0,
                polish: bool = True):
    """Posterior mode of ``(tau, xi, s)`` for new patients with the fitted model frozen.

    The individual blocks of the MH kernel explore the posterior under the
    full mixture prior; the best draw per patient is then refined by a local
    optimiser.  Returns ``(IndividualParams, membership)``.
    """
    if tuple(data.feature_names) != tuple(model.feature_names):
        raise SchemaError(f"features {list(data.feature_names)} do not match model features "
                          f"{list(model.feature_names)}")
    hyper, mix, pop = model.hyper, model.mixture, model.population
    rng = np.random.default_rng(seed)
    ev = _Evaluator(data)
    n, ns = data.n_patients, pop.n_sources
    prior = marginal_prior_fn(mix, hyper)
    # start every patient at the mean of the most populated cluster
    c0 = int(np.argmax(mix.proportions))
    tau = np.full(n, mix.tau_mean[c0])
    xi = np.full(n, mix.xi_mean[c0])
    src = np.tile(mix.source_means[c0], (n, 1))
    chain = _Chain(ev, pop.g_tilde, pop.v_tilde, pop.beta, tau, xi, src, mix.noise_sd)
    base_sd = {"tau": 1.0, "xi": 0.1, "sources": 0.5}
    sds = {name: np.full(n, base_sd[name]) for name in IND_BLOCKS}
    window = {name: np.zeros(n) for name in IND_BLOCKS}
    best = np.column_stack([chain.tau, chain.xi, chain.src])
    best_lp = chain.pq + prior(chain.tau, chain.xi, chain.src)
    adapt = 50
    for it in range(1, n_iterations + 1):
        for name in IND_BLOCKS:
            window[name] += chain.individual_step(name, sds[name], prior, rng)
        lp = chain.pq + prior(chain.tau, chain.xi, chain.src)
        better = lp > best_lp
        if np.any(better):
            best[better] = np.column_stack([chain.tau, chain.xi, chain.src])[better]
            best_lp = np.where(better, lp, best_lp)
        if it % adapt == 0:
            if it <= n_iterations // 2:
                for name in IND_BLOCKS:
                    sds[name] *= np.exp(window[name] / adapt - 0.3)
            window = {name: np.zeros(n) for name in IND_BLOCKS}

    if polish:
        best = np.array([_polish_patient(model, data, i, best[i], prior) for i in range(n)])
    individual = IndividualParams.from_matrix(best)
    return individual, posterior_membership(individual, mix, hyper)


def _polish_patient(model: FittedModel, data: Dataset, i: int, start, prior):
    pop, noise = model.population, model.mixture.noise_sd
    rows = data.patient_index == i
    t = data.times[rows]
    y = data.values[rows]
    mask = ~np.isnan(y)
    y = np.where(mask, y, 0.0)
    mixing = pop.mixing_matrix
    inv_var = 1.0 / noise ** 2

    def neg_log_post(z):
        w = mixing @ z[2:]
        psi = np.exp(z[1]) * (t - z[0])
        r = (y - logistic_curve(pop.g_tilde, pop.v_tilde, psi, w)) * mask
        ll = -0.5 * np.sum(r * r * inv_var)
        lp = prior(np.array([z[0]]), np.array([z[1]]), z[None, 2:])[0]
        return -(ll + lp)

    start = np.asarray(start, dtype=float)
    res = optimize.minimize(neg_log_post, start, method="BFGS", options={"gtol": 1e-8})
    if np.isfinite(res.fun) and res.fun <= neg_log_post(start):
        return res.x
    return start
