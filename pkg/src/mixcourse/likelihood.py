"""Log-densities of the mixture model and the quantities derived from them.

Three additive terms make up the complete-data log-likelihood: the Gaussian
data attachment, the population prior on ``(g_tilde, v_tilde, beta)`` and the
Gaussian-mixture prior on the individual parameters conditioned on the hard
cluster indicators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import (Dataset, HyperParams, IndividualParams, MixtureParams, ModelError,
                    PopulationParams, logistic_curve, space_shifts)

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LatentState:
    """Sampled latent variables: population block, individual block and the
    cluster indicators (stored as integer labels; ``one_hot`` gives ``r_i``)."""

    pop: PopulationParams
    individuals: IndividualParams
    indicators: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.indicators, dtype=np.int64)
        if lab.shape != (len(self.individuals),) or np.any(lab < 0):
            raise ModelError("need one nonnegative cluster label per patient")
        lab.setflags(write=False)
        object.__setattr__(self, "indicators", lab)

    def one_hot(self, n_clusters: int) -> np.ndarray:
        return labels_to_one_hot(self.indicators, n_clusters)

    def cluster_counts(self, n_clusters: int) -> np.ndarray:
        return np.bincount(self.indicators, minlength=n_clusters)


def labels_to_one_hot(labels, n_clusters: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= n_clusters:
        raise ModelError("label exceeds number of clusters")
    out = np.zeros((labels.shape[0], n_clusters))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_noise(noise_sd, d: int) -> np.ndarray:
    noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (d,))
    if np.any(~np.isfinite(noise_sd)) or np.any(noise_sd <= 0):
        raise ModelError(f"noise SDs must be > 0, got {noise_sd}")
    return noise_sd


def predictions(data: Dataset, pop: PopulationParams, ind: IndividualParams) -> np.ndarray:
    """Noise-free model values at every row of ``data``; shape ``(n_rows, d)``."""
    w = space_shifts(pop.mixing_matrix, ind.sources)
    idx = data.patient_index
    psi = np.exp(ind.xi[idx]) * (data.times - ind.tau[idx])
    return logistic_curve(pop.g_tilde, pop.v_tilde, psi, w[idx])


def patient_attachment(data: Dataset, pop: PopulationParams, ind: IndividualParams,
                       noise_sd) -> np.ndarray:
    """Per-patient Gaussian log-likelihood of the observed entries, shape ``(N,)``."""
    noise_sd = _check_noise(noise_sd, data.n_features)
    resid = data.values - predictions(data, pop, ind)
    mask = data.mask
    terms = np.where(mask, -0.5 * (resid / noise_sd) ** 2 - np.log(noise_sd) - LOG_SQRT_2PI, 0.0)
    return np.bincount(data.patient_index, weights=terms.sum(axis=1), minlength=data.n_patients)


def data_attachment(data: Dataset, state: LatentState, noise_sd) -> float:
    # fixed-order reduction over patients keeps sums reproducible
    return float(np.sum(patient_attachment(data, state.pop, state.individuals, noise_sd)))


def gaussian_logpdf(x, mean, sd):
    x = np.asarray(x, dtype=float)
    return -np.log(sd) - LOG_SQRT_2PI - 0.5 * ((x - mean) / sd) ** 2


def population_prior(pop: PopulationParams, means: PopulationParams, hyper: HyperParams) -> float:
    return float(np.sum(gaussian_logpdf(pop.g_tilde, means.g_tilde, hyper.sigma_g_tilde))
                 + np.sum(gaussian_logpdf(pop.v_tilde, means.v_tilde, hyper.sigma_v_tilde))
                 + np.sum(gaussian_logpdf(pop.beta, means.beta, hyper.sigma_beta)))


def cluster_log_joint(ind: IndividualParams, mix: MixtureParams, hyper: HyperParams) -> np.ndarray:
    """``log pi^c + log p(z_i | c)`` for every patient and cluster, shape ``(N, k)``.

    Clusters with zero proportion get ``-inf``.
    """
    z = ind.as_matrix()
    if z.shape[1] != 2 + mix.n_sources:
        raise ModelError("individual parameters and mixture disagree on n_sources")
    mu = mix.means_matrix()
    sd = mix.sds_matrix(hyper.sigma_source)
    logp = gaussian_logpdf(z[:, None, :], mu[None], sd[None]).sum(axis=2)
    with np.errstate(divide="ignore"):
        log_pi = np.log(mix.proportions)
    return logp + log_pi


def mixture_re_logdensity(ind: IndividualParams, indicators, mix: MixtureParams,
                          hyper: HyperParams) -> float:
    """Gaussian-mixture prior of the individual parameters given hard indicators.

    ``indicators`` may be integer labels or a one-hot matrix.  Returns
    ``-inf`` when a patient sits in a cluster of zero proportion.
    """
    ind_arr = np.asarray(indicators)
    labels = ind_arr.argmax(axis=1) if ind_arr.ndim == 2 else ind_arr.astype(np.int64)
    if labels.shape != (len(ind),):
        raise ModelError("need one indicator per patient")
    joint = cluster_log_joint(ind, mix, hyper)
    picked = joint[np.arange(len(ind)), labels]
    if np.any(np.isneginf(picked)):
        return -np.inf
    return float(np.sum(picked))


def posterior_membership(ind: IndividualParams, mix: MixtureParams, hyper: HyperParams) -> np.ndarray:
    """Cluster responsibilities ``pi_i^c`` computed in log space; shape ``(N, k)``."""
    joint = cluster_log_joint(ind, mix, hyper)
    norm = logsumexp(joint, axis=1, keepdims=True)
    probs = np.exp(joint - norm)
    return probs / probs.sum(axis=1, keepdims=True)


def hard_assign(probs) -> np.ndarray:
    """One-hot argmax per row; ties go to the lowest cluster index."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    return labels_to_one_hot(np.argmax(probs, axis=1), probs.shape[1])


def raw_entropy(probs) -> float:
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return float(-terms.sum())


def normalized_entropy(probs) -> float:
    """Membership entropy scaled to [0, 1]: 0 for crisp rows, 1 for uniform rows."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    n, k = probs.shape
    if k < 2:
        raise ModelError("normalized entropy needs at least two clusters")
    return raw_entropy(probs) / (n * np.log(k))


def n_free_parameters(n_features: int, n_sources: int, n_clusters: int) -> int:
    """Quantities updated by the M-step: positions and velocities, mixing
    coefficients, cluster means of (tau, xi, s), cluster SDs of tau and xi,
    free proportions and one noise SD per feature."""
    d, ns, k = n_features, n_sources, n_clusters
    return 2 * d + (d - 1) * ns + k * (2 + ns) + 2 * k + (k - 1) + d


def complete_loglik(data: Dataset, pop: PopulationParams, ind: IndividualParams,
                    mix: MixtureParams, hyper: HyperParams, labels) -> float:
    state = LatentState(pop, ind, labels)
    return data_attachment(data, state, mix.noise_sd) + mixture_re_logdensity(ind, labels, mix, hyper)


def icl_value(complete_ll: float, n_params: int, n_patients: int, entropy: float) -> float:
    """Lower is better."""
    return -2.0 * complete_ll + n_params * np.log(n_patients) + 2.0 * entropy


def icl(model, data: Dataset) -> float:
    """Integrated completed likelihood of a fitted model, on a lower-is-better scale.

    The complete-data term is evaluated at the final estimates (posterior-mean
    individual parameters, hard assignments from the membership matrix).
    """
    membership = getattr(model, "membership", None)
    if membership is None:
        raise ModelError("model is not fitted")
    labels = np.argmax(membership, axis=1)
    ll = complete_loglik(data, model.population, model.individual, model.mixture, model.hyper, labels)
    nu = n_free_parameters(data.n_features, model.population.n_sources, model.mixture.n_clusters)
    return icl_value(ll, nu, data.n_patients, raw_entropy(membership))


def select_by_icl(values: dict):
    """Key with the smallest finite ICL value."""
    finite = {k: v for k, v in values.items() if v is not None and np.isfinite(v)}
    if not finite:
        raise ModelError("no finite ICL value to select from")
    return min(finite, key=lambda k: (finite[k], k))
