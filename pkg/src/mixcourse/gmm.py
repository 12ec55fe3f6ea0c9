"""Full-covariance Gaussian mixture fitted by EM with k-means++ starts."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ModelError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray        # (k,)
    means: np.ndarray          # (k, q)
    covariances: np.ndarray    # (k, q, q)
    log_likelihood: float      # total over points at the final parameters
    n_iter: int
    converged: bool
    history: tuple             # total log-likelihood after every E-step

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def log_joint(self, points) -> np.ndarray:
        return _log_joint(np.asarray(points, dtype=float), self.weights, self.means,
                          _cholesky_all(self.covariances, None))

    def predict_proba(self, points) -> np.ndarray:
        lj = self.log_joint(points)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def predict(self, points) -> np.ndarray:
        return np.argmax(self.log_joint(points), axis=1)


def _cholesky_all(covs, pooled):
    chol = np.empty_like(covs)
    for c in range(covs.shape[0]):
        try:
            chol[c] = np.linalg.cholesky(covs[c])
        except np.linalg.LinAlgError:
            if pooled is None:
                raise
            log.warning("component %d covariance is singular; reset to the pooled covariance", c)
            covs[c] = pooled
            chol[c] = np.linalg.cholesky(pooled)
    return chol


def _log_joint(x, weights, means, chol):
    n, q = x.shape
    out = np.empty((n, weights.shape[0]))
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    for c in range(weights.shape[0]):
        diff = np.linalg.solve(chol[c], (x - means[c]).T)
        maha = np.sum(diff * diff, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[c])))
        out[:, c] = log_w[c] - 0.5 * (q * LOG_2PI + logdet + maha)
    return out


def kmeans_plus_plus(x, k: int, rng) -> np.ndarray:
    """Indices of ``k`` seed points chosen by D^2 sampling."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return np.array(chosen)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    q = x.shape[1]
    covs = np.empty((resp.shape[1], q, q))
    for c in range(resp.shape[1]):
        diff = x - means[c]
        covs[c] = (resp[:, c, None] * diff).T @ diff / nk[c] + reg * np.eye(q)
    return weights, means, covs


def _single_run(x, k, max_iter, tol, reg, rng, pooled):
    seeds = kmeans_plus_plus(x, k, rng)
    d2 = np.sum((x[:, None, :] - x[seeds][None]) ** 2, axis=2)
    resp = np.zeros((x.shape[0], k))
    resp[np.arange(x.shape[0]), np.argmin(d2, axis=1)] = 1.0
    weights, means, covs = _m_step(x, resp, reg)
    history = []
    converged = False
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        chol = _cholesky_all(covs, pooled)
        lj = _log_joint(x, weights, means, chol)
        norm = logsumexp(lj, axis=1, keepdims=True)
        ll = float(norm.sum())
        history.append(ll)
        resp = np.exp(lj - norm)
        if abs(ll - prev) / x.shape[0] < tol:
            converged = True
            break
        prev = ll
        weights, means, covs = _m_step(x, resp, reg)
    return GmmModel(weights, means, covs, history[-1], it, converged, tuple(history)), resp


def gmm_fit(points, k: int, n_init: int = 10, max_iter: int = 300, tol: float = 1e-4,
            reg: float = 1e-6, seed: int = 0):
    """Full-covariance Gaussian mixture by EM; best of ``n_init`` k-means++ starts.

    Returns ``(GmmModel, responsibilities)``.  ``tol`` applies to the change in
    mean per-point log-likelihood.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, q = x.shape
    if q < 1 or n <= k or k < 1:
        raise ModelError(f"need more points ({n}) than components ({k})")
    pooled = np.atleast_2d(np.cov(x, rowvar=False, bias=True)) + reg * np.eye(q)
    seeds = np.random.SeedSequence(seed).spawn(n_init)
    best, best_resp = None, None
    for ss in seeds:
        model, resp = _single_run(x, k, max_iter, tol, reg, np.random.default_rng(ss), pooled)
        if best is None or model.log_likelihood > best.log_likelihood:
            best, best_resp = model, resp
    return best, best_resp
