"""Two-stage baseline: single-cluster fit, then a Gaussian mixture on the
estimated individual parameters."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gmm import GmmModel, gmm_fit, kmeans_plus_plus  # noqa: F401  (re-exported)
from .model import Dataset
from .saem import FitConfig, FittedModel, fit


@dataclass(frozen=True)
class PosthocResult:
    labels: np.ndarray
    membership: np.ndarray
    proportions: np.ndarray
    cluster_table: np.ndarray      # rows (tau_bar, xi_bar, w_1..w_d)
    single_fit: FittedModel
    gmm: GmmModel


def posthoc_classify(data: Dataset, n_clusters: int, config: FitConfig,
                     gmm_kwargs: dict | None = None) -> PosthocResult:
    """Fit the single-cluster model, then cluster its posterior-mean
    ``(tau, xi, s)`` vectors with a full-covariance Gaussian mixture."""
    single = fit(data, replace(config, n_clusters=1))
    z = single.individual.as_matrix()
    kwargs = {"seed": config.seed}
    kwargs.update(gmm_kwargs or {})
    gmm, resp = gmm_fit(z, n_clusters, **kwargs)
    mixing = single.population.mixing_matrix
    table = np.column_stack([gmm.means[:, 0], gmm.means[:, 1], gmm.means[:, 2:] @ mixing.T])
    return PosthocResult(np.argmax(resp, axis=1), resp, gmm.weights, table, single, gmm)
