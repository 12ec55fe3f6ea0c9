"""Synthetic cohorts drawn from the mixture model.

The cluster-level means of the three presets are fixed design tables.  The
fixed effects behind them are not part of the design, so
:func:`default_fixed_effects` supplies explicit defaults (every position 0.3,
every velocity 0.05 per year) and a mixing matrix whose column space contains
the tabulated cluster shifts.  Any other :class:`PopulationParams` may be
passed instead.

Tabulated shifts are realised as ``A s_bar^c``: their projection on the
velocity-orthogonal hyperplane, centred on the proportion-weighted mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import (Dataset, IndividualParams, ModelError, PopulationParams,
                    orthonormal_complement, trajectory_value)

DEFAULT_POSITION = 0.3
DEFAULT_VELOCITY = 0.05
VISIT_HALF_WIDTH = 5.0
VISIT_JITTER = 0.3
VISIT_SHIFT_SD = 0.5
VISIT_SHIFT_MAX = 0.9
OBS_EPS = 1e-4


@dataclass(frozen=True)
class Scenario:
    name: str
    proportions: tuple
    tau_mean: tuple
    xi_mean: tuple
    shift_mean: tuple          # one row of per-feature mean space shifts per cluster
    n_sources: int
    tau_sd: float = 5.0
    xi_sd: float = 0.5
    source_sd: float = 1.0
    noise_sd: float = 0.05
    # norm of each mixing direction in the default fixed effects
    source_scale: float = 0.1
    n_patients: int = 1000
    n_visits: int = 6
    seed: int = 0
    feature_names: tuple = field(default=())

    def __post_init__(self):
        k = len(self.proportions)
        if abs(sum(self.proportions) - 1.0) > 1e-12 or min(self.proportions) < 0:
            raise ModelError("proportions must sum to 1")
        if len(self.tau_mean) != k or len(self.xi_mean) != k or len(self.shift_mean) != k:
            raise ModelError("every cluster needs tau, xi and shift means")
        d = len(self.shift_mean[0])
        if any(len(row) != d for row in self.shift_mean):
            raise ModelError("shift rows must all have d entries")
        if not 1 <= self.n_sources <= d - 1:
            raise ModelError("n_sources must lie in [1, d - 1]")
        if self.n_patients < 1 or self.n_visits < 1:
            raise ModelError("need at least one patient and one visit")
        if min(self.tau_sd, self.xi_sd, self.source_sd, self.noise_sd) < 0:
            raise ModelError("standard deviations must be nonnegative")
        if self.source_scale <= 0:
            raise ModelError("source_scale must be positive")
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"score_{j + 1}" for j in range(d)))
        elif len(self.feature_names) != d:
            raise ModelError("feature_names must have d entries")

    @property
    def n_features(self) -> int:
        return len(self.shift_mean[0])

    @property
    def n_clusters(self) -> int:
        return len(self.proportions)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


def _by_cluster(*columns):
    """Table columns are listed per score; transpose to one row per cluster."""
    return tuple(zip(*columns))


PRESETS = {
    "scenario_2_2": Scenario(
        name="scenario_2_2",
        proportions=(0.40, 0.60),
        tau_mean=(50.0, 40.0),
        xi_mean=(-0.30, 0.20),
        shift_mean=_by_cluster((-0.02, 0.02), (0.11, -0.11)),
        n_sources=1,
        feature_names=("motor", "memory")),
    "scenario_3_2": Scenario(
        name="scenario_3_2",
        proportions=(0.40, 0.60),
        tau_mean=(56.0, 53.0),
        xi_mean=(0.30, -0.20),
        shift_mean=_by_cluster((-0.06, 0.05), (0.07, -0.06), (0.01, -0.01)),
        n_sources=2),
    "scenario_multi": Scenario(
        name="scenario_multi",
        proportions=(0.40, 0.35, 0.25),
        tau_mean=(70.0, 65.0, 65.0),
        xi_mean=(0.0, -0.40, 0.5),
        shift_mean=_by_cluster((0.00, 0.00, -0.01), (-0.01, 0.00, -0.01), (-0.01, -0.01, -0.02),
                               (0.05, 0.00, 0.10), (0.11, -0.03, 0.27), (0.15, 0.03, 0.24)),
        n_sources=3,
        source_scale=0.05),
}


def scenario_preset(name: str, **overrides) -> Scenario:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ModelError(f"unknown scenario {name!r}; valid presets: {', '.join(sorted(PRESETS))}") from None
    return base.with_(**overrides) if overrides else base


def default_fixed_effects(scenario: Scenario) -> PopulationParams:
    """Positions 0.3, velocities 0.05 and mixing coefficients spanning the
    scenario's cluster shifts (projected on the velocity-orthogonal hyperplane).

    Each mixing direction has norm ``scenario.source_scale``.  With unit
    source SD this sets how far apart the clusters sit in source space: the
    two-cluster presets use 0.1 and ``scenario_multi`` 0.05.  At these values
    the Bayes-optimal accuracy on the true latents is about 0.93 for both, and
    desk-scale mixture fits reach the target mixture accuracies.
    """
    d, ns = scenario.n_features, scenario.n_sources
    v = np.full(d, DEFAULT_VELOCITY)
    basis = orthonormal_complement(v)
    coords = np.asarray(scenario.shift_mean, dtype=float) @ basis
    _, _, vh = np.linalg.svd(coords, full_matrices=True)
    directions = vh[:ns].T
    # sign convention: largest-magnitude entry of each direction positive
    flip = np.sign(directions[np.argmax(np.abs(directions), axis=0), np.arange(ns)])
    beta = scenario.source_scale * directions * flip
    return PopulationParams.from_natural(np.full(d, DEFAULT_POSITION), v, beta)


def cluster_source_means(scenario: Scenario, pop: PopulationParams) -> np.ndarray:
    """Least-squares sources reproducing each cluster's mean shift; ``(k, Ns)``.

    The sources are centred on their proportion-weighted mean, the convention
    the fitted model imposes, so only the shifts of clusters relative to one
    another are kept.
    """
    mixing = pop.mixing_matrix
    target = np.asarray(scenario.shift_mean, dtype=float)
    src = np.linalg.lstsq(mixing, target.T, rcond=None)[0].T
    return src - np.asarray(scenario.proportions, dtype=float) @ src


def true_cluster_table(scenario: Scenario, pop: PopulationParams) -> np.ndarray:
    """Rows ``(tau_bar, xi_bar, w_1..w_d)`` the simulator actually generates from."""
    shifts = cluster_source_means(scenario, pop) @ pop.mixing_matrix.T
    return np.column_stack([scenario.tau_mean, scenario.xi_mean, shifts])


def generate_visit_schedules(tau, n_visits: int, rng) -> np.ndarray:
    """Increasing visit times around each onset in ``tau``; shape ``(N, n_visits)``.

    A regular grid over ``tau +/- 5`` years is jittered point-wise by up to
    30% of the grid gap and shifted as a whole by a clipped Gaussian offset.
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if n_visits < 1:
        raise ModelError("n_visits must be >= 1")
    n = tau.shape[0]
    h = VISIT_HALF_WIDTH
    gap = 2.0 * h / (n_visits - 1) if n_visits > 1 else 2.0 * h
    grid = np.linspace(-h, h, n_visits) if n_visits > 1 else np.zeros(1)
    jitter = rng.uniform(-VISIT_JITTER, VISIT_JITTER, size=(n, n_visits)) * gap
    shift = np.clip(rng.normal(0.0, VISIT_SHIFT_SD, size=(n, 1)), -VISIT_SHIFT_MAX, VISIT_SHIFT_MAX)
    times = tau[:, None] + grid[None, :] + jitter + shift
    times.sort(axis=1)
    return times


def generate_visit_times(tau_i: float, n_visits: int, rng) -> np.ndarray:
    return generate_visit_schedules([tau_i], n_visits, rng)[0]


@dataclass(frozen=True)
class SimulatedCohort:
    data: Dataset
    labels: np.ndarray                 # true cluster per patient (0-based)
    individual: IndividualParams       # true latent parameters
    population: PopulationParams
    source_means: np.ndarray           # (k, Ns)
    scenario: Scenario

    def truth_table(self) -> np.ndarray:
        return true_cluster_table(self.scenario, self.population)


def simulate(scenario: Scenario, fixed_effects: PopulationParams | None = None,
             seed: int | None = None) -> SimulatedCohort:
    """Draw one labelled cohort.  The seed defaults to ``scenario.seed``."""
    pop = fixed_effects if fixed_effects is not None else default_fixed_effects(scenario)
    if pop.n_features != scenario.n_features or pop.n_sources != scenario.n_sources:
        raise ModelError("fixed effects do not match the scenario's features/sources")
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    n, k, nv = scenario.n_patients, scenario.n_clusters, scenario.n_visits
    src_means = cluster_source_means(scenario, pop)

    labels = rng.choice(k, size=n, p=np.asarray(scenario.proportions, dtype=float))
    tau = np.asarray(scenario.tau_mean)[labels] + scenario.tau_sd * rng.standard_normal(n)
    xi = np.asarray(scenario.xi_mean)[labels] + scenario.xi_sd * rng.standard_normal(n)
    src = src_means[labels] + scenario.source_sd * rng.standard_normal((n, scenario.n_sources))
    ind = IndividualParams(tau, xi, src)

    times = generate_visit_schedules(tau, nv, rng)
    idx = np.repeat(np.arange(n), nv)
    rows = IndividualParams(tau[idx], xi[idx], src[idx])
    clean = trajectory_value(pop, rows, times.ravel())
    noisy = clean + scenario.noise_sd * rng.standard_normal(clean.shape)
    values = np.clip(noisy, OBS_EPS, 1.0 - OBS_EPS)

    width = len(str(n))
    ids = tuple(f"p{i + 1:0{width}d}" for i in range(n))
    data = Dataset(ids, scenario.feature_names, idx, times.ravel(), values)
    return SimulatedCohort(data, labels, ind, pop, src_means, scenario)
