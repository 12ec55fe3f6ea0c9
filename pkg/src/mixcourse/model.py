"""Domain types and the logistic forward model.

Every feature follows a logistic curve on a latent disease timeline.  A
patient's timeline is obtained from chronological age through an onset
``tau`` and a log-acceleration ``xi``; a per-feature space shift ``w = A s``
moves the curve along the feature axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

EXP_CLAMP = 700.0
Y_EPS = 1e-15


class ModelError(ValueError):
    """Invalid parameter value or inconsistent configuration."""


# ---------------------------------------------------------------- transforms

def position_to_g_tilde(p):
    """``log((1 - p) / p)``; ``p`` must lie in (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ModelError(f"positions must lie in (0, 1), got {p}")
    out = np.log1p(-p) - np.log(p)
    return out.item() if out.ndim == 0 else out


def g_tilde_to_position(g_tilde):
    out = expit(-np.asarray(g_tilde, dtype=float))
    return out.item() if out.ndim == 0 else out


def velocity_to_v_tilde(v):
    v = np.asarray(v, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0.0):
        raise ModelError(f"velocities must be > 0, got {v}")
    out = np.log(v)
    return out.item() if out.ndim == 0 else out


def v_tilde_to_velocity(v_tilde):
    out = np.exp(np.asarray(v_tilde, dtype=float))
    return out.item() if out.ndim == 0 else out


# ---------------------------------------------------------------- types

def _frozen_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float, ndmin=ndim)
    if arr.ndim != ndim:
        raise ModelError(f"{name} must be {ndim}-d, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PopulationParams:
    """Fixed effects in the sampler's (log) parametrization.

    ``beta`` has shape ``(d - 1, n_sources)`` and carries the mixing-matrix
    coefficients in the orthonormal basis of the hyperplane orthogonal to the
    velocity vector.
    """

    g_tilde: np.ndarray
    v_tilde: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = _frozen_array(self.g_tilde, 1, "g_tilde")
        v = _frozen_array(self.v_tilde, 1, "v_tilde")
        d = g.shape[0]
        if v.shape != (d,):
            raise ModelError("g_tilde and v_tilde must have the same length")
        if d < 2:
            raise ModelError("at least two features are required")
        beta = _frozen_array(self.beta, 2, "beta")
        if beta.shape[0] != d - 1 or beta.shape[1] < 1:
            raise ModelError(f"beta must have shape ({d - 1}, n_sources >= 1), got {beta.shape}")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(v)) and np.all(np.isfinite(beta))):
            raise ModelError("population parameters must be finite")
        object.__setattr__(self, "g_tilde", g)
        object.__setattr__(self, "v_tilde", v)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def from_natural(cls, positions, velocities, beta) -> "PopulationParams":
        return cls(position_to_g_tilde(np.atleast_1d(positions)),
                   velocity_to_v_tilde(np.atleast_1d(velocities)), beta)

    @property
    def n_features(self) -> int:
        return self.g_tilde.shape[0]

    @property
    def n_sources(self) -> int:
        return self.beta.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return expit(-self.g_tilde)

    @property
    def velocities(self) -> np.ndarray:
        return np.exp(self.v_tilde)

    @property
    def mixing_matrix(self) -> np.ndarray:
        return build_mixing_matrix(self.v_tilde, self.beta)


@dataclass(frozen=True)
class IndividualParams:
    """Latent individual parameters for a batch of patients.

    ``tau`` and ``xi`` have shape ``(N,)``; ``sources`` has shape ``(N, n_sources)``.
    """

    tau: np.ndarray
    xi: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        tau = _frozen_array(self.tau, 1, "tau")
        xi = _frozen_array(self.xi, 1, "xi")
        src = _frozen_array(self.sources, 2, "sources")
        if xi.shape != tau.shape or src.shape[0] != tau.shape[0]:
            raise ModelError("tau, xi and sources must describe the same patients")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(xi)) and np.all(np.isfinite(src))):
            raise ModelError("individual parameters must be finite")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "sources", src)

    @classmethod
    def single(cls, tau: float, xi: float, sources) -> "IndividualParams":
        return cls([tau], [xi], np.atleast_2d(np.asarray(sources, dtype=float)))

    def __len__(self) -> int:
        return self.tau.shape[0]

    @property
    def n_sources(self) -> int:
        return self.sources.shape[1]

    def as_matrix(self) -> np.ndarray:
        """Rows ``(tau, xi, s_1, ..., s_Ns)``."""
        return np.column_stack([self.tau, self.xi, self.sources])

    @classmethod
    def from_matrix(cls, z) -> "IndividualParams":
        z = np.asarray(z, dtype=float)
        return cls(z[:, 0], z[:, 1], z[:, 2:])

    def subset(self, idx) -> "IndividualParams":
        return IndividualParams(self.tau[idx], self.xi[idx], self.sources[idx])


@dataclass(frozen=True)
class HyperParams:
    sigma_g_tilde: float = 0.01
    sigma_v_tilde: float = 0.01
    sigma_beta: float = 0.01
    sigma_source: float = 1.0

    def __post_init__(self):
        for name in ("sigma_g_tilde", "sigma_v_tilde", "sigma_beta", "sigma_source"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ModelError(f"{name} must be > 0, got {val}")


@dataclass(frozen=True)
class MixtureParams:
    """Cluster-level distribution of the individual parameters plus noise SDs."""

    proportions: np.ndarray
    tau_mean: np.ndarray
    tau_sd: np.ndarray
    xi_mean: np.ndarray
    xi_sd: np.ndarray
    source_means: np.ndarray
    noise_sd: np.ndarray
    check_centering: bool = field(default=False, compare=False)

    def __post_init__(self):
        pi = _frozen_array(self.proportions, 1, "proportions")
        k = pi.shape[0]
        if k < 1:
            raise ModelError("need at least one cluster")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ModelError(f"proportions must be a simplex point, got {pi}")
        arrays = {}
        for name in ("tau_mean", "tau_sd", "xi_mean", "xi_sd"):
            arr = _frozen_array(getattr(self, name), 1, name)
            if arr.shape != (k,):
                raise ModelError(f"{name} must have length {k}")
            arrays[name] = arr
        for name in ("tau_sd", "xi_sd"):
            if np.any(arrays[name] <= 0):
                raise ModelError(f"{name} must be strictly positive")
        src = _frozen_array(self.source_means, 2, "source_means")
        if src.shape[0] != k:
            raise ModelError("source_means must have one row per cluster")
        noise = _frozen_array(self.noise_sd, 1, "noise_sd")
        if np.any(noise <= 0):
            raise ModelError("noise_sd must be strictly positive")
        allv = np.concatenate([pi, *arrays.values(), src.ravel(), noise])
        if not np.all(np.isfinite(allv)):
            raise ModelError("mixture parameters must be finite")
        if self.check_centering:
            if abs(pi @ arrays["xi_mean"]) > 1e-8 or np.any(np.abs(pi @ src) > 1e-8):
                raise ModelError("weighted cluster means of xi and sources must be centered")
        object.__setattr__(self, "proportions", pi)
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "source_means", src)
        object.__setattr__(self, "noise_sd", noise)

    @property
    def n_clusters(self) -> int:
        return self.proportions.shape[0]

    @property
    def n_sources(self) -> int:
        return self.source_means.shape[1]

    def means_matrix(self) -> np.ndarray:
        """Per-cluster rows ``(tau_mean, xi_mean, s_1, ..., s_Ns)``."""
        return np.column_stack([self.tau_mean, self.xi_mean, self.source_means])

    def sds_matrix(self, sigma_source: float) -> np.ndarray:
        k, ns = self.source_means.shape
        return np.column_stack([self.tau_sd, self.xi_sd, np.full((k, ns), sigma_source)])

    def permuted(self, order) -> "MixtureParams":
        order = np.asarray(order)
        return MixtureParams(self.proportions[order], self.tau_mean[order], self.tau_sd[order],
                             self.xi_mean[order], self.xi_sd[order], self.source_means[order],
                             self.noise_sd)


# ---------------------------------------------------------------- operations

def orthonormal_complement(v) -> np.ndarray:
    """Columns form an orthonormal basis of the hyperplane orthogonal to ``v``.

    Built from the Householder reflector sending ``v / |v|`` onto (minus) the
    first canonical vector; columns 2..d of the reflector are the basis.
    """
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0 or not np.isfinite(norm):
        raise ModelError("velocity vector must be finite and nonzero")
    u = v / norm
    sign = 1.0 if u[0] >= 0 else -1.0
    u = u.copy()
    u[0] += sign
    h = np.eye(v.shape[0]) - 2.0 * np.outer(u, u) / (u @ u)
    return h[:, 1:]


def build_mixing_matrix(v_tilde, beta) -> np.ndarray:
    v_tilde = np.asarray(v_tilde, dtype=float)
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    d = v_tilde.shape[0]
    if beta.shape[0] != d - 1:
        raise ModelError(f"beta must have {d - 1} rows, got {beta.shape[0]}")
    if beta.shape[1] > d - 1:
        raise ModelError(f"n_sources={beta.shape[1]} exceeds d - 1 = {d - 1}")
    return orthonormal_complement(np.exp(v_tilde)) @ beta


def space_shifts(mixing, sources) -> np.ndarray:
    """``w = A s``; ``sources`` may be one vector or a stack of rows."""
    mixing = np.asarray(mixing, dtype=float)
    sources = np.asarray(sources, dtype=float)
    if sources.shape[-1] != mixing.shape[1]:
        raise ModelError(f"sources have {sources.shape[-1]} entries, mixing matrix expects {mixing.shape[1]}")
    return sources @ mixing.T


def reparametrize_time(t, xi, tau):
    return np.exp(xi) * (np.asarray(t, dtype=float) - tau)


def logistic_curve(g_tilde, v_tilde, psi, w):
    """Noise-free feature values for disease ages ``psi`` (shape ``(M,)``) and
    shifts ``w`` (shape ``(M, d)`` or ``(d,)``).  Returns shape ``(M, d)``."""
    p = expit(-g_tilde)
    v = np.exp(v_tilde)
    psi = np.asarray(psi, dtype=float)
    lin = (v * psi[..., None] + w) / (p * (1.0 - p))
    expo = np.clip(g_tilde - lin, -EXP_CLAMP, EXP_CLAMP)
    y = 1.0 / (1.0 + np.exp(expo))
    return np.clip(y, Y_EPS, 1.0 - Y_EPS)


def trajectory_value(pop: PopulationParams, ind: IndividualParams, t) -> np.ndarray:
    """Curves of every patient in ``ind`` at times ``t``.

    ``t`` broadcasts against the patient axis: with one patient and a vector of
    times the result has shape ``(len(t), d)``; with N patients and scalar
    ``t`` it has shape ``(N, d)``.
    """
    t = np.asarray(t, dtype=float)
    w = space_shifts(pop.mixing_matrix, ind.sources)
    if len(ind) == 1:
        psi = reparametrize_time(t, ind.xi[0], ind.tau[0])
        return logistic_curve(pop.g_tilde, pop.v_tilde, np.atleast_1d(psi), w[0])
    psi = reparametrize_time(t, ind.xi, ind.tau)
    return logistic_curve(pop.g_tilde, pop.v_tilde, psi, w)


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class Dataset:
    """Long-format longitudinal observations.

    Rows are sorted by patient (in ``patient_ids`` order) then time.  Missing
    feature values are NaN in ``values``.
    """

    patient_ids: tuple
    feature_names: tuple
    patient_index: np.ndarray
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ids = tuple(str(i) for i in self.patient_ids)
        names = tuple(str(n) for n in self.feature_names)
        if len(set(ids)) != len(ids):
            raise ModelError("patient ids must be unique")
        idx = np.asarray(self.patient_index, dtype=np.int64)
        t = np.asarray(self.times, dtype=float)
        y = np.array(self.values, dtype=float, ndmin=2)
        if y.shape != (t.shape[0], len(names)) or idx.shape != t.shape:
            raise ModelError("values must be (n_rows, n_features) matching times/patient_index")
        if not np.all(np.isfinite(t)):
            raise ModelError("visit times must be finite")
        if idx.size and (idx.min() < 0 or idx.max() >= len(ids)):
            raise ModelError("patient_index out of range")
        if np.any(np.diff(idx) < 0):
            raise ModelError("rows must be grouped by patient in id order")
        counts = np.bincount(idx, minlength=len(ids))
        if np.any(counts == 0):
            missing = [ids[i] for i in np.flatnonzero(counts == 0)[:5]]
            raise ModelError(f"every patient needs at least one visit; none for {missing}")
        same = idx[1:] == idx[:-1]
        if np.any(np.diff(t)[same] <= 0):
            raise ModelError("visit times must be strictly increasing within each patient")
        present = ~np.isnan(y)
        if np.any((y[present] <= 0) | (y[present] >= 1)):
            raise ModelError("observed values must lie in the open interval (0, 1)")
        for arr in (idx, t, y):
            arr.setflags(write=False)
        object.__setattr__(self, "patient_ids", ids)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "patient_index", idx)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    @classmethod
    def from_records(cls, records, feature_names) -> "Dataset":
        """Build from ``(patient_id, time, values)`` rows in any order."""
        records = list(records)
        pos = {}
        for rid, _, _ in records:
            pos.setdefault(rid, len(pos))
        order = list(pos)
        records.sort(key=lambda r: (pos[r[0]], r[1]))
        idx = np.array([pos[r[0]] for r in records], dtype=np.int64)
        t = np.array([r[1] for r in records], dtype=float)
        y = np.array([np.asarray(r[2], dtype=float) for r in records]).reshape(len(records), len(feature_names))
        return cls(tuple(order), tuple(feature_names), idx, t, y)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_rows(self) -> int:
        return self.times.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def visits_per_patient(self) -> np.ndarray:
        return np.bincount(self.patient_index, minlength=self.n_patients)

    def subset(self, patients) -> "Dataset":
        """Dataset restricted to the given patient positions (kept in that order)."""
        patients = list(patients)
        rows, new_idx = [], []
        for new, old in enumerate(patients):
            r = np.flatnonzero(self.patient_index == old)
            rows.append(r)
            new_idx.append(np.full(r.shape[0], new))
        rows = np.concatenate(rows)
        return Dataset(tuple(self.patient_ids[i] for i in patients), self.feature_names,
                       np.concatenate(new_idx), self.times[rows], self.values[rows])
