"""File formats: long-format data CSV, truth and membership CSVs, model JSON.

Numbers are written with 17 significant digits and a ``.`` decimal separator,
so every float survives a write/read cycle exactly.  All writers go through a
temporary file in the target directory followed by an atomic rename.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import (Dataset, HyperParams, IndividualParams, MixtureParams, ModelError,
                    PopulationParams)
from .saem import FitConfig, FittedModel

MODEL_SCHEMA = "mixcourse.model"
MODEL_VERSION = 1


class ParseError(ModelError):
    """Malformed input file; the message names the offending row or column."""


def fmt(x) -> str:
    """Locale-independent, round-trip text for one number (empty for NaN)."""
    x = float(x)
    if math.isnan(x):
        return ""
    return format(x, ".17g")


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """``(header, rows)`` with every cell as a string."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ParseError(f"{path}: file is empty")
    return rows[0], rows[1:]


def _number(text, path, row, column, allow_missing=False):
    text = text.strip()
    if text == "" and allow_missing:
        return np.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{path}: row {row}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"{path}: row {row}, column {column!r}: non-finite value {text!r}")
    return value


# ---------------------------------------------------------------- datasets

def write_dataset(path, data: Dataset) -> Path:
    header = ["patient_id", "time", *data.feature_names]
    rows = ([data.patient_ids[data.patient_index[r]], float(data.times[r]), *map(float, data.values[r])]
            for r in range(data.n_rows))
    return write_csv(path, header, rows)


def read_dataset(path) -> Dataset:
    """Parse ``patient_id,time,<features>``; empty cells are missing values."""
    header, rows = read_csv(path)
    header = [h.strip() for h in header]
    if len(header) < 3 or header[0] != "patient_id" or header[1] != "time":
        raise ParseError(f"{path}: header must start with 'patient_id,time' and name at least one feature")
    features = header[2:]
    if len(set(features)) != len(features):
        raise ParseError(f"{path}: duplicate feature names in header")
    records = []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        pid = row[0].strip()
        if not pid:
            raise ParseError(f"{path}: row {r}, column 'patient_id': empty")
        t = _number(row[1], path, r, "time")
        vals = [_number(row[2 + j], path, r, features[j], allow_missing=True) for j in range(len(features))]
        records.append((pid, t, vals))
    if not records:
        raise ParseError(f"{path}: no data rows")
    try:
        return Dataset.from_records(records, features)
    except ModelError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- truth and memberships

def write_truth(path, patient_ids, labels, individual: IndividualParams) -> Path:
    """Cluster labels are written 1-based."""
    ns = individual.n_sources
    header = ["patient_id", "cluster", "tau", "xi", *[f"s{l + 1}" for l in range(ns)]]
    rows = ([pid, int(labels[i]) + 1, float(individual.tau[i]), float(individual.xi[i]),
             *map(float, individual.sources[i])] for i, pid in enumerate(patient_ids))
    return write_csv(path, header, rows)


def read_truth(path):
    """``(patient_ids, labels (0-based), IndividualParams)``."""
    header, rows = read_csv(path)
    if header[:4] != ["patient_id", "cluster", "tau", "xi"] or len(header) < 5:
        raise ParseError(f"{path}: expected header 'patient_id,cluster,tau,xi,s1,...'")
    ids, labels, z = [], [], []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        lab = _number(row[1], path, r, "cluster")
        if lab < 1 or lab != int(lab):
            raise ParseError(f"{path}: row {r}, column 'cluster': labels are positive integers")
        labels.append(int(lab) - 1)
        z.append([_number(row[j], path, r, header[j]) for j in range(2, len(header))])
    return tuple(ids), np.array(labels, dtype=np.int64), IndividualParams.from_matrix(np.array(z))


def write_membership(path, patient_ids, membership) -> Path:
    membership = np.asarray(membership, dtype=float)
    k = membership.shape[1]
    header = ["patient_id", *[f"p{c + 1}" for c in range(k)], "cluster"]
    labels = np.argmax(membership, axis=1)
    rows = ([pid, *map(float, membership[i]), int(labels[i]) + 1] for i, pid in enumerate(patient_ids))
    return write_csv(path, header, rows)


def read_membership(path):
    """``(patient_ids, membership, labels (0-based))``."""
    header, rows = read_csv(path)
    if header[0] != "patient_id" or header[-1] != "cluster" or len(header) < 3:
        raise ParseError(f"{path}: expected header 'patient_id,p1,...,pk,cluster'")
    ids, probs, labels = [], [], []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        probs.append([_number(row[j], path, r, header[j]) for j in range(1, len(header) - 1)])
        labels.append(int(_number(row[-1], path, r, "cluster")) - 1)
    return tuple(ids), np.array(probs), np.array(labels, dtype=np.int64)


def align_ids(reference, other, what: str = "files"):
    """Index array putting ``other`` into the order of ``reference``.

    Raises :class:`ParseError` listing the ids present on one side only.
    """
    reference, other = list(reference), list(other)
    missing = sorted(set(reference) - set(other))
    extra = sorted(set(other) - set(reference))
    if missing or extra or len(other) != len(reference):
        parts = []
        if missing:
            parts.append(f"missing from second: {missing[:10]}{' ...' if len(missing) > 10 else ''}")
        if extra:
            parts.append(f"only in second: {extra[:10]}{' ...' if len(extra) > 10 else ''}")
        if not parts:
            parts.append("duplicate patient ids")
        raise ParseError(f"patient ids of {what} do not match; " + "; ".join(parts))
    pos = {pid: i for i, pid in enumerate(other)}
    return np.array([pos[pid] for pid in reference], dtype=np.int64)


# ---------------------------------------------------------------- model documents

def _config_to_dict(config: FitConfig | None):
    if config is None:
        return None
    out = {}
    for name in FitConfig.__dataclass_fields__:
        value = getattr(config, name)
        out[name] = vars(value).copy() if isinstance(value, HyperParams) else value
    return out


def _config_from_dict(doc):
    if doc is None:
        return None
    doc = dict(doc)
    doc["hyper"] = HyperParams(**doc["hyper"])
    known = set(FitConfig.__dataclass_fields__)
    return FitConfig(**{k: v for k, v in doc.items() if k in known})


def model_to_dict(model: FittedModel) -> dict:
    pop, mix, ind = model.population, model.mixture, model.individual
    return {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "feature_names": list(model.feature_names),
        "population": {"g_tilde": pop.g_tilde.tolist(), "v_tilde": pop.v_tilde.tolist(),
                       "beta": pop.beta.tolist()},
        "mixture": {"proportions": mix.proportions.tolist(), "tau_mean": mix.tau_mean.tolist(),
                    "tau_sd": mix.tau_sd.tolist(), "xi_mean": mix.xi_mean.tolist(),
                    "xi_sd": mix.xi_sd.tolist(), "source_means": mix.source_means.tolist(),
                    "noise_sd": mix.noise_sd.tolist()},
        "hyper": vars(model.hyper).copy(),
        "patients": {"ids": list(model.patient_ids), "tau": ind.tau.tolist(), "xi": ind.xi.tolist(),
                     "sources": ind.sources.tolist(), "membership": np.asarray(model.membership).tolist()},
        "config": _config_to_dict(model.config),
    }


def model_from_dict(doc: dict) -> FittedModel:
    if doc.get("schema") != MODEL_SCHEMA:
        raise ParseError(f"not a model document (schema={doc.get('schema')!r})")
    if not isinstance(doc.get("version"), int) or doc["version"] > MODEL_VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')!r}; this build reads <= {MODEL_VERSION}")
    try:
        p, m, pt = doc["population"], doc["mixture"], doc["patients"]
        pop = PopulationParams(np.array(p["g_tilde"]), np.array(p["v_tilde"]), np.array(p["beta"]))
        mix = MixtureParams(np.array(m["proportions"]), np.array(m["tau_mean"]), np.array(m["tau_sd"]),
                            np.array(m["xi_mean"]), np.array(m["xi_sd"]),
                            np.array(m["source_means"]), np.array(m["noise_sd"]))
        ind = IndividualParams(np.array(pt["tau"], dtype=float), np.array(pt["xi"], dtype=float),
                               np.array(pt["sources"], dtype=float).reshape(len(pt["tau"]), -1))
        membership = np.array(pt["membership"], dtype=float).reshape(len(pt["tau"]), -1)
        return FittedModel(pop, mix, ind, membership, HyperParams(**doc["hyper"]), tuple(pt["ids"]),
                           tuple(doc["feature_names"]), _config_from_dict(doc.get("config")), ())
    except (KeyError, TypeError) as exc:
        raise ParseError(f"model document is missing or has a malformed field: {exc}") from exc


def save_model(path, model: FittedModel) -> Path:
    return atomic_write_text(path, json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> FittedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    return model_from_dict(doc)
