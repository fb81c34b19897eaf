#
# Copyright (C) 2025-2026
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.
#

"""Synthetic count data drawn from the model itself.

Every generator draws from a single Philox stream seeded with `cfg.seed`, in a
fixed order, so a configuration and its seed determine the output exactly.
"""

import itertools
import json
import logging
import os.path as op
from typing import List, Optional

import numpy as np
import yaml
from pydantic import BaseModel, root_validator, validator

from .bound import softmax
from .dataset import CountDataset, pool_conditions
from .predictive import identifiable_loadings

PRESETS_PATH = op.join(op.dirname(__file__), "presets.yml")


class SimConfig(BaseModel):
    preset: str = "community"
    d_z: int = 5
    dims: List[int] = [20, 10]
    replicates: int = 200
    class_means: Optional[List[List[float]]] = None
    class_variances: Optional[List[float]] = None
    total: Optional[int] = None
    rate: Optional[float] = 1000.0
    rates: Optional[List[float]] = None
    sweep_dims: Optional[List[int]] = None
    sweep_latent_dims: Optional[List[int]] = None
    theta_scale: float = 1.0
    shared_loadings: bool = False
    pooled: bool = False
    seed: int = 0

    class Config:
        extra = "forbid"

    @validator("preset")
    def _known_preset(cls, v):
        if v not in ("classes", "community", "sweep", "rank"):
            raise ValueError(f"unknown preset {v!r}")
        return v

    @validator("d_z", "replicates")
    def _positive_int(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1")
        return v

    @validator("dims", "sweep_dims", "sweep_latent_dims")
    def _positive_dims(cls, v):
        if v is not None and (not v or any(d < 1 for d in v)):
            raise ValueError("dimensions must be a non-empty list of positive integers")
        return v

    @validator("total")
    def _nonnegative_total(cls, v):
        if v is not None and v < 0:
            raise ValueError("total must be non-negative")
        return v

    @validator("rate")
    def _nonnegative_rate(cls, v):
        if v is not None and v < 0:
            raise ValueError("rate must be non-negative")
        return v

    @root_validator(skip_on_failure=True)
    def _class_lists(cls, values):
        means, variances = values.get("class_means"), values.get("class_variances")
        if (means is None) != (variances is None):
            raise ValueError("class_means and class_variances go together")
        if means is not None:
            if len(means) != len(variances) or not means:
                raise ValueError("class_means and class_variances must have the same, non-zero length")
            if any(len(m) != values["d_z"] for m in means):
                raise ValueError(f"every class mean must have length d_z={values['d_z']}")
            if any(v < 0 for v in variances):
                raise ValueError("class variances must be non-negative")
        if values.get("total") is None and values.get("rate") is None and values["preset"] != "sweep":
            raise ValueError("either a fixed total or a Poisson rate is required")
        return values


def load_preset(name, overrides=None, path=PRESETS_PATH):
    """SimConfig of preset `name`, with `overrides` (field → value) applied on top."""
    with open(path, encoding="utf-8") as f:
        presets = yaml.safe_load(f)
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}, choose from {sorted(presets)}")
    fields = dict(presets[name], preset=name)
    fields.update(overrides or {})
    return SimConfig(**fields)


class GroundTruth:
    """Generating parameters; `Theta[k][l]`, `z[k]` and `covariance[k]` per condition."""

    def __init__(self, z, Theta, labels=None):
        self.z = z
        self.Theta = Theta
        self.labels = labels
        self.covariance = [np.vstack(t) @ np.vstack(t).T for t in Theta]

    def centred_covariance(self, k=0):
        """Θ̃Θ̃ᵀ from column-centred loadings, the part of the truth the counts can identify."""
        stacked = np.vstack([identifiable_loadings(t) for t in self.Theta[k]])
        return stacked @ stacked.T


def _rng(cfg):
    return np.random.Generator(np.random.Philox(cfg.seed))


def _draw_counts(rng, eta, totals):
    """One multinomial row per entry of `totals`, with probabilities softmax(eta)."""
    p = softmax(eta)
    rows = np.empty(eta.shape, dtype=np.int64)
    for i, (n, pi) in enumerate(zip(totals, p)):
        rows[i] = rng.multinomial(n, pi / pi.sum())
    return rows


def _loadings(rng, cfg):
    return [rng.normal(0.0, cfg.theta_scale / np.sqrt(cfg.d_z), size=(d, cfg.d_z)) for d in cfg.dims]


def _totals(rng, cfg, n):
    if cfg.total is not None:
        return np.full(n, cfg.total, dtype=np.int64)
    return rng.poisson(cfg.rate, size=n)


def _feature_labels(cfg):
    return [[f"s{l}_f{j}" for j in range(d)] for l, d in enumerate(cfg.dims)]


def _species_labels(cfg):
    return [f"s{l}" for l in range(len(cfg.dims))]


def simulate_classes(cfg):
    """One condition per class; z ~ N(mean_c, var_c·I) drives every species of class c.

    With `shared_loadings` all classes use the same Θ; with `pooled` the
    classes are stacked into a single condition and `truth.labels` holds the
    class of every row.
    """
    if cfg.class_means is None:
        raise ValueError("the classes generator needs class_means and class_variances")
    rng = _rng(cfg)
    shared = _loadings(rng, cfg) if cfg.shared_loadings else None

    counts, zs, Thetas = [], [], []
    for mean, var in zip(cfg.class_means, cfg.class_variances):
        Theta = shared if shared is not None else _loadings(rng, cfg)
        z = np.asarray(mean) + np.sqrt(var) * rng.standard_normal((cfg.replicates, cfg.d_z))
        blocks = [_draw_counts(rng, z @ t.T, _totals(rng, cfg, cfg.replicates)) for t in Theta]
        counts.append(blocks)
        zs.append(z)
        Thetas.append(Theta)
    labels = np.repeat(np.arange(len(cfg.class_means)), cfg.replicates)
    condition_labels = [f"class{c}" for c in range(len(cfg.class_means))]

    ds = CountDataset(counts, condition_labels, _species_labels(cfg), _feature_labels(cfg))
    if cfg.pooled:
        if not cfg.shared_loadings:
            logging.warning("pooling classes that were drawn with different loadings")
        return pool_conditions(ds), GroundTruth([np.vstack(zs)], Thetas[:1], labels)
    return ds, GroundTruth(zs, Thetas, labels)


def simulate_community(cfg):
    """A single condition where one z ~ N(0, I) per replicate drives every species."""
    rng = _rng(cfg)
    Theta = _loadings(rng, cfg)
    z = rng.standard_normal((cfg.replicates, cfg.d_z))
    blocks = [_draw_counts(rng, z @ t.T, _totals(rng, cfg, cfg.replicates)) for t in Theta]
    ds = CountDataset([blocks], ["community"], _species_labels(cfg), _feature_labels(cfg))
    return ds, GroundTruth([z], [Theta])


def simulate_sweep(cfg, rates=None, dims=None):
    """One single-species community dataset per (rate, dim), in row-major grid order.

    Every grid point is drawn with the same seed.
    """
    rates = list(cfg.rates if rates is None else rates)
    dims = list(cfg.sweep_dims if dims is None else dims)
    if not rates or not dims:
        raise ValueError("sweep grids must not be empty")
    points = []
    for rate, dim in itertools.product(rates, dims):
        point_cfg = cfg.copy(update=dict(preset="community", dims=[dim], rate=rate, total=None))
        points.append(simulate_community(point_cfg))
    return points


def simulate(cfg):
    """Dispatch on `cfg.preset`; returns a list of (dataset, truth) pairs."""
    if cfg.preset == "classes":
        return [simulate_classes(cfg)]
    if cfg.preset == "sweep":
        return simulate_sweep(cfg)
    return [simulate_community(cfg)]


def save_truth(truth, path, species_labels=None, condition_labels=None):
    doc = dict(
        Theta=[[t.tolist() for t in per_condition] for per_condition in truth.Theta],
        covariance=[c.tolist() for c in truth.covariance],
        labels=None if truth.labels is None else truth.labels.tolist(),
        species=species_labels,
        conditions=condition_labels,
    )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
