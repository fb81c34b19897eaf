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

"""Model-predicted structure of a fitted model.

Under the bound, the transformed sample x̃ = A⁻¹(b + x) of species l is
Gaussian with mean Θ·μ and covariance A⁻¹ + Θ·Σ·Θᵀ once z is integrated out.
Stacking every species of a condition gives the inter-species version, whose
off-diagonal blocks hold the cross-species covariances.
"""

import numpy as np
import pandas as pd
from scipy import linalg

from .bound import HessianBound, softmax

_SIMPLEX_TOLERANCE = 1e-8


class MarginalGaussian:
    def __init__(self, mean, covariance, scope):
        self.mean = mean
        self.covariance = covariance
        self.scope = scope

    @property
    def dim(self):
        return self.mean.shape[0]

    def __repr__(self):
        return f"<MarginalGaussian scope={self.scope} dim={self.dim}>"


def transform_sample(x, b, D=None):
    x, b = np.asarray(x, dtype=float), np.asarray(b, dtype=float)
    D = x.shape[-1] if D is None else D
    if x.shape[-1] != D or b.shape[-1] != D:
        raise ValueError(f"length mismatch: x has {x.shape[-1]} entries, b {b.shape[-1]}, dimension {D}")
    return HessianBound(D).apply_inverse(b + x)


def _species(params, l):
    if not 0 <= l < len(params.dims):
        raise ValueError(f"unknown species {l}")
    return l


def intra_covariance(params, k, l):
    cp = params.condition(k)
    Theta = cp.Theta[_species(params, l)]
    covariance = HessianBound(Theta.shape[0]).dense_inverse() + Theta @ cp.Sigma @ Theta.T
    return MarginalGaussian(Theta @ cp.mu, covariance, scope=("intra", k, l))


def inter_covariance(params, k):
    cp = params.condition(k)
    stacked = np.vstack(cp.Theta)
    noise = linalg.block_diag(*(HessianBound(t.shape[0]).dense_inverse() for t in cp.Theta))
    return MarginalGaussian(stacked @ cp.mu, noise + stacked @ cp.Sigma @ stacked.T, scope=("inter", k))


def identifiable_loadings(Theta):
    """Θ with every column centred; adding a constant to a column leaves the softmax unchanged."""
    Theta = np.asarray(Theta, dtype=float)
    return Theta - Theta.mean(axis=0, keepdims=True)


def latent_covariance(params, k, species=None):
    """Θ̃·Σ_k·Θ̃ᵀ built from centred loadings, over all species or the listed ones."""
    cp = params.condition(k)
    species = range(len(cp.Theta)) if species is None else species
    stacked = np.vstack([identifiable_loadings(cp.Theta[_species(params, l)]) for l in species])
    return stacked @ cp.Sigma @ stacked.T


def to_correlation(C):
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"covariance must be square, got shape {C.shape}")
    variances = np.diag(C)
    if np.any(variances <= 0):
        raise ValueError(f"nonpositive diagonal entry at {int(np.argmax(variances <= 0))}")
    scale = 1.0 / np.sqrt(variances)
    corr = np.clip(C * scale[:, None] * scale[None, :], -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


class CorrelationNetwork:
    def __init__(self, labels, correlation, adjacency, threshold, signed=False):
        self.labels = list(labels)
        self.correlation = correlation
        self.adjacency = adjacency
        self.threshold = threshold
        self.signed = signed

    @property
    def degrees(self):
        return self.adjacency.sum(axis=1)

    def edges(self):
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(self.labels[i], self.labels[j], float(self.correlation[i, j])) for i, j in zip(rows, cols)]

    def __repr__(self):
        n_edges = int(self.adjacency.sum()) // 2
        return f"<CorrelationNetwork vertices={len(self.labels)} edges={n_edges} tau={self.threshold}>"


def threshold_network(corr, tau, labels=None, signed=False):
    """Graph with an edge wherever |corr| ≥ τ (corr ≥ τ when `signed`)."""
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"correlation matrix must be square, got shape {corr.shape}")
    if not np.allclose(corr, corr.T, atol=1e-8):
        raise ValueError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-8):
        raise ValueError("correlation matrix must have a unit diagonal")
    if not 0 < tau <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    labels = [str(i) for i in range(corr.shape[0])] if labels is None else list(labels)
    if len(labels) != corr.shape[0]:
        raise ValueError(f"{len(labels)} labels for {corr.shape[0]} vertices")

    adjacency = (corr if signed else np.abs(corr)) >= tau
    np.fill_diagonal(adjacency, False)
    return CorrelationNetwork(labels, corr, adjacency, tau, signed)


class DegreeDifference:
    """degree_b − degree_a per vertex, plus the vertices sorted by decreasing difference."""

    def __init__(self, labels, diff):
        self.labels = list(labels)
        self.diff = diff
        self.order = np.argsort(-diff, kind="stable")

    @property
    def increases(self):
        return int(np.sum(self.diff > 0))

    @property
    def decreases(self):
        return int(np.sum(self.diff < 0))

    def sorted(self):
        return [(self.labels[i], int(self.diff[i])) for i in self.order]

    def __repr__(self):
        return f"<DegreeDifference vertices={len(self.labels)} increases={self.increases} decreases={self.decreases}>"


def degree_difference(net_a, net_b):
    if sorted(net_a.labels) != sorted(net_b.labels) or len(set(net_a.labels)) != len(net_a.labels):
        raise ValueError("networks do not share the same vertex labels")
    position = {label: i for i, label in enumerate(net_b.labels)}
    degrees_b = net_b.degrees[[position[label] for label in net_a.labels]]
    return DegreeDifference(net_a.labels, degrees_b.astype(int) - net_a.degrees.astype(int))


def composition_distribution(params, k, l):
    cp = params.condition(k)
    return softmax(cp.Theta[_species(params, l)] @ cp.mu)


def mean_difference(params_a, k_a, params_b, k_b, l):
    """Per-vertex change of the predicted composition of species `l`, b minus a."""
    return composition_distribution(params_b, k_b, l) - composition_distribution(params_a, k_a, l)


def _check_simplex(p, name):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError(f"{name} has a negative entry")
    if abs(p.sum() - 1.0) > _SIMPLEX_TOLERANCE:
        raise ValueError(f"{name} does not sum to 1 (sum={p.sum():.10g})")
    return p


def hellinger(p, q):
    p, q = _check_simplex(p, "p"), _check_simplex(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    bc = np.sum(np.sqrt(p * q))
    return float(np.sqrt(np.clip(1.0 - bc, 0.0, 1.0)))


def edge_frame(net):
    return pd.DataFrame(net.edges(), columns=["vertex_a", "vertex_b", "correlation"])


def degree_frame(net):
    return pd.DataFrame(dict(vertex=net.labels, degree=net.degrees.astype(int)))


def degree_difference_frame(dd, mean_diff=None):
    frame = pd.DataFrame(dict(vertex=dd.labels, degree_difference=dd.diff))
    if mean_diff is not None:
        frame["mean_difference"] = mean_diff
    return frame.iloc[dd.order].reset_index(drop=True)


TREATMENT_EFFECTS = (
    "emerging_connections",
    "extinguished_connections",
    "up_regulated",
    "down_regulated",
    "emerging_connections_without_mean_change",
    "extinguished_connections_without_mean_change",
    "up_regulated_without_degree_change",
    "down_regulated_without_degree_change",
)


def treatment_effects(frame, mean_tol=1e-4, top=None):
    """Sort the rows of a degree difference frame into the treatment effect classes.

    A mean difference within `mean_tol` of zero counts as no mean change. A
    vertex lands in every class it qualifies for; within a class, vertices come
    by decreasing size of the change that defines it.

    Returns:
        `frame` with a leading `effect` column, at most `top` rows per class
    """
    if mean_tol < 0:
        raise ValueError(f"mean tolerance must be non-negative, got {mean_tol}")
    missing = {"degree_difference", "mean_difference"} - set(frame.columns)
    if missing:
        raise ValueError(f"missing columns {sorted(missing)}")
    deg = frame["degree_difference"].to_numpy()
    mean = frame["mean_difference"].to_numpy()
    up, down = mean > mean_tol, mean < -mean_tol
    steady_mean, steady_degree = ~(up | down), deg == 0
    classes = dict(
        emerging_connections=(deg > 0, deg),
        extinguished_connections=(deg < 0, -deg),
        up_regulated=(up, mean),
        down_regulated=(down, -mean),
        emerging_connections_without_mean_change=((deg > 0) & steady_mean, deg),
        extinguished_connections_without_mean_change=((deg < 0) & steady_mean, -deg),
        up_regulated_without_degree_change=(up & steady_degree, mean),
        down_regulated_without_degree_change=(down & steady_degree, -mean),
    )
    parts = []
    for effect in TREATMENT_EFFECTS:
        mask, size = classes[effect]
        order = np.argsort(-size[mask], kind="stable")
        part = frame[mask].iloc[order]
        if top is not None:
            part = part.head(top)
        parts.append(part.assign(effect=effect))
    result = pd.concat(parts, ignore_index=True)
    return result[["effect"] + list(frame.columns)]
