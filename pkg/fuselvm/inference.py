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

"""Variational EM for the multinomial latent Gaussian model.

Each replicate i of condition k has a latent z ~ N(μ_k, Σ_k); the counts of
species l are multinomial with probabilities softmax(Θ_kl·z). The log-sum-exp
in the likelihood is replaced by its quadratic upper bound (see `bound`), which
makes the variational posterior q(z) = N(m, S) available in closed form.

Conditions share nothing, but they are iterated in a single loop so a fit
produces one ELBO trace.
"""

import json
import logging
import time
from typing import Optional

import numpy as np
from pydantic import BaseModel, validator

from . import __version__
from .bound import BoundCoefficients, HessianBound
from .dataset import fingerprint
from .linalg import NumericalError, ensure_spd, spd_inverse, spd_logdet, spd_solve, symmetrize

_LOG_2PI = np.log(2 * np.pi)


class FitOptions(BaseModel):
    max_outer_iters: int = 500
    rel_tol: float = 1e-6
    max_inner_iters: int = 50
    inner_tol: float = 1e-6
    jitter: float = 1e-8
    seed: int = 0
    init_scale: float = 0.1

    class Config:
        extra = "forbid"
        allow_mutation = False

    @validator("rel_tol", "inner_tol", "jitter", "init_scale")
    def _positive(cls, v, field):
        if not v > 0:
            raise ValueError(f"{field.name} must be positive")
        return v

    @validator("max_outer_iters", "max_inner_iters")
    def _at_least_one(cls, v, field):
        if v < 1:
            raise ValueError(f"{field.name} must be at least 1")
        return v


class ConditionParams:
    """μ_k, Σ_k and the per-species loadings Θ_kl (each `d_l × d_z`) of one condition."""

    def __init__(self, mu, Sigma, Theta):
        self.mu = np.asarray(mu, dtype=float)
        self.Sigma = np.asarray(Sigma, dtype=float)
        self.Theta = [np.asarray(t, dtype=float) for t in Theta]
        d_z = self.mu.shape[0]
        if self.Sigma.shape != (d_z, d_z):
            raise ValueError(f"Sigma has shape {self.Sigma.shape}, expected {(d_z, d_z)}")
        for t in self.Theta:
            if t.ndim != 2 or t.shape[1] != d_z:
                raise ValueError(f"loading matrix has shape {t.shape}, expected (d_l, {d_z})")

    @property
    def d_z(self):
        return self.mu.shape[0]

    @property
    def dims(self):
        return [t.shape[0] for t in self.Theta]

    def __repr__(self):
        return f"<ConditionParams d_z={self.d_z} dims={self.dims}>"


class ModelParams:
    def __init__(self, conditions):
        if not conditions:
            raise ValueError("model has no condition")
        self.conditions = list(conditions)
        if len({(c.d_z, tuple(c.dims)) for c in self.conditions}) != 1:
            raise ValueError("conditions disagree on latent dimension or species dimensions")

    @property
    def K(self):
        return len(self.conditions)

    @property
    def d_z(self):
        return self.conditions[0].d_z

    @property
    def dims(self):
        return self.conditions[0].dims

    def condition(self, k):
        if not 0 <= k < self.K:
            raise ValueError(f"unknown condition {k}")
        return self.conditions[k]

    def __repr__(self):
        return f"<ModelParams K={self.K} d_z={self.d_z} dims={self.dims}>"


class ConditionPosterior:
    """Variational posteriors of all replicates of one condition.

    `m` is `I × d_z`, `S` is `I × d_z × d_z` and `Phi[l]` is `I × d_l`.
    """

    def __init__(self, m, S, Phi):
        self.m = m
        self.S = S
        self.Phi = Phi

    @classmethod
    def from_prior(cls, params, n):
        m = np.tile(params.mu, (n, 1))
        S = np.tile(params.Sigma, (n, 1, 1))
        Phi = [m @ t.T for t in params.Theta]
        return cls(m, S, Phi)

    def entry(self, i):
        return PosteriorEntry(self.m[i], self.S[i], [p[i] for p in self.Phi])

    def __len__(self):
        return self.m.shape[0]


class PosteriorEntry:
    """q(z) = N(m, S) of a single replicate plus its expansion points."""

    def __init__(self, m, S, Phi):
        self.m = np.asarray(m, dtype=float)
        self.S = np.asarray(S, dtype=float)
        self.Phi = [np.asarray(p, dtype=float) for p in Phi]


class PosteriorState:
    def __init__(self, conditions):
        self.conditions = list(conditions)

    @classmethod
    def from_prior(cls, params, data):
        return cls(ConditionPosterior.from_prior(c, n) for c, n in zip(params.conditions, data.replicates))


class FitReport:
    def __init__(self, elbo_trace, iterations, converged, wall_time, seed, d_z):
        self.elbo_trace = list(elbo_trace)
        self.iterations = iterations
        self.converged = converged
        self.wall_time = wall_time
        self.seed = seed
        self.d_z = d_z

    @property
    def elbo(self):
        return self.elbo_trace[-1] if self.elbo_trace else float("nan")

    def __repr__(self):
        return (
            f"<FitReport d_z={self.d_z} iterations={self.iterations} converged={self.converged} elbo={self.elbo:.6g}>"
        )


class FittedModel:
    def __init__(self, params, posteriors, report, options, labels, data_fingerprint):
        self.params = params
        self.posteriors = posteriors
        self.report = report
        self.options = options
        self.condition_labels = labels["conditions"]
        self.species_labels = labels["species"]
        self.feature_labels = labels["features"]
        self.fingerprint = data_fingerprint

    @property
    def d_z(self):
        return self.params.d_z

    def condition_index(self, k):
        if isinstance(k, str):
            if k not in self.condition_labels:
                raise ValueError(f"unknown condition {k!r}")
            return self.condition_labels.index(k)
        if not 0 <= k < self.params.K:
            raise ValueError(f"unknown condition {k}")
        return k

    def species_index(self, l):
        if isinstance(l, str):
            if l not in self.species_labels:
                raise ValueError(f"unknown species {l!r}")
            return self.species_labels.index(l)
        if not 0 <= l < len(self.species_labels):
            raise ValueError(f"unknown species {l}")
        return l

    def __repr__(self):
        return f"<FittedModel d_z={self.d_z} conditions={self.condition_labels} {self.report!r}>"


def _check_counts(params, counts):
    if len(counts) != len(params.Theta):
        raise ValueError(f"{len(counts)} species blocks for a model of {len(params.Theta)} species")
    for x, t in zip(counts, params.Theta):
        if x.shape[-1] != t.shape[0]:
            raise ValueError(f"count vectors of length {x.shape[-1]} for a species of dimension {t.shape[0]}")


def e_step(params, k, counts, state, opts):
    """Update the posteriors of every replicate of condition `k`.

    Args:
        params: ModelParams
        counts: list over species of `I × d_l` count matrices
        state: ConditionPosterior holding the current expansion points
        opts: FitOptions

    Returns:
        A new ConditionPosterior; its expansion points are Θ·m for the returned m.
    """
    cp = params.condition(k)
    counts = [np.asarray(x, dtype=float) for x in counts]
    _check_counts(cp, counts)
    bounds = [HessianBound(t.shape[0]) for t in cp.Theta]
    totals = [x.sum(axis=1) for x in counts]

    Sigma_inv, _ = spd_inverse(cp.Sigma, opts.jitter)
    precision = Sigma_inv + sum(N[:, None, None] * bd.sandwich(t) for N, bd, t in zip(totals, bounds, cp.Theta))
    # S does not depend on the expansion points
    S, _ = spd_inverse(precision, opts.jitter)
    prior_term = Sigma_inv @ cp.mu

    Phi = [np.array(p, dtype=float) for p in state.Phi]
    for it in range(opts.max_inner_iters):
        rhs = prior_term + sum(
            (x + N[:, None] * BoundCoefficients(p).b) @ t for x, N, p, t in zip(counts, totals, Phi, cp.Theta)
        )
        m = np.einsum("iab,ib->ia", S, rhs)
        new_Phi = [m @ t.T for t in cp.Theta]
        delta = max(np.max(np.abs(new - old), initial=0.0) for new, old in zip(new_Phi, Phi))
        Phi = new_Phi
        if delta < opts.inner_tol:
            break
    else:
        logging.debug("condition %d: expansion points moved by %.2e after %d iterations", k, delta, it + 1)
    return ConditionPosterior(m, S, Phi)


def e_step_sample(params, k, sample, entry, opts):
    """Single-replicate view of `e_step`; `sample` holds one count vector per species."""
    counts = [np.asarray(x, dtype=float)[None, :] for x in sample]
    state = ConditionPosterior(entry.m[None, :], entry.S[None, :, :], [p[None, :] for p in entry.Phi])
    return e_step(params, k, counts, state, opts).entry(0)


def m_step(posterior, counts, opts, previous=None):
    """Maximize the bounded ELBO over μ_k, Σ_k and every Θ_kl given the posteriors.

    A species without any count carries no information on its loadings; its
    Θ_kl is kept from `previous` (or zero).
    """
    m, S = posterior.m, posterior.S
    n = m.shape[0]
    mu = m.mean(axis=0)
    diff = m - mu
    Sigma = ensure_spd((diff.T @ diff + S.sum(axis=0)) / n, opts.jitter)

    second_moment = m[:, :, None] * m[:, None, :] + S
    Theta = []
    for l, (x, Phi) in enumerate(zip(counts, posterior.Phi)):
        x = np.asarray(x, dtype=float)
        N = x.sum(axis=1)
        bound = HessianBound(x.shape[1])
        if N.sum() == 0:
            logging.warning("species %d has no count, its loadings are not updated", l)
            Theta.append(previous.Theta[l].copy() if previous is not None else np.zeros((x.shape[1], m.shape[1])))
            continue
        R = (x + N[:, None] * BoundCoefficients(Phi).b).T @ m
        M = np.einsum("i,iab->ab", N, second_moment)
        try:
            Theta.append(spd_solve(symmetrize(M), bound.apply_inverse(R.T)).T)
        except NumericalError:
            raise NumericalError(f"species {l}: degenerate posterior statistics, loadings cannot be updated")
    return ConditionParams(mu, Sigma, Theta)


def _condition_counts(data, k):
    return [np.asarray(b, dtype=float) for b in data.counts[k]]


def elbo_by_condition(params, posteriors, data):
    """Bounded ELBO of every condition, summed over its replicates.

    The multinomial coefficient log(N!/∏x!) is left out, it does not depend on
    any parameter.
    """
    values = []
    for k, (cp, post) in enumerate(zip(params.conditions, posteriors.conditions)):
        counts = _condition_counts(data, k)
        _check_counts(cp, counts)
        d_z = cp.d_z
        Sigma_inv, logdet_Sigma = spd_inverse(cp.Sigma, maxtries=0)
        diff = post.m - cp.mu
        trace = np.einsum("ab,iba->i", Sigma_inv, post.S)
        maha = np.einsum("ia,ab,ib->i", diff, Sigma_inv, diff)
        logdet_S = spd_logdet(post.S)
        prior = -0.5 * (trace + maha + logdet_Sigma + d_z * _LOG_2PI)
        entropy = 0.5 * (d_z * (_LOG_2PI + 1.0) + logdet_S)

        lik = 0.0
        for x, t, Phi in zip(counts, cp.Theta, post.Phi):
            bound = HessianBound(t.shape[0])
            coeff = BoundCoefficients(Phi)
            N = x.sum(axis=1)
            eta = post.m @ t.T
            quad = bound.quadratic_form(eta) + np.einsum("ab,iba->i", bound.sandwich(t), post.S)
            lik = lik + np.sum(x * eta, axis=1) - N * (0.5 * quad - np.sum(coeff.b * eta, axis=1) + coeff.c)
        values.append(float(np.sum(prior + entropy + lik)))
    return np.array(values)


def elbo(params, posteriors, data):
    return float(np.sum(elbo_by_condition(params, posteriors, data)))


def initial_params(data, d_z, opts):
    rng = np.random.Generator(np.random.Philox(opts.seed))
    scale = opts.init_scale / np.sqrt(d_z)
    conditions = []
    for _ in range(data.K):
        Theta = [rng.normal(0.0, scale, size=(d, d_z)) for d in data.dims]
        conditions.append(ConditionParams(np.zeros(d_z), np.eye(d_z), Theta))
    return ModelParams(conditions)


def em_iteration(params, data, state, opts):
    """One E-step plus M-step over every condition; returns the new (params, state)."""
    conditions, posteriors = [], []
    for k in range(data.K):
        counts = _condition_counts(data, k)
        post = e_step(params, k, counts, state.conditions[k], opts)
        conditions.append(m_step(post, counts, opts, previous=params.conditions[k]))
        posteriors.append(post)
    return ModelParams(conditions), PosteriorState(posteriors)


def _labels(data):
    return dict(conditions=data.condition_labels, species=data.species_labels, features=data.feature_labels)


def fit(data, d_z, opts: Optional[FitOptions] = None):
    opts = opts or FitOptions()
    if d_z < 1:
        raise ValueError(f"latent dimension must be at least 1, got {d_z}")
    if d_z > min(sum(data.dims), min(data.replicates)):
        logging.warning(
            "latent dimension %d exceeds the feature count %d or the smallest replicate count %d",
            d_z,
            sum(data.dims),
            min(data.replicates),
        )

    start = time.perf_counter()
    params = initial_params(data, d_z, opts)
    state = PosteriorState.from_prior(params, data)
    trace = []
    converged = False
    for it in range(opts.max_outer_iters):
        params, state = em_iteration(params, data, state, opts)
        value = elbo(params, state, data)
        if not np.isfinite(value):
            raise NumericalError(f"ELBO is not finite at iteration {it + 1}")
        logging.debug("d_z=%d iteration %d: elbo=%.10g", d_z, it + 1, value)
        if trace and abs(value - trace[-1]) < opts.rel_tol * abs(trace[-1]):
            trace.append(value)
            converged = True
            break
        trace.append(value)
    # posteriors under the final parameters
    state = PosteriorState(
        e_step(params, k, _condition_counts(data, k), state.conditions[k], opts) for k in range(data.K)
    )
    wall_time = time.perf_counter() - start

    report = FitReport(trace, len(trace), converged, wall_time, opts.seed, d_z)
    if converged:
        logging.info("d_z=%d: converged after %d iterations, elbo=%.6g", d_z, report.iterations, report.elbo)
    else:
        logging.warning("d_z=%d: no convergence after %d iterations", d_z, report.iterations)
    return FittedModel(params, state, report, opts, _labels(data), fingerprint(data))


def get_embeddings(model, k):
    k = model.condition_index(k)
    if model.posteriors is None:
        raise ValueError("model carries no posterior; use infer_posteriors")
    return model.posteriors.conditions[k].m.copy()


def infer_posteriors(model, data, opts: Optional[FitOptions] = None):
    """E-step only: posteriors of `data` under the frozen parameters of `model`."""
    opts = opts or model.options
    if data.K != model.params.K:
        raise ValueError(f"data has {data.K} conditions, model {model.params.K}")
    if data.dims != model.params.dims:
        raise ValueError(f"data dimensions {data.dims} differ from model dimensions {model.params.dims}")
    state = PosteriorState.from_prior(model.params, data)
    posteriors = []
    for k in range(data.K):
        posteriors.append(e_step(model.params, k, _condition_counts(data, k), state.conditions[k], opts))
    return PosteriorState(posteriors)


def save_model(model, path):
    doc = dict(
        version=__version__,
        d_z=model.d_z,
        species=model.species_labels,
        features=model.feature_labels,
        conditions=[
            dict(label=label, mu=c.mu.tolist(), Sigma=c.Sigma.tolist(), Theta=[t.tolist() for t in c.Theta])
            for label, c in zip(model.condition_labels, model.params.conditions)
        ],
        elbo_trace=model.report.elbo_trace,
        iterations=model.report.iterations,
        converged=model.report.converged,
        seed=model.report.seed,
        options=model.options.dict(),
        fingerprint=model.fingerprint,
    )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)


def load_model(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    try:
        conditions = [ConditionParams(c["mu"], c["Sigma"], c["Theta"]) for c in doc["conditions"]]
        labels = dict(
            conditions=[c["label"] for c in doc["conditions"]],
            species=doc["species"],
            features=doc["features"],
        )
        report = FitReport(doc["elbo_trace"], doc["iterations"], doc["converged"], None, doc["seed"], doc["d_z"])
        options = FitOptions(**doc["options"])
    except KeyError as e:
        raise ValueError(f"{path}: missing model field {e}")
    return FittedModel(ModelParams(conditions), None, report, options, labels, doc.get("fingerprint"))
