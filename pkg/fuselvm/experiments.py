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

"""Simulation studies comparing the latent model with the baseline estimators.

Estimates and truths are compared on the correlation scale: the latent model
recovers Θ̃ΣΘ̃ᵀ only up to a per-feature scale, while the baselines work on
standardized counts. Features that never vary in a dataset are left out of the
comparison for every method alike.
"""

import logging
import time

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from .baselines import CovEstimate, covariance_estimators, rmse_matrix
from .inference import FitOptions, PosteriorState, em_iteration, fit, get_embeddings, initial_params
from .predictive import latent_covariance, to_correlation
from .selection import select_rank
from .simulate import load_preset, simulate_classes, simulate_community

DEFAULT_RIDGE = 1e-2
SCALE_NOTE = "# covariance_rmse and precision_rmse compare correlation matrices; precision = inv(corr + ridge*I)"


def _varying_features(ds, k=0):
    return ds.stacked(k).std(axis=0) > 0


def _make_estimator(method, d_z, opts):
    if method not in covariance_estimators:
        raise ValueError(f"unknown method {method!r}, choose from {sorted(covariance_estimators)}")
    if method == "proposed":
        return covariance_estimators[method](d_z=d_z, opts=opts)
    return covariance_estimators[method]()


def score_methods(ds, truth, methods, d_z, opts=None, ridge=DEFAULT_RIDGE):
    """Covariance and precision RMSE of every method against the truth of condition 0.

    Both are computed on correlation matrices; a precision that cannot be
    factorized scores NaN.
    """
    keep = _varying_features(ds)
    truth_corr = CovEstimate("truth", to_correlation(truth.centred_covariance(0)[np.ix_(keep, keep)]))
    truth_corr.with_precision(ridge)
    rows = []
    for method in methods:
        estimate = _make_estimator(method, d_z, opts).estimate(ds, 0)
        corr = CovEstimate(method, to_correlation(estimate.covariance[np.ix_(keep, keep)])).with_precision(ridge)
        precision_rmse = np.nan
        if corr.precision is not None and truth_corr.precision is not None:
            precision_rmse = rmse_matrix(corr.precision, truth_corr.precision)
        rows.append(
            dict(
                method=method,
                covariance_rmse=rmse_matrix(corr.covariance, truth_corr.covariance),
                precision_rmse=precision_rmse,
                ridge=ridge,
            )
        )
    return rows


def _summarize(per_seed, by):
    grouped = per_seed.groupby(by, sort=False)
    summary = grouped[["covariance_rmse", "precision_rmse"]].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary["n_seeds"] = grouped.size()
    return summary.reset_index()


def compare_methods(cfg, seeds, methods, opts=None, ridge=DEFAULT_RIDGE):
    """Method comparison on `seeds` realizations of a community dataset.

    Returns:
        (per-seed frame, per-method summary frame with mean and std)
    """
    rows = []
    for s in seeds:
        ds, truth = simulate_community(cfg.copy(update=dict(seed=s)))
        for row in score_methods(ds, truth, methods, cfg.d_z, opts, ridge):
            rows.append(dict(seed=s, **row))
        logging.info("seed %d done", s)
    per_seed = pd.DataFrame(rows)
    return per_seed, _summarize(per_seed, "method")


def counts_sweep(rates, dim, seeds, latent_dims=5, replicates=200, methods=("proposed",), opts=None):
    """Mean RMSE per Poisson rate at a fixed observation dimension, for one or several latent dimensions."""
    rows = []
    for d_z in np.atleast_1d(latent_dims).tolist():
        for rate in rates:
            cfg = load_preset("sweep", dict(d_z=d_z, dims=[dim], replicates=replicates, rate=rate))
            for s in seeds:
                ds, truth = simulate_community(cfg.copy(update=dict(seed=s)))
                for row in score_methods(ds, truth, methods, d_z, opts):
                    rows.append(dict(d_z=d_z, rate=rate, seed=s, **row))
            logging.info("d_z=%d, rate %g done", d_z, rate)
    per_seed = pd.DataFrame(rows)
    return per_seed, _summarize(per_seed, ["method", "d_z", "rate"])


def dims_sweep(dims, rate, seeds, d_z=5, replicates=200, methods=("proposed",), opts=None):
    """Mean RMSE per observation dimension at a fixed Poisson rate."""
    rows = []
    for dim in dims:
        cfg = load_preset("sweep", dict(d_z=d_z, dims=[dim], replicates=replicates, rate=rate))
        for s in seeds:
            ds, truth = simulate_community(cfg.copy(update=dict(seed=s)))
            for row in score_methods(ds, truth, methods, d_z, opts):
                rows.append(dict(dim=dim, seed=s, **row))
    per_seed = pd.DataFrame(rows)
    return per_seed, _summarize(per_seed, ["method", "dim"])


def rank_study(true_ranks, candidates, seeds, dims=(40, 20), rate=1000, replicates=200, opts=None):
    """Rank selection on data with a known rank.

    Returns:
        (one row per (true rank, seed) with the selected rank,
         one row per (true rank, seed, candidate) with its penalized score and RMSE)
    """
    opts = opts or FitOptions()
    selections, curves = [], []
    for true_rank in true_ranks:
        cfg = load_preset("rank", dict(d_z=true_rank, dims=list(dims), rate=rate, replicates=replicates))
        for s in seeds:
            ds, truth = simulate_community(cfg.copy(update=dict(seed=s)))
            keep = _varying_features(ds)
            truth_corr = to_correlation(truth.centred_covariance(0)[np.ix_(keep, keep)])
            sweep = select_rank(ds, candidates, opts.copy(update=dict(seed=s)))
            for rank, model in sorted(sweep.models.items()):
                corr = to_correlation(latent_covariance(model.params, 0)[np.ix_(keep, keep)])
                curves.append(
                    dict(
                        true_rank=true_rank,
                        seed=s,
                        rank=rank,
                        penalized_score=sweep.rows[rank]["penalized_score"],
                        covariance_rmse=rmse_matrix(corr, truth_corr),
                    )
                )
            selections.append(dict(true_rank=true_rank, seed=s, selected=sweep.selected))
            logging.info("true rank %d, seed %d: selected %d", true_rank, s, sweep.selected)
    return pd.DataFrame(selections), pd.DataFrame(curves)


def embedding_study(seeds, cfg=None, d_z=2, opts=None):
    """Adjusted Rand index of k-means on the posterior means against the true classes.

    The default data has three well separated classes sharing their loadings,
    pooled into one condition.
    """
    cfg = cfg or load_preset(
        "classes",
        dict(class_means=[[0.0, 0.0], [3.0, 3.0], [-2.0, -2.0]], shared_loadings=True, pooled=True),
    )
    opts = opts or FitOptions()
    n_classes = len(cfg.class_means)
    rows = []
    for s in seeds:
        ds, truth = simulate_classes(cfg.copy(update=dict(seed=s)))
        model = fit(ds, d_z, opts.copy(update=dict(seed=s)))
        embeddings = np.vstack([get_embeddings(model, k) for k in range(ds.K)])
        predicted = KMeans(n_clusters=n_classes, n_init=10, random_state=s).fit_predict(embeddings)
        rows.append(dict(seed=s, ari=adjusted_rand_score(truth.labels, predicted)))
    return pd.DataFrame(rows)


def iteration_timing(sizes, trials=5, d_z=5, rate=1000, opts=None):
    """Median wall time of one EM iteration for each (replicates, dim) pair."""
    opts = opts or FitOptions()
    rows = []
    for replicates, dim in sizes:
        cfg = load_preset("sweep", dict(d_z=d_z, dims=[dim], replicates=replicates, rate=rate))
        ds, _ = simulate_community(cfg)
        params = initial_params(ds, d_z, opts)
        state = PosteriorState.from_prior(params, ds)
        # warm up, so every trial starts from the same kind of state
        params, state = em_iteration(params, ds, state, opts)
        times = []
        for _ in range(trials):
            start = time.perf_counter()
            em_iteration(params, ds, state, opts)
            times.append(time.perf_counter() - start)
        rows.append(dict(replicates=replicates, dim=dim, median_seconds=float(np.median(times))))
    return pd.DataFrame(rows)
