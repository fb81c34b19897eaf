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

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .inference import FitOptions, elbo_by_condition, fit
from .linalg import NumericalError
from .utils import thread_count

_TIE_TOLERANCE = 1e-12


def degrees_of_freedom(dims, d_z):
    """Free parameters of one condition: the loadings, μ_k and the symmetric Σ_k."""
    return sum(d * d_z for d in dims) + d_z + d_z * (d_z + 1) // 2


def _check_model(model, data):
    if model.params.dims != data.dims or model.params.K != data.K:
        raise ValueError(
            f"model (K={model.params.K}, dims={model.params.dims}) does not match data (K={data.K}, dims={data.dims})"
        )


def penalized_score(per_condition_elbo, dims, d_z, replicates):
    dof = degrees_of_freedom(dims, d_z)
    return float(np.sum(np.asarray(per_condition_elbo) - 0.5 * dof * np.log(replicates)))


def bic_score(model, data):
    """Σ_k [ELBO_k − ½·dof_k·log I_k], the ELBO standing in for the log-likelihood."""
    _check_model(model, data)
    per_condition = elbo_by_condition(model.params, model.posteriors, data)
    return penalized_score(per_condition, data.dims, model.d_z, data.replicates)


class RankSweepResult:
    def __init__(self, ranks, rows, models, failures):
        self.ranks = list(ranks)
        self.rows = rows
        self.models = models
        self.failures = failures
        self.selected = self._select()

    def _select(self):
        best = None
        for rank in sorted(self.rows):
            score = self.rows[rank]["penalized_score"]
            if best is None or score > self.rows[best]["penalized_score"] + _TIE_TOLERANCE:
                best = rank
        return best

    @property
    def scores(self):
        return {rank: row["penalized_score"] for rank, row in self.rows.items()}

    def table(self):
        """Sweep rows in rank order, one dict per successful fit."""
        return [dict(rank=rank, **self.rows[rank]) for rank in sorted(self.rows)]

    def __repr__(self):
        return f"<RankSweepResult ranks={self.ranks} selected={self.selected} failures={sorted(self.failures)}>"


def _fit_rank(data, rank, opts):
    model = fit(data, rank, opts.copy(update=dict(seed=opts.seed + rank)))
    per_condition = elbo_by_condition(model.params, model.posteriors, data)
    row = dict(
        elbo=float(np.sum(per_condition)),
        dof=degrees_of_freedom(data.dims, rank),
        penalized_score=penalized_score(per_condition, data.dims, rank, data.replicates),
        converged=model.report.converged,
        iterations=model.report.iterations,
        wall_time=model.report.wall_time,
    )
    return model, row


def select_rank(data, ranks, opts: Optional[FitOptions] = None):
    """Fit every candidate rank and keep the one with the largest penalized ELBO.

    A rank whose fit fails numerically is recorded in `failures` and left out
    of the selection.
    """
    opts = opts or FitOptions()
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no candidate rank")
    if any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be at least 1, got {ranks}")

    rows, models, failures = {}, {}, {}
    with ThreadPoolExecutor(max_workers=min(thread_count(), len(ranks))) as executor:
        futures = {rank: executor.submit(_fit_rank, data, rank, opts) for rank in ranks}
        for rank, future in futures.items():
            try:
                models[rank], rows[rank] = future.result()
            except NumericalError as e:
                logging.warning("d_z=%d: fit failed: %s", rank, e)
                failures[rank] = str(e)
            else:
                logging.info("d_z=%d: penalized score %.6g", rank, rows[rank]["penalized_score"])

    if not rows:
        raise NumericalError(f"every candidate rank failed: {failures}")
    result = RankSweepResult(ranks, rows, models, failures)
    logging.info("selected d_z=%d", result.selected)
    return result
