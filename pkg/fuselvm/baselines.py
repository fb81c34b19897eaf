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

import numpy as np

from .estimators.abc import CovEstimate
from .estimators.empirical import EmpiricalEstimator, empirical_cov, standardize
from .estimators.ledoit_wolf import LedoitWolfEstimator, ledoit_wolf
from .estimators.proposed import ProposedEstimator

__all__ = ["CovEstimate", "covariance_estimators", "empirical_cov", "ledoit_wolf", "rmse_matrix", "standardize"]


covariance_estimators = dict(
    empirical=EmpiricalEstimator,
    ledoit_wolf=LedoitWolfEstimator,
    proposed=ProposedEstimator,
)


def rmse_matrix(A, B):
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return float(np.sqrt(np.mean((A - B) ** 2)))
