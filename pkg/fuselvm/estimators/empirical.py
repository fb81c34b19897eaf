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

import numpy as np

from .abc import CovarianceEstimatorBase, CovEstimate


def _check_samples(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError(f"at least 2 samples are needed, got {X.shape[0]}")
    return X


def standardize(X):
    """Centre every column and divide it by its standard deviation.

    Constant columns are only centred.

    Returns:
        (standardized matrix, boolean mask of the constant columns)
    """
    X = _check_samples(X)
    centred = X - X.mean(axis=0)
    std = centred.std(axis=0)
    constant = std == 0
    if constant.any():
        logging.warning("%d constant columns are only centred", int(constant.sum()))
    return centred / np.where(constant, 1.0, std), constant


def empirical_cov(X, ddof=0):
    """Sample covariance, normalized by n − ddof (maximum likelihood by default)."""
    X = _check_samples(X)
    centred = X - X.mean(axis=0)
    return CovEstimate("empirical", centred.T @ centred / (X.shape[0] - ddof))


class EmpiricalEstimator(CovarianceEstimatorBase):
    name = "empirical"

    def __init__(self, ddof=0):
        self.ddof = ddof

    def estimate_from_samples(self, X):
        return empirical_cov(standardize(X)[0], self.ddof)
