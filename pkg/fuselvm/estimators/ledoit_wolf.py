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
from sklearn import covariance as skcov

from .abc import CovarianceEstimatorBase, CovEstimate
from .empirical import _check_samples, standardize


def ledoit_wolf_shrinkage(X):
    """Optimal weight of the scaled-identity target, as a number in [0, 1].

    Computation is based on [1].

    References:
        [1]: O. Ledoit and M. Wolf, "A well-conditioned estimator for
             large-dimensional covariance matrices", J. Multivar. Anal., 2004.
    """
    return float(skcov.ledoit_wolf_shrinkage(_check_samples(X)))


def ledoit_wolf(X):
    """(1 − s)·S + s·(tr S / p)·I, with S the maximum likelihood covariance and s the shrinkage."""
    shrunk, shrinkage = skcov.ledoit_wolf(_check_samples(X))
    return CovEstimate("ledoit_wolf", shrunk, shrinkage=float(shrinkage))


class LedoitWolfEstimator(CovarianceEstimatorBase):
    name = "ledoit_wolf"

    def estimate_from_samples(self, X):
        return ledoit_wolf(standardize(X)[0])
