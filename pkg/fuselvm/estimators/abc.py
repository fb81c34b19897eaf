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

from abc import ABC, abstractmethod

from ..linalg import NumericalError, stabilized_inverse, symmetrize


class CovEstimate:
    def __init__(self, method, covariance, shrinkage=None, model=None):
        self.method = method
        self.covariance = symmetrize(covariance)
        self.shrinkage = shrinkage
        self.model = model
        self.precision = None
        self.ridge = None

    def with_precision(self, ridge):
        """Attach the inverse of `covariance + ridge * I`, if that matrix can be factorized."""
        try:
            self.precision = stabilized_inverse(self.covariance, ridge)
        except NumericalError:
            self.precision = None
        self.ridge = ridge
        return self

    def __repr__(self):
        extra = f" shrinkage={self.shrinkage:.4f}" if self.shrinkage is not None else ""
        return f"<CovEstimate {self.method} dim={self.covariance.shape[0]}{extra}>"


class CovarianceEstimatorBase(ABC):
    name = None

    def samples(self, data, k=0):
        """The replicates of condition `k`, every species side by side."""
        return data.stacked(data.condition_index(k)).astype(float)

    def estimate(self, data, k=0):
        return self.estimate_from_samples(self.samples(data, k))

    @abstractmethod
    def estimate_from_samples(self, X):
        """Returns a CovEstimate from a samples × features matrix."""
