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

from ..dataset import CountDataset
from ..inference import FitOptions, fit
from ..predictive import latent_covariance
from .abc import CovarianceEstimatorBase, CovEstimate


class ProposedEstimator(CovarianceEstimatorBase):
    """Low-rank covariance Θ̃·Σ·Θ̃ᵀ of a latent model fitted to the raw counts."""

    name = "proposed"

    def __init__(self, d_z=5, opts=None):
        self.d_z = d_z
        self.opts = opts or FitOptions()

    def estimate(self, data, k=0):
        k = data.condition_index(k)
        model = fit(data, self.d_z, self.opts)
        return CovEstimate(self.name, latent_covariance(model.params, k), model=model)

    def estimate_from_samples(self, X):
        # a single-species, single-condition dataset of the samples
        data = CountDataset([[X]], ["samples"], ["all"], [[str(j) for j in range(X.shape[1])]])
        return self.estimate(data)
