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

"""Softmax / log-sum-exp and Böhning's quadratic upper bound on the log-sum-exp.

All functions work along the last axis, so a stack of row vectors (one per
replicate) is handled in a single call.
"""

import numpy as np
from scipy import special


def _finite(eta, what="input"):
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError(f"{what} has NaN or infinite entries")
    return eta


def softmax(eta):
    return special.softmax(_finite(eta), axis=-1)


def lse(eta):
    return special.logsumexp(_finite(eta), axis=-1)


class HessianBound:
    """The fixed curvature matrix A = ½·(I − 11ᵀ/(D+1)).

    A is never built densely: it is a scaled identity minus a rank-one term,
    so products, inverse products and quadratic forms cost O(D) per vector.
    Its inverse has the same structure, A⁻¹ = 2·(I + 11ᵀ).
    """

    def __init__(self, D):
        if D < 1:
            raise ValueError(f"bound dimension must be at least 1, got {D}")
        self.D = D
        self._rank_one = 0.5 / (D + 1)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x - self._rank_one * x.sum(axis=-1, keepdims=True)

    def apply_inverse(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * (x + x.sum(axis=-1, keepdims=True))

    def quadratic_form(self, x):
        """xᵀ·A·x along the last axis."""
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1) - self._rank_one * np.sum(x, axis=-1) ** 2

    def sandwich(self, Theta):
        """Θᵀ·A·Θ for a D×d loading matrix."""
        col_sums = Theta.sum(axis=0)
        return 0.5 * (Theta.T @ Theta) - self._rank_one * np.outer(col_sums, col_sums)

    def dense(self):
        return 0.5 * np.eye(self.D) - self._rank_one * np.ones((self.D, self.D))

    def dense_inverse(self):
        return 2.0 * (np.eye(self.D) + np.ones((self.D, self.D)))

    def __repr__(self):
        return f"<HessianBound D={self.D}>"


def hessian_bound(D):
    return HessianBound(D)


class BoundCoefficients:
    """Linear and constant coefficients of the bound, tight at the expansion point `Phi`.

    `Phi` may be a single vector or a stack of row vectors; `b` and `c` follow.
    """

    def __init__(self, Phi):
        self.Phi = _finite(Phi, "expansion point")
        self.D = self.Phi.shape[-1]
        self.bound = HessianBound(self.D)
        p = softmax(self.Phi)
        self.b = self.bound.apply(self.Phi) - p
        self.c = 0.5 * self.bound.quadratic_form(self.Phi) - np.sum(p * self.Phi, axis=-1) + lse(self.Phi)

    def evaluate(self, eta):
        """½·ηᵀAη − bᵀη + c, an upper bound on lse(η)."""
        eta = _finite(eta)
        if eta.shape[-1] != self.D:
            raise ValueError(f"length mismatch: eta has {eta.shape[-1]} entries, expansion point {self.D}")
        return 0.5 * self.bound.quadratic_form(eta) - np.sum(self.b * eta, axis=-1) + self.c


def bound_coefficients(Phi):
    return BoundCoefficients(Phi)


def lse_quadratic_upper(eta, Phi):
    eta, Phi = np.asarray(eta, dtype=float), np.asarray(Phi, dtype=float)
    if eta.shape != Phi.shape:
        raise ValueError(f"length mismatch: eta {eta.shape} vs expansion point {Phi.shape}")
    return BoundCoefficients(Phi).evaluate(eta)
