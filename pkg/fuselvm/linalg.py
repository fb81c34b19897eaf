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
from scipy import linalg


class NumericalError(ArithmeticError):
    """A covariance could not be factorized, even after the jitter retries."""


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def jitchol(A, jitter=1e-8, maxtries=3):
    """Lower Cholesky factor of `A` (a matrix or a stack of matrices).

    When the factorization fails, `jitter * I` is added and the factorization
    retried, the jitter growing tenfold on every attempt.

    Returns:
        (L, added) where `added` is the jitter that was needed (0 if none).
    """
    A = symmetrize(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(A.shape[-1])
    for _ in range(maxtries):
        try:
            L = np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
            continue
        logging.warning("Added jitter of %.1e to a %s matrix", jitter, "x".join(map(str, A.shape)))
        return L, jitter
    raise NumericalError(f"matrix is not positive definite, even with jitter up to {jitter / 10:.1e}")


def ensure_spd(A, jitter=1e-8, maxtries=3):
    """Symmetrized `A`, with the jitter `jitchol` needed folded back in."""
    A = symmetrize(np.asarray(A, dtype=float))
    _, added = jitchol(A, jitter, maxtries)
    if added:
        A = A + added * np.eye(A.shape[-1])
    return A


def spd_inverse(A, jitter=1e-8, maxtries=3):
    """Inverse and log-determinant of a SPD matrix (or a stack of them)."""
    L, added = jitchol(A, jitter, maxtries)
    L_inv = np.linalg.inv(L)
    inverse = symmetrize(np.swapaxes(L_inv, -1, -2) @ L_inv)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return inverse, logdet


def spd_logdet(A):
    """Log-determinant of a SPD matrix (or a stack), without any jitter."""
    try:
        L = np.linalg.cholesky(symmetrize(np.asarray(A, dtype=float)))
    except np.linalg.LinAlgError:
        raise NumericalError("covariance is not positive definite")
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def spd_solve(A, B):
    """Solve `A X = B` for a SPD `A`; raises `NumericalError` if `A` is singular."""
    try:
        factor = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("system matrix is singular or not positive definite")
    return linalg.cho_solve(factor, B)


def stabilized_inverse(C, ridge):
    """Inverse of `C + ridge * I`, the precision used to compare rank-deficient estimates."""
    C = symmetrize(np.asarray(C, dtype=float))
    return spd_solve(C + ridge * np.eye(C.shape[0]), np.eye(C.shape[0]))


def min_eigenvalue(A):
    return float(np.linalg.eigvalsh(symmetrize(np.asarray(A, dtype=float)))[0])
