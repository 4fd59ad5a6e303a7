"""One-class SVM with a Gaussian kernel, trained by SMO on the dual.

Dual problem (``n`` training rows, ``C = 1 / (nu * n)``)::

    min  0.5 * a' K a    s.t.  0 <= a_i <= C,  sum(a) = 1

Working-set selection uses second-order information as in LIBSVM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

__all__ = ["OcsvmModel", "ocsvm_train", "ocsvm_decision", "median_heuristic"]

log = logging.getLogger(__name__)

KKT_TOL = 1e-6
SIGMA_FLOOR = 1e-8
_TAU = 1e-12


@dataclass
class OcsvmModel:
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    sigma: float
    nu: float
    n_train: int
    flags: dict = field(default_factory=dict)

    def decision(self, rows) -> np.ndarray:
        """Vectorised decision values for a batch of rows."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(
                f"row dimension {rows.shape[1]} != training dimension {self.support_vectors.shape[1]}"
            )
        K = gaussian_kernel(self.support_vectors, rows, self.sigma)
        return self.alpha @ K - self.rho

    def predict_anomalous(self, rows) -> np.ndarray:
        return self.decision(rows) < 0


def gaussian_kernel(X, Y, sigma: float) -> np.ndarray:
    d2 = cdist(X, Y, "sqeuclidean")
    return np.exp(-d2 / (2.0 * sigma * sigma))


def median_heuristic(rows) -> float:
    """Median pairwise Euclidean distance between rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 2:
        return 0.0
    return float(np.median(pdist(rows)))


def ocsvm_train(rows, nu: float = 0.05, sigma: float | None = None,
                tol: float = KKT_TOL, max_iter: int | None = None) -> OcsvmModel:
    """Fit a one-class SVM on positive-only ``rows`` (n x d).

    ``sigma`` defaults to the median pairwise distance. Identical rows give a
    zero median; the width is then floored and ``flags["sigma_floored"]`` set.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("rows must be a 2-D array")
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two training rows")
    if not 0 < nu < 1:
        raise ValueError("nu must lie in (0, 1)")
    flags = {}
    if sigma is None:
        sigma = median_heuristic(X)
        flags["sigma_source"] = "median"
    if not sigma > SIGMA_FLOOR:
        sigma = SIGMA_FLOOR
        flags["sigma_floored"] = True
    K = gaussian_kernel(X, X, sigma)
    alpha, rho, iters = _smo(K, nu, tol, max_iter or max(10000, 100 * n))
    flags["iterations"] = iters
    sv = alpha > 0
    return OcsvmModel(X[sv].copy(), alpha[sv].copy(), rho, float(sigma), float(nu), n, flags)


def ocsvm_decision(m: OcsvmModel, row) -> float:
    """``sum(alpha * k(sv, row)) - rho``; negative means anomalous."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("expected a single row vector")
    return float(m.decision(row[None, :])[0])


def _smo(K: np.ndarray, nu: float, tol: float, max_iter: int):
    n = K.shape[0]
    C = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_full = int(np.floor(nu * n))
    alpha[:n_full] = C
    if n_full < n:
        alpha[n_full] = 1.0 - n_full * C
    G = K @ alpha
    diag = np.diag(K).copy()

    it = 0
    for it in range(1, max_iter + 1):
        up = alpha < C
        down = alpha > 0
        # i: steepest ascent candidate for increasing alpha
        negG = -G
        cand = np.where(up, negG, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        gmin = np.min(np.where(down, negG, np.inf))
        if gmax - gmin < tol:
            break
        b = gmax + G
        ok = down & (b > 0)
        if not np.any(ok):
            break
        quad = diag[i] + diag - 2.0 * K[i]
        quad = np.where(quad > 0, quad, _TAU)
        gain = np.where(ok, -(b * b) / quad, np.inf)
        j = int(np.argmin(gain))

        q = diag[i] + diag[j] - 2.0 * K[i, j]
        if q <= 0:
            q = _TAU
        step = (G[j] - G[i]) / q
        step = min(step, C - alpha[i], alpha[j])
        if step <= 0:
            break
        alpha[i] += step
        alpha[j] -= step
        # keep the box exact
        if C - alpha[i] < 1e-15 * C:
            alpha[i] = C
        if alpha[j] < 1e-15 * C:
            alpha[j] = 0.0
        G += step * (K[:, i] - K[:, j])
    else:
        log.warning("SMO hit max_iter=%d before reaching tol=%g", max_iter, tol)

    # At termination every point below the upper bound has G > G_j - tol for
    # all j with alpha_j > 0. Placing rho at the smallest such G minus tol
    # leaves only bounded points (alpha == C) with negative decisions, and at
    # most nu * n of those fit under sum(alpha) == 1.
    below = alpha < C
    rho = float(np.min(G[below]) - tol) if np.any(below) else float(np.mean(G))
    return alpha, rho, it
