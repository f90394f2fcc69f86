"""OLS, ridge and lasso with an unpenalized intercept.

All three centre X and y, solve for the slopes, then recover the intercept as
``mean(y) - mean(X) @ beta``.

The lasso objective is ``(1/2n) ||y - X b - c||^2 + lam * ||b||_1`` so that
``lam_max = max_j |X_j^T (y - mean(y))| / n`` zeroes every coefficient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

NONE, L2, L1 = "None", "L2", "L1"


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    intercept: float
    lam: float = 0.0
    penalty: str = NONE
    converged: bool = True
    iterations: int = 0
    objective_history: list[float] = field(default_factory=list, repr=False)
    layout_digest: str = ""

    def __post_init__(self):
        if self.penalty == NONE and self.lam != 0:
            raise ValueError("unpenalized fit must have lambda 0")
        if not np.all(np.isfinite(self.coefficients)) or not np.isfinite(self.intercept):
            raise ValueError("non-finite coefficients")

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.coefficients.shape[0]:
            raise ValueError(f"expected {self.coefficients.shape[0]} columns, got {X.shape[1]}")
        return X @ self.coefficients + self.intercept

    def to_json(self) -> str:
        return json.dumps({
            "penalty": self.penalty,
            "lambda": self.lam,
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "column_meta_digest": self.layout_digest,
        })

    @classmethod
    def from_json(cls, text: str) -> "LinearFit":
        doc = json.loads(text)
        return cls(np.asarray(doc["coefficients"], dtype=float), doc["intercept"], doc["lambda"],
                   doc["penalty"], layout_digest=doc.get("column_meta_digest", ""))


def _as_arrays(X, y):
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ValueError(f"need rows(X) == len(y) >= 1, got X {X.shape}, y {y.shape}")
    return X, y


def _centre(X, y):
    xm, ym = X.mean(axis=0), y.mean()
    return X - xm, y - ym, xm, ym


def min_norm_lstsq(A: np.ndarray, b: np.ndarray, rcond: float | None = None) -> np.ndarray:
    """Minimum-norm least-squares solution via a complete orthogonal decomposition.

    ``A P = Q R`` (QR with column pivoting) gives the numerical rank r; a second
    QR of ``R[:r]^T = Z T`` yields ``x = P Z T^{-T} Q_r^T b``.
    """
    m, n = A.shape
    if m == 0 or n == 0:
        return np.zeros(n)
    Q, R, perm = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if rcond is None:
        rcond = max(m, n) * np.finfo(float).eps
    r = int(np.sum(diag > rcond * diag[0])) if diag[0] > 0 else 0
    x = np.zeros(n)
    if r == 0:
        return x
    c = Q[:, :r].T @ b
    if r == n:
        xp = linalg.solve_triangular(R[:r, :r], c)
    else:
        Z, T = linalg.qr(R[:r, :].T, mode="economic")
        w = linalg.solve_triangular(T, c, trans="T")
        xp = Z @ w
    x[perm] = xp
    return x


def fit_ols(X, y) -> LinearFit:
    X, y = _as_arrays(X, y)
    Xc, yc, xm, ym = _centre(X, y)
    beta = min_norm_lstsq(Xc, yc)
    return LinearFit(beta, float(ym - xm @ beta))


def fit_ridge(X, y, lam: float = 1.0) -> LinearFit:
    """Minimise ``||y - X b - c||^2 + lam ||b||^2``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    X, y = _as_arrays(X, y)
    if lam == 0:
        fit = fit_ols(X, y)
        return LinearFit(fit.coefficients, fit.intercept, 0.0, L2)
    Xc, yc, xm, ym = _centre(X, y)
    n, p = Xc.shape
    if p <= n:
        beta = linalg.solve(Xc.T @ Xc + lam * np.eye(p), Xc.T @ yc, assume_a="pos")
    else:
        beta = Xc.T @ linalg.solve(Xc @ Xc.T + lam * np.eye(n), yc, assume_a="pos")
    return LinearFit(beta, float(ym - xm @ beta), float(lam), L2)


def soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_objective(Xc, yc, beta, lam) -> float:
    r = yc - Xc @ beta
    return float(r @ r / (2 * len(yc)) + lam * np.abs(beta).sum())


def lambda_max(X, y) -> float:
    X, y = _as_arrays(X, y)
    Xc, yc, _, _ = _centre(X, y)
    Xf = np.asfortranarray(Xc)
    # same arithmetic as the first coordinate update, so lam = lambda_max zeroes every coefficient exactly
    return max((abs(Xf[:, j] @ yc / len(y)) for j in range(Xf.shape[1])), default=0.0)


def fit_lasso(X, y, lam: float = 1.0, tol: float = 1e-7, max_iter: int = 10_000,
              track_objective: bool = False) -> LinearFit:
    """Cyclic coordinate descent in column order.

    Converged when the largest coefficient change over a full sweep is below
    ``tol``; hitting ``max_iter`` sweeps returns ``converged=False``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    X, y = _as_arrays(X, y)
    Xc, yc, xm, ym = _centre(X, y)
    n, p = Xc.shape
    Xf = np.asfortranarray(Xc)
    col_sq = (Xf * Xf).sum(axis=0) / n
    beta = np.zeros(p)
    resid = yc.copy()
    history = [lasso_objective(Xc, yc, beta, lam)] if track_objective else []
    converged, sweeps = False, 0
    while sweeps < max_iter:
        sweeps += 1
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            xj = Xf[:, j]
            old = beta[j]
            rho = xj @ resid / n + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                resid -= (new - old) * xj
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if track_objective:
            history.append(lasso_objective(Xc, yc, beta, lam))
        if max_delta < tol:
            converged = True
            break
    return LinearFit(beta, float(ym - xm @ beta), float(lam), L1, converged, sweeps, history)
