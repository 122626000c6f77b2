"""Loading and severity prediction for patients outside the training set.

With the score unknown, the loading objective for a new matrix reduces to a
strictly convex quadratic program under nonnegativity, solved exactly by an
active-set iteration (the rank is small, so this is cheap and finite).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SolverError, ValidationError, check_symmetric
from .regression import RegressionDual, predict


@dataclass(frozen=True)
class UnseenQP:
    """min 0.5 c.H.c + f.c subject to c >= 0, with H symmetric PD."""

    h_bar: np.ndarray
    f_bar: np.ndarray


def build_qp(gamma_new: np.ndarray, basis_x: np.ndarray, gamma2: float) -> UnseenQP:
    """Assemble the quadratic program for one unseen correlation matrix.

    H = 2 (X^T X) o (X^T X) + 2 gamma2 I,  f = -2 diag(X^T G X).
    gamma2 = 0 is allowed only when X^T X is verifiably positive definite,
    otherwise H could be singular.
    """
    gamma_new = np.asarray(gamma_new, dtype=np.float64)
    x = np.asarray(basis_x, dtype=np.float64)
    check_symmetric(gamma_new, label="unseen matrix")
    if gamma_new.shape[0] != x.shape[0]:
        raise ValidationError(
            f"matrix size {gamma_new.shape[0]} does not match basis rows {x.shape[0]}"
        )
    xtx = x.T @ x
    if gamma2 <= 0.0:
        if float(np.linalg.eigvalsh(xtx)[0]) <= 1e-12:
            raise ValidationError("gamma2 = 0 requires a positive definite X^T X")
        gamma2 = 0.0
    h = 2.0 * (xtx * xtx) + 2.0 * gamma2 * np.eye(x.shape[1])
    f = -2.0 * np.einsum("pr,pq,qr->r", x, gamma_new, x)
    return UnseenQP(h_bar=h, f_bar=f)


def nnls_qp(h: np.ndarray, f: np.ndarray, max_iters: int = 200) -> np.ndarray:
    """min 0.5 x.H.x + f.x subject to x >= 0 for positive definite H.

    Active-set iteration in the style of nonnegative least squares: solve on
    the free set, push any negative coordinate to its bound, release the
    coordinate with the most negative reduced gradient once feasible.
    Terminates with KKT residual at solver precision.
    """
    r = f.shape[0]
    free = np.zeros(r, dtype=bool)
    c = np.zeros(r)

    for _ in range(max_iters):
        grad = h @ c + f
        # release the most negative multiplier among bound coordinates
        bound = ~free
        if not np.any(bound & (grad < -1e-12)):
            return c
        free[int(np.argmin(np.where(bound, grad, np.inf)))] = True

        while True:
            sol = np.zeros(r)
            idx = np.flatnonzero(free)
            sol[idx] = np.linalg.solve(h[np.ix_(idx, idx)], -f[idx])
            if np.all(sol[idx] >= 0.0):
                c = sol
                break
            # step toward sol until the first coordinate hits zero, then fix it
            neg = idx[sol[idx] < 0.0]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = c[neg] / (c[neg] - sol[neg])
            t = float(np.min(ratios))
            c = np.maximum(c + t * (sol - c), 0.0)
            blocker = neg[int(np.argmin(ratios))]
            free[blocker] = False
            c[blocker] = 0.0
    raise SolverError("active-set iteration failed to converge")


def solve_unseen_loading(qp: UnseenQP) -> np.ndarray:
    """Exact nonnegativity-constrained minimizer of the quadratic program."""
    return nnls_qp(qp.h_bar, qp.f_bar)


def predict_unseen(gamma_new: np.ndarray, basis_x: np.ndarray, gamma2: float,
                   dual: RegressionDual) -> tuple[np.ndarray, float]:
    """Loading vector and severity estimate for one unseen matrix."""
    qp = build_qp(gamma_new, basis_x, gamma2)
    c_bar = solve_unseen_loading(qp)
    return c_bar, predict(c_bar, dual)
