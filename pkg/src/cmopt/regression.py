"""Kernel ridge regression in the dual and score prediction from loadings.

The embedding weights are never materialized; everything runs through the
dual vector alpha and the anchor loadings frozen at solve time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import KernelSpec, SolverError, ValidationError
from .kernel import gram, kernel_values


@dataclass(frozen=True)
class RegressionDual:
    """Dual solution of the ridge system (K + ridge I) alpha = y.

    ``anchors`` is the (R, N) loading snapshot the Gram matrix was built
    from; predictions for new loadings are kernel sums against it.
    """

    alpha: np.ndarray  # (N,)
    anchors: np.ndarray  # (R, N)
    spec: KernelSpec
    ridge: float

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[1]


def solve_dual(anchors: np.ndarray, y: np.ndarray, spec: KernelSpec, ridge: float) -> RegressionDual:
    """Solve (K + ridge I) alpha = y for the anchor Gram matrix K."""
    if not (ridge > 0):
        raise ValidationError(f"ridge must be > 0, got {ridge}")
    anchors = np.asarray(anchors, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = gram(anchors, spec)
    if not np.all(np.isfinite(k)):
        raise SolverError("Gram matrix has non-finite entries")
    system = k + ridge * np.eye(k.shape[0])
    alpha = np.linalg.solve(system, y)
    return RegressionDual(alpha=alpha, anchors=anchors.copy(), spec=spec, ridge=float(ridge))


def predict(c: np.ndarray, dual: RegressionDual) -> float:
    """Predicted severity sum_j kernel(c, anchor_j) * alpha_j."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] != dual.anchors.shape[0]:
        raise ValidationError(
            f"loading has dimension {c.shape[0]}, model expects {dual.anchors.shape[0]}"
        )
    return float(kernel_values(c, dual.anchors.T, dual.spec) @ dual.alpha)


def predict_many(loadings: np.ndarray, dual: RegressionDual) -> np.ndarray:
    """Predictions for each column of an (R, M) loading block."""
    anchors_t = dual.anchors.T
    return np.array(
        [kernel_values(loadings[:, i], anchors_t, dual.spec) @ dual.alpha
         for i in range(loadings.shape[1])]
    )


def regression_residual(c: np.ndarray, y: float, dual: RegressionDual) -> float:
    """Squared prediction residual (y - predict(c))^2."""
    gap = float(y) - predict(c, dual)
    return gap * gap
