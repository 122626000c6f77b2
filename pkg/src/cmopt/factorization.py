"""Objective evaluation and the basis / constraint-copy / dual update steps.

The augmented objective introduces per-patient copies V_n = X diag(c_n) with
duals L_n so the basis block becomes convex; the basis X is then advanced by
proximal gradient (iterative shrinkage) steps on its smooth part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CohortDataset, Hyperparams, KernelSpec, ModelState, SolverError
from .kernel import gram, kernel_values

MIN_PROX_STEP = 1e-12


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Additive pieces of the training objective.

    total_j = fit_term + regression_term + l1_x + l2_c + l2_w; the constraint
    residual sum_n ||V_n - X diag(c_n)||_F is reported alongside but is not
    part of the total.
    """

    fit_term: float
    regression_term: float
    l1_x: float
    l2_c: float
    l2_w: float
    constraint_residual: float

    @property
    def total_j(self) -> float:
        return self.fit_term + self.regression_term + self.l1_x + self.l2_c + self.l2_w


def reconstruction(basis_x: np.ndarray, loadings: np.ndarray) -> np.ndarray:
    """Stacked X diag(c_n) X^T for every patient; returns (N, P, P)."""
    scaled = basis_x[None, :, :] * loadings.T[:, None, :]  # (N, P, R)
    return np.einsum("npr,qr->npq", scaled, basis_x)


def constraint_gaps(state: ModelState) -> np.ndarray:
    """V_n - X diag(c_n) stacked as (N, P, R)."""
    target = state.basis_x[None, :, :] * state.loadings.T[:, None, :]
    return state.v_mats - target


def constraint_residual(state: ModelState) -> float:
    gaps = constraint_gaps(state)
    return float(np.sqrt(np.einsum("npr,npr->n", gaps, gaps)).sum())


def objective(
    state: ModelState, cohort: CohortDataset, hp: Hyperparams, spec: KernelSpec
) -> ObjectiveBreakdown:
    """Evaluate every term of the training objective at the current state.

    The regression residual is computed through the kernel trick against the
    frozen anchors, and the weight penalty as gamma3 * alpha^T K alpha.
    """
    n = cohort.n
    if state.loadings.shape[1] != n or state.basis_x.shape[0] != cohort.p:
        raise ValueError("state and cohort dimensions do not match")

    diffs = cohort.matrices - reconstruction(state.basis_x, state.loadings)
    fit = float(np.einsum("npq,npq->", diffs, diffs))

    if hp.lam > 0.0 and np.any(state.alpha):
        anchors_t = state.anchors.T
        preds = np.array(
            [kernel_values(state.loadings[:, i], anchors_t, spec) @ state.alpha for i in range(n)]
        )
        reg = hp.lam * float(np.sum((cohort.scores - preds) ** 2))
        k = gram(state.anchors, spec)
        l2_w = hp.gamma3 * float(state.alpha @ k @ state.alpha)
    else:
        reg = hp.lam * float(np.sum(cohort.scores**2))
        l2_w = 0.0

    l1_x = hp.gamma1 * float(np.abs(state.basis_x).sum())
    l2_c = hp.gamma2 * float(np.einsum("rn,rn->", state.loadings, state.loadings))
    return ObjectiveBreakdown(fit, reg, l1_x, l2_c, l2_w, constraint_residual(state))


def soft_threshold(m: np.ndarray, t: float) -> np.ndarray:
    """Entrywise sgn(m) * max(|m| - t, 0), the l1 proximal map."""
    if not (t > 0):
        raise ValueError(f"threshold must be > 0, got {t}")
    return np.sign(m) * np.maximum(np.abs(m) - t, 0.0)


def smooth_x_value(basis_x: np.ndarray, state: ModelState, cohort: CohortDataset) -> float:
    """X-dependent smooth part of the augmented objective (l1 excluded)."""
    vxt = np.einsum("npr,qr->npq", state.v_mats, basis_x)
    fid = cohort.matrices - vxt
    target = basis_x[None, :, :] * state.loadings.T[:, None, :]
    gaps = state.v_mats - target
    return float(
        np.einsum("npq,npq->", fid, fid)
        + np.einsum("npr,npr->", state.duals, gaps)
        + 0.5 * np.einsum("npr,npr->", gaps, gaps)
    )


def _grad_x_at(basis_x: np.ndarray, state: ModelState, cohort: CohortDataset) -> np.ndarray:
    xvt = np.einsum("pr,nqr->npq", basis_x, state.v_mats)  # X V_n^T
    g = 2.0 * np.einsum("npq,nqr->pr", xvt - cohort.matrices, state.v_mats)
    c = state.loadings  # (R, N)
    g -= np.einsum("npr,rn->pr", state.v_mats, c)
    g += basis_x * np.sum(c**2, axis=1)[None, :]
    g -= np.einsum("npr,rn->pr", state.duals, c)
    return g


def grad_x(state: ModelState, cohort: CohortDataset) -> np.ndarray:
    """Gradient of the augmented objective's smooth X-dependent terms.

    sum_n 2 [X V_n^T - G_n] V_n - V_n diag(c_n) + X diag(c_n)^2 - L_n diag(c_n)
    """
    return _grad_x_at(state.basis_x, state, cohort)


def update_x(
    state: ModelState,
    cohort: CohortDataset,
    hp: Hyperparams,
    step_init: float | None = None,
) -> tuple[np.ndarray, float]:
    """Advance the basis by proximal-gradient steps with backtracking.

    Each inner iteration takes an ISTA step: shrink(X - s * grad, s * gamma1)
    with the step s halved until the smooth part satisfies the quadratic
    upper-bound test, which makes the X-restricted augmented objective
    (smooth part + l1) non-increasing.  Returns the new basis and the last
    accepted step so callers can warm-start the next pass.

    Raises SolverError if backtracking pushes the step below 1e-12.
    """
    x = state.basis_x
    step = hp.prox_step if step_init is None else step_init
    for _ in range(hp.x_inner_iters):
        g = _grad_x_at(x, state, cohort)
        f0 = smooth_x_value(x, state, cohort)
        while True:
            x_new = soft_threshold(x - step * g, step * hp.gamma1)
            d = x_new - x
            quad = f0 + float(np.sum(g * d)) + float(np.sum(d * d)) / (2.0 * step)
            f_new = smooth_x_value(x_new, state, cohort)
            if f_new <= quad + 1e-10 * max(1.0, abs(f0)):
                break
            step *= 0.5
            if step < MIN_PROX_STEP:
                raise SolverError("proximal step size underflow in basis update")
        x = x_new
    return x, step


def update_v(state: ModelState, cohort: CohortDataset) -> np.ndarray:
    """Closed-form constraint-copy update; returns new (N, P, R) stack.

    Solves the V_n stationarity condition
    V_n (I_R + 2 X^T X) = X diag(c_n) + 2 G_n X - L_n  exactly.
    """
    x = state.basis_x
    r = x.shape[1]
    lhs = np.eye(r) + 2.0 * (x.T @ x)
    rhs = (
        x[None, :, :] * state.loadings.T[:, None, :]
        + 2.0 * np.einsum("npq,qr->npr", cohort.matrices, x)
        - state.duals
    )
    try:
        sol = np.linalg.solve(lhs, rhs.transpose(0, 2, 1))
    except np.linalg.LinAlgError as exc:  # lhs is PD; guarded anyway
        raise SolverError(f"constraint-copy solve failed: {exc}") from exc
    return sol.transpose(0, 2, 1)


def update_duals(state: ModelState, eta: float) -> np.ndarray:
    """Gradient-ascent step on each dual: L_n + eta * (V_n - X diag(c_n))."""
    return state.duals + eta * constraint_gaps(state)
