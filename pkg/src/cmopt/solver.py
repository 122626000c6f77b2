"""Alternating-minimization driver: basis, dual, loadings, copies, multipliers.

One outer iteration cycles: proximal basis step -> regression dual refresh
-> per-patient trust-region loading updates -> closed-form constraint-copy
update -> dual ascent.  Convergence requires BOTH a small relative change of
the objective and a constraint residual under threshold; dual ascent can
legitimately raise the objective, so only block-level monotonicity is
guaranteed.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import factorization as fac
from . import prediction as pred
from . import trustregion as tr
from .core import CohortDataset, Hyperparams, KernelSpec, ModelState, SolverError
from .regression import RegressionDual, predict, solve_dual


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    breakdown: fac.ObjectiveBreakdown
    dual_step: float
    wall_time: float
    x_block_decrease: float  # restricted objective before - after (>= 0)
    c_block_decrease: float  # summed over patients (>= 0)
    loadings_min: float


@dataclass
class FitTrace:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    def totals(self) -> np.ndarray:
        return np.array([r.breakdown.total_j for r in self.records])


@dataclass(frozen=True)
class FittedModel:
    """Everything needed to score unseen patients."""

    basis_x: np.ndarray
    dual: RegressionDual
    hyperparams: Hyperparams
    spec: KernelSpec
    summary: fac.ObjectiveBreakdown | None = None

    @property
    def loadings(self) -> np.ndarray:
        """Training loadings (equal to the dual anchors after the final refresh)."""
        return self.dual.anchors

    def predict_unseen(self, gamma_new: np.ndarray) -> tuple[np.ndarray, float]:
        return pred.predict_unseen(gamma_new, self.basis_x, self.hyperparams.gamma2, self.dual)

    def predict_training(self) -> np.ndarray:
        from .regression import predict_many

        return predict_many(self.dual.anchors, self.dual)


def _deterministic_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip eigenvector signs so the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def initialize(
    cohort: CohortDataset, hp: Hyperparams, seed: int = 0, spec: KernelSpec | None = None
) -> ModelState:
    """Spectral warm start from the cohort-mean matrix.

    The basis takes the top-R eigenvectors scaled by sqrt eigenvalue
    magnitudes (the decomposition acts like a joint eigenvalue problem);
    loadings are clamped generalized projections, copies start consistent,
    duals at zero.  When a kernel spec is supplied (and lam > 0) the
    regression dual is solved once from the initial anchors.  Eigenvector
    signs are fixed deterministically, so the seed only matters for
    downstream consumers.
    """
    p = cohort.p
    r = hp.rank_r
    if r > p:
        raise SolverError(f"rank {r} exceeds region count {p}")
    mean_mat = cohort.matrices.mean(axis=0)
    try:
        w, v = np.linalg.eigh(mean_mat)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"eigendecomposition of the mean matrix failed: {exc}") from exc
    order = np.argsort(w)[::-1][:r]
    basis = _deterministic_signs(v[:, order]) * np.sqrt(np.abs(w[order]))[None, :]

    pinv = np.linalg.pinv(basis)
    proj = np.einsum("rp,npq,sq->nrs", pinv, cohort.matrices, pinv)
    loadings = np.maximum(np.einsum("nrr->nr", proj).T.copy(), 0.0)  # (R, N)

    v_mats = basis[None, :, :] * loadings.T[:, None, :]
    duals = np.zeros_like(v_mats)
    state = ModelState(basis, loadings, v_mats, duals, np.zeros(cohort.n), loadings.copy())
    if spec is not None and hp.lam > 0.0:
        state.alpha = solve_dual(state.anchors, cohort.scores, spec, hp.ridge).alpha
    return state


def _refresh_dual(state: ModelState, cohort: CohortDataset, hp: Hyperparams, spec: KernelSpec) -> None:
    state.anchors = state.loadings.copy()
    if hp.lam > 0.0:
        state.alpha = solve_dual(state.anchors, cohort.scores, spec, hp.ridge).alpha
    else:
        state.alpha = np.zeros(cohort.n)


def _update_all_loadings(state, cohort, hp, spec, threads: int) -> np.ndarray:
    n = cohort.n
    if threads == 1 or n < 4:
        cols = [tr.update_loading(i, state, cohort, hp, spec) for i in range(n)]
    else:
        workers = None if threads == 0 else threads
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(lambda i: tr.update_loading(i, state, cohort, hp, spec), range(n)))
    return np.stack(cols, axis=1)


_CLOSURE_ETA = 1.0
_MAX_CLOSURE_ROUNDS = 2000
_CONVERGENCE_PATIENCE = 5  # consecutive small-change iterations before stopping


def _closure_rounds(state: ModelState, cohort: CohortDataset, hp: Hyperparams) -> None:
    """Drive the constraint residual down with the basis and loadings frozen.

    With X and the loadings fixed, the copy subproblem is convex quadratic,
    so the multiplier iteration (exact copy update + unit dual step)
    converges linearly; this certifies V_n = X diag(c_n) at the end of a
    run without disturbing the learned representation.
    """
    for _ in range(_MAX_CLOSURE_ROUNDS):
        state.v_mats = fac.update_v(state, cohort)
        if fac.constraint_residual(state) < hp.constraint_tol:
            return
        state.duals = fac.update_duals(state, _CLOSURE_ETA)


def fit(
    cohort: CohortDataset,
    hp: Hyperparams,
    spec: KernelSpec,
    seed: int = 0,
    threads: int = 1,
    callback=None,
) -> tuple[FittedModel, FitTrace]:
    """Run the alternating minimization to convergence.

    Each outer iteration cycles basis step, dual refresh, loading updates,
    then ``hp.dual_rounds`` copy/multiplier rounds.  Once the relative
    objective change falls under ``outer_tol``, remaining constraint slack
    is closed by copy/multiplier rounds alone.  Returns the fitted model
    plus the full per-iteration trace.  The run is deterministic for fixed
    inputs; two calls with the same seed produce bitwise-identical models.
    Raises SolverError with the iteration index if the objective turns
    non-finite.
    """
    hp.validate(p=cohort.p)
    spec.validate()
    t0 = time.perf_counter()
    state = initialize(cohort, hp, seed, spec=spec)

    trace = FitTrace()
    prox_step = hp.prox_step
    dual_step = hp.dual_step
    prev_total = None
    prev_resid = None
    quiet_iters = 0

    for it in range(hp.max_outer_iters):
        # basis block (proximal gradient, warm-started step)
        x_before = fac.smooth_x_value(state.basis_x, state, cohort) + hp.gamma1 * float(
            np.abs(state.basis_x).sum()
        )
        state.basis_x, prox_step = fac.update_x(state, cohort, hp, step_init=min(prox_step * 2.0, 1.0))
        x_after = fac.smooth_x_value(state.basis_x, state, cohort) + hp.gamma1 * float(
            np.abs(state.basis_x).sum()
        )

        # regression block: freeze anchors, refresh the dual
        _refresh_dual(state, cohort, hp, spec)

        # loading block (independent per patient)
        probs_before = [
            tr.LoadingProblem(i, state, cohort, hp, spec).value(state.loadings[:, i])
            for i in range(cohort.n)
        ]
        state.loadings = _update_all_loadings(state, cohort, hp, spec, threads)
        c_decrease = 0.0
        for i in range(cohort.n):
            c_decrease += probs_before[i] - tr.LoadingProblem(i, state, cohort, hp, spec).value(
                state.loadings[:, i]
            )
        if np.any(state.loadings < 0.0):
            raise SolverError(f"negative loading produced at iteration {it}")

        # constraint copies and dual ascent (several cheap rounds keep the
        # multipliers tracking their stationary values)
        for _ in range(hp.dual_rounds):
            state.v_mats = fac.update_v(state, cohort)
            state.duals = fac.update_duals(state, dual_step)

        breakdown = fac.objective(state, cohort, hp, spec)
        resid = breakdown.constraint_residual
        total = breakdown.total_j
        if not np.isfinite(total):
            trace.records.append(
                IterationRecord(it, breakdown, dual_step, time.perf_counter() - t0,
                                x_before - x_after, c_decrease, float(state.loadings.min()))
            )
            raise SolverError(f"objective diverged (non-finite) at iteration {it}")

        if prev_total is not None:
            rel = abs(total - prev_total) / max(1.0, abs(prev_total))
            quiet_iters = quiet_iters + 1 if rel < hp.outer_tol else 0
            if quiet_iters >= _CONVERGENCE_PATIENCE:
                if resid >= hp.constraint_tol:
                    _closure_rounds(state, cohort, hp)
                    breakdown = fac.objective(state, cohort, hp, spec)
                    resid = breakdown.constraint_residual
                if resid < hp.constraint_tol:
                    trace.converged = True

        record = IterationRecord(
            iteration=it,
            breakdown=breakdown,
            dual_step=dual_step,
            wall_time=time.perf_counter() - t0,
            x_block_decrease=x_before - x_after,
            c_block_decrease=c_decrease,
            loadings_min=float(state.loadings.min()),
        )
        trace.records.append(record)
        if callback is not None:
            callback(it, breakdown)

        # halve the multiplier step on substantial residual growth (transient
        # bumps are normal), recover toward the configured value afterwards
        if prev_resid is not None:
            if resid > prev_resid * 2.0:
                dual_step = max(dual_step * 0.5, 1e-3)
            else:
                dual_step = min(dual_step * 1.25, hp.dual_step)
        prev_total, prev_resid = total, resid
        if trace.converged:
            break

    # final dual refresh so the stored anchors are the final loadings
    _refresh_dual(state, cohort, hp, spec)
    summary = fac.objective(state, cohort, hp, spec)
    final = IterationRecord(
        iteration=len(trace.records),
        breakdown=summary,
        dual_step=dual_step,
        wall_time=time.perf_counter() - t0,
        x_block_decrease=0.0,
        c_block_decrease=0.0,
        loadings_min=float(state.loadings.min()),
    )
    trace.records.append(final)

    dual = RegressionDual(
        alpha=state.alpha.copy(),
        anchors=state.anchors.copy(),
        spec=spec,
        ridge=(hp.ridge if hp.lam > 0 else np.inf),
    )
    model = FittedModel(
        basis_x=state.basis_x.copy(),
        dual=dual,
        hyperparams=hp,
        spec=spec,
        summary=summary,
    )
    return model, trace


def build_qp(gamma_new: np.ndarray, model: FittedModel) -> pred.UnseenQP:
    """Unseen-patient QP for a fitted model (thin wrapper)."""
    return pred.build_qp(gamma_new, model.basis_x, model.hyperparams.gamma2)


def predict_unseen(gamma_new: np.ndarray, model: FittedModel) -> tuple[np.ndarray, float]:
    """Loading vector and severity estimate for one unseen matrix."""
    return model.predict_unseen(gamma_new)
