"""Per-patient loading updates: trust-region Newton under nonnegativity.

Each loading vector minimizes a smooth objective (decomposition coupling,
ridge, and kernel-regression residual) subject to c >= 0.  Steps minimize a
quadratic model over the intersection of the trust-region ball and the
shifted nonnegative orthant.  The subproblem solver is exact in the common
cases (interior Newton step, bound-active-only via an active-set QP, and
ball-active via a safeguarded radius search on the shifted Hessian); only
the degenerate hard case drops to projected-gradient refinement of Cauchy
and curvature candidates, which still preserves the fraction-of-Cauchy-
decrease contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .core import CohortDataset, Hyperparams, KernelSpec, ModelState, TrustRegionConfig
from .kernel import kernel_grads, kernel_hess_weighted, kernel_values
from .prediction import nnls_qp

_TINY_DELTA = 1e-16


@dataclass(frozen=True)
class LoadingSubproblem:
    """Quadratic model data at the current iterate.

    Minimize g.p + 0.5 p.H.p subject to ||p|| <= delta and c_current + p >= 0.
    """

    g: np.ndarray
    h: np.ndarray
    c_current: np.ndarray
    delta: float


class LoadingProblem:
    """Value / gradient / Hessian of one patient's loading objective.

    F(c) = lam * (y - sum_j alpha_j kappa(c, anchor_j))^2 + gamma2 ||c||^2
           + Tr(L^T (V - X diag(c))) + 0.5 ||V - X diag(c)||_F^2

    Basis-dependent quantities are cached at construction; only the kernel
    sums are re-evaluated per iterate.
    """

    def __init__(
        self,
        patient: int,
        state: ModelState,
        cohort: CohortDataset,
        hp: Hyperparams,
        spec: KernelSpec,
    ):
        x = state.basis_x
        v = state.v_mats[patient]
        lam_mat = state.duals[patient]
        self.diag_xtx = np.einsum("pr,pr->r", x, x)
        self.lin = np.einsum("pr,pr->r", lam_mat + v, x)  # diag((L + V)^T X)
        self.const = float(np.einsum("pr,pr->", lam_mat, v) + 0.5 * np.einsum("pr,pr->", v, v))
        self.gamma2 = hp.gamma2
        self.lam = hp.lam
        self.y = float(cohort.scores[patient])
        self.alpha = state.alpha
        self.anchors_t = state.anchors.T
        self.spec = spec
        self.use_kernel = hp.lam > 0.0 and bool(np.any(state.alpha))

    def _quad_part(self, c: np.ndarray) -> float:
        return (
            self.const
            - float(self.lin @ c)
            + 0.5 * float(self.diag_xtx @ (c * c))
            + self.gamma2 * float(c @ c)
        )

    def value(self, c: np.ndarray) -> float:
        val = self._quad_part(c)
        if self.use_kernel:
            resid = self.y - float(kernel_values(c, self.anchors_t, self.spec) @ self.alpha)
            val += self.lam * resid * resid
        elif self.lam > 0.0:
            val += self.lam * self.y * self.y
        return val

    def value_grad(self, c: np.ndarray) -> tuple[float, np.ndarray]:
        val = self._quad_part(c)
        g = c * self.diag_xtx - self.lin + 2.0 * self.gamma2 * c
        if self.use_kernel:
            kv = kernel_values(c, self.anchors_t, self.spec)
            kg = kernel_grads(c, self.anchors_t, self.spec)
            resid = self.y - float(kv @ self.alpha)
            s = kg.T @ self.alpha
            val += self.lam * resid * resid
            g += -2.0 * self.lam * resid * s
        elif self.lam > 0.0:
            val += self.lam * self.y * self.y
        return val, g

    def value_grad_hess(self, c: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        val = self._quad_part(c)
        g = c * self.diag_xtx - self.lin + 2.0 * self.gamma2 * c
        h = np.diag(self.diag_xtx) + 2.0 * self.gamma2 * np.eye(c.shape[0])
        if self.use_kernel:
            kv = kernel_values(c, self.anchors_t, self.spec)
            kg = kernel_grads(c, self.anchors_t, self.spec)
            resid = self.y - float(kv @ self.alpha)
            s = kg.T @ self.alpha
            val += self.lam * resid * resid
            g += -2.0 * self.lam * resid * s
            h += 2.0 * self.lam * np.outer(s, s)
            h -= 2.0 * self.lam * resid * kernel_hess_weighted(c, self.anchors_t, self.alpha, self.spec)
        elif self.lam > 0.0:
            val += self.lam * self.y * self.y
        return val, g, h


def loading_value(c, patient, state, cohort, hp, spec) -> float:
    """Objective value of patient's loading block at c."""
    return LoadingProblem(patient, state, cohort, hp, spec).value(np.asarray(c, dtype=np.float64))


def grad_c(c, patient, state, cohort, hp, spec) -> np.ndarray:
    """Gradient of the loading objective at c (anchors and alpha frozen)."""
    prob = LoadingProblem(patient, state, cohort, hp, spec)
    return prob.value_grad(np.asarray(c, dtype=np.float64))[1]


def hess_c(c, patient, state, cohort, hp, spec) -> np.ndarray:
    """Hessian of the loading objective at c; symmetric."""
    prob = LoadingProblem(patient, state, cohort, hp, spec)
    return prob.value_grad_hess(np.asarray(c, dtype=np.float64))[2]


def project_feasible(z: np.ndarray, lower: np.ndarray, delta: float,
                     tol: float = 1e-13, max_iters: int = 80) -> np.ndarray:
    """Euclidean projection onto {p >= lower} intersect {||p|| <= delta}.

    The box projection, when inside the ball, is the answer (theta = 0 in
    the KKT system).  Otherwise the projection has the exact form
    max(z / (1 + theta), lower) with the ball multiplier theta > 0 chosen so
    the norm equals delta; the norm is continuous and decreasing in theta, so
    a safeguarded Illinois root find pins it down.  lower <= 0 throughout
    (bounds come from nonnegative loadings), which makes the final snap
    exact.
    """
    if delta <= 0.0:
        return np.zeros_like(z)
    clipped = np.maximum(z, lower)
    if float(clipped @ clipped) <= delta * delta:
        return clipped

    def point_at(theta: float) -> np.ndarray:
        return np.maximum(z / (1.0 + theta), lower)

    lo, f_lo = 0.0, sqrt(float(clipped @ clipped)) - delta
    hi = max(sqrt(float(z @ z)) / delta - 1.0, 1e-16)
    p_hi = point_at(hi)
    f_hi = sqrt(float(p_hi @ p_hi)) - delta
    while f_hi > 0.0:  # clamping can keep the norm above delta; push further
        hi = hi * 4.0 + 1.0
        p_hi = point_at(hi)
        f_hi = sqrt(float(p_hi @ p_hi)) - delta
    best = p_hi
    side = 0
    for _ in range(max_iters):
        denom = f_hi - f_lo
        theta = (lo * f_hi - hi * f_lo) / denom if denom != 0.0 else 0.5 * (lo + hi)
        if not (lo < theta < hi):
            theta = 0.5 * (lo + hi)
        p = point_at(theta)
        f = sqrt(float(p @ p)) - delta
        if f > 0.0:
            lo, f_lo = theta, f
            if side == 1:
                f_hi *= 0.5
            side = 1
        else:
            hi, f_hi = theta, f
            best = p
            if -f <= tol * max(1.0, delta):
                break
            if side == -1:
                f_lo *= 0.5
            side = -1
        if (hi - lo) <= 1e-15 * max(1.0, hi):
            break
    x = np.maximum(best, lower)
    xn = sqrt(float(x @ x))
    if xn > delta:
        x *= delta / xn
    return x


def _model_value(g: np.ndarray, h: np.ndarray, p: np.ndarray) -> float:
    hp_vec = h @ p
    return float(g @ p) + 0.5 * float(p @ hp_vec)


def _bound_qp(h: np.ndarray, g: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Exact min of g.p + 0.5 p.H.p over p >= lower for PD H."""
    q = nnls_qp(h, g + h @ lower)
    return q + lower


def _radius_search(h, g, lower, delta, mu_lo, eigmax, max_evals=30) -> np.ndarray | None:
    """Find mu >= mu_lo with ||argmin_{p >= lower} m_mu(p)|| = delta.

    m_mu adds 0.5 mu ||p||^2 to the model; its bound-constrained minimizer
    norm decreases in mu, so a safeguarded secant/bisection drives the norm
    to the radius.  A boundary solution with H + mu I positive definite and
    mu >= 0 is the global minimizer of the original ball/box model, so the
    result needs no further polishing.  Returns None when even mu_lo yields
    an interior point (the hard case, handled by the caller's fallback).
    """
    r = g.shape[0]
    eye = np.eye(r)

    def solve_at(mu: float) -> tuple[np.ndarray, float]:
        p = _bound_qp(h + mu * eye, g, lower)
        return p, sqrt(float(p @ p))

    p_lo, n_lo = solve_at(mu_lo)
    if n_lo <= delta:
        return p_lo if n_lo >= delta * (1.0 - 1e-9) else None
    mu_hi = max(2.0 * mu_lo, eigmax + sqrt(float(g @ g)) / delta, 1.0)
    p_hi, n_hi = solve_at(mu_hi)
    evals = 2
    while n_hi > delta and evals < max_evals:
        mu_hi = mu_hi * 4.0 + 1.0
        p_hi, n_hi = solve_at(mu_hi)
        evals += 1
    if n_hi > delta:
        return None
    best_feasible = p_hi
    lo, hi = mu_lo, mu_hi

    def recip_gap(n: float) -> float:
        # root function 1/n(mu) - 1/delta, close to linear in mu (the norm
        # itself spans orders of magnitude near a singular shift); the clamp
        # covers minimizers that collapse to exactly zero at huge mu
        return 1.0 / max(n, 1e-12 * delta) - 1.0 / delta

    f_lo, f_hi = recip_gap(n_lo), recip_gap(n_hi)
    side = 0
    while evals < max_evals:
        denom = f_hi - f_lo
        mu = (lo * f_hi - hi * f_lo) / denom if denom != 0.0 else 0.5 * (lo + hi)
        if not (lo < mu < hi):
            mu = 0.5 * (lo + hi)
        p, n = solve_at(mu)
        evals += 1
        if n > delta:
            lo, f_lo = mu, recip_gap(n)
            if side == 1:
                f_hi *= 0.5
            side = 1
        else:
            hi, f_hi = mu, recip_gap(n)
            best_feasible = p
            if n >= delta * (1.0 - 1e-9):
                break
            if side == -1:
                f_lo *= 0.5
            side = -1
        if (hi - lo) <= 1e-14 * max(1.0, hi):
            break
    return best_feasible


def _cauchy_path_point(g, h, lower, delta) -> np.ndarray:
    """Best point on the piecewise-linear projected steepest-descent path.

    The path is t -> clip(-t g, lower) truncated at the ball boundary; the
    model is quadratic on each linear piece, so the piecewise minimum is
    exact.  At most R breakpoints occur (one per coordinate hitting its
    bound).
    """
    r = g.shape[0]
    d = -g.copy()
    t_hits = np.full(r, np.inf)
    moving_down = d < 0
    t_hits[moving_down] = lower[moving_down] / d[moving_down]  # lower <= 0, d < 0 -> t >= 0
    order = np.argsort(t_hits)

    best_p = np.zeros(r)
    best_m = 0.0
    t_lo = 0.0
    p_lo = np.zeros(r)
    d_seg = d.copy()
    d_seg[t_hits <= 0.0] = 0.0  # coordinates already at their bound and pushing out

    for idx in list(order) + [None]:
        t_hi = np.inf if idx is None else float(t_hits[idx])
        if t_hi <= t_lo:
            if idx is not None:
                d_seg = d_seg.copy()
                d_seg[idx] = 0.0
            continue
        seg_len = t_hi - t_lo
        a = float(d_seg @ d_seg)
        if a == 0.0:
            break  # path stalled: every coordinate clamped
        # truncate the segment at the ball boundary: ||p_lo + s d_seg|| = delta
        hit_ball = False
        b = 2.0 * float(p_lo @ d_seg)
        cc = float(p_lo @ p_lo) - delta * delta
        disc = b * b - 4.0 * a * cc
        s_ball = (-b + sqrt(max(disc, 0.0))) / (2.0 * a) if disc >= 0.0 else np.inf
        if s_ball < seg_len:
            seg_len = max(s_ball, 0.0)
            hit_ball = True
        # exact minimum of the quadratic model along p_lo + s d_seg, s in [0, seg_len]
        lin = float(g @ d_seg + p_lo @ (h @ d_seg))
        curv = float(d_seg @ (h @ d_seg))
        if curv > 0.0:
            s_candidates = [min(max(-lin / curv, 0.0), seg_len)]
            if np.isfinite(seg_len):
                s_candidates.append(seg_len)
        else:
            s_candidates = [seg_len] if np.isfinite(seg_len) else []
        for s in s_candidates:
            p_try = np.maximum(p_lo + s * d_seg, lower)
            m_try = _model_value(g, h, p_try)
            if m_try < best_m:
                best_m, best_p = m_try, p_try
        if hit_ball or idx is None or not np.isfinite(t_hi):
            break
        p_lo = np.maximum(p_lo + seg_len * d_seg, lower)
        t_lo = t_hi
        d_seg = d_seg.copy()
        d_seg[idx] = 0.0
    return best_p


def _refine_pgd(g, h, lower, delta, p0, eigmax, max_iters=120) -> np.ndarray:
    """Monotone projected gradient descent on the model from p0."""
    step = 1.0 / (eigmax + 1.0)
    p = p0.copy()
    m = _model_value(g, h, p)
    for _ in range(max_iters):
        grad = g + h @ p
        p_new = project_feasible(p - step * grad, lower, delta)
        m_new = _model_value(g, h, p_new)
        tries = 0
        while m_new > m - 1e-15 * max(1.0, abs(m)) and tries < 6:
            step *= 0.5
            p_new = project_feasible(p - step * grad, lower, delta)
            m_new = _model_value(g, h, p_new)
            tries += 1
        if m_new >= m - 1e-14 * max(1.0, abs(m)):
            break
        p, m = p_new, m_new
    return p


def _fallback_candidates(g, h, lower, delta, eigvecs, r) -> list[np.ndarray]:
    cands = [project_feasible(delta * eigvecs[:, 0], lower, delta),
             project_feasible(-delta * eigvecs[:, 0], lower, delta)]
    if r <= 3:
        # coarse feasible sample as extra descent seeds (rare path, tiny r)
        axes = [np.linspace(max(float(lo), -delta), delta, 7) for lo in lower]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        pts = pts[np.einsum("ij,ij->i", pts, pts) <= delta * delta]
        if pts.shape[0]:
            vals = pts @ g + 0.5 * np.einsum("ij,jk,ik->i", pts, h, pts)
            cands.append(pts[int(np.argmin(vals))])
    return cands


def solve_subproblem(sp: LoadingSubproblem) -> np.ndarray:
    """Minimize the quadratic model over the ball/orthant intersection.

    Returns a feasible step p (c_current + p >= 0 exactly, ||p|| <= delta).
    p = 0 is always a candidate, so the model value never increases.
    """
    g = np.asarray(sp.g, dtype=np.float64)
    h = np.asarray(sp.h, dtype=np.float64)
    c = np.asarray(sp.c_current, dtype=np.float64)
    delta = float(sp.delta)
    r = g.shape[0]
    lower = -c
    if delta <= 0.0:
        return np.zeros(r)

    eigvals, eigvecs = np.linalg.eigh(h)
    eigmax = float(np.max(np.abs(eigvals)))
    pd_floor = 1e-12 * max(1.0, eigmax)

    def snap(p: np.ndarray) -> np.ndarray:
        p = np.maximum(p, lower)
        nrm = sqrt(float(p @ p))
        if nrm > delta:
            p *= delta / nrm
            p = np.maximum(p, lower)
        return p

    if eigvals[0] > pd_floor:
        p_newton = -np.linalg.solve(h, g)
        if sqrt(float(p_newton @ p_newton)) <= delta and np.all(p_newton >= lower):
            return p_newton  # interior Newton step is the global model minimizer
        p_bound = _bound_qp(h, g, lower)
        if sqrt(float(p_bound @ p_bound)) <= delta:
            return snap(p_bound)  # ball inactive: global over the box, hence over the intersection
        p_ball = _radius_search(h, g, lower, delta, 0.0, eigmax)
        if p_ball is not None:
            return snap(p_ball)  # boundary solution of a convex shifted model: global
        candidates: list[np.ndarray] = []
    else:
        shift = -float(eigvals[0]) + max(1e-10, 1e-8 * eigmax)
        p_ball = _radius_search(h, g, lower, delta, shift, eigmax)
        if p_ball is not None:
            return snap(p_ball)  # shifted-PD boundary solution: global for the nonconvex model
        candidates = _fallback_candidates(g, h, lower, delta, eigvecs, r)
        # interior solution of the minimally-shifted model seeds the hard case
        candidates.append(snap(_bound_qp(h + shift * np.eye(r), g, lower)))

    # hard case: no boundary solution with a PSD shift; polish descent seeds
    candidates.append(_cauchy_path_point(g, h, lower, delta))
    best_p = np.zeros(r)
    best_m = 0.0
    for cand in candidates:
        refined = _refine_pgd(g, h, lower, delta, cand, eigmax)
        for p_try in (cand, refined):
            m_try = _model_value(g, h, p_try)
            if m_try < best_m:
                best_m, best_p = m_try, p_try
    return snap(best_p)


def projected_gradient_norm(g: np.ndarray, c: np.ndarray) -> float:
    """Norm of the gradient projected onto feasible descent directions."""
    d = -g.copy()
    d[(c <= 0.0) & (d < 0.0)] = 0.0
    return sqrt(float(d @ d))


def update_loading(
    patient: int,
    state: ModelState,
    cohort: CohortDataset,
    hp: Hyperparams,
    spec: KernelSpec,
    tr: TrustRegionConfig | None = None,
) -> np.ndarray:
    """Run the trust-region loop on one patient's loading vector.

    Accepts a step when actual/predicted reduction >= eta_accept, shrinking
    or growing the radius in the usual way.  The returned vector satisfies
    c >= 0 exactly and never has a larger objective than the input.
    """
    tr = tr or hp.tr
    prob = LoadingProblem(patient, state, cohort, hp, spec)
    c = state.loadings[:, patient].copy()
    fc, g, h = prob.value_grad_hess(c)
    delta = tr.delta0
    for _ in range(tr.max_iters):
        if projected_gradient_norm(g, c) <= tr.grad_tol:
            break
        p = solve_subproblem(LoadingSubproblem(g, h, c, delta))
        pred = -_model_value(g, h, p)
        if not np.isfinite(pred) or pred <= 0.0:
            delta *= tr.shrink
            if delta < _TINY_DELTA:
                break
            continue
        c_trial = c + p
        f_trial = prob.value(c_trial)
        ratio = (fc - f_trial) / pred
        if ratio >= tr.eta_accept:
            c = c_trial
            fc, g, h = prob.value_grad_hess(c)
            if ratio >= 0.75 and sqrt(float(p @ p)) >= 0.8 * delta:
                delta = min(tr.expand * delta, tr.delta_max)
        else:
            delta *= tr.shrink
            if delta < _TINY_DELTA:
                break
    return c
