"""Shared data model, validation, and solver configuration.

Conventions used throughout the package:

* a cohort is N symmetric PSD matrices of size P x P stacked as (N, P, P),
* the shared basis is P x R, loadings are stored column-wise as (R, N),
* constraint copies and their duals are stacked as (N, P, R).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SYMMETRY_RTOL = 1e-10
PSD_EIG_TOL = -1e-8


class CmoError(Exception):
    """Base class for all package errors."""


class ValidationError(CmoError):
    """Input data or configuration violates a documented invariant."""


class ConfigError(CmoError):
    """Malformed run configuration (CLI / config file level)."""


class DataFormatError(CmoError):
    """On-disk artifact cannot be parsed."""


class SolverError(CmoError):
    """Numerical failure inside an optimizer (divergence, step underflow)."""


@dataclass(frozen=True)
class KernelSpec:
    """Mixed exponential + polynomial kernel parameters.

    kappa(c, c_hat) = exp(-||c - c_hat||^2 / sigma_sq)
                      + (rho / ell) * (c_hat . c + 1)^ell

    ``include_exp`` / ``include_poly`` select the terms; both enabled is the
    mixed kernel, disabling one yields the single-family variants used by the
    kernel recovery experiment.
    """

    sigma_sq: float = 1.0
    rho: float = 0.8
    ell: float = 2.5
    include_exp: bool = True
    include_poly: bool = True

    def validate(self) -> "KernelSpec":
        if not (self.sigma_sq > 0):
            raise ValidationError(f"sigma_sq must be > 0, got {self.sigma_sq}")
        if not (self.rho >= 0):
            raise ValidationError(f"rho must be >= 0, got {self.rho}")
        if not (self.ell > 1):
            raise ValidationError(
                f"ell must be > 1 so the kernel Hessian exists, got {self.ell}"
            )
        if not (self.include_exp or self.include_poly):
            raise ValidationError("at least one kernel term must be enabled")
        return self


# Kernel settings for the three severity scores, selected by a two-decade
# parameter sweep.
KERNEL_PRESETS = {
    "ados": KernelSpec(sigma_sq=1.0, rho=0.8, ell=2.5),
    "srs": KernelSpec(sigma_sq=1.0, rho=2.0, ell=1.5),
    "praxis": KernelSpec(sigma_sq=1.0, rho=0.5, ell=1.5),
}


@dataclass(frozen=True)
class TrustRegionConfig:
    delta0: float = 1.0
    delta_max: float = 100.0
    eta_accept: float = 0.1
    shrink: float = 0.25
    expand: float = 2.0
    max_iters: int = 50
    grad_tol: float = 1e-6

    def validate(self) -> "TrustRegionConfig":
        if not (0 < self.eta_accept < 0.25):
            raise ValidationError(f"eta_accept must lie in (0, 0.25), got {self.eta_accept}")
        if not (0 < self.shrink < 1 < self.expand):
            raise ValidationError("require 0 < shrink < 1 < expand")
        if not (0 < self.delta0 <= self.delta_max):
            raise ValidationError("require 0 < delta0 <= delta_max")
        if self.max_iters < 1 or not (self.grad_tol > 0):
            raise ValidationError("max_iters >= 1 and grad_tol > 0 required")
        return self


@dataclass(frozen=True)
class Hyperparams:
    """Solver configuration.

    ``lam`` trades data fidelity against score prediction; ``gamma1`` weights
    the l1 penalty on the basis, ``gamma2`` the l2 penalty on each loading
    vector, ``gamma3`` the l2 penalty on the regression weights.  ``lam == 0``
    runs the factorization-only (decoupled) variant; the regression block is
    skipped in that mode.
    """

    lam: float = 1.0
    gamma1: float = 10.0
    gamma2: float = 0.7
    gamma3: float = 1.0
    rank_r: int = 8
    prox_step: float = 1e-3
    dual_step: float = 0.5
    dual_rounds: int = 3
    x_inner_iters: int = 1
    tr: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    outer_tol: float = 1e-5
    max_outer_iters: int = 200
    constraint_tol: float = 1e-4

    @property
    def ridge(self) -> float:
        """Dual-system ridge gamma3 / lam (requires lam > 0)."""
        if self.lam <= 0:
            raise ValidationError("ridge undefined for lam == 0 (decoupled mode)")
        return self.gamma3 / self.lam

    def validate(self, p: int | None = None) -> "Hyperparams":
        if not (self.lam >= 0):
            raise ValidationError(f"lam must be >= 0, got {self.lam}")
        for name in ("gamma1", "gamma2", "gamma3"):
            if not (getattr(self, name) > 0):
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.rank_r < 1:
            raise ValidationError(f"rank_r must be >= 1, got {self.rank_r}")
        if p is not None and self.rank_r > p:
            raise ValidationError(f"rank_r={self.rank_r} exceeds region count P={p}")
        for name in ("prox_step", "dual_step", "outer_tol", "constraint_tol"):
            if not (getattr(self, name) > 0):
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.x_inner_iters < 1 or self.max_outer_iters < 1 or self.dual_rounds < 1:
            raise ValidationError("iteration counts must be >= 1")
        self.tr.validate()
        return self

    def with_lam(self, lam: float) -> "Hyperparams":
        return replace(self, lam=lam)


@dataclass(frozen=True)
class CohortDataset:
    """N validated correlation matrices plus their severity scores.

    ``matrices`` has shape (N, P, P); ``scores`` has shape (N,).  Instances
    are built through :func:`validate_cohort` for raw data; internal code may
    construct them directly from matrices that are valid by construction.
    """

    matrices: np.ndarray
    scores: np.ndarray
    score_name: str = "score"

    @property
    def n(self) -> int:
        return self.matrices.shape[0]

    @property
    def p(self) -> int:
        return self.matrices.shape[1]

    def subset(self, idx) -> "CohortDataset":
        idx = np.asarray(idx)
        return CohortDataset(self.matrices[idx], self.scores[idx], self.score_name)


@dataclass
class ModelState:
    """All mutable optimizer state, owned by a single solver driver.

    ``anchors`` is the copy of ``loadings`` frozen at the most recent dual
    solve; ``alpha`` solves the regression dual system for those anchors.
    """

    basis_x: np.ndarray  # (P, R)
    loadings: np.ndarray  # (R, N), entrywise >= 0
    v_mats: np.ndarray  # (N, P, R)
    duals: np.ndarray  # (N, P, R)
    alpha: np.ndarray  # (N,)
    anchors: np.ndarray  # (R, N)

    def copy(self) -> "ModelState":
        return ModelState(
            self.basis_x.copy(),
            self.loadings.copy(),
            self.v_mats.copy(),
            self.duals.copy(),
            self.alpha.copy(),
            self.anchors.copy(),
        )


def check_symmetric(mat: np.ndarray, rtol: float = SYMMETRY_RTOL, label: str = "matrix") -> None:
    """Raise ValidationError unless ``mat`` is square and symmetric."""
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"{label} is not square, shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    gap = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
    if gap > rtol * scale:
        raise ValidationError(f"{label} asymmetric: max |A - A.T| = {gap:.3e} (scale {scale:.3e})")


def validate_cohort(raw, scores, score_name: str = "score") -> CohortDataset:
    """Validate raw matrices + scores and assemble a CohortDataset.

    Checks: equal nonempty lengths, N >= 2, finite entries, a shared region
    count P, symmetry to relative tolerance 1e-10, and eigenvalues >= -1e-8.
    Validation is idempotent: feeding the fields of a returned dataset back
    in reproduces it.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in raw]
    y = np.asarray(scores, dtype=np.float64)
    if len(mats) == 0 or y.ndim != 1 or len(mats) != y.shape[0]:
        raise ValidationError(
            f"need equally many matrices and scores, got {len(mats)} and {y.shape}"
        )
    if len(mats) < 2:
        raise ValidationError("cohort needs at least N = 2 patients")
    if not np.all(np.isfinite(y)):
        raise ValidationError("scores contain non-finite values")

    p = mats[0].shape[0] if mats[0].ndim == 2 else -1
    for i, m in enumerate(mats):
        if m.ndim != 2 or m.shape != (p, p):
            raise ValidationError(f"matrix {i} has shape {m.shape}, expected ({p}, {p})")
        if not np.all(np.isfinite(m)):
            raise ValidationError(f"matrix {i} contains non-finite entries")
        check_symmetric(m, label=f"matrix {i}")
        eigmin = float(np.linalg.eigvalsh(m)[0])
        if eigmin < PSD_EIG_TOL:
            raise ValidationError(f"matrix {i} not PSD: min eigenvalue {eigmin:.3e}")
    return CohortDataset(np.stack(mats), y.copy(), score_name)


def residualize_first_eigenvector(g: np.ndarray) -> np.ndarray:
    """Remove the top eigenpair's rank-1 contribution from a symmetric matrix.

    Returns g - lam1 * v1 v1.T where (lam1, v1) is the algebraically largest
    eigenpair.  Subtracting the top component of a PSD matrix keeps it PSD,
    so only symmetry is re-asserted on the output.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValidationError("cannot residualize a matrix with non-finite entries")
    check_symmetric(g, label="input")
    w, v = np.linalg.eigh(g)
    top = v[:, -1]
    out = g - w[-1] * np.outer(top, top)
    return (out + out.T) / 2.0


def mean_eigenvalue_curve(cohort: CohortDataset) -> np.ndarray:
    """Descending eigenvalue curve averaged over the cohort."""
    spectra = np.linalg.eigvalsh(cohort.matrices)  # ascending, per patient
    return spectra[:, ::-1].mean(axis=0)


def select_rank(cohort: CohortDataset) -> int:
    """Pick R at the knee of the cohort-mean eigenspectrum.

    The knee is the r in [2, P-1] maximizing the forward second difference
    mu_r - 2 mu_{r+1} + mu_{r+2} of the descending mean curve (the curve is
    padded flat at the tail so r = P-1 is scoreable).  A flat spectrum has no
    knee and raises; callers that know R override by not calling this.
    """
    p = cohort.p
    if p < 3:
        raise ValidationError(f"rank selection needs P >= 3, got P = {p}")
    mu = mean_eigenvalue_curve(cohort)
    padded = np.concatenate([mu, mu[-1:]])
    # curvature[r-2] scores keeping r components, r = 2 .. P-1
    r_vals = np.arange(2, p)
    curvature = padded[r_vals - 1] - 2.0 * padded[r_vals] + padded[r_vals + 1]
    best = int(np.argmax(curvature))
    if curvature[best] <= 1e-12 * max(1.0, abs(float(mu[0]))):
        raise ValidationError("eigenspectrum has no knee; pass an explicit rank")
    return int(r_vals[best])
