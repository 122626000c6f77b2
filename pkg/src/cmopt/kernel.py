"""Mixed exponential + polynomial kernel: values, derivatives, Gram matrices.

All derivatives are with respect to the first argument.  The closed forms
below are validated against central finite differences by the test suite
before any solver relies on them.
"""

from __future__ import annotations

import numpy as np

from .core import KernelSpec, ValidationError


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("kernel inputs must be finite")


def _poly_base(dots: np.ndarray) -> np.ndarray:
    base = dots + 1.0
    if np.any(base <= 0.0):
        raise ValidationError(
            "polynomial kernel base (c_hat . c + 1) must stay positive; "
            "inputs are expected to be (near-)nonnegative"
        )
    return base


def kernel_eval(c: np.ndarray, c_hat: np.ndarray, spec: KernelSpec) -> float:
    """Scalar kernel value; symmetric in its arguments."""
    c = np.asarray(c, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    _check_finite(c, c_hat)
    val = 0.0
    if spec.include_exp:
        diff = c - c_hat
        val += float(np.exp(-np.dot(diff, diff) / spec.sigma_sq))
    if spec.include_poly:
        base = _poly_base(np.dot(c_hat, c))
        val += float((spec.rho / spec.ell) * base**spec.ell)
    return val


def kernel_grad(c: np.ndarray, c_hat: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Gradient of kernel_eval(c, c_hat) with respect to c.

    -(2/sigma^2) exp(-||c - c_hat||^2 / sigma^2) (c - c_hat)
    + rho (c_hat . c + 1)^(ell - 1) c_hat
    """
    c = np.asarray(c, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    _check_finite(c, c_hat)
    out = np.zeros_like(c)
    if spec.include_exp:
        diff = c - c_hat
        e = np.exp(-np.dot(diff, diff) / spec.sigma_sq)
        out += (-2.0 / spec.sigma_sq) * e * diff
    if spec.include_poly:
        base = _poly_base(np.dot(c_hat, c))
        out += spec.rho * base ** (spec.ell - 1.0) * c_hat
    return out


def kernel_hess(c: np.ndarray, c_hat: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Hessian of kernel_eval(c, c_hat) with respect to c; symmetric.

    (2/sigma^2) exp(-||d||^2/sigma^2) [(2/sigma^2) d d.T - I]
    + rho (ell - 1) (c_hat . c + 1)^(ell - 2) c_hat c_hat.T,  d = c - c_hat.
    """
    c = np.asarray(c, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    _check_finite(c, c_hat)
    r = c.shape[0]
    out = np.zeros((r, r))
    if spec.include_exp:
        diff = c - c_hat
        two_over_s = 2.0 / spec.sigma_sq
        e = np.exp(-np.dot(diff, diff) / spec.sigma_sq)
        out += two_over_s * e * (two_over_s * np.outer(diff, diff) - np.eye(r))
    if spec.include_poly:
        base = _poly_base(np.dot(c_hat, c))
        out += spec.rho * (spec.ell - 1.0) * base ** (spec.ell - 2.0) * np.outer(c_hat, c_hat)
    return out


def kernel_values(c: np.ndarray, anchors_t: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Kernel values of c against each row of anchors_t (N, R); returns (N,)."""
    diff = c[None, :] - anchors_t
    out = np.zeros(anchors_t.shape[0])
    if spec.include_exp:
        out += np.exp(-np.einsum("nr,nr->n", diff, diff) / spec.sigma_sq)
    if spec.include_poly:
        base = _poly_base(anchors_t @ c)
        out += (spec.rho / spec.ell) * base**spec.ell
    return out


def kernel_grads(c: np.ndarray, anchors_t: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Row j is the gradient of kernel_eval(c, anchors_t[j]); returns (N, R)."""
    diff = c[None, :] - anchors_t
    out = np.zeros_like(anchors_t)
    if spec.include_exp:
        e = np.exp(-np.einsum("nr,nr->n", diff, diff) / spec.sigma_sq)
        out += (-2.0 / spec.sigma_sq) * e[:, None] * diff
    if spec.include_poly:
        base = _poly_base(anchors_t @ c)
        out += spec.rho * (base ** (spec.ell - 1.0))[:, None] * anchors_t
    return out


def kernel_hess_weighted(
    c: np.ndarray, anchors_t: np.ndarray, weights: np.ndarray, spec: KernelSpec
) -> np.ndarray:
    """sum_j weights[j] * Hess_c kernel(c, anchors_t[j]) without forming each term."""
    n, r = anchors_t.shape
    out = np.zeros((r, r))
    if spec.include_exp:
        diff = c[None, :] - anchors_t
        two_over_s = 2.0 / spec.sigma_sq
        e = np.exp(-np.einsum("nr,nr->n", diff, diff) / spec.sigma_sq)
        we = weights * e
        out += two_over_s**2 * (diff.T * we) @ diff
        out -= two_over_s * float(we.sum()) * np.eye(r)
    if spec.include_poly:
        base = _poly_base(anchors_t @ c)
        wp = weights * base ** (spec.ell - 2.0)
        out += spec.rho * (spec.ell - 1.0) * (anchors_t.T * wp) @ anchors_t
    return (out + out.T) / 2.0  # gemm output is only symmetric up to rounding


def gram(anchors: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """N x N Gram matrix of the anchor columns of an (R, N) array.

    Entry (i, j) is kernel_eval(anchor_i, anchor_j); the lower triangle
    mirrors the upper so the result is symmetric bitwise.
    """
    a = np.asarray(anchors, dtype=np.float64)
    _check_finite(a)
    ct = a.T  # (N, R)
    n = ct.shape[0]
    k = np.zeros((n, n))
    if spec.include_exp:
        sq = np.einsum("nr,nr->n", ct, ct)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (ct @ ct.T)
        np.maximum(d2, 0.0, out=d2)
        np.fill_diagonal(d2, 0.0)
        k += np.exp(-d2 / spec.sigma_sq)
    if spec.include_poly:
        base = _poly_base(ct @ ct.T)
        k += (spec.rho / spec.ell) * base**spec.ell
    upper = np.triu(k, 1)
    return upper + upper.T + np.diag(np.diag(k))
