"""Shared test helpers: independent finite-difference oracles and builders."""

import numpy as np
import pytest

from cmopt.core import CohortDataset, Hyperparams, KernelSpec, ModelState


def central_diff_grad(f, x, h=1e-6):
    """Independent central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def central_diff_jac(g, x, h=1e-6):
    """Central-difference Jacobian of a vector function (used for Hessians)."""
    x = np.asarray(x, dtype=np.float64)
    g0 = np.asarray(g(x))
    jac = np.zeros((g0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        jac[:, i] = (np.asarray(g(xp)) - np.asarray(g(xm))) / (2.0 * h)
    return jac


def rel_err(approx, exact):
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(np.asarray(approx) - exact)) / denom


def random_state(rng, p, r, n, loading_scale=2.0):
    """A generic ModelState with nonnegative loadings and frozen anchors."""
    basis = rng.normal(size=(p, r))
    loadings = rng.uniform(0.0, loading_scale, size=(r, n))
    v_mats = rng.normal(size=(n, p, r))
    duals = 0.3 * rng.normal(size=(n, p, r))
    anchors = rng.uniform(0.0, loading_scale, size=(r, n))
    alpha = rng.normal(size=n)
    return ModelState(basis, loadings, v_mats, duals, alpha, anchors)


def random_cohort(rng, p, n, score_scale=2.0):
    """Symmetric (not necessarily PSD) matrices for derivative checks."""
    mats = rng.normal(size=(n, p, p))
    mats = (mats + mats.transpose(0, 2, 1)) / 2.0
    scores = score_scale * rng.normal(size=n)
    return CohortDataset(mats, scores)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ados_spec():
    return KernelSpec(sigma_sq=1.0, rho=0.8, ell=2.5)


@pytest.fixture
def small_hp():
    return Hyperparams(lam=0.7, gamma1=0.5, gamma2=0.3, gamma3=1.1, rank_r=3)
