import numpy as np
import pytest

from cmopt.core import Hyperparams, KernelSpec, ValidationError
from cmopt.kernel import kernel_eval
from cmopt.prediction import build_qp, predict_unseen, solve_unseen_loading
from cmopt.regression import RegressionDual
from cmopt.solver import FittedModel

SPEC = KernelSpec()


def brute_force_qp(h, f, lo=0.0, hi=4.0, points=80):
    """Grid scan refined by an exact solve on the inferred inactive set."""
    axes = [np.linspace(lo, hi, points)] * f.shape[0]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = 0.5 * np.einsum("ij,jk,ik->i", pts, h, pts) + pts @ f
    rough = pts[int(np.argmin(vals))]
    free = rough > (hi - lo) / (points - 1)  # coordinates clearly off the bound
    best = np.zeros(f.shape[0])
    if np.any(free):
        idx = np.flatnonzero(free)
        sol = np.linalg.solve(h[np.ix_(idx, idx)], -f[idx])
        if np.all(sol >= 0):
            best[idx] = sol
    cand_val = 0.5 * best @ h @ best + f @ best
    rough_val = 0.5 * rough @ h @ rough + f @ rough
    return (best, cand_val) if cand_val <= rough_val else (rough, rough_val)


class TestBuildQP:
    def test_identity_basis(self):
        d = np.array([1.0, 2.0, 0.5])
        qp = build_qp(np.diag(d), np.eye(3), gamma2=0.5)
        assert np.allclose(qp.h_bar, 3.0 * np.eye(3), atol=1e-14)
        assert np.allclose(qp.f_bar, -2.0 * d, atol=1e-14)

    def test_zero_basis_with_ridge(self):
        qp = build_qp(np.eye(4), np.zeros((4, 2)), gamma2=0.5)
        assert np.allclose(qp.h_bar, np.eye(2), atol=1e-15)
        assert np.array_equal(qp.f_bar, np.zeros(2))
        assert np.array_equal(solve_unseen_loading(qp), np.zeros(2))

    def test_zero_gamma2_needs_full_rank_basis(self):
        with pytest.raises(ValidationError, match="positive definite"):
            build_qp(np.eye(3), np.zeros((3, 2)), gamma2=0.0)

    def test_matches_straight_line_recomputation(self, rng):
        # oracle: independent loop evaluation of both formulas
        x = rng.normal(size=(6, 3))
        g = rng.normal(size=(6, 6))
        g = (g + g.T) / 2
        qp = build_qp(g, x, gamma2=0.3)
        xtx = x.T @ x
        h_expected = 2.0 * (xtx * xtx) + 0.6 * np.eye(3)
        f_expected = np.array([-2.0 * (x[:, r] @ g @ x[:, r]) for r in range(3)])
        assert np.allclose(qp.h_bar, h_expected, rtol=1e-12)
        assert np.allclose(qp.f_bar, f_expected, rtol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValidationError):
            build_qp(np.eye(4), rng.normal(size=(5, 2)), gamma2=0.5)


class TestSolveUnseenLoading:
    def test_scalar_exact_recovery(self):
        # P = R = 1, X = [1], gamma2 = 0 a Gram of 1: minimizer is the diagonal value
        c_true = 1.7
        qp = build_qp(np.array([[c_true]]), np.array([[1.0]]), gamma2=0.0)
        assert solve_unseen_loading(qp)[0] == pytest.approx(c_true, rel=1e-12)

    def test_nonnegative_f_gives_zero(self, rng):
        h = np.eye(3) * 2.0
        f = rng.uniform(0.0, 1.0, size=3)
        from cmopt.prediction import UnseenQP

        assert np.array_equal(solve_unseen_loading(UnseenQP(h, f)), np.zeros(3))

    def test_matches_brute_force_r3(self, rng):
        # oracle: dense nonnegative grid + exact inactive-set polish
        from cmopt.prediction import UnseenQP

        for _ in range(25):
            a = rng.normal(size=(3, 3))
            h = a @ a.T + 0.4 * np.eye(3)
            f = rng.normal(size=3) * 2.0
            c = solve_unseen_loading(UnseenQP(h, f))
            _, val_bf = brute_force_qp(h, f)
            val = 0.5 * c @ h @ c + f @ c
            assert val <= val_bf + 1e-8

    def test_kkt_residual(self, rng):
        from cmopt.prediction import UnseenQP

        for _ in range(50):
            a = rng.normal(size=(4, 4))
            h = a @ a.T + 0.2 * np.eye(4)
            f = rng.normal(size=4) * 3.0
            c = solve_unseen_loading(UnseenQP(h, f))
            grad = h @ c + f
            assert np.all(c >= 0.0)
            assert np.all(grad[c == 0.0] >= -1e-8)
            assert np.max(np.abs(grad[c > 0.0])) < 1e-8 if np.any(c > 0) else True

    def test_bitwise_repeatable(self, rng):
        from cmopt.prediction import UnseenQP

        a = rng.normal(size=(4, 4))
        h = a @ a.T + 0.3 * np.eye(4)
        f = rng.normal(size=4)
        qp = UnseenQP(h, f)
        assert np.array_equal(solve_unseen_loading(qp), solve_unseen_loading(qp))


def _toy_model(rng, p=8, r=3, gamma2=1e-12):
    basis = rng.normal(size=(p, r))
    anchors = rng.uniform(0.2, 2.0, size=(r, 5))
    alpha = rng.normal(size=5)
    dual = RegressionDual(alpha, anchors, SPEC, ridge=1.0)
    hp = Hyperparams(lam=1.0, gamma1=1.0, gamma2=gamma2, rank_r=r)
    return FittedModel(basis, dual, hp, SPEC)


class TestPredictUnseen:
    def test_recovers_training_loading_noiseless(self, rng):
        model = _toy_model(rng)
        c_true = rng.uniform(0.3, 2.0, size=3)
        gamma = model.basis_x @ np.diag(c_true) @ model.basis_x.T
        c_hat, y_hat = predict_unseen(gamma, model.basis_x, model.hyperparams.gamma2, model.dual)
        assert np.linalg.norm(c_hat - c_true) / np.linalg.norm(c_true) < 1e-6
        from cmopt.regression import predict

        assert y_hat == pytest.approx(predict(c_true, model.dual), rel=1e-5)

    def test_zero_matrix_explicit_sum(self, rng):
        model = _toy_model(rng, gamma2=0.5)
        c_hat, y_hat = predict_unseen(
            np.zeros((8, 8)), model.basis_x, model.hyperparams.gamma2, model.dual
        )
        assert np.array_equal(c_hat, np.zeros(3))
        expected = sum(
            model.dual.alpha[j] * kernel_eval(np.zeros(3), model.dual.anchors[:, j], SPEC)
            for j in range(5)
        )
        assert y_hat == pytest.approx(expected, rel=1e-12)

    def test_zero_dual_predicts_zero(self, rng):
        model = _toy_model(rng, gamma2=0.5)
        dual0 = RegressionDual(np.zeros(5), model.dual.anchors, SPEC, 1.0)
        model0 = FittedModel(model.basis_x, dual0, model.hyperparams, SPEC)
        g = rng.normal(size=(8, 8))
        _, y_hat = model0.predict_unseen((g + g.T) / 2)
        assert y_hat == 0.0

    def test_model_wrapper_matches_functions(self, rng):
        from cmopt.solver import build_qp as model_build_qp

        model = _toy_model(rng, gamma2=0.4)
        g = rng.normal(size=(8, 8))
        g = (g + g.T) / 2
        qp1 = model_build_qp(g, model)
        qp2 = build_qp(g, model.basis_x, 0.4)
        assert np.array_equal(qp1.h_bar, qp2.h_bar)
        assert np.array_equal(qp1.f_bar, qp2.f_bar)
        c1, y1 = model.predict_unseen(g)
        c2, y2 = predict_unseen(g, model.basis_x, 0.4, model.dual)
        assert np.array_equal(c1, c2) and y1 == y2
