import numpy as np
import pytest

from cmopt.core import (
    CohortDataset,
    Hyperparams,
    KernelSpec,
    TrustRegionConfig,
    ValidationError,
    mean_eigenvalue_curve,
    residualize_first_eigenvector,
    select_rank,
    validate_cohort,
)


class TestValidateCohort:
    def test_identity_matrices_valid(self):
        cohort = validate_cohort([np.eye(3), np.eye(3)], [1.0, 2.0])
        assert cohort.p == 3
        assert cohort.n == 2
        assert np.array_equal(cohort.scores, [1.0, 2.0])

    def test_asymmetry_rejected(self):
        bad = np.eye(3)
        bad[1, 2] = 0.5
        bad[2, 1] = 0.4
        with pytest.raises(ValidationError, match="asymmetric"):
            validate_cohort([np.eye(3), bad], [1.0, 2.0])

    def test_non_finite_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = np.nan
        with pytest.raises(ValidationError, match="non-finite"):
            validate_cohort([bad, np.eye(3)], [1.0, 2.0])

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValidationError, match="scores"):
            validate_cohort([np.eye(2), np.eye(2)], [1.0, np.inf])

    def test_mismatched_sizes_rejected(self):
        with pytest.raises(ValidationError):
            validate_cohort([np.eye(3), np.eye(4)], [1.0, 2.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            validate_cohort([np.eye(3)], [1.0, 2.0])

    def test_single_patient_rejected(self):
        with pytest.raises(ValidationError, match="N = 2"):
            validate_cohort([np.eye(3)], [1.0])

    def test_negative_definite_rejected(self):
        with pytest.raises(ValidationError, match="PSD"):
            validate_cohort([-np.eye(3), np.eye(3)], [1.0, 2.0])

    def test_validation_idempotent(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        mats = [a @ a.T, np.eye(4)]
        once = validate_cohort(mats, [0.5, 1.5])
        twice = validate_cohort(list(once.matrices), once.scores)
        assert np.array_equal(once.matrices, twice.matrices)
        assert np.array_equal(once.scores, twice.scores)


class TestResidualize:
    def test_rank_one_becomes_zero(self):
        v = np.array([1.0, 2.0, 2.0])
        v = v / np.linalg.norm(v)
        out = residualize_first_eigenvector(2.0 * np.outer(v, v))
        assert np.max(np.abs(out)) < 1e-12

    def test_diagonal_top_removed(self):
        out = residualize_first_eigenvector(np.diag([3.0, 1.0]))
        assert np.allclose(out, np.diag([0.0, 1.0]), atol=1e-12)

    def test_output_top_eigenvalue_is_second_of_input(self, rng):
        # oracle: full eigendecomposition of input and output
        a = rng.normal(size=(5, 5))
        g = a @ a.T
        in_eigs = np.linalg.eigvalsh(g)
        out = residualize_first_eigenvector(g)
        out_eigs = np.linalg.eigvalsh(out)
        assert abs(out_eigs[-1] - in_eigs[-2]) < 1e-10
        assert np.max(np.abs(out - out.T)) == 0.0

    def test_idempotent_on_effectively_rank_one(self, rng):
        # the residual of a (near-)rank-1 matrix is ~0, so a second pass is a no-op
        v = rng.normal(size=6)
        g = 3.0 * np.outer(v, v) / (v @ v)
        once = residualize_first_eigenvector(g)
        twice = residualize_first_eigenvector(once)
        assert np.max(np.abs(twice - once)) < 1e-8

    def test_psd_preserved(self, rng):
        a = rng.normal(size=(6, 6))
        g = a @ a.T
        out = residualize_first_eigenvector(g)
        assert np.linalg.eigvalsh(out)[0] > -1e-10

    def test_non_finite_rejected(self):
        bad = np.full((3, 3), np.nan)
        with pytest.raises(ValidationError):
            residualize_first_eigenvector(bad)


def _cohort_with_spectrum(eigs):
    """Two identical diagonal patients whose mean spectrum equals eigs."""
    mat = np.diag(np.asarray(eigs, dtype=float))
    return CohortDataset(np.stack([mat, mat]), np.array([0.0, 1.0]))


class TestSelectRank:
    def test_knee_at_the_drop(self):
        # oracle: direct second-difference scan of the stated spectrum
        eigs = [10.0, 9.0, 1.0, 0.9, 0.8]
        cohort = _cohort_with_spectrum(eigs)
        mu = mean_eigenvalue_curve(cohort)
        assert np.allclose(mu, eigs)
        padded = np.concatenate([mu, mu[-1:]])
        scores = {r: padded[r - 1] - 2 * padded[r] + padded[r + 1] for r in range(2, 5)}
        expected = min([r for r in scores if scores[r] == max(scores.values())])
        assert expected == 2
        assert select_rank(cohort) == 2

    def test_flat_spectrum_has_no_knee(self):
        with pytest.raises(ValidationError, match="knee"):
            select_rank(_cohort_with_spectrum([1.0, 1.0, 1.0, 1.0]))

    def test_too_small_p_rejected(self):
        with pytest.raises(ValidationError, match="P >= 3"):
            select_rank(_cohort_with_spectrum([2.0, 1.0]))


class TestConfigValidation:
    def test_kernel_spec_bounds(self):
        with pytest.raises(ValidationError):
            KernelSpec(sigma_sq=0.0).validate()
        with pytest.raises(ValidationError):
            KernelSpec(rho=-0.1).validate()
        with pytest.raises(ValidationError):
            KernelSpec(ell=1.0).validate()
        with pytest.raises(ValidationError):
            KernelSpec(include_exp=False, include_poly=False).validate()
        KernelSpec().validate()

    def test_trust_region_bounds(self):
        with pytest.raises(ValidationError):
            TrustRegionConfig(eta_accept=0.3).validate()
        with pytest.raises(ValidationError):
            TrustRegionConfig(shrink=1.5).validate()
        with pytest.raises(ValidationError):
            TrustRegionConfig(delta0=200.0, delta_max=100.0).validate()
        TrustRegionConfig().validate()

    def test_hyperparams_bounds(self):
        with pytest.raises(ValidationError):
            Hyperparams(gamma1=0.0).validate()
        with pytest.raises(ValidationError):
            Hyperparams(lam=-1.0).validate()
        with pytest.raises(ValidationError):
            Hyperparams(rank_r=0).validate()
        with pytest.raises(ValidationError):
            Hyperparams(rank_r=9).validate(p=8)
        # lam = 0 is the documented decoupled mode
        Hyperparams(lam=0.0).validate()
        assert Hyperparams(lam=2.0, gamma3=1.0).ridge == 0.5
        with pytest.raises(ValidationError):
            _ = Hyperparams(lam=0.0).ridge

    def test_paper_operating_point_is_default(self):
        hp = Hyperparams()
        assert (hp.lam, hp.gamma1, hp.gamma2, hp.gamma3, hp.rank_r) == (1.0, 10.0, 0.7, 1.0, 8)
        hp.validate(p=116)
