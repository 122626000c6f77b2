"""Cross-validation harness, MAE/MI metrics, decoupled baseline, grid sweep."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CohortDataset, Hyperparams, KernelSpec, ValidationError
from .regression import predict_many, solve_dual
from .solver import FittedModel, fit


def mae(y_true, y_pred) -> float:
    """Median absolute error; even-length medians average the central pair."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise ValidationError(f"need equal nonzero lengths, got {y_true.shape}, {y_pred.shape}")
    return float(np.median(np.abs(y_true - y_pred)))


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    # summing sorted terms makes the estimator exactly symmetric in its inputs
    return float(-np.sum(np.sort(p * np.log2(p))))


def mutual_information(y_true, y_pred, bins: int = 8) -> float:
    """Histogram mutual information in bits, equal-width bins per variable.

    Zero-count cells contribute nothing; a constant input has zero range and
    the estimator is defined as 0 there.  Always >= 0 and symmetric.
    """
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.size < 2 or a.shape != b.shape:
        raise ValidationError(f"need equal lengths >= 2, got {a.shape}, {b.shape}")
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    if float(a.max() - a.min()) == 0.0 or float(b.max() - b.min()) == 0.0:
        return 0.0
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[a.min(), a.max()], [b.min(), b.max()]])
    h_a = _entropy_bits(joint.sum(axis=1))
    h_b = _entropy_bits(joint.sum(axis=0))
    h_ab = _entropy_bits(joint.ravel())
    return max(h_a + h_b - h_ab, 0.0)


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    test_indices: np.ndarray
    mae_train: float
    mae_test: float
    mi_train: float
    mi_test: float


@dataclass(frozen=True)
class EvalReport:
    """Per-fold and pooled cross-validation metrics.

    Aggregate MAE is the median absolute error pooled over all held-out
    predictions; aggregate MI is computed on the pooled prediction pairs.
    """

    folds: list[FoldMetrics]
    mae_train: float
    mae_test: float
    mi_train: float
    mi_test: float
    y_true_test: np.ndarray  # pooled, original cohort order
    y_pred_test: np.ndarray
    y_true_train: np.ndarray  # pooled over folds (each sample folds-1 times)
    y_pred_train: np.ndarray
    fold_of: np.ndarray  # fold index of each sample's test appearance
    config: dict = field(default_factory=dict)


def fold_assignments(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffled near-equal partition; every index lands in one fold."""
    if folds < 2 or folds > n:
        raise ValidationError(f"need 2 <= folds <= N, got folds={folds}, N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def _config_echo(hp: Hyperparams, spec: KernelSpec, folds: int, seed: int) -> dict:
    return {
        "lam": hp.lam, "gamma1": hp.gamma1, "gamma2": hp.gamma2, "gamma3": hp.gamma3,
        "rank_r": hp.rank_r, "sigma_sq": spec.sigma_sq, "rho": spec.rho, "ell": spec.ell,
        "include_exp": spec.include_exp, "include_poly": spec.include_poly,
        "folds": folds, "seed": seed,
    }


def _evaluate_folds(cohort, hp, spec, folds, seed, threads, fit_one):
    """Shared CV loop: fit_one(train_cohort) -> (model, train_predictions)."""
    n = cohort.n
    assignments = fold_assignments(n, folds, seed)
    y_pred_test = np.empty(n)
    fold_of = np.empty(n, dtype=int)
    pooled_train_true: list[np.ndarray] = []
    pooled_train_pred: list[np.ndarray] = []
    per_fold = []

    for f, test_idx in enumerate(assignments):
        train_mask = np.ones(n, dtype=bool)
        train_mask[test_idx] = False
        train_idx = np.flatnonzero(train_mask)
        train = cohort.subset(train_idx)
        try:
            model, train_pred = fit_one(train)
        except Exception as exc:
            raise type(exc)(f"fold {f}: {exc}") from exc

        test_pred = np.array(
            [model.predict_unseen(cohort.matrices[i])[1] for i in test_idx]
        )
        y_pred_test[test_idx] = test_pred
        fold_of[test_idx] = f
        pooled_train_true.append(train.scores)
        pooled_train_pred.append(train_pred)
        # MI needs two samples; leave-one-out folds report 0 for the singleton
        mi_test = (
            mutual_information(cohort.scores[test_idx], test_pred) if test_idx.size >= 2 else 0.0
        )
        per_fold.append(
            FoldMetrics(
                fold=f,
                test_indices=test_idx,
                mae_train=mae(train.scores, train_pred),
                mae_test=mae(cohort.scores[test_idx], test_pred),
                mi_train=mutual_information(train.scores, train_pred),
                mi_test=mi_test,
            )
        )

    y_tr = np.concatenate(pooled_train_true)
    p_tr = np.concatenate(pooled_train_pred)
    return EvalReport(
        folds=per_fold,
        mae_train=mae(y_tr, p_tr),
        mae_test=mae(cohort.scores, y_pred_test),
        mi_train=mutual_information(y_tr, p_tr),
        mi_test=mutual_information(cohort.scores, y_pred_test),
        y_true_test=cohort.scores.copy(),
        y_pred_test=y_pred_test,
        y_true_train=y_tr,
        y_pred_train=p_tr,
        fold_of=fold_of,
        config=_config_echo(hp, spec, folds, seed),
    )


def cross_validate(
    cohort: CohortDataset,
    hp: Hyperparams,
    spec: KernelSpec,
    folds: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """K-fold cross-validation of the coupled model.

    Each fold fits from its own initialization on the training split and
    scores the held-out patients through the unseen-patient QP.  The fold
    assignment is a seeded shuffle shared with the decoupled baseline.
    """

    def fit_one(train: CohortDataset):
        model, _ = fit(train, hp, spec, seed=seed, threads=threads)
        return model, model.predict_training()

    return _evaluate_folds(cohort, hp, spec, folds, seed, threads, fit_one)


def decoupled_baseline(
    cohort: CohortDataset,
    hp: Hyperparams,
    spec: KernelSpec,
    folds: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Factorization-only fit followed by post-hoc kernel ridge regression.

    The matrix decomposition runs with lam = 0 (no score coupling); the
    regression dual is then solved once on the frozen training loadings with
    the same ridge gamma3 / lam the coupled model would use.  Fold
    assignments match cross_validate under the same seed.
    """
    if hp.lam <= 0:
        raise ValidationError("decoupled_baseline needs hp.lam > 0 for the post-hoc ridge")
    hp_fac = hp.with_lam(0.0)
    ridge = hp.ridge

    def fit_one(train: CohortDataset):
        model, _ = fit(train, hp_fac, spec, seed=seed, threads=threads)
        dual = solve_dual(model.loadings, train.scores, spec, ridge)
        post = FittedModel(
            basis_x=model.basis_x,
            dual=dual,
            hyperparams=hp,
            spec=spec,
            summary=model.summary,
        )
        return post, predict_many(model.loadings, dual)

    report = _evaluate_folds(cohort, hp, spec, folds, seed, threads, fit_one)
    report.config["decoupled"] = True
    return report


@dataclass(frozen=True)
class SweepResult:
    params: dict
    report: EvalReport | None
    error: str | None

    @property
    def mae_test(self) -> float:
        return self.report.mae_test if self.report is not None else np.inf


def grid_sweep(
    cohort: CohortDataset,
    hp_base: Hyperparams,
    spec_base: KernelSpec,
    grid: dict[str, list],
    folds: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> list[SweepResult]:
    """Cross-validate every grid point and rank by pooled test MAE.

    ``grid`` maps parameter names (lam, gamma1, gamma2, gamma3, rank_r,
    sigma_sq, rho, ell) to value lists.  Failed configurations are recorded
    and skipped; ties break by lexicographic parameter order, so the ranking
    is deterministic.
    """
    if not grid:
        raise ValidationError("sweep grid is empty")
    hp_keys = {"lam", "gamma1", "gamma2", "gamma3", "rank_r"}
    spec_keys = {"sigma_sq", "rho", "ell"}
    unknown = set(grid) - hp_keys - spec_keys
    if unknown:
        raise ValidationError(f"unknown sweep parameters: {sorted(unknown)}")

    names = sorted(grid)
    results = []
    for values in itertools.product(*(grid[k] for k in names)):
        params = dict(zip(names, values))
        hp = replace(hp_base, **{k: v for k, v in params.items() if k in hp_keys})
        spec = replace(spec_base, **{k: v for k, v in params.items() if k in spec_keys})
        try:
            report = cross_validate(cohort, hp, spec, folds=folds, seed=seed, threads=threads)
            results.append(SweepResult(params, report, None))
        except Exception as exc:  # sweep must survive bad configs
            results.append(SweepResult(params, None, f"{type(exc).__name__}: {exc}"))

    def sort_key(res: SweepResult):
        return (res.mae_test, tuple(res.params[k] for k in names))

    return sorted(results, key=sort_key)
