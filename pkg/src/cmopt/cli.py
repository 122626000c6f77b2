"""Command-line interface: synth, fit, predict, cv, sweep.

Values resolve in three layers: built-in defaults, then a JSON ``--config``
file, then command-line flags (named identically to the config keys, with
dashes).  Domain errors map to distinct exit codes and a structured JSON
error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import (
    CmoError,
    ConfigError,
    DataFormatError,
    Hyperparams,
    KERNEL_PRESETS,
    KernelSpec,
    SolverError,
    TrustRegionConfig,
    ValidationError,
    select_rank,
)
from .evaluation import EvalReport, cross_validate, decoupled_baseline, grid_sweep
from .solver import fit
from .storage import (
    hyperparams_to_dict,
    load_cohort,
    load_model,
    save_cohort,
    save_model,
    spec_to_dict,
    write_json,
    write_table,
    write_trace,
)
from .synth import SynthConfig, generate

EXIT_CODES = {
    ConfigError: 2,
    ValidationError: 3,
    SolverError: 4,
    DataFormatError: 5,
}

_SOLVER_KEYS = {
    "lam": float, "gamma1": float, "gamma2": float, "gamma3": float,
    "rank_r": str, "prox_step": float, "dual_step": float, "x_inner_iters": int,
    "outer_tol": float, "max_outer_iters": int, "constraint_tol": float,
    "tr_delta0": float, "tr_delta_max": float, "tr_eta_accept": float,
    "tr_shrink": float, "tr_expand": float, "tr_max_iters": int, "tr_grad_tol": float,
}
_KERNEL_KEYS = {
    "kernel_preset": str, "sigma_sq": float, "rho": float, "ell": float,
    "include_exp": int, "include_poly": int,
}
_SYNTH_KEYS = {
    "p": int, "r": int, "n": int, "sparsity_x": float, "loading_scale": float,
    "noise_sigma": float, "score_noise_sigma": float,
}
_SWEEP_KEYS = ["lam", "gamma1", "gamma2", "gamma3", "rank_r", "sigma_sq", "rho", "ell"]


def _add_keys(parser: argparse.ArgumentParser, keys: dict) -> None:
    for name, typ in keys.items():
        parser.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="0 = auto")


def _resolve(args: argparse.Namespace, keys: dict) -> dict:
    """defaults <- config file <- CLI flags, restricted to known keys."""
    merged: dict = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            loaded = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - set(keys) - {"seed", "threads", "residualize", "folds"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for name in keys:
        cli_val = getattr(args, name, None)
        if cli_val is not None:
            merged[name] = cli_val
    return merged


def _resolve_scalar(args, merged, name, default):
    cli_val = getattr(args, name, None)
    if cli_val is not None:
        return cli_val
    return merged.get(name, default)


def _build_hyperparams(values: dict, cohort=None) -> Hyperparams:
    tr_kwargs = {}
    hp_kwargs = {}
    for key, val in values.items():
        if key.startswith("tr_"):
            tr_kwargs[key[3:]] = val
        elif key in _SOLVER_KEYS:
            hp_kwargs[key] = val
    rank = hp_kwargs.pop("rank_r", None)
    hp = Hyperparams(tr=TrustRegionConfig(**tr_kwargs), **hp_kwargs)
    if rank is not None:
        if str(rank) == "auto":
            if cohort is None:
                raise ConfigError("rank_r=auto needs an input cohort")
            hp = replace(hp, rank_r=select_rank(cohort))
        else:
            try:
                hp = replace(hp, rank_r=int(rank))
            except ValueError as exc:
                raise ConfigError(f"rank_r must be an integer or 'auto', got {rank!r}") from exc
    return hp


def _build_spec(values: dict) -> KernelSpec:
    preset = values.get("kernel_preset")
    if preset and preset not in KERNEL_PRESETS:
        raise ConfigError(f"unknown kernel preset {preset!r}; have {sorted(KERNEL_PRESETS)}")
    spec = KERNEL_PRESETS[preset] if preset else KernelSpec()
    kwargs = {}
    for key in ("sigma_sq", "rho", "ell"):
        if key in values:
            kwargs[key] = values[key]
    for key in ("include_exp", "include_poly"):
        if key in values:
            kwargs[key] = bool(values[key])
    return replace(spec, **kwargs) if kwargs else spec


def _check_out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    if not path.is_dir():
        raise ConfigError(f"output path {path} is not a directory")
    return path


def _check_in_path(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} path {path} does not exist")
    return path


def _full_echo(hp: Hyperparams, spec: KernelSpec, extra: dict) -> dict:
    echo = hyperparams_to_dict(hp)
    echo.update(spec_to_dict(spec))
    echo.update(extra)
    return echo


def cmd_synth(args) -> int:
    merged = _resolve(args, {**_SYNTH_KEYS, **_KERNEL_KEYS})
    seed = _resolve_scalar(args, merged, "seed", 0)
    spec = _build_spec(merged)
    cfg_kwargs = {k: merged[k] for k in _SYNTH_KEYS if k in merged}
    cfg = SynthConfig(spec=spec, seed=seed, **cfg_kwargs)
    out = _check_out_dir(args.out)

    cohort, truth = generate(cfg)
    save_cohort(cohort, out, matrix_format=args.matrix_format)
    echo = {**spec_to_dict(spec), **{k: getattr(cfg, k) for k in _SYNTH_KEYS}, "seed": seed}
    write_json(
        out / "groundtruth.json",
        {
            "config": echo,
            "true_x": truth.true_x.tolist(),
            "true_loadings": truth.true_loadings.tolist(),
            "true_alpha": truth.true_alpha.tolist(),
            "anchors": truth.anchors.tolist(),
            "clean_scores": truth.clean_scores.tolist(),
            "noisy_scores": truth.noisy_scores.tolist(),
        },
    )
    print(f"wrote cohort (N={cohort.n}, P={cohort.p}) to {out}")
    return 0


def _load_input_cohort(args, merged) -> tuple:
    residualize = bool(_resolve_scalar(args, merged, "residualize", 1))
    cohort = load_cohort(_check_in_path(args.cohort, "cohort"), residualize=residualize)
    return cohort, residualize


def cmd_fit(args) -> int:
    merged = _resolve(args, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    seed = _resolve_scalar(args, merged, "seed", 0)
    threads = _resolve_scalar(args, merged, "threads", 1)
    out = _check_out_dir(args.out)
    cohort, residualized = _load_input_cohort(args, merged)
    hp = _build_hyperparams(merged, cohort)
    spec = _build_spec(merged)

    def progress(it, bd):
        if it % 10 == 0:
            print(f"iter {it:4d} total={bd.total_j:.6e} resid={bd.constraint_residual:.3e}",
                  file=sys.stderr)

    model, trace = fit(cohort, hp, spec, seed=seed, threads=threads, callback=progress)
    echo = _full_echo(hp, spec, {"seed": seed, "residualize": int(residualized),
                                 "score_name": cohort.score_name})
    save_model(model, out / "model.bin")
    write_trace(out / "trace.tsv", trace, echo)
    summary = model.summary
    write_json(
        out / "summary.json",
        {
            "config": echo,
            "converged": trace.converged,
            "iterations": len(trace.records) - 1,
            "fit_term": summary.fit_term,
            "regression_term": summary.regression_term,
            "l1_x": summary.l1_x,
            "l2_c": summary.l2_c,
            "l2_w": summary.l2_w,
            "total_j": summary.total_j,
            "constraint_residual": summary.constraint_residual,
        },
    )
    print(f"fit {'converged' if trace.converged else 'hit the iteration cap'}; "
          f"total_j={summary.total_j:.6e}")
    return 0


def cmd_predict(args) -> int:
    merged = _resolve(args, {})
    model = load_model(_check_in_path(args.model, "model"))
    cohort, residualized = _load_input_cohort(args, merged)
    out = args.out
    _check_out_dir(out.parent if out.suffix else out)
    if not out.suffix:
        out = out / "predictions.tsv"

    r = model.basis_x.shape[1]
    rows = []
    for i in range(cohort.n):
        c_bar, y_hat = model.predict_unseen(cohort.matrices[i])
        rows.append((i, *[float(v) for v in c_bar], y_hat))
    echo = _full_echo(model.hyperparams, model.spec, {"residualize": int(residualized)})
    write_table(out, ["index", *[f"c_{j + 1}" for j in range(r)], "y_hat"], rows, echo)
    print(f"wrote {cohort.n} predictions to {out}")
    return 0


def _write_cv_outputs(out: Path, report: EvalReport, echo: dict) -> None:
    write_json(
        out / "report.json",
        {
            "config": echo,
            "aggregate": {
                "mae_train": report.mae_train, "mae_test": report.mae_test,
                "mi_train": report.mi_train, "mi_test": report.mi_test,
            },
            "folds": [
                {
                    "fold": fm.fold,
                    "test_indices": fm.test_indices.tolist(),
                    "mae_train": fm.mae_train, "mae_test": fm.mae_test,
                    "mi_train": fm.mi_train, "mi_test": fm.mi_test,
                }
                for fm in report.folds
            ],
        },
    )
    rows = [
        (i, int(report.fold_of[i]), report.y_true_test[i], report.y_pred_test[i])
        for i in range(report.y_true_test.shape[0])
    ]
    write_table(out / "predictions.tsv", ["index", "fold", "y_true", "y_pred"], rows, echo)
    train_rows = [
        (i, report.y_true_train[i], report.y_pred_train[i])
        for i in range(report.y_true_train.shape[0])
    ]
    write_table(out / "train_predictions.tsv", ["row", "y_true", "y_pred"], train_rows, echo)


def cmd_cv(args) -> int:
    merged = _resolve(args, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    seed = _resolve_scalar(args, merged, "seed", 0)
    threads = _resolve_scalar(args, merged, "threads", 1)
    folds = _resolve_scalar(args, merged, "folds", 10)
    out = _check_out_dir(args.out)
    cohort, residualized = _load_input_cohort(args, merged)
    hp = _build_hyperparams(merged, cohort)
    spec = _build_spec(merged)

    runner = decoupled_baseline if args.decoupled else cross_validate
    report = runner(cohort, hp, spec, folds=folds, seed=seed, threads=threads)
    echo = _full_echo(hp, spec, {
        "seed": seed, "folds": folds, "residualize": int(residualized),
        "decoupled": int(bool(args.decoupled)), "score_name": cohort.score_name,
    })
    _write_cv_outputs(out, report, echo)
    print(f"cv: pooled test MAE {report.mae_test:.4f}, MI {report.mi_test:.4f}")
    return 0


def cmd_sweep(args) -> int:
    merged = _resolve(args, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    seed = _resolve_scalar(args, merged, "seed", 0)
    threads = _resolve_scalar(args, merged, "threads", 1)
    folds = _resolve_scalar(args, merged, "folds", 10)
    out = _check_out_dir(args.out)
    cohort, residualized = _load_input_cohort(args, merged)
    hp = _build_hyperparams(merged, cohort)
    spec = _build_spec(merged)

    grid = {}
    for key in _SWEEP_KEYS:
        raw = getattr(args, f"sweep_{key}", None)
        if raw:
            try:
                typ = int if key == "rank_r" else float
                grid[key] = [typ(tok) for tok in raw.split(",") if tok]
            except ValueError as exc:
                raise ConfigError(f"--sweep-{key.replace('_', '-')}: {exc}") from exc
    if not grid:
        raise ConfigError("no sweep lists given; pass at least one --sweep-<param>")

    results = grid_sweep(cohort, hp, spec, grid, folds=folds, seed=seed, threads=threads)
    echo = _full_echo(hp, spec, {
        "seed": seed, "folds": folds, "residualize": int(residualized),
        "grid": {k: list(v) for k, v in grid.items()},
    })
    names = sorted(grid)
    rows = []
    payload = []
    for rank, res in enumerate(results):
        mae_val = res.report.mae_test if res.report else float("nan")
        mi_val = res.report.mi_test if res.report else float("nan")
        status = "ok" if res.report else f"failed: {res.error}"
        rows.append((rank, *[res.params[k] for k in names], mae_val, mi_val, status))
        payload.append({"rank": rank, "params": res.params, "mae_test": mae_val,
                        "mi_test": mi_val, "error": res.error})
    write_table(out / "sweep.tsv", ["rank", *names, "mae_test", "mi_test", "status"], rows, echo)
    write_json(out / "sweep.json", {"config": echo, "results": payload})
    best = results[0]
    print(f"sweep: best {best.params} with test MAE {best.mae_test:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmopt",
        description="Coupled low-rank factorization + kernel severity regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort with ground truth")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--matrix-format", choices=["binary", "text"], default="binary")
    _add_keys(p_synth, {**_SYNTH_KEYS, **_KERNEL_KEYS})
    _add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_fit = sub.add_parser("fit", help="fit the coupled model on a cohort directory")
    p_fit.add_argument("--cohort", type=Path, required=True)
    p_fit.add_argument("--out", type=Path, required=True)
    p_fit.add_argument("--residualize", type=int, choices=[0, 1], default=None)
    _add_keys(p_fit, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="score unseen matrices with a fitted model")
    p_pred.add_argument("--model", type=Path, required=True)
    p_pred.add_argument("--cohort", type=Path, required=True)
    p_pred.add_argument("--out", type=Path, required=True)
    p_pred.add_argument("--residualize", type=int, choices=[0, 1], default=None)
    _add_common(p_pred)
    p_pred.set_defaults(func=cmd_predict)

    p_cv = sub.add_parser("cv", help="cross-validate on a cohort directory")
    p_cv.add_argument("--cohort", type=Path, required=True)
    p_cv.add_argument("--out", type=Path, required=True)
    p_cv.add_argument("--folds", type=int, default=None)
    p_cv.add_argument("--residualize", type=int, choices=[0, 1], default=None)
    p_cv.add_argument("--decoupled", action="store_true",
                      help="run the decoupled factorization+kRR baseline instead")
    _add_keys(p_cv, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    _add_common(p_cv)
    p_cv.set_defaults(func=cmd_cv)

    p_sweep = sub.add_parser("sweep", help="grid-search hyperparameters by CV test MAE")
    p_sweep.add_argument("--cohort", type=Path, required=True)
    p_sweep.add_argument("--out", type=Path, required=True)
    p_sweep.add_argument("--folds", type=int, default=None)
    p_sweep.add_argument("--residualize", type=int, choices=[0, 1], default=None)
    for key in _SWEEP_KEYS:
        p_sweep.add_argument(f"--sweep-{key.replace('_', '-')}", type=str, default=None,
                             help=f"comma-separated {key} values")
    _add_keys(p_sweep, {**_SOLVER_KEYS, **_KERNEL_KEYS})
    _add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CmoError as exc:
        code = EXIT_CODES.get(type(exc), 6)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        return code
    except np.linalg.LinAlgError as exc:
        record = {"error": "LinAlgError", "message": str(exc), "exit_code": 4}
        print(json.dumps(record), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
