"""On-disk formats: cohort directories, model files, reports, plot data.

A cohort is a directory holding a JSON ``manifest`` plus one matrix file per
patient, either delimited text (one row per line) or little-endian binary
with an 8-byte magic.  All emitted files are bit-for-bit reproducible for a
fixed seed and configuration, and every artifact embeds its config echo.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import (
    CohortDataset,
    DataFormatError,
    Hyperparams,
    KernelSpec,
    TrustRegionConfig,
    validate_cohort,
)
from .core import residualize_first_eigenvector as _residualize
from .regression import RegressionDual
from .solver import FitTrace, FittedModel

MATRIX_MAGIC = b"CMOMAT01"
MODEL_MAGIC = b"CMOMDL01"
MODEL_VERSION = 1
MANIFEST_NAME = "manifest"

_HP_FIELDS = [
    "lam", "gamma1", "gamma2", "gamma3", "rank_r", "prox_step", "dual_step",
    "x_inner_iters", "outer_tol", "max_outer_iters", "constraint_tol",
]
_TR_FIELDS = ["delta0", "delta_max", "eta_accept", "shrink", "expand", "max_iters", "grad_tol"]
_SPEC_FIELDS = ["sigma_sq", "rho", "ell", "include_exp", "include_poly"]


def write_matrix_text(path: Path, mat: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in mat:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix_text(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad float ({exc})") from exc
    if not rows:
        raise DataFormatError(f"{path}: empty matrix file")
    width = len(rows[0])
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DataFormatError(f"{path}:{i}: expected {width} values, got {len(row)}")
    return np.asarray(rows, dtype=np.float64)


def write_matrix_binary(path: Path, mat: np.ndarray) -> None:
    p = mat.shape[0]
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<I", p))
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def read_matrix_binary(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MATRIX_MAGIC:
        raise DataFormatError(f"{path}: bad or missing matrix magic")
    (p,) = struct.unpack("<I", raw[8:12])
    expected = 12 + 8 * p * p
    if len(raw) != expected:
        raise DataFormatError(f"{path}: truncated, expected {expected} bytes got {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f8").reshape(p, p).copy()


def save_cohort(cohort: CohortDataset, directory, matrix_format: str = "binary") -> Path:
    """Write a cohort directory (manifest + one matrix file per patient)."""
    if matrix_format not in ("binary", "text"):
        raise DataFormatError(f"unknown matrix format {matrix_format!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "bin" if matrix_format == "binary" else "txt"
    files = [f"patient_{i:04d}.{ext}" for i in range(cohort.n)]
    for fname, mat in zip(files, cohort.matrices):
        if matrix_format == "binary":
            write_matrix_binary(directory / fname, mat)
        else:
            write_matrix_text(directory / fname, mat)
    manifest = {
        "format": "cmopt-cohort",
        "version": 1,
        "p": int(cohort.p),
        "n": int(cohort.n),
        "score_name": cohort.score_name,
        "matrix_format": matrix_format,
        "matrix_files": files,
        "scores": [float(s) for s in cohort.scores],
    }
    write_json(directory / MANIFEST_NAME, manifest)
    return directory


def load_cohort(directory, residualize: bool = True, validate: bool = True) -> CohortDataset:
    """Read a cohort directory; validates and (by default) residualizes.

    Residualization removes each matrix's top eigenpair contribution at
    ingestion so raw and residualized experiments share one pipeline.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataFormatError(f"{directory}: no manifest file")
    manifest = read_json(manifest_path)
    for key in ("p", "n", "score_name", "matrix_format", "matrix_files", "scores"):
        if key not in manifest:
            raise DataFormatError(f"{manifest_path}: missing key {key!r}")
    if len(manifest["matrix_files"]) != manifest["n"] or len(manifest["scores"]) != manifest["n"]:
        raise DataFormatError(f"{manifest_path}: matrix_files/scores length != n")

    reader = read_matrix_binary if manifest["matrix_format"] == "binary" else read_matrix_text
    mats = []
    for fname in manifest["matrix_files"]:
        mat = reader(directory / fname)
        if mat.shape[0] != manifest["p"]:
            raise DataFormatError(f"{fname}: P={mat.shape[0]} does not match manifest P={manifest['p']}")
        mats.append(mat)

    if validate:
        cohort = validate_cohort(mats, manifest["scores"], manifest["score_name"])
    else:
        cohort = CohortDataset(
            np.stack(mats), np.asarray(manifest["scores"], dtype=np.float64), manifest["score_name"]
        )
    if residualize:
        reduced = np.stack([_residualize(m) for m in cohort.matrices])
        cohort = CohortDataset(reduced, cohort.scores, cohort.score_name)
    return cohort


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc


def _pack_floats(values) -> bytes:
    return np.asarray(values, dtype="<f8").tobytes()


def save_model(model: FittedModel, path) -> Path:
    """Binary model file: magic, version, dims, params, basis, anchors, alpha."""
    path = Path(path)
    x = model.basis_x
    anchors = model.dual.anchors
    alpha = model.dual.alpha
    p, r = x.shape
    n = anchors.shape[1]
    hp = model.hyperparams
    spec = model.spec
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", MODEL_VERSION, p, r, n))
        fh.write(_pack_floats([float(getattr(spec, f)) for f in _SPEC_FIELDS]))
        fh.write(_pack_floats([float(getattr(hp, f)) for f in _HP_FIELDS]))
        fh.write(_pack_floats([float(getattr(hp.tr, f)) for f in _TR_FIELDS]))
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(anchors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(alpha, dtype="<f8").tobytes())
    return path


def load_model(path) -> FittedModel:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:8] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: bad or missing model magic")
    version, p, r, n = struct.unpack("<IIII", raw[8:24])
    if version != MODEL_VERSION:
        raise DataFormatError(f"{path}: unsupported model version {version}")
    n_params = len(_SPEC_FIELDS) + len(_HP_FIELDS) + len(_TR_FIELDS)
    expected = 24 + 8 * (n_params + p * r + r * n + n)
    if len(raw) != expected:
        raise DataFormatError(f"{path}: truncated, expected {expected} bytes got {len(raw)}")

    vals = np.frombuffer(raw[24:], dtype="<f8")
    i = 0
    spec_vals = vals[i : i + len(_SPEC_FIELDS)]; i += len(_SPEC_FIELDS)
    hp_vals = vals[i : i + len(_HP_FIELDS)]; i += len(_HP_FIELDS)
    tr_vals = vals[i : i + len(_TR_FIELDS)]; i += len(_TR_FIELDS)
    basis = vals[i : i + p * r].reshape(p, r).copy(); i += p * r
    anchors = vals[i : i + r * n].reshape(r, n).copy(); i += r * n
    alpha = vals[i : i + n].copy()

    spec = KernelSpec(
        sigma_sq=float(spec_vals[0]), rho=float(spec_vals[1]), ell=float(spec_vals[2]),
        include_exp=bool(spec_vals[3]), include_poly=bool(spec_vals[4]),
    )
    tr = TrustRegionConfig(
        delta0=float(tr_vals[0]), delta_max=float(tr_vals[1]), eta_accept=float(tr_vals[2]),
        shrink=float(tr_vals[3]), expand=float(tr_vals[4]), max_iters=int(tr_vals[5]),
        grad_tol=float(tr_vals[6]),
    )
    hp = Hyperparams(
        lam=float(hp_vals[0]), gamma1=float(hp_vals[1]), gamma2=float(hp_vals[2]),
        gamma3=float(hp_vals[3]), rank_r=int(hp_vals[4]), prox_step=float(hp_vals[5]),
        dual_step=float(hp_vals[6]), x_inner_iters=int(hp_vals[7]), tr=tr,
        outer_tol=float(hp_vals[8]), max_outer_iters=int(hp_vals[9]),
        constraint_tol=float(hp_vals[10]),
    )
    dual = RegressionDual(
        alpha=alpha, anchors=anchors, spec=spec,
        ridge=(hp.gamma3 / hp.lam if hp.lam > 0 else np.inf),
    )
    return FittedModel(basis_x=basis, dual=dual, hyperparams=hp, spec=spec, summary=None)


def _echo_lines(config: dict) -> list[str]:
    return [f"# {k}={config[k]}" for k in sorted(config)]


def write_table(path, header: list[str], rows, config: dict | None = None) -> None:
    """Delimited text table with a header row and '#' config-echo lines."""
    with open(path, "w") as fh:
        if config:
            fh.write("\n".join(_echo_lines(config)) + "\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_format_cell(v) for v in row) + "\n")


def _format_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_trace(path, trace: FitTrace, config: dict) -> None:
    """Fit trace table; wall time stays in memory only so files reproduce bitwise."""
    header = [
        "iteration", "fit_term", "regression_term", "l1_x", "l2_c", "l2_w",
        "total_j", "constraint_residual", "dual_step",
    ]
    rows = [
        (
            r.iteration, r.breakdown.fit_term, r.breakdown.regression_term,
            r.breakdown.l1_x, r.breakdown.l2_c, r.breakdown.l2_w,
            r.breakdown.total_j, r.breakdown.constraint_residual, r.dual_step,
        )
        for r in trace.records
    ]
    write_table(path, header, rows, config)


def hyperparams_to_dict(hp: Hyperparams) -> dict:
    d = asdict(hp)
    tr = d.pop("tr")
    d.update({f"tr_{k}": v for k, v in tr.items()})
    return d


def spec_to_dict(spec: KernelSpec) -> dict:
    return asdict(spec)
