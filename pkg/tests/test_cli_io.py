import json

import numpy as np
import pytest

from cmopt.cli import main
from cmopt.core import DataFormatError, Hyperparams, KernelSpec
from cmopt.solver import fit
from cmopt.storage import (
    load_cohort,
    load_model,
    read_matrix_binary,
    read_matrix_text,
    save_cohort,
    save_model,
    write_matrix_binary,
    write_matrix_text,
)
from cmopt.synth import SynthConfig, generate
from test_solver import kernel_model_cohort

SPEC = KernelSpec()


class TestMatrixFiles:
    def test_binary_round_trip_bitwise(self, rng, tmp_path):
        mat = rng.normal(size=(7, 7))
        path = tmp_path / "m.bin"
        write_matrix_binary(path, mat)
        assert np.array_equal(read_matrix_binary(path), mat)

    def test_text_round_trip_exact(self, rng, tmp_path):
        mat = rng.normal(size=(5, 5)) * 1e-7
        path = tmp_path / "m.txt"
        write_matrix_text(path, mat)
        assert np.array_equal(read_matrix_text(path), mat)  # %.17g round-trips float64

    def test_truncated_binary_names_problem(self, tmp_path):
        path = tmp_path / "m.bin"
        write_matrix_binary(path, np.eye(4))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataFormatError, match="truncated"):
            read_matrix_binary(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(DataFormatError, match="magic"):
            read_matrix_binary(path)

    def test_bad_float_names_line(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("1.0 2.0\nnope 4.0\n")
        with pytest.raises(DataFormatError, match=":2"):
            read_matrix_text(path)

    def test_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("1.0 2.0\n3.0\n")
        with pytest.raises(DataFormatError, match="expected 2"):
            read_matrix_text(path)


class TestCohortStorage:
    def _cohort(self, rng):
        cfg = SynthConfig(p=8, r=2, n=5, noise_sigma=0.02, seed=1)
        cohort, _ = generate(cfg)
        return cohort

    @pytest.mark.parametrize("fmt", ["binary", "text"])
    def test_round_trip(self, rng, tmp_path, fmt):
        cohort = self._cohort(rng)
        save_cohort(cohort, tmp_path / "c", matrix_format=fmt)
        loaded = load_cohort(tmp_path / "c", residualize=False)
        assert np.array_equal(loaded.matrices, cohort.matrices)
        assert np.array_equal(loaded.scores, cohort.scores)
        assert loaded.score_name == cohort.score_name

    def test_residualize_flag_removes_top_component(self, rng, tmp_path):
        from cmopt.core import residualize_first_eigenvector

        cohort = self._cohort(rng)
        save_cohort(cohort, tmp_path / "c")
        loaded = load_cohort(tmp_path / "c", residualize=True)
        expected = residualize_first_eigenvector(cohort.matrices[0])
        assert np.allclose(loaded.matrices[0], expected, atol=1e-12)

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataFormatError, match="manifest"):
            load_cohort(tmp_path / "empty")

    def test_mismatched_p_rejected(self, rng, tmp_path):
        cohort = self._cohort(rng)
        save_cohort(cohort, tmp_path / "c", matrix_format="text")
        write_matrix_text(tmp_path / "c" / "patient_0002.txt", np.eye(3))
        with pytest.raises(DataFormatError, match="does not match manifest"):
            load_cohort(tmp_path / "c")

    def test_validation_propagates(self, rng, tmp_path):
        from cmopt.core import ValidationError

        cohort = self._cohort(rng)
        save_cohort(cohort, tmp_path / "c", matrix_format="text")
        bad = np.eye(8)
        bad[0, 1], bad[1, 0] = 0.5, -0.5
        write_matrix_text(tmp_path / "c" / "patient_0001.txt", bad)
        with pytest.raises(ValidationError, match="asymmetric"):
            load_cohort(tmp_path / "c")


class TestModelFile:
    def test_round_trip_bitwise(self, rng, tmp_path):
        cohort, _, _ = kernel_model_cohort(rng, p=10, r=2, n=8, noise=0.01)
        hp = Hyperparams(lam=1.0, gamma1=0.05, gamma2=0.05, rank_r=2,
                         outer_tol=3e-4, max_outer_iters=40)
        model, _ = fit(cohort, hp, SPEC, seed=0)
        save_model(model, tmp_path / "model.bin")
        loaded = load_model(tmp_path / "model.bin")
        assert np.array_equal(loaded.basis_x, model.basis_x)
        assert np.array_equal(loaded.dual.alpha, model.dual.alpha)
        assert np.array_equal(loaded.dual.anchors, model.dual.anchors)
        assert loaded.hyperparams == model.hyperparams
        assert loaded.spec == model.spec
        # predictions agree bitwise
        g = cohort.matrices[0]
        c1, y1 = model.predict_unseen(g)
        c2, y2 = loaded.predict_unseen(g)
        assert np.array_equal(c1, c2) and y1 == y2

    def test_truncated_model_rejected(self, rng, tmp_path):
        cohort, _, _ = kernel_model_cohort(rng, p=10, r=2, n=8, noise=0.01)
        hp = Hyperparams(lam=1.0, gamma1=0.05, gamma2=0.05, rank_r=2,
                         outer_tol=3e-4, max_outer_iters=30)
        model, _ = fit(cohort, hp, SPEC, seed=0)
        path = tmp_path / "model.bin"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataFormatError, match="truncated"):
            load_model(path)


def run_cli(*args):
    return main([str(a) for a in args])


SMALL = ["--p", "10", "--r", "2", "--n", "8", "--noise-sigma", "0.01",
         "--loading-scale", "1.5"]
FAST_FIT = ["--lam", "1.0", "--gamma1", "0.05", "--gamma2", "0.05", "--rank-r", "2",
            "--x-inner-iters", "2", "--outer-tol", "3e-4", "--max-outer-iters", "40",
            "--residualize", "0"]


class TestCli:
    def test_end_to_end_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run_cli("synth", "--out", data, *SMALL, "--seed", "3") == 0
        assert (data / "manifest").exists()
        assert (data / "groundtruth.json").exists()

        fit_dir = tmp_path / "fit"
        assert run_cli("fit", "--cohort", data, "--out", fit_dir, *FAST_FIT) == 0
        assert (fit_dir / "model.bin").exists()
        trace_lines = (fit_dir / "trace.tsv").read_text().splitlines()
        summary = json.loads((fit_dir / "summary.json").read_text())
        header = next(l for l in trace_lines if not l.startswith("#")).split("\t")
        last = trace_lines[-1].split("\t")
        assert float(last[header.index("total_j")]) == summary["total_j"]

        pred_dir = tmp_path / "pred"
        assert run_cli("predict", "--model", fit_dir / "model.bin", "--cohort", data,
                       "--out", pred_dir, "--residualize", "0") == 0
        rows = [l for l in (pred_dir / "predictions.tsv").read_text().splitlines()
                if not l.startswith("#")]
        assert len(rows) == 1 + 8  # header + one row per patient

        cv_dir = tmp_path / "cv"
        assert run_cli("cv", "--cohort", data, "--out", cv_dir, "--folds", "4",
                       *FAST_FIT, "--seed", "0") == 0
        cv_rows = [l for l in (cv_dir / "predictions.tsv").read_text().splitlines()
                   if not l.startswith("#")]
        assert len(cv_rows) == 1 + 8  # exactly N predicted-vs-true rows
        report = json.loads((cv_dir / "report.json").read_text())
        assert "aggregate" in report and "config" in report

        sweep_dir = tmp_path / "sweep"
        assert run_cli("sweep", "--cohort", data, "--out", sweep_dir, "--folds", "4",
                       *FAST_FIT, "--sweep-gamma2", "0.05,0.2") == 0
        sweep = json.loads((sweep_dir / "sweep.json").read_text())
        assert len(sweep["results"]) == 2

    def test_outputs_bit_for_bit_reproducible(self, tmp_path):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, *SMALL, "--seed", "7")
        out1, out2 = tmp_path / "f1", tmp_path / "f2"
        run_cli("fit", "--cohort", data, "--out", out1, *FAST_FIT, "--seed", "1")
        run_cli("fit", "--cohort", data, "--out", out2, *FAST_FIT, "--seed", "1")
        for name in ("model.bin", "trace.tsv", "summary.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_synth_reproducible(self, tmp_path):
        d1, d2 = tmp_path / "a1", tmp_path / "a2"
        run_cli("synth", "--out", d1, *SMALL, "--seed", "5")
        run_cli("synth", "--out", d2, *SMALL, "--seed", "5")
        assert (d1 / "manifest").read_bytes() == (d2 / "manifest").read_bytes()
        assert (d1 / "patient_0000.bin").read_bytes() == (d2 / "patient_0000.bin").read_bytes()
        assert (d1 / "groundtruth.json").read_bytes() == (d2 / "groundtruth.json").read_bytes()

    def test_missing_cohort_is_config_error(self, tmp_path, capsys):
        code = run_cli("fit", "--cohort", tmp_path / "nope", "--out", tmp_path / "out")
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "ConfigError"

    def test_validation_error_exit_code(self, tmp_path, capsys):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, *SMALL, "--seed", "1", "--matrix-format", "text")
        bad = np.eye(10)
        bad[0, 1], bad[1, 0] = 0.5, -0.5
        write_matrix_text(data / "patient_0000.txt", bad)
        code = run_cli("fit", "--cohort", data, "--out", tmp_path / "out", *FAST_FIT)
        assert code == 3

    def test_parse_error_exit_code(self, tmp_path):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, *SMALL, "--seed", "1", "--matrix-format", "binary")
        (data / "patient_0000.bin").write_bytes(b"garbage!")
        code = run_cli("fit", "--cohort", data, "--out", tmp_path / "out", *FAST_FIT)
        assert code == 5

    def test_config_file_with_override(self, tmp_path):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, *SMALL, "--seed", "2")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "lam": 1.0, "gamma1": 0.05, "gamma2": 0.9, "rank_r": 2,
            "x_inner_iters": 2, "outer_tol": 3e-4, "max_outer_iters": 40,
            "residualize": 0,
        }))
        out = tmp_path / "out"
        assert run_cli("fit", "--cohort", data, "--out", out, "--config", cfg_path,
                       "--gamma2", "0.05") == 0
        echo = json.loads((out / "summary.json").read_text())["config"]
        assert echo["gamma2"] == 0.05  # CLI flag wins over the config file
        assert echo["gamma1"] == 0.05

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, *SMALL, "--seed", "2")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"gamma9": 1.0}))
        assert run_cli("fit", "--cohort", data, "--out", tmp_path / "o",
                       "--config", cfg_path) == 2

    def test_rank_auto_uses_knee(self, tmp_path):
        data = tmp_path / "data"
        run_cli("synth", "--out", data, "--p", "40", "--r", "4", "--n", "60",
                "--noise-sigma", "0.01", "--seed", "0")
        out = tmp_path / "out"
        assert run_cli("fit", "--cohort", data, "--out", out, "--rank-r", "auto",
                       "--lam", "1.0", "--gamma1", "0.05", "--gamma2", "0.05",
                       "--x-inner-iters", "2", "--outer-tol", "1e-3",
                       "--max-outer-iters", "12", "--residualize", "0") == 0
        echo = json.loads((out / "summary.json").read_text())["config"]
        assert echo["rank_r"] == 4
