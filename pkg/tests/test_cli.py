import json
import subprocess
import sys

import numpy as np
import pytest

from cvfe_ions.cli import main
from cvfe_ions.io import read_csv, read_vtk


def write_config(tmp_path, **cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def history(path):
    header, rows = read_csv(path)
    return header, np.array([[float(v) for v in r] for r in rows])


@pytest.fixture(scope="module")
def three_steps(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp, scenario="test1", T=0.015)
    assert main(["--quiet", "run", cfg, "--out", str(tmp / "a"), "--snapshot-stride", "2"]) == 0
    assert main(["--quiet", "run", cfg, "--out", str(tmp / "b")]) == 0
    return tmp


class TestRun:
    def test_history_rows_and_masses(self, three_steps):
        header, data = history(three_steps / "a" / "history.csv")
        assert data.shape[0] == 4
        np.testing.assert_array_equal(data[:, 0], [0, 1, 2, 3])
        M = data[:, header.index("M_1"):header.index("M_2") + 1]
        assert np.max(np.abs(M - M[0])) <= 1e-11
        np.testing.assert_allclose(M[0], [0.015, 0.04], rtol=1e-13)
        closure = data[:, header.index("M_0"):header.index("M_2") + 1].sum(axis=1)
        assert np.max(np.abs(closure - 0.1)) <= 1e-12
        assert np.all(data[1:, header.index("newton_iters")] >= 1)
        assert np.all(data[1:, header.index("residual")] <= 1e-10)

    def test_snapshots(self, three_steps):
        names = sorted(p.name for p in (three_steps / "a").glob("field_*.vtk"))
        assert names == ["field_0.vtk", "field_2.vtk", "field_3.vtk"]
        grid = read_vtk((three_steps / "a" / "field_3.vtk").read_text())
        assert list(grid.point_data) == ["u0", "u1", "u2", "phi"] and len(grid.points) == 165
        assert not list((three_steps / "b").glob("*.vtk"))

    def test_byte_identical_rerun(self, three_steps):
        assert (three_steps / "a" / "history.csv").read_bytes() == (three_steps / "b" / "history.csv").read_bytes()

    def test_neutral_entropy_non_increasing(self, tmp_path):
        cfg = write_config(tmp_path, scenario="test1-neutral", T=0.05)
        assert main(["--quiet", "run", cfg, "--out", str(tmp_path)]) == 0
        header, data = history(tmp_path / "history.csv")
        assert np.all(np.diff(data[:, header.index("entropy")]) <= 1e-12)

    def test_output_dir_from_config(self, tmp_path):
        cfg = write_config(tmp_path, scenario="test1", T=0.005, output={"dir": "res", "snapshot_stride": 1})
        assert main(["--quiet", "run", cfg]) == 0
        assert (tmp_path / "res" / "history.csv").exists() and (tmp_path / "res" / "field_1.vtk").exists()

    def test_missing_mesh_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="test1", mesh={"file": "nope.msh"})
        assert main(["--quiet", "run", cfg]) != 0
        assert "nope.msh" in capsys.readouterr().err

    def test_bad_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="test1", newton={"maxiter": 3})
        assert main(["run", cfg]) == 1
        assert "newton.maxiter" in capsys.readouterr().err

    def test_step_failure_exit(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="test1", T=0.005, newton={"max_iterations": 1, "substep_retries": 0})
        assert main(["--quiet", "run", cfg, "--out", str(tmp_path)]) == 1
        assert "error:" in capsys.readouterr().err


class TestCheck:
    def test_passes(self, capsys):
        assert main(["check"]) == 0
        out = capsys.readouterr().out
        assert "5/5 checks passed" in out and "FAIL" not in out

    def test_perturbed_stiffness_fails(self, capsys):
        assert main(["check", "--perturb-stiffness", "1e-3"]) == 1
        lines = capsys.readouterr().out.splitlines()
        assert any("FAIL" in ln and "poisson" in ln.lower() for ln in lines)


class TestConvergence:
    def test_one_level_is_invalid(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="test1")
        assert main(["--quiet", "convergence", cfg, "--levels", "1"]) == 1
        assert "levels" in capsys.readouterr().err

    def test_small_study(self, tmp_path, capsys):
        cfg = write_config(tmp_path, scenario="test1", T=0.02,
                           mesh={"generator": "rect", "n": [8, 1], "bounds": [[0, 1], [0, 0.1]]})
        assert main(["--quiet", "convergence", cfg, "--levels", "2", "--variant", "both", "--out", str(tmp_path)]) == 0
        assert "fitted slope" in capsys.readouterr().out
        for v in ("mean", "max"):
            header, rows = read_csv(tmp_path / f"convergence_{v}.csv")
            assert header == ["h", "n_vertices", "error", "rate"] and len(rows) == 2
            assert rows[0][3] == "" and float(rows[1][3]) > 0


class TestEntryPoint:
    def test_no_arguments(self):
        proc = subprocess.run([sys.executable, "-m", "cvfe_ions"], capture_output=True, text=True)
        assert proc.returncode == 2 and "usage" in proc.stderr

    def test_help(self):
        proc = subprocess.run([sys.executable, "-m", "cvfe_ions", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "perturb" not in proc.stdout
