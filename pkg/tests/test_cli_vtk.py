import numpy as np
import pytest

from spacetime_control.cli import main, parse_config_file, CliError
from spacetime_control.vtk import write_vtk


def _read_vtk(path):
    lines = path.read_text().splitlines()
    info = {}
    for i, line in enumerate(lines):
        head = line.split()
        if head and head[0] in ("POINTS", "CELLS", "CELL_TYPES", "POINT_DATA", "CELL_DATA"):
            info[head[0]] = int(head[1])
        if head and head[0] == "SCALARS":
            info.setdefault("scalars", []).append(head[1])
    return lines, info


def test_vtk_roundtrip(tmp_path, mesh5):
    p = write_vtk(tmp_path / "m", mesh5, point_data={"u": mesh5.vertices[:, 0]},
                  cell_data={"eta": np.arange(mesh5.n_cells, dtype=float)})
    assert p.suffix == ".vtk"
    lines, info = _read_vtk(p)
    assert lines[0].startswith("# vtk DataFile")
    assert info["POINTS"] == 125 and info["CELLS"] == 384 and info["CELL_TYPES"] == 384
    assert info["scalars"] == ["u", "eta"]
    k = lines.index("POINTS 125 double")
    pts = np.loadtxt(lines[k + 1:k + 126])
    np.testing.assert_array_equal(pts, mesh5.vertices)


def test_vtk_shape_check(tmp_path, mesh5):
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "m.vtk", mesh5, point_data={"u": np.zeros(3)})
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "m.vtk", mesh5, cell_data={"z": np.zeros(125)})


def test_config_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nproblem = ex3\n\nlevels=2  # two levels\n")
    assert parse_config_file(f) == {"problem": "ex3", "levels": "2"}
    f.write_text("problem ex3\n")
    with pytest.raises(CliError):
        parse_config_file(f)
    with pytest.raises(CliError):
        parse_config_file(tmp_path / "missing.cfg")


def test_cli_study(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["study", "--problem", "ex1", "--levels", "2", "--out-dir", str(out)]) == 0
    rows = (out / "study.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("#Dofs,h,err_Y_u")
    assert (out / "level_1.vtk").exists() and (out / "manifest.json").exists()
    assert "level 1" in capsys.readouterr().out


def test_cli_flags_override_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("problem = ex3\nlevels = 3\nvtk = false\n")
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--levels", "1", "--problem", "ex1",
                 "--out-dir", str(out)]) == 0
    text = (out / "manifest.json").read_text()
    assert '"levels": 1' in text and '"problem": "ex1"' in text
    assert not (out / "solution.vtk").exists()


def test_cli_infsup(tmp_path, capsys):
    assert main(["infsup", "--n", "3", "--rho", "0.01", "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    coupled = float(out.split("coupled inf-sup")[1].split()[0])
    assert coupled >= 0.3535
    assert (tmp_path / "infsup.csv").exists()


def test_cli_export(tmp_path):
    import scipy.io
    assert main(["export", "--problem", "ex4", "--levels", "1", "--out-dir",
                 str(tmp_path)]) == 0
    A = scipy.io.mmread(str(tmp_path / "system.mtx"))
    rhs = np.loadtxt(tmp_path / "rhs.txt")
    assert A.shape == (72, 72) and rhs.shape == (72,)


def test_cli_adapt_series(tmp_path):
    out = tmp_path / "a"
    assert main(["solve", "--problem", "ex5", "--constrained", "--adapt", "--steps", "3",
                 "--coarse-n", "8", "--out-dir", str(out)]) == 0
    rows = (out / "adapt.csv").read_text().splitlines()
    assert rows[0] == "step,#vertices,#DOFs,eta,J" and len(rows) == 4
    assert sorted(p.name for p in (out / "vtk").iterdir()) == \
        ["step_000.vtk", "step_001.vtk", "step_002.vtk"]


@pytest.mark.parametrize("argv", [
    ["solve", "--problem", "ex9"],
    ["solve", "--levels", "zero"],
    ["study", "--theta", "2"],
])
def test_cli_errors(tmp_path, argv, capsys):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cli_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["infsup", "--out-dir", str(blocker / "sub")]) == 2
    assert "not writable" in capsys.readouterr().err


def test_cli_malformed_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("levels\n")
    assert main(["solve", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_cli_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["plot"])
    assert exc.value.code == 2
