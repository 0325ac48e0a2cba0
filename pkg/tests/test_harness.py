import json
import math

import numpy as np
import pytest

from spacetime_control.fem import interpolate
from spacetime_control.harness import (DenseBudgetError, RunConfig, convergence_study, eoc,
                                       inf_sup_coupled, inf_sup_state, l2_norm_error,
                                       state_form_singular_values, write_manifest,
                                       y_norm_error)
from spacetime_control.mesh import build_unit_cube_mesh
from spacetime_control.problems import A_COEF, B_COEF, example1

LOWER = 1 / (2 * math.sqrt(2)) - 1e-10
UPPER = math.sqrt(2) + 1e-10


def test_y_error_of_affine_interpolant_is_zero(mesh5):
    g = lambda X: 2 * X[..., 0] - 3 * X[..., 1] + X[..., 2]
    gg = lambda X: np.stack([2 * np.ones(X.shape[:-1]), -3 * np.ones(X.shape[:-1])], axis=-1)
    assert y_norm_error(interpolate(g, mesh5), gg, mesh5) < 1e-13
    f = lambda X: X[..., 0] ** 2
    grad = lambda X: np.stack([2 * X[..., 0], np.zeros(X.shape[:-1])], axis=-1)
    assert y_norm_error(interpolate(f, mesh5), grad, mesh5) > 0


def test_y_norm_of_exact_u(mesh9):
    spec = example1()
    a, b = A_COEF, B_COEF
    exact = math.sqrt(math.pi ** 2 / 2 * (a * a / 5 + a * b / 2 + b * b / 3))
    assert y_norm_error(None, spec.grad_x_u, mesh9) == pytest.approx(exact, rel=1e-6)


def test_l2_error_examples(mesh5):
    spec = example1()
    assert l2_norm_error(None, None, mesh5) == 0.0
    f = lambda X: 1 + X[..., 0] + X[..., 2]
    assert l2_norm_error(interpolate(f, mesh5), f, mesh5) < 1e-14
    cells = np.full(mesh5.n_cells, 2.0)
    assert l2_norm_error(cells, lambda X: 2.0 + 0 * X[..., 0], mesh5) < 1e-14
    assert l2_norm_error(interpolate(spec.exact_u, mesh5), spec.exact_u, mesh5) > 0


def test_eoc_examples():
    np.testing.assert_allclose(eoc([0.2, 0.1, 0.05]), [1.0, 1.0])
    assert eoc([0.3, 0.3, 0.3]) == [0.0, 0.0]
    table = example1().reference_tables["err_Y_u"]
    np.testing.assert_allclose(eoc(table), [0.959, 1.007, 1.012, 1.008, 1.004], atol=1e-3)
    r = eoc([0.1, 0.0, 0.05])
    assert math.isnan(r[0]) and math.isnan(r[1])
    assert eoc([0.1]) == []
    with pytest.raises(ValueError):
        eoc([0.2, 0.1], hs=[0.25, 0.2])
    assert eoc([0.2, 0.1], hs=[0.25, 0.125]) == [1.0]


def test_run_config_parsing():
    cfg = RunConfig.from_mapping({"problem": "ex3", "levels": "2", "vtk": "no",
                                  "rho": "1e-3", "gmres-tol": "1e-9"})
    assert (cfg.problem, cfg.levels, cfg.vtk, cfg.rho, cfg.gmres_tol) == \
        ("ex3", 2, False, 1e-3, 1e-9)
    assert cfg.benchmark().problem.rho == 1e-3
    for bad in ({"levels": "0"}, {"vtk": "maybe"}, {"unknown": "1"}, {"theta": "1.5"},
                {"levels": "two"}, {"layout": "hex"}, {"preconditioner": "amg"}):
        with pytest.raises(ValueError):
            RunConfig.from_mapping(bad)


def test_single_level_study_and_dof_count(tmp_path):
    cfg = RunConfig(problem="ex1", levels=1)
    recs = convergence_study(cfg, csv_path=tmp_path / "a.csv")
    assert len(recs) == 1 and recs[0].n_dofs == 250
    assert all(math.isnan(getattr(recs[0], k)) for k in ("eoc_Y_u", "eoc_J"))
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0].startswith("#Dofs,h,err_Y_u,eoc_Y_u")
    assert rows[1].split(",")[0] == "250" and "-" in rows[1].split(",")


def test_study_csv_bit_stable(tmp_path):
    cfg = RunConfig(problem="ex3", levels=2)
    convergence_study(cfg, csv_path=tmp_path / "a.csv")
    convergence_study(cfg, csv_path=tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a.csv").read_text().splitlines()[2].startswith("1458,")


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("layout", ["prism", "kuhn"])
def test_state_inf_sup(n, layout):
    lo, hi = state_form_singular_values(build_unit_cube_mesh(n + 1, layout))
    assert lo >= LOWER and hi <= UPPER


@pytest.mark.parametrize("n, rho", [(2, 1.0), (3, 0.01), (3, 0.04), (2, 0.25)])
def test_coupled_inf_sup(n, rho):
    assert inf_sup_coupled(build_unit_cube_mesh(n + 1), rho) >= LOWER


def test_inf_sup_plain_y_norm_smaller():
    m = build_unit_cube_mesh(4)
    assert inf_sup_state(m, use_discrete_X0h_norm=False) >= inf_sup_state(m) - 1e-12


def test_dense_budget():
    with pytest.raises(DenseBudgetError):
        inf_sup_state(build_unit_cube_mesh(10))
    with pytest.raises(ValueError):
        inf_sup_coupled(build_unit_cube_mesh(3), 0.0)


def test_manifest(tmp_path):
    path = write_manifest(tmp_path, RunConfig(), "study", {"x": np.float64(1.5),
                                                         "y": float("nan")}, 0.0)
    data = json.loads(path.read_text())
    assert data["command"] == "study"
    assert data["config"]["problem"] == "ex1"
    assert data["results"] == {"x": 1.5, "y": None}
