import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from spacetime_control.assembly import assemble_coupled_system
from spacetime_control.linalg import (GmresConfig, GmresError, ILU0, PivotWarning,
                                      SingularMatrixError, build_preconditioner, dense_solve,
                                      gmres, spmv, write_matrix_market)
from spacetime_control.problems import example1


def test_spmv_examples():
    x = np.array([1.0, 1.0])
    np.testing.assert_array_equal(spmv(sp.identity(2, format="csr"), x), x)
    np.testing.assert_array_equal(spmv(sp.csr_matrix([[2.0, 0.0], [1.0, 3.0]]), x), [2, 4])
    assert not np.any(spmv(sp.csr_matrix((3, 2)), x))
    with pytest.raises(ValueError):
        spmv(sp.identity(3, format="csr"), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.floats(0.01, 0.5), st.integers(0, 2 ** 31))
def test_spmv_matches_dense(n, density, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    x = rng.standard_normal(n)
    np.testing.assert_allclose(spmv(A, x), A.toarray() @ x, atol=1e-13)


def test_gmres_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, st_ = gmres(sp.identity(5, format="csr"), b)
    np.testing.assert_allclose(x, b)
    assert st_.iterations == 1 and st_.converged


def test_gmres_diagonal():
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 10, 40)
    b = rng.standard_normal(40)
    x, _ = gmres(sp.diags(d).tocsr(), b, GmresConfig(rel_tol=1e-12))
    np.testing.assert_allclose(x, b / d, atol=1e-10)


def test_gmres_zero_rhs():
    x, st_ = gmres(sp.identity(3, format="csr"), np.zeros(3))
    assert not np.any(x) and st_.converged


def test_gmres_failure_carries_best_iterate():
    n = 60
    A = sp.diags([np.ones(n - 1)], [1], shape=(n, n)) + sp.diags([1e-8], [-(n - 1)], shape=(n, n))
    b = np.zeros(n)
    b[-1] = 1.0
    with pytest.raises(GmresError) as exc:
        gmres(A.tocsr(), b, GmresConfig(rel_tol=1e-10, max_iters=10, restart=5,
                                       preconditioner="none"))
    assert exc.value.x.shape == (n,)
    assert not exc.value.stats.converged


def test_gmres_residual_monotone_within_cycle():
    rng = np.random.default_rng(5)
    A = sp.random(80, 80, density=0.1, random_state=rng) + 4 * sp.identity(80)
    _, st_ = gmres(A.tocsr(), rng.standard_normal(80), GmresConfig(rel_tol=1e-10, restart=80))
    h = np.array(st_.history)
    assert np.all(np.diff(h) <= 1e-12 * h[0])


def test_config_validation():
    with pytest.raises(ValueError):
        GmresConfig(rel_tol=0.0)
    with pytest.raises(ValueError):
        GmresConfig(restart=0)
    with pytest.raises(ValueError):
        GmresConfig(preconditioner="amg")


@pytest.fixture(scope="module")
def ex1_h4(mesh5):
    return assemble_coupled_system(mesh5, 0.01, example1().problem.u_d)


@pytest.fixture(scope="module")
def ex1_h8(mesh9):
    return assemble_coupled_system(mesh9, 0.01, example1().problem.u_d)


def _solve(system, kind, tol=1e-7):
    M = build_preconditioner(system.blocks, kind, system.interleaving())
    return gmres(system.matrix(), system.rhs(), GmresConfig(rel_tol=tol, preconditioner=kind),
                 M=M)


def test_ex1_converges_to_tolerance(ex1_h4):
    x, st_ = _solve(ex1_h4, "coupled_ilu0")
    A, b = ex1_h4.matrix(), ex1_h4.rhs()
    assert np.linalg.norm(b - A @ x) <= 1e-7 * np.linalg.norm(b)
    assert st_.rel_residual <= 1e-7


def test_preconditioned_agrees_with_plain(ex1_h4):
    x0, _ = _solve(ex1_h4, "none", 1e-12)
    for kind in ("block_jacobi", "block_ilu0", "coupled_ilu0", "direct"):
        x, _ = _solve(ex1_h4, kind, 1e-12)
        assert np.linalg.norm(x - x0) <= 1e-8 * np.linalg.norm(x0)


def test_ilu_reduces_iterations(ex1_h8):
    _, plain = _solve(ex1_h8, "none")
    _, block = _solve(ex1_h8, "block_ilu0")
    _, coupled = _solve(ex1_h8, "coupled_ilu0")
    assert block.iterations < plain.iterations
    assert coupled.iterations < plain.iterations


def test_preconditioner_none_and_jacobi_exact():
    d1, d2 = np.array([2.0, 4.0]), np.array([5.0])
    blocks = (sp.diags(d1).tocsr(), sp.csr_matrix((2, 1)), sp.csr_matrix((1, 2)),
              sp.diags(d2).tocsr())
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(build_preconditioner(blocks, "none")(v), v)
    np.testing.assert_allclose(build_preconditioner(blocks, "block_jacobi")(v),
                               v / np.concatenate([d1, d2]))


def test_ilu0_exact_on_tridiagonal():
    n = 30
    A = sp.diags([-np.ones(n - 1), 4 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()
    b = np.random.default_rng(1).standard_normal(n)
    np.testing.assert_allclose(ILU0(A).solve(b), np.linalg.solve(A.toarray(), b), atol=1e-12)


def test_ilu0_zero_pivot_perturbed():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 1.0]]))
    with pytest.warns(PivotWarning):
        f = ILU0(A)
    assert f.n_perturbed >= 1


def test_dense_solve():
    np.testing.assert_allclose(dense_solve(np.eye(3), [1.0, 2.0, 3.0]), [1, 2, 3])
    H = np.array([[1, 1 / 2, 1 / 3], [1 / 2, 1 / 3, 1 / 4], [1 / 3, 1 / 4, 1 / 5]])
    Hinv = np.array([[9, -36, 30], [-36, 192, -180], [30, -180, 180]], float)
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(dense_solve(H, b), Hinv @ b, rtol=1e-10)
    assert not np.any(dense_solve(H, np.zeros(3)))
    with pytest.raises(SingularMatrixError):
        dense_solve(np.ones((3, 3)), b)


def test_matrix_market_roundtrip(tmp_path):
    import scipy.io
    A = sp.random(7, 7, density=0.3, random_state=0, format="csr")
    write_matrix_market(tmp_path / "a.mtx", A)
    B = scipy.io.mmread(str(tmp_path / "a.mtx"))
    np.testing.assert_allclose(B.toarray(), A.toarray())
