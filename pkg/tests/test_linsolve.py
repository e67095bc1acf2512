import numpy as np
import pytest
import scipy.sparse as sp

from llgadapt import fem, linsolve
from llgadapt.errors import IterativeFailure, SolverFailure
from llgadapt.fem import FESpace, FieldCoeffs
from llgadapt.linsolve import SaddleSystem
from llgadapt.mesh import create_rect_mesh


def _space(n=4, p=1):
    return FESpace(create_rect_mesh(((0.0, 0.0), (1.0, 1.0)), n, n), p)


def _llg_like_system(space, rng, alpha=1.0):
    mhat = FieldCoeffs(space, rng.normal(size=(3, space.ndof))).normalized()
    M = space.mass()
    I3 = sp.identity(3, format="csr")
    A = alpha * sp.kron(I3, M, format="csr") + fem.assemble_cross(space, mhat)
    B = fem.assemble_constraint(space, mhat)
    f = fem.assemble_load(space, lambda X: np.tile([1.0, 0.0, 0.0], (X.shape[0], 1)))
    return SaddleSystem(A, B, f)


class TestDirect:
    def test_identity_block(self):
        n = 5
        A = sp.identity(3 * n, format="csr")
        B = sp.csr_matrix((0, 3 * n))
        f = np.zeros(3 * n)
        f[0] = 1.0
        v, lam, rep = linsolve.solve_direct(SaddleSystem(A, B, f))
        assert np.allclose(v, f)
        assert lam.size == 0
        assert rep.residual <= 1e-10

    def test_constraint_enforced(self):
        rng = np.random.default_rng(0)
        space = _space()
        zhat = FieldCoeffs(space, np.vstack([np.zeros(space.ndof),
                                             np.zeros(space.ndof),
                                             np.ones(space.ndof)]))
        M = space.mass()
        I3 = sp.identity(3, format="csr")
        A = sp.kron(I3, M, format="csr") + fem.assemble_cross(space, zhat)
        B = fem.assemble_constraint(space, zhat)
        f = fem.assemble_load(space, lambda X: np.tile([1.0, 0, 0], (X.shape[0], 1)))
        sys = SaddleSystem(A, B, f)
        v, lam, rep = linsolve.solve_direct(sys)
        assert np.abs(B @ v).max() <= 1e-10

    def test_two_by_two_analytic(self):
        A = sp.csr_matrix(np.array([[2.0]]))
        B = sp.csr_matrix(np.array([[1.0]]))
        # [[2, 1], [1, 0]] [x, y] = [3, 1] -> x = 1, y = 1
        sys = SaddleSystem(A, B, np.array([3.0]))
        S, rhs = sys.monolithic()
        rhs_full = rhs.copy()
        rhs_full[1] = 1.0
        import scipy.sparse.linalg as spla
        x = spla.spsolve(S.tocsc(), rhs_full)
        assert np.allclose(x, [1.0, 1.0])

    def test_singular_matrix_raises(self):
        A = sp.csr_matrix((3, 3))
        B = sp.csr_matrix((0, 3))
        with pytest.raises(SolverFailure):
            linsolve.solve_direct(SaddleSystem(A, B, np.ones(3)))


class TestIterative:
    def test_spd_mass_system(self):
        space = _space()
        M = space.mass()
        A = sp.kron(sp.identity(3, format="csr"), M, format="csr")
        B = sp.csr_matrix((0, 3 * space.ndof))
        rng = np.random.default_rng(1)
        f = rng.normal(size=3 * space.ndof)
        v, _, rep = linsolve.solve_iterative(SaddleSystem(A, B, f), tol=1e-10)
        assert rep.residual <= 1e-10

    def test_agrees_with_direct(self):
        rng = np.random.default_rng(2)
        space = _space()
        tol = 1e-10
        for trial in range(20):
            sys = _llg_like_system(space, rng)
            vd, _, _ = linsolve.solve_direct(sys)
            vi, _, rep = linsolve.solve_iterative(sys, tol=tol, max_iter=500)
            diff = fem.norms(FieldCoeffs.from_stacked(space, vi - vd, 3))["l2"]
            assert diff <= 10 * tol

    def test_zero_max_iter_errors_immediately(self):
        space = _space(2)
        sys = _llg_like_system(space, np.random.default_rng(3))
        with pytest.raises(IterativeFailure):
            linsolve.solve_iterative(sys, tol=1e-12, max_iter=0)

    def test_failure_carries_trace(self):
        space = _space(8)
        sys = _llg_like_system(space, np.random.default_rng(4))
        # a deliberately lossy preconditioner cannot reach 1e-14 in one sweep
        with pytest.raises(IterativeFailure) as info:
            linsolve.solve_iterative(sys, tol=1e-14, max_iter=1,
                                     drop_tol=0.5, fill_factor=1.0)
        assert isinstance(info.value.trace, list)


class TestAuto:
    def test_auto_picks_direct_at_desk_scale(self):
        space = _space(3)
        sys = _llg_like_system(space, np.random.default_rng(5))
        _, _, rep = linsolve.solve(sys, method="auto")
        assert rep.method == "direct"

    def test_residual_recomputed_independently(self):
        space = _space(3)
        sys = _llg_like_system(space, np.random.default_rng(6))
        v, lam, rep = linsolve.solve(sys)
        S, b = sys.monolithic()
        x = np.concatenate([v, lam])
        res = np.linalg.norm(S @ x - b) / np.linalg.norm(b)
        assert abs(res - rep.residual) < 1e-14

    def test_unknown_method_rejected(self):
        space = _space(2)
        sys = _llg_like_system(space, np.random.default_rng(7))
        with pytest.raises(ValueError):
            linsolve.solve(sys, method="magic")
