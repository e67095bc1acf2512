"""Direct and preconditioned iterative solution of the saddle-point systems."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import IterativeFailure, SolverFailure

DIRECT_UNKNOWN_LIMIT = 200_000


@dataclass
class SaddleSystem:
    """Monolithic system [[A, B^T], [B, 0]] [v, lambda] = [f, 0]."""

    A: sp.spmatrix  # (3N, 3N), nonsymmetric
    B: sp.spmatrix  # (Ns, 3N) constraint rows
    f: np.ndarray   # (3N,)

    @property
    def n_vec(self):
        return self.A.shape[0] // 3

    @property
    def n_scalar(self):
        return self.B.shape[0]

    @property
    def n_unknowns(self):
        return self.A.shape[0] + self.B.shape[0]

    def monolithic(self):
        if self.B.shape[0]:
            S = sp.bmat([[self.A, self.B.T], [self.B, None]], format="csc")
        else:
            S = self.A.tocsc()
        rhs = np.concatenate([self.f, np.zeros(self.B.shape[0])])
        return S, rhs


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    wall_time: float


def _relative_residual(S, x, b):
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return float(np.linalg.norm(S @ x))
    return float(np.linalg.norm(S @ x - b) / nb)


def _split(sys, x):
    n = sys.A.shape[0]
    return x[:n], x[n:]


def solve_direct(sys: SaddleSystem, residual_tol: float = 1e-10):
    """Sparse LU factorization of the monolithic system."""
    S, b = sys.monolithic()
    t0 = time.perf_counter()
    try:
        lu = spla.splu(S)
        x = lu.solve(b)
    except RuntimeError as exc:
        raise SolverFailure(f"direct factorization failed: {exc}") from exc
    wall = time.perf_counter() - t0
    res = _relative_residual(S, x, b)
    if not np.isfinite(res) or res > residual_tol:
        raise SolverFailure(
            f"direct solve residual {res:.3e} above {residual_tol:.1e} "
            f"(size {S.shape[0]}, nnz {S.nnz})"
        )
    v, lam = _split(sys, x)
    return v, lam, SolveReport("direct", 0, res, wall)


def solve_iterative(sys: SaddleSystem, tol: float = 1e-10, max_iter: int = 2000,
                    drop_tol: float = 1e-5, fill_factor: float = 20.0):
    """BiCGStab with an incomplete-LU preconditioner on the monolithic system."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, b = sys.monolithic()
    if max_iter <= 0:
        raise IterativeFailure("max_iter exhausted before any iteration", [])
    t0 = time.perf_counter()
    try:
        ilu = spla.spilu(S, drop_tol=drop_tol, fill_factor=fill_factor)
    except RuntimeError as exc:
        raise IterativeFailure(f"ILU factorization failed: {exc}", []) from exc
    M = spla.LinearOperator(S.shape, ilu.solve)
    history = []

    def cb(xk):
        history.append(_relative_residual(S, xk, b))

    x, info = spla.bicgstab(S, b, rtol=tol, atol=0.0, maxiter=max_iter,
                            M=M, callback=cb)
    wall = time.perf_counter() - t0
    res = _relative_residual(S, x, b)
    if info != 0 or res > tol:
        raise IterativeFailure(
            f"bicgstab did not reach {tol:.1e} in {len(history)} iterations "
            f"(info={info}, residual={res:.3e})",
            history,
        )
    v, lam = _split(sys, x)
    return v, lam, SolveReport("iterative", len(history), res, wall)


def solve(sys: SaddleSystem, method: str = "auto", tol: float = 1e-10,
          max_iter: int = 2000):
    """Solve with the configured method; 'auto' picks by problem size."""
    if isinstance(method, CachedSolver):
        return method.solve(sys)
    if method == "auto":
        method = "direct" if sys.n_unknowns <= DIRECT_UNKNOWN_LIMIT else "iterative"
    if method == "direct":
        return solve_direct(sys)
    if method == "iterative":
        return solve_iterative(sys, tol=tol, max_iter=max_iter)
    raise ValueError(f"unknown solver method {method!r}")


# systems below this size factor so quickly that preconditioner reuse
# cannot pay off
CACHE_MIN_UNKNOWNS = 4000


class CachedSolver:
    """Step-series solver that reuses a factorization as preconditioner.

    Consecutive step systems differ only through the predictor and the
    step size, so the complete LU factor of one step preconditions the
    BiCGStab solves of the following steps.  The factor is rebuilt when
    the iteration count degrades; a size change (mesh adaptation) falls
    back to a plain direct solve until the size persists again, and any
    iterative breakdown falls back to a direct solve as well.
    """

    def __init__(self, method: str = "auto", tol: float = 1e-10,
                 max_iter: int = 200, refresh_iters: int = 12):
        if method not in ("auto", "direct", "iterative"):
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.refresh_iters = refresh_iters
        self._factor = None
        self._shape = None

    def _iterative_pass(self, S, b):
        M = spla.LinearOperator(S.shape, self._factor.solve)
        history = []

        def cb(xk):
            history.append(1)

        x, info = spla.bicgstab(S, b, rtol=self.tol, atol=0.0,
                                maxiter=self.max_iter, M=M, callback=cb)
        return x, info, len(history)

    def solve(self, sys: SaddleSystem):
        if self.method == "direct" or (
                self.method == "auto" and sys.n_unknowns < CACHE_MIN_UNKNOWNS):
            return solve_direct(sys, residual_tol=max(self.tol, 1e-10))
        S, b = sys.monolithic()
        if self._shape != S.shape:
            # mesh changed (or first call): factor this system, reuse later
            self._factor = None
            self._shape = S.shape
        t0 = time.perf_counter()
        for _attempt in ("cached", "fresh"):
            if self._factor is None:
                try:
                    self._factor = spla.splu(S)
                except RuntimeError:
                    self._factor = None
                    break
                x = self._factor.solve(b)
                res = _relative_residual(S, x, b)
                if res <= max(self.tol, 1e-10):
                    wall = time.perf_counter() - t0
                    v, lam = _split(sys, x)
                    return v, lam, SolveReport("direct", 0, res, wall)
                continue
            x, info, iters = self._iterative_pass(S, b)
            res = _relative_residual(S, x, b)
            if info == 0 and res <= self.tol:
                if iters > self.refresh_iters:
                    self._factor = None  # stale factor: rebuild next time
                wall = time.perf_counter() - t0
                v, lam = _split(sys, x)
                return v, lam, SolveReport("iterative", iters, res, wall)
            self._factor = None  # force a fresh factorization on retry
        if self.method == "iterative":
            raise IterativeFailure(
                f"preconditioned bicgstab failed to reach {self.tol:.1e}", [])
        return solve_direct(sys, residual_tol=max(self.tol, 1e-10))
