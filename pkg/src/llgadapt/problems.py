"""Benchmark problems: exact solutions, initial data, and derived forcing.

For problems with a known exact magnetization the external field is
constructed symbolically so that the strong form holds identically:

    H_ext = alpha dm/dt + m x dm/dt - C_e P(m) lap(m),
    P(m) = Id - m (x) m / |m|^2.

Every term on the right is tangential to m (|m| = 1 makes dm/dt and the
projected Laplacian orthogonal to m), hence P(m) H_ext = H_ext and m
solves the evolution equation with this field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import sympy as sym

_T, _X, _Y = sym.symbols("t x y", real=True)


def derive_forcing(m_expr, alpha: float, c_e: float):
    """Forcing field (as a sympy Matrix) making ``m_expr`` an exact solution.

    ``m_expr`` is a 3-vector sympy Matrix in the symbols (t, x, y) with
    |m| = 1 wherever it is used.
    """
    m = sym.Matrix(m_expr)
    mt = m.diff(_T)
    lap = m.diff(_X, 2) + m.diff(_Y, 2)
    proj_lap = lap - (m.dot(lap)) * m
    return alpha * mt + m.cross(mt) - c_e * proj_lap


def _lambdify_vec(expr):
    funcs = [sym.lambdify((_T, _X, _Y), e, modules="numpy") for e in expr]

    def call(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = []
        for f in funcs:
            v = f(t, X[:, 0], X[:, 1])
            cols.append(np.broadcast_to(np.asarray(v, dtype=float), (X.shape[0],)))
        return np.column_stack(cols)

    return call


def _lambdify_grad(m_expr):
    gx = sym.Matrix(m_expr).diff(_X)
    gy = sym.Matrix(m_expr).diff(_Y)
    fx = _lambdify_vec(gx)
    fy = _lambdify_vec(gy)

    def call(t, X):
        return np.stack([fx(t, X), fy(t, X)], axis=-1)  # (n, 3, 2)

    return call


@dataclass
class ExactProblem:
    """A benchmark setup: domain, constants, initial data, optional exact fields."""

    id: str
    bounds: tuple
    t_final: float
    alpha: float
    c_e: float
    m0: Callable                      # X -> (n, 3)
    exact_m: Optional[Callable] = None      # (t, X) -> (n, 3)
    exact_grad_m: Optional[Callable] = None  # (t, X) -> (n, 3, 2)
    dt_m: Optional[Callable] = None          # (t, X) -> (n, 3)
    h_ext: Optional[Callable] = None         # (t, X) -> (n, 3)

    @property
    def has_exact(self):
        return self.exact_m is not None


def _poly_profile():
    return _X**3 - sym.Rational(3, 2) * _X**2 + sym.Rational(1, 4)


def example1(t_final: float = 0.1, alpha: float = 0.2, c_e: float = 1.0):
    """Smooth manufactured solution on the unit square, time-error dominated."""
    f = _poly_profile()
    omega = 3 * sym.pi * _T / t_final
    m = sym.Matrix([
        -f * sym.sin(omega),
        sym.sqrt(1 - f**2),
        -f * sym.cos(omega),
    ])
    h = derive_forcing(m, alpha, c_e)
    exact = _lambdify_vec(m)
    return ExactProblem(
        id="example1",
        bounds=((0.0, 0.0), (1.0, 1.0)),
        t_final=t_final,
        alpha=alpha,
        c_e=c_e,
        m0=lambda X: exact(0.0, X),
        exact_m=exact,
        exact_grad_m=_lambdify_grad(m),
        dt_m=_lambdify_vec(m.diff(_T)),
        h_ext=_lambdify_vec(h),
    )


_EX2_SEAM_GUARD = 1e-60


def _masked_piecewise(inside_call, outside_row, d_of):
    """Evaluate inside expressions where d < 1/4, a constant row elsewhere."""
    outside_row = np.asarray(outside_row, dtype=float)

    def call(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = d_of(X)
        inside = d < 0.25 - _EX2_SEAM_GUARD
        out = np.broadcast_to(outside_row, (X.shape[0],) + outside_row.shape).copy()
        if np.any(inside):
            out[inside] = inside_call(t, X[inside])
        return out

    return call


def example2(t_final: float = 0.05, alpha: float = 0.2, c_e: float = 1.0,
             t0: float = 0.06, c0: float = 400.0):
    """Manufactured bump collapsing in time; spatial error dominates."""
    d = (_X - sym.Rational(1, 2))**2 + (_Y - sym.Rational(1, 2))**2
    g = (t0 + 0.1) / (t0 + 0.1 - _T)
    gap = sym.Rational(1, 4) - d
    E = sym.exp(-g / gap)
    m = sym.Matrix([
        c0 * (_X - sym.Rational(1, 2)) * E,
        c0 * (_Y - sym.Rational(1, 2)) * E,
        sym.sqrt(1 - c0**2 * d * E**2),
    ])
    h = derive_forcing(m, alpha, c_e)

    def d_of(X):
        return (X[:, 0] - 0.5)**2 + (X[:, 1] - 0.5)**2

    exact_in = _lambdify_vec(m)
    grad_in = _lambdify_grad(m)
    dt_in = _lambdify_vec(m.diff(_T))
    h_in = _lambdify_vec(h)
    exact = _masked_piecewise(exact_in, (0.0, 0.0, 1.0), d_of)
    grad = _masked_piecewise(grad_in, np.zeros((3, 2)), d_of)
    return ExactProblem(
        id="example2",
        bounds=((0.0, 0.0), (1.0, 1.0)),
        t_final=t_final,
        alpha=alpha,
        c_e=c_e,
        m0=lambda X: exact(0.0, X),
        exact_m=exact,
        exact_grad_m=grad,
        dt_m=_masked_piecewise(dt_in, (0.0, 0.0, 0.0), d_of),
        h_ext=_masked_piecewise(h_in, (0.0, 0.0, 0.0), d_of),
    )


def example3(t_final: float = 0.1, alpha: float = 1.0, c_e: float = 1.0,
             s: float = 16.0):
    """Near-singular relaxation without external field; no exact solution."""

    def m0(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r2 = np.sum(X**2, axis=1)
        r = np.sqrt(r2)
        A = (1.0 - 2.0 * r)**4 / s
        out = np.tile([0.0, 0.0, -1.0], (X.shape[0], 1))
        inside = r2 <= 0.5
        denom = A**2 + r2
        vals = np.column_stack([
            2.0 * A * X[:, 0],
            2.0 * A * X[:, 1],
            A**2 - r2,
        ]) / denom[:, None]
        out[inside] = vals[inside]
        return out

    return ExactProblem(
        id="example3",
        bounds=((-0.5, -0.5), (0.5, 0.5)),
        t_final=t_final,
        alpha=alpha,
        c_e=c_e,
        m0=m0,
    )


def example4(t_final: float = 0.35, alpha: float = 1.0, c_e: float = 0.1,
             c: float = 0.2, d: float = 0.125, field=(0.0, 0.0, -50.0)):
    """Domain wall driven along a strip by a constant external field."""

    def m0(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x1 = X[:, 0]
        zeta = np.sin(np.pi * (np.clip(x1, c - d, c + d) - c) / (2.0 * d))
        out = np.column_stack([
            np.zeros_like(x1),
            np.cos(np.pi * zeta / 2.0),
            np.sin(np.pi * zeta / 2.0),
        ])
        out[x1 < c - d] = (0.0, 0.0, -1.0)
        out[x1 > c + d] = (0.0, 0.0, 1.0)
        return out

    hvec = np.asarray(field, dtype=float)

    def h_ext(t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.tile(hvec, (X.shape[0], 1))

    return ExactProblem(
        id="example4",
        bounds=((0.0, 0.0), (1.0, 0.2)),
        t_final=t_final,
        alpha=alpha,
        c_e=c_e,
        m0=m0,
        h_ext=h_ext,
    )


EXAMPLES = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
    "example4": example4,
}


def get_example(name: str, **overrides) -> ExactProblem:
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}")
    return EXAMPLES[name](**overrides)
