"""One tangent-plane BDF time step for the magnetization field.

Each step solves the linear saddle-point problem

    alpha (v, phi) + (mhat x v, phi) + beta_k tau (grad v, grad phi)
        + (mhat . phi, lambda) = (H_ext(t_n), phi) - beta_k (grad Phi, grad phi)
    (mhat . v, psi) = 0

where Phi is the weighted history combination of the variable-step BDF
relation xi_k m^n = Phi + tau v^n, beta_k = C_e / xi_k, and mhat is the
normalized extrapolation predictor.  The new magnetization is recovered
from the BDF relation, optionally renormalized nodewise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import fem, linsolve
from .errors import DegeneratePredictorError, InvalidStepError, StepFailureError
from .fem import FESpace, FieldCoeffs

NODAL_FLOOR = 1e-12


@dataclass
class BdfScheme:
    """Variable-step BDF coefficients for the latest step sizes."""

    k: int
    xi: float
    history_weights: np.ndarray  # w_1..w_k, newest history state first
    delta: np.ndarray            # delta_0..delta_k (newest state first)
    beta: float                  # C_e / xi

    def combine_history(self, states):
        """Phi = sum_j w_j m^{n-j} with states ordered newest first."""
        out = self.history_weights[0] * states[0]
        for w, s in zip(self.history_weights[1:], states[1:]):
            out = out + w * s
        return out


def bdf_coefficients(steps, k: int, c_e: float = 1.0) -> BdfScheme:
    """Coefficients of the k-step BDF formula on the given step sizes.

    ``steps`` lists recent step sizes, oldest first; only the last ``k``
    entries are used (``steps[-1]`` is the current step tau_n).
    """
    steps = [float(s) for s in steps]
    if len(steps) < k:
        raise InvalidStepError(f"need {k} steps for BDF-{k}, got {len(steps)}")
    if any(s <= 0 for s in steps[-k:]):
        raise InvalidStepError(f"nonpositive step in {steps[-k:]}")
    if k == 1:
        delta = np.array([1.0, -1.0])
    elif k == 2:
        t1, t2 = steps[-2], steps[-1]
        kappa = t2 / t1
        delta = np.array([
            (1 + 2 * kappa) / (1 + kappa),
            -(1 + kappa),
            kappa**2 / (1 + kappa),
        ])
    elif k == 3:
        delta = _collocation_delta(steps[-3:])
    else:
        raise InvalidStepError(f"BDF order {k} not supported (1..3)")
    xi = delta[0]
    weights = -delta[1:]
    return BdfScheme(k, float(xi), weights, delta, c_e / float(xi))


def _collocation_delta(steps):
    """Solve the collocation conditions for the difference coefficients.

    delta must satisfy sum_j delta_j q(t_{n-j}) = tau_n q'(t_n) for every
    polynomial q of degree <= k; a scaled Vandermonde system in the
    monomials centered at t_n pins it down.
    """
    k = len(steps)
    tau_n = steps[-1]
    offsets = np.zeros(k + 1)
    acc = 0.0
    for j, s in enumerate(reversed(steps)):
        acc -= s
        offsets[j + 1] = acc / tau_n
    V = np.vander(offsets, k + 1, increasing=True).T
    rhs = np.zeros(k + 1)
    rhs[1] = 1.0
    return np.linalg.solve(V, rhs)


@dataclass
class HistoryRecord:
    t: float
    tau: float
    m: FieldCoeffs
    v: FieldCoeffs


class TimeHistory:
    """Ring of recent states, newest last, all on one FE space."""

    def __init__(self, capacity: int = 6):
        self.records = deque(maxlen=capacity)

    def push(self, t, tau, m, v):
        if self.records and t <= self.records[-1].t:
            raise InvalidStepError(f"time {t} does not advance {self.records[-1].t}")
        self.records.append(HistoryRecord(float(t), float(tau), m, v))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def latest(self):
        return self.records[-1]

    @property
    def space(self):
        return self.records[-1].m.space

    def times(self):
        return [r.t for r in self.records]

    def recent_m(self, count):
        """The last ``count`` magnetization states, newest first."""
        return [self.records[-1 - j].m for j in range(count)]

    def retargeted(self, space, operator):
        """Same history with all fields mapped through a transfer operator."""
        out = TimeHistory(self.records.maxlen)
        for r in self.records:
            out.records.append(HistoryRecord(
                r.t, r.tau,
                FieldCoeffs(space, (operator @ r.m.values.T).T),
                FieldCoeffs(space, (operator @ r.v.values.T).T),
            ))
        return out


@dataclass
class StepResult:
    m: FieldCoeffs
    v: FieldCoeffs
    lam: FieldCoeffs
    solve: linsolve.SolveReport
    constraint_residual: float


def predictor(history: TimeHistory, t_next: float, order: int) -> FieldCoeffs:
    """Normalized Lagrange extrapolation of the magnetization to ``t_next``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    if len(history) < order + 1:
        raise InvalidStepError(
            f"predictor of order {order} needs {order + 1} states, "
            f"have {len(history)}"
        )
    recs = [history[-1 - j] for j in range(order + 1)]
    ts = np.array([r.t for r in recs])
    raw = np.zeros_like(recs[0].m.values)
    for j, r in enumerate(recs):
        L = 1.0
        for i in range(len(ts)):
            if i != j:
                L *= (t_next - ts[i]) / (ts[j] - ts[i])
        raw += L * r.m.values
    lens = np.sqrt(np.sum(raw**2, axis=0))
    if np.any(lens < NODAL_FLOOR):
        raise DegeneratePredictorError(
            f"extrapolated magnetization vanished at {int(np.sum(lens < NODAL_FLOOR))} node(s)"
        )
    return FieldCoeffs(history.space, raw / lens)


def assemble_step_system(space: FESpace, scheme: BdfScheme, history: TimeHistory,
                         mhat: FieldCoeffs, tau: float, h_ext, alpha: float,
                         t_n: Optional[float] = None) -> linsolve.SaddleSystem:
    """Build the saddle-point system of one BDF step.

    ``h_ext`` is an analytic field ``(t, X) -> (n, 3)`` or None for zero;
    it is evaluated at the step endpoint ``t_n``.
    """
    if len(history) < scheme.k:
        raise InvalidStepError("history shorter than the BDF order")
    K = space.stiffness()
    W = fem.weighted_blocks(space, mhat)
    A = (alpha * fem.vector_mass(space)
         + fem.cross_from_blocks(W)
         + (scheme.beta * tau) * fem.vector_stiffness(space))
    B = sp.hstack(W, format="csr")
    phi = scheme.combine_history([m.values for m in history.recent_m(scheme.k)])
    f = -scheme.beta * np.concatenate([K @ phi[c] for c in range(3)])
    if h_ext is not None:
        if t_n is None:
            t_n = history.latest.t + tau
        f = f + fem.assemble_load(space, h_ext, t=t_n)
    return linsolve.SaddleSystem(A, B, f)


def do_step(history: TimeHistory, scheme: BdfScheme, tau: float,
            mhat: FieldCoeffs, problem, normalize: bool = False,
            solver: str = "auto", solver_tol: float = 1e-10) -> StepResult:
    """Advance one BDF step and reconstruct the new magnetization."""
    if tau <= 0:
        raise InvalidStepError(f"step size {tau} must be positive")
    space = history.space
    t_n = history.latest.t + tau
    sys = assemble_step_system(space, scheme, history, mhat, tau,
                               getattr(problem, "h_ext", None),
                               problem.alpha, t_n=t_n)
    v_vec, lam_vec, report = linsolve.solve(sys, method=solver, tol=solver_tol)
    constraint = float(np.max(np.abs(sys.B @ v_vec))) if sys.B.shape[0] else 0.0
    v = FieldCoeffs.from_stacked(space, v_vec, 3)
    phi = scheme.combine_history([m.values for m in history.recent_m(scheme.k)])
    m_new = (phi + tau * v.values) / scheme.xi
    if not np.all(np.isfinite(m_new)):
        raise StepFailureError(f"nonfinite magnetization at t={t_n}")
    if normalize:
        lens = np.sqrt(np.sum(m_new**2, axis=0))
        if np.any(lens < NODAL_FLOOR):
            raise StepFailureError(f"degenerate nodal magnetization at t={t_n}")
        m_new = m_new / lens
    return StepResult(
        m=FieldCoeffs(space, m_new),
        v=v,
        lam=FieldCoeffs(space, lam_vec),
        solve=report,
        constraint_residual=constraint,
    )
