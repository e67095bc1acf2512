"""Local-truncation-error driven step-size and order selection.

Step proposals equidistribute the local truncation error: the first-order
method has LTE ~ 1/2 |y''| tau^2 and the second-order one (variable steps)
LTE ~ 1/6 tau_{n-1,n} tau_n^2 |y'''|, which inverted for the target
tolerance give the proposal formulas below.  Derivative norms come from
divided-difference formulas applied to recent states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidStepError

GROWTH = math.sqrt(2.0)
SHRINK = 0.5


@dataclass
class StepController:
    tol_t: float
    tau_min: float
    tau_max: float
    k_min: int = 1
    k_max: int = 2
    current_k: int = 1

    def __post_init__(self):
        if not (0 < self.tau_min <= self.tau_max):
            raise InvalidStepError(
                f"need 0 < tau_min <= tau_max, got [{self.tau_min}, {self.tau_max}]"
            )
        if not (1 <= self.k_min <= self.k_max <= 3):
            raise ValueError(f"orders must satisfy 1 <= k_min <= k_max <= 3")
        self.current_k = min(max(self.current_k, self.k_min), self.k_max)


def fd2(y0, y1, y2, tau1, tau2):
    """Second-derivative estimate from three states; exact on quadratics."""
    if tau1 <= 0 or tau2 <= 0:
        raise InvalidStepError("steps must be positive")
    t12 = tau1 + tau2
    return 2.0 * (np.asarray(y2) / (t12 * tau2)
                  - np.asarray(y1) / (tau1 * tau2)
                  + np.asarray(y0) / (tau1 * t12))


def fd3(y0, y1, y2, y3, tau1, tau2, tau3):
    """Third-derivative estimate from four states; exact on cubics."""
    if tau1 <= 0 or tau2 <= 0 or tau3 <= 0:
        raise InvalidStepError("steps must be positive")
    t12, t23 = tau1 + tau2, tau2 + tau3
    t123 = tau1 + tau2 + tau3
    return 6.0 * (np.asarray(y3) / (t123 * t23 * tau3)
                  - np.asarray(y2) / (t12 * tau2 * tau3)
                  + np.asarray(y1) / (tau1 * tau2 * t23)
                  - np.asarray(y0) / (tau1 * t12 * t123))


def propose_tau(k: int, tol_t: float, deriv_norm: float, recent_steps=()) -> float:
    """Step-size proposal equidistributing the order-k truncation error.

    A vanishing derivative estimate yields +inf; the caller's clamp against
    tau_max absorbs it.  For k=2, ``recent_steps`` must contain the two
    most recently completed step sizes.
    """
    if tol_t <= 0:
        raise ValueError("tol_t must be positive")
    if deriv_norm < 0:
        raise ValueError("derivative norm must be nonnegative")
    if k == 1:
        if deriv_norm == 0.0:
            return math.inf
        return math.sqrt(2.0 * tol_t / deriv_norm)
    if k == 2:
        if len(recent_steps) < 2:
            raise InvalidStepError("k=2 proposal needs the last two steps")
        t_sum = float(recent_steps[-2]) + float(recent_steps[-1])
        if deriv_norm == 0.0:
            return math.inf
        return math.sqrt(6.0 * tol_t / (t_sum * deriv_norm))
    raise InvalidStepError(f"no step proposal formula for order {k}")


def clamp_tau(tau_prev: float, tau_star: float, ctrl: StepController) -> float:
    """Restrict a proposal relative to the previous step and the bounds."""
    if tau_prev <= 0:
        raise InvalidStepError("previous step must be positive")
    return max(ctrl.tau_min, SHRINK * tau_prev,
               min(tau_star, GROWTH * tau_prev, ctrl.tau_max))


def select_order(k_n: int, k_star: int, ctrl: StepController) -> int:
    """Move at most one order towards the proposal, inside the bounds."""
    return max(ctrl.k_min, k_n - 1, min(k_star, k_n + 1, ctrl.k_max))
