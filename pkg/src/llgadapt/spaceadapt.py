"""Recovery-based error indicators, marking, and the refine/coarsen loop.

The per-element indicator is the L2 distance between the broken gradient
of the magnetization and its recovered (projected) gradient, summed over
the three components.  Refinement marks a minimal set of elements carrying
the fraction (1 - theta_r) of the squared total; coarsening marks a
maximal set staying below the budget (1 - theta_c) of the squared total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import ToleranceUnreachableError
from .fem import FESpace, FieldCoeffs
from .stepping import TimeHistory


@dataclass
class IndicatorField:
    """Per-active-element nonnegative indicator values."""

    eta: np.ndarray

    @property
    def total(self):
        return math.sqrt(float(np.sum(self.eta**2)))


def indicators(m: FieldCoeffs) -> IndicatorField:
    """Gradient-recovery indicator of a (vector) FE field, per element."""
    space = m.space
    qdeg = 2 * space.degree
    _, qw, _, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    eta2 = np.zeros(space.mesh.n_elements)
    for c in range(m.ncomp):
        rec = fem.gradient_recovery(m, component=c)
        gh = fem.grad_at_quad(FieldCoeffs(space, m.values[c:c + 1]), qdeg)[0]
        rq = fem.field_at_quad(rec, qdeg)  # (2, nelem, nq)
        diff = gh - np.moveaxis(rq, 0, -1)
        eta2 += np.einsum("q,eqk,eqk->e", qw, diff, diff) * det
    return IndicatorField(np.sqrt(np.maximum(eta2, 0.0)))


def mark_refine(eta: IndicatorField, theta_r: float) -> set:
    """Minimal element set with sum eta^2 >= (1-theta_r) * total^2."""
    if not 0.0 < theta_r < 1.0:
        raise ValueError("theta_r must lie in (0, 1)")
    sq = eta.eta**2
    need = (1.0 - theta_r) * float(np.sum(sq))
    if need <= 0.0 or np.all(sq == 0.0):
        return set()
    order = np.lexsort((np.arange(len(sq)), -sq))
    acc = 0.0
    marked = set()
    for e in order:
        if acc >= need:
            break
        if sq[e] == 0.0:
            break
        marked.add(int(e))
        acc += sq[e]
    return marked


def mark_coarsen(eta: IndicatorField, theta_c: float) -> set:
    """Maximal element set with sum eta^2 <= (1-theta_c) * total^2."""
    if not 0.0 < theta_c < 1.0:
        raise ValueError("theta_c must lie in (0, 1)")
    sq = eta.eta**2
    budget = (1.0 - theta_c) * float(np.sum(sq))
    order = np.lexsort((np.arange(len(sq)), sq))
    acc = 0.0
    marked = set()
    for e in order:
        if acc + sq[e] > budget:
            break
        marked.add(int(e))
        acc += sq[e]
    return marked


def adapt_mesh(state: TimeHistory, tol_s: float, theta_r: float, theta_c: float,
               generations: int = 2, max_rounds: int = 30):
    """Refine until the indicator total meets tol_s, then coarsen once.

    Indicators are computed from the most recent magnetization state; the
    whole history is re-interpolated after each mesh change.  Returns the
    final space and the transferred history.
    """
    space = state.space
    eta = None
    for _ in range(max_rounds):
        eta = indicators(state.latest.m)
        if eta.total <= tol_s:
            break
        marked = mark_refine(eta, theta_r)
        if not marked:
            break
        new_mesh = space.mesh.bisect(marked, generations)
        new_space = FESpace(new_mesh, space.degree)
        op = fem.make_transfer(space, new_space)
        state = state.retargeted(new_space, op)
        space = new_space
        eta = None
    else:
        eta = indicators(state.latest.m)
        if eta.total > tol_s:
            raise ToleranceUnreachableError(
                f"indicator total {eta.total:.3e} above tol_s {tol_s:.3e} "
                f"after {max_rounds} refinement rounds",
                best_total=eta.total,
            )
    if eta is None:
        eta = indicators(state.latest.m)
    to_coarsen = mark_coarsen(eta, theta_c)
    if to_coarsen:
        new_mesh = space.mesh.coarsen(to_coarsen)
        if new_mesh.n_elements != space.mesh.n_elements:
            new_space = FESpace(new_mesh, space.degree)
            op = fem.make_transfer(space, new_space)
            state = state.retargeted(new_space, op)
            space = new_space
    return space, state
