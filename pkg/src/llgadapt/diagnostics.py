"""Energy bookkeeping, error norms, stability algebra, CSV/VTK output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem
from .fem import FieldCoeffs

CSV_HEADER = "t,tau,k,dofs,energy,dissipation,errT,iterations"


@dataclass
class TraceRow:
    t: float
    tau: float
    k: int
    dofs: int
    energy: float          # C_e ||grad m||^2
    dissipation: float     # tau ||v||^2
    err_t: float           # running max H1-seminorm error (nan without exact)
    iterations: int
    field_term: float = 0.0           # tau ||H_ext(t)||^2
    residual: float = 0.0
    constraint_residual: float = 0.0
    wall_time: float = 0.0


class EnergyTrace:
    """Per-accepted-step diagnostics of a run."""

    def __init__(self):
        self.rows = []

    def append(self, row: TraceRow):
        if self.rows and row.t <= self.rows[-1].t:
            raise ValueError("trace times must increase strictly")
        vals = (row.t, row.tau, row.energy, row.dissipation, row.field_term)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"nonfinite trace entry at t={row.t}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    @property
    def err_t(self):
        vals = [r.err_t for r in self.rows if not math.isnan(r.err_t)]
        return max(vals) if vals else math.nan

    @property
    def max_constraint_residual(self):
        return max((r.constraint_residual for r in self.rows), default=0.0)

    def step_count(self):
        """Number of actual time steps (the t=0 record carries tau=0)."""
        return sum(1 for r in self.rows if r.tau > 0.0)


def exchange_energy(m: FieldCoeffs, c_e: float) -> float:
    return c_e * fem.norms(m)["h1_semi"] ** 2


def err_update(running: float, exact_grad, m_h: FieldCoeffs, t: float) -> float:
    """Fold the H1-seminorm error at time t into the running maximum."""
    contrib = fem.h1_seminorm_error(m_h, exact_grad, t=t)
    if math.isnan(running):
        return contrib
    return max(running, contrib)


@dataclass
class StabilityConstants:
    s2: float
    eta_threshold: float
    admissible: bool


def stability_constants(kappa: float) -> StabilityConstants:
    """Root and damping threshold of the two-step difference polynomial.

    For a step ratio ``kappa`` the characteristic polynomial of the
    variable-step two-step scheme has roots 1 and (1+2k)/k^2; the latter
    stays outside the unit disc iff kappa < 1 + sqrt(2), and the shifted
    energy argument needs eta > (3k^2-2k-1)/(k+1)^2 (nonpositive for
    kappa <= 1).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    s2 = (1.0 + 2.0 * kappa) / kappa**2
    eta = (3.0 * kappa**2 - 2.0 * kappa - 1.0) / (kappa**2 + 2.0 * kappa + 1.0)
    return StabilityConstants(
        s2=s2,
        eta_threshold=max(0.0, eta),
        admissible=bool(kappa < 1.0 + math.sqrt(2.0)),
    )


@dataclass
class EnergyReport:
    mode: str
    violations: list          # decay mode: (index, relative increase)
    ratios: list              # bound mode: lhs/rhs trajectory
    ok: bool


def energy_report(trace: EnergyTrace, alpha: float, mode: str = "decay",
                  rel_tol: float = 1e-6) -> EnergyReport:
    """Check energy decay, or report the inequality-proxy ratio trajectory."""
    rows = trace.rows
    if mode == "decay":
        violations = []
        for i in range(1, len(rows)):
            e_prev, e_new = rows[i - 1].energy, rows[i].energy
            scale = max(abs(e_prev), 1.0)
            if e_new > e_prev + rel_tol * scale:
                violations.append((i, (e_new - e_prev) / scale))
        return EnergyReport("decay", violations, [], not violations)
    if mode == "bound":
        # proxy with unit weights: the strict inequality constants are not
        # computable, so the ratio trajectory is monitoring output only
        start = next((i for i, r in enumerate(rows) if r.tau > 0.0), 0)
        init_energy = rows[0].energy if rows else 0.0
        diss = 0.0          # cumulative sum of tau_j ||v_j||^2
        forcing = 0.0       # cumulative sum of tau_j ||H(t_j)||^2
        ratios = []
        for r in rows[start:]:
            diss += r.dissipation
            forcing += r.field_term
            lhs = r.energy + 0.5 * alpha * diss
            rhs = init_energy + forcing / (2.0 * alpha)
            ratios.append(lhs / rhs if rhs > 0 else math.inf)
        return EnergyReport("bound", [], ratios, True)
    raise ValueError(f"unknown energy report mode {mode!r}")


def export_csv(trace: EnergyTrace, path):
    """Write the trace with round-trippable float formatting."""
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in trace.rows:
            fh.write(f"{r.t!r},{r.tau!r},{r.k},{r.dofs},{r.energy!r},"
                     f"{r.dissipation!r},{r.err_t!r},{r.iterations}\n")


def read_csv(path) -> EnergyTrace:
    trace = EnergyTrace()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header in {path}: {header!r}")
        for line in fh:
            parts = line.strip().split(",")
            trace.rows.append(TraceRow(
                t=float(parts[0]), tau=float(parts[1]), k=int(parts[2]),
                dofs=int(parts[3]), energy=float(parts[4]),
                dissipation=float(parts[5]), err_t=float(parts[6]),
                iterations=int(parts[7]),
            ))
    return trace


def export_vtk(mesh, path, point_vectors=None, cell_scalars=None,
               title="llgadapt output"):
    """Legacy ASCII VTK file with point vector fields and cell scalars.

    Vector fields are written at mesh vertices; higher-degree FE fields are
    subsampled at the vertex nodes (vertex dofs come first in the space).
    """
    tri = mesh.elements
    nv = mesh.n_vertices
    ne = tri.shape[0]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{x} {y} 0.0\n")
        fh.write(f"CELLS {ne} {4 * ne}\n")
        for a, b, c in tri:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {ne}\n")
        fh.write("5\n" * ne)
        if point_vectors:
            fh.write(f"POINT_DATA {nv}\n")
            for name, fld in point_vectors.items():
                vals = fld.values if isinstance(fld, FieldCoeffs) else np.asarray(fld)
                fh.write(f"VECTORS {name} double\n")
                for i in range(nv):
                    row = [vals[c][i] if c < vals.shape[0] else 0.0 for c in range(3)]
                    fh.write(f"{row[0]} {row[1]} {row[2]}\n")
        if cell_scalars:
            fh.write(f"CELL_DATA {ne}\n")
            for name, vals in cell_scalars.items():
                vals = np.asarray(vals, dtype=float)
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in vals:
                    fh.write(f"{v}\n")
