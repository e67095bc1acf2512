"""Adaptive tangent-plane BDF solver for magnetization dynamics in 2D."""

from .diagnostics import (EnergyTrace, TraceRow, energy_report, err_update,
                          export_csv, export_vtk, read_csv, stability_constants)
from .driver import Config, load_config, precompute, run, sweep
from .fem import (FESpace, FieldCoeffs, assemble_constraint, assemble_cross,
                  assemble_mass, assemble_stiffness, gradient_recovery,
                  interpolate, norms, transfer)
from .linsolve import SaddleSystem, SolveReport, solve, solve_direct, solve_iterative
from .mesh import ElementMark, Mesh, bisect, coarsen, create_rect_mesh
from .problems import ExactProblem, derive_forcing, get_example
from .spaceadapt import IndicatorField, adapt_mesh, indicators, mark_coarsen, mark_refine
from .stepcontrol import (StepController, clamp_tau, fd2, fd3, propose_tau,
                          select_order)
from .stepping import (BdfScheme, StepResult, TimeHistory, bdf_coefficients,
                       do_step, predictor)

__version__ = "0.1.0"
