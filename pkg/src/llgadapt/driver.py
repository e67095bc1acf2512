"""End-to-end adaptive runs: precomputation, main loop, config, sweeps.

A run starts from the nodally normalized interpolant of the initial
magnetization, refines the initial mesh until the recovery indicator meets
the spatial tolerance, performs two first-order startup steps with
step sizes seeded by a directional probe of the second time derivative,
and then iterates: propose the next step size from difference quotients of
the history, adapt the mesh, extrapolate the predictor, and solve one BDF
step, until the final time is hit exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import diagnostics, fem, linsolve, spaceadapt, stepcontrol, stepping
from .diagnostics import EnergyTrace, TraceRow
from .errors import ConfigError, NumericsError, StepFailureError, ToleranceUnreachableError
from .fem import FESpace, FieldCoeffs
from .mesh import create_rect_mesh
from .problems import get_example
from .stepcontrol import StepController, clamp_tau, fd2, propose_tau, select_order
from .stepping import TimeHistory, bdf_coefficients, do_step, predictor

_T_ATOL_FACTOR = 1e-12


@dataclass
class Config:
    example: str = "example1"
    alpha: Optional[float] = None       # None: use the example's published value
    c_e: Optional[float] = None
    t_final: Optional[float] = None
    p: int = 2
    tol_s: float = math.inf
    tol_t: float = 1e-4
    theta_r: float = 0.6
    theta_c: float = 0.95
    tau_min: float = 1e-10
    tau_max: Optional[float] = None     # None: t_final / 10
    k_min: int = 2
    k_max: int = 2
    normalize: bool = True
    predictor_order: str = "k"          # "k" or "k-1"
    solver: str = "auto"
    solver_tol: float = 1e-10
    nx: int = 8
    ny: int = 8
    out_csv: Optional[str] = None
    out_vtk_prefix: Optional[str] = None
    seed: int = 0
    probe_dt: Optional[float] = None    # step of the startup derivative probe
    max_steps: int = 200_000
    adapt_max_rounds: int = 30

    def validate(self):
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if self.tol_t <= 0:
            raise ConfigError("tol_t must be positive")
        if not (0 < self.theta_r < 1 and 0 < self.theta_c < 1):
            raise ConfigError("theta_r and theta_c must lie in (0, 1)")
        if not (1 <= self.k_min <= self.k_max <= 3):
            raise ConfigError("need 1 <= k_min <= k_max <= 3")
        if self.predictor_order not in ("k", "k-1"):
            raise ConfigError("predictor_order must be 'k' or 'k-1'")
        if self.solver not in ("auto", "direct", "iterative"):
            raise ConfigError("solver must be auto, direct or iterative")
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("nx and ny must be >= 1")
        if self.tau_min <= 0:
            raise ConfigError("tau_min must be positive")
        if self.tau_max is not None and self.tau_max < self.tau_min:
            raise ConfigError("tau_max must be >= tau_min")


_KEY_MAP = {
    "example": ("example", str),
    "alpha": ("alpha", float),
    "Ce": ("c_e", float),
    "T": ("t_final", float),
    "p": ("p", int),
    "tol_s": ("tol_s", float),
    "tol_t": ("tol_t", float),
    "theta_r": ("theta_r", float),
    "theta_c": ("theta_c", float),
    "tau_min": ("tau_min", float),
    "tau_max": ("tau_max", float),
    "k_min": ("k_min", int),
    "k_max": ("k_max", int),
    "normalize": ("normalize", None),
    "predictor_order": ("predictor_order", str),
    "solver": ("solver", str),
    "solver_tol": ("solver_tol", float),
    "nx": ("nx", int),
    "ny": ("ny", int),
    "out_csv": ("out_csv", str),
    "out_vtk_prefix": ("out_vtk_prefix", str),
    "seed": ("seed", int),
}


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean value {text!r}")


def load_config(path) -> Config:
    """Read a flat key=value configuration file."""
    cfg = Config()
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEY_MAP:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        attr, typ = _KEY_MAP[key]
        try:
            parsed = _parse_bool(value) if typ is None else typ(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {exc}") from exc
        setattr(cfg, attr, parsed)
    cfg.validate()
    return cfg


def make_problem(cfg: Config):
    overrides = {}
    if cfg.t_final is not None:
        overrides["t_final"] = cfg.t_final
    if cfg.alpha is not None:
        overrides["alpha"] = cfg.alpha
    if cfg.c_e is not None:
        overrides["c_e"] = cfg.c_e
    try:
        return get_example(cfg.example, **overrides)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc


def _tangent_solve(space, m_state: FieldCoeffs, t, problem, solver, solver_tol):
    """Solve for the instantaneous time derivative at a given state.

    This is the zero-step-size limit of the stepping system: the diffusion
    term enters only through the right-hand side.
    """
    hist = TimeHistory(2)
    hist.records.append(stepping.HistoryRecord(t - 1.0, 0.0, m_state, None))
    scheme = bdf_coefficients([1.0], 1, problem.c_e)
    sys = stepping.assemble_step_system(
        space, scheme, hist, m_state.normalized(), 0.0,
        problem.h_ext, problem.alpha, t_n=t,
    )
    v_vec, lam_vec, report = linsolve.solve(sys, method=solver, tol=solver_tol)
    constraint = float(np.max(np.abs(sys.B @ v_vec)))
    return (FieldCoeffs.from_stacked(space, v_vec, 3),
            FieldCoeffs(space, lam_vec), report, constraint)


def _trace_row(problem, space, t, tau, k, m, v, report, constraint, err_prev):
    energy = diagnostics.exchange_energy(m, problem.c_e)
    diss = tau * fem.norms(v)["l2"] ** 2
    if problem.h_ext is not None and tau > 0.0:
        field = tau * fem.integrate_norm2(space, problem.h_ext, t=t)
    else:
        field = 0.0
    if problem.has_exact:
        err = diagnostics.err_update(err_prev, problem.exact_grad_m, m, t)
    else:
        err = math.nan
    return TraceRow(
        t=t, tau=tau, k=k, dofs=3 * space.ndof,
        energy=energy, dissipation=diss, err_t=err,
        iterations=report.iterations, field_term=field,
        residual=report.residual, constraint_residual=constraint,
        wall_time=report.wall_time,
    ), err


def _l2(space, values):
    return fem.norms(FieldCoeffs(space, values))["l2"]


def precompute(cfg: Config, problem=None):
    """Initial mesh adaptation plus the two first-order startup steps."""
    cfg.validate()
    if problem is None:
        problem = make_problem(cfg)
    t_final = problem.t_final
    tau_max = cfg.tau_max if cfg.tau_max is not None else t_final / 10.0
    tau_max = min(tau_max, t_final)
    mesh = create_rect_mesh(problem.bounds, cfg.nx, cfg.ny)
    space = FESpace(mesh, cfg.p)
    m0 = fem.interpolate(problem.m0, space).normalized()
    for _ in range(cfg.adapt_max_rounds):
        eta = spaceadapt.indicators(m0)
        if eta.total <= cfg.tol_s:
            break
        marked = spaceadapt.mark_refine(eta, cfg.theta_r)
        mesh = mesh.bisect(marked, 2)
        space = FESpace(mesh, cfg.p)
        m0 = fem.interpolate(problem.m0, space).normalized()
    else:
        eta = spaceadapt.indicators(m0)
        if eta.total > cfg.tol_s:
            raise ToleranceUnreachableError(
                f"initial refinement stalled at indicator {eta.total:.3e} "
                f"(tol_s {cfg.tol_s:.3e})", best_total=eta.total)

    trace = EnergyTrace()
    err = math.nan

    solver = linsolve.CachedSolver(cfg.solver, tol=cfg.solver_tol)
    v0, lam0, rep0, con0 = _tangent_solve(space, m0, 0.0, problem, solver,
                                          cfg.solver_tol)
    history = TimeHistory(capacity=max(4, cfg.k_max + 2))
    history.push(0.0, 0.0, m0, v0)
    row, err = _trace_row(problem, space, 0.0, 0.0, 0, m0, v0, rep0, con0, err)
    trace.append(row)

    # first proposal from a directional derivative probe along the flow
    eps = cfg.probe_dt if cfg.probe_dt is not None else 1e-6 * t_final
    probe_state = FieldCoeffs(space, m0.values + eps * v0.values).normalized()
    v_eps, _, _, _ = _tangent_solve(space, probe_state, eps, problem, solver,
                                    cfg.solver_tol)
    d2 = _l2(space, (v_eps.values - v0.values) / eps)
    tau1_star = propose_tau(1, cfg.tol_t, d2)
    tau1 = max(cfg.tau_min, min(tau1_star / 4.0, tau_max))
    tau1 = min(tau1, t_final)

    ctrl = StepController(cfg.tol_t, cfg.tau_min, tau_max,
                          cfg.k_min, cfg.k_max)

    for startup in (1, 2):
        if startup == 1:
            tau = tau1
        else:
            d2 = _l2(space, (history[-1].v.values - history[-2].v.values)) / tau1
            tau2_star = propose_tau(1, cfg.tol_t, d2)
            tau = max(cfg.tau_min, 0.5 * tau1,
                      min(tau2_star, math.sqrt(2.0) * tau1, tau_max))
            tau = min(tau, t_final - history.latest.t)
        order = min(len(history) - 1, 1 if cfg.predictor_order == "k" else 0)
        t_next = history.latest.t + tau
        mhat = predictor(history, t_next, order)
        scheme = bdf_coefficients([tau], 1, problem.c_e)
        res = do_step(history, scheme, tau, mhat, problem,
                      normalize=cfg.normalize, solver=solver,
                      solver_tol=cfg.solver_tol)
        history.push(t_next, tau, res.m, res.v)
        row, err = _trace_row(problem, space, t_next, tau, 1, res.m, res.v,
                              res.solve, res.constraint_residual, err)
        trace.append(row)
        if history.latest.t >= t_final * (1 - _T_ATOL_FACTOR):
            break

    return problem, history, trace, ctrl, err, solver


def _proposals(history, ctrl):
    """Step-size proposals per admissible order from the stored history."""
    space = history.space
    m3, m2, m1 = (history[-3].m.values, history[-2].m.values, history[-1].m.values)
    v3, v2, v1 = (history[-3].v.values, history[-2].v.values, history[-1].v.values)
    tau_a = history[-2].t - history[-3].t
    tau_b = history[-1].t - history[-2].t
    options = []
    for k in range(ctrl.k_min, min(ctrl.k_max, 2) + 1):
        if k == 1:
            d2 = _l2(space, fd2(m3, m2, m1, tau_a, tau_b))
            options.append((propose_tau(1, ctrl.tol_t, d2), 1))
        else:
            d3 = _l2(space, fd2(v3, v2, v1, tau_a, tau_b))
            options.append((propose_tau(2, ctrl.tol_t, d3, (tau_a, tau_b)), 2))
    tau_star, k_star = max(options, key=lambda o: (o[0], o[1]))
    return tau_star, k_star


def run(cfg: Config, problem=None) -> EnergyTrace:
    """Execute the full adaptive loop; returns the energy/error trace."""
    problem, history, trace, ctrl, err, solver = precompute(cfg, problem)
    t_final = problem.t_final
    order_control = ctrl.k_min < ctrl.k_max
    # startup ran first order; without order control the loop order is pinned
    ctrl.current_k = ctrl.k_min if order_control else min(max(2, ctrl.k_min), ctrl.k_max)
    try:
        steps = 0
        while history.latest.t < t_final * (1 - _T_ATOL_FACTOR):
            steps += 1
            if steps > cfg.max_steps:
                raise StepFailureError(f"exceeded max_steps={cfg.max_steps}")
            tau_star, k_star = _proposals(history, ctrl)
            if order_control:
                ctrl.current_k = select_order(ctrl.current_k, k_star, ctrl)
            k_n = ctrl.current_k
            tau = clamp_tau(history.latest.tau, tau_star, ctrl)
            remaining = t_final - history.latest.t
            truncated = tau >= remaining
            if truncated:
                tau = remaining
            space, history = spaceadapt.adapt_mesh(
                history, cfg.tol_s, cfg.theta_r, cfg.theta_c,
                generations=2, max_rounds=cfg.adapt_max_rounds)
            k_use = min(k_n, len(history) - 1)
            order = k_use if cfg.predictor_order == "k" else k_use - 1
            order = min(order, len(history) - 1)
            t_next = min(history.latest.t + tau, t_final)
            if truncated:
                t_next = t_final
            mhat = predictor(history, t_next, order)
            taus = [history[-1].t - history[-2].t, tau]
            scheme = bdf_coefficients(taus[-k_use:], k_use, problem.c_e)
            res = do_step(history, scheme, tau, mhat, problem,
                          normalize=cfg.normalize, solver=solver,
                          solver_tol=cfg.solver_tol)
            history.push(t_next, tau, res.m, res.v)
            try:
                row, err = _trace_row(problem, space, t_next, tau, k_use,
                                      res.m, res.v, res.solve,
                                      res.constraint_residual, err)
                trace.append(row)
            except ValueError as exc:
                raise StepFailureError(str(exc)) from exc
            if cfg.out_vtk_prefix:
                _write_vtk_frame(cfg, space, res, len(trace) - 1)
    except NumericsError as exc:
        exc.trace = trace
        if cfg.out_csv:
            diagnostics.export_csv(trace, cfg.out_csv)
        raise
    if cfg.out_csv:
        diagnostics.export_csv(trace, cfg.out_csv)
    return trace


def _write_vtk_frame(cfg, space, res, index):
    eta = spaceadapt.indicators(res.m)
    path = f"{cfg.out_vtk_prefix}{index:06d}.vtk"
    diagnostics.export_vtk(space.mesh, path,
                           point_vectors={"m": res.m, "v": res.v},
                           cell_scalars={"eta": eta.eta})


def fit_slope(xs, ys):
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs)), np.log(np.asarray(ys))
    return float(np.polyfit(lx, ly, 1)[0])


def sweep(cfg: Config, param: str, values) -> dict:
    """Run a family of configurations varying one tolerance parameter."""
    if param not in ("tol_t", "tol_s"):
        raise ConfigError(f"sweep parameter must be tol_t or tol_s, not {param!r}")
    rows = []
    for val in values:
        sub = replace(cfg, **{param: float(val)}, out_csv=None, out_vtk_prefix=None)
        trace = run(sub)
        rows.append({
            param: float(val),
            "err_t": trace.err_t,
            "steps": trace.step_count(),
            "max_dofs": max(r.dofs for r in trace.rows),
        })
    errs = [r["err_t"] for r in rows]
    slope = fit_slope(values, errs) if len(rows) >= 2 and all(
        math.isfinite(e) and e > 0 for e in errs) else math.nan
    return {"rows": rows, "slope": slope}
