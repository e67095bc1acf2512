import math

import numpy as np
import pytest

from llgadapt import fem
from llgadapt.errors import DegeneratePredictorError, InvalidStepError
from llgadapt.fem import FESpace, FieldCoeffs
from llgadapt.mesh import create_rect_mesh
from llgadapt.problems import get_example
from llgadapt.stepping import (TimeHistory, assemble_step_system,
                               bdf_coefficients, do_step, predictor)


def _space(n=2, p=1):
    return FESpace(create_rect_mesh(((0.0, 0.0), (1.0, 1.0)), n, n), p)


def _const_field(space, vec):
    return FieldCoeffs(space, np.outer(vec, np.ones(space.ndof)))


class StationaryProblem:
    alpha = 1.0
    c_e = 1.0
    h_ext = None


class TestBdfCoefficients:
    def test_k1_is_implicit_euler(self):
        sch = bdf_coefficients([0.37], 1)
        assert sch.xi == 1.0
        assert np.allclose(sch.history_weights, [1.0])
        assert np.allclose(sch.delta, [1.0, -1.0])

    def test_k2_uniform_limit(self):
        sch = bdf_coefficients([0.1, 0.1], 2)
        assert np.allclose(sch.delta, [1.5, -2.0, 0.5], atol=1e-14)

    def test_k2_ratio_sqrt2(self):
        k = math.sqrt(2.0)
        sch = bdf_coefficients([1.0, k], 2)
        assert abs(sch.delta[0] - (1 + 2 * k) / (1 + k)) < 1e-14
        assert abs(sch.delta[1] + (1 + k)) < 1e-14
        assert abs(sch.delta[2] - k**2 / (1 + k)) < 1e-14
        assert abs(sch.delta.sum()) < 1e-14

    def test_closed_form_matches_collocation(self):
        rng = np.random.default_rng(0)
        from llgadapt.stepping import _collocation_delta
        for _ in range(50):
            steps = rng.uniform(0.5, 1.5, size=2).tolist()
            closed = bdf_coefficients(steps, 2).delta
            assert np.allclose(closed, _collocation_delta(steps), atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_polynomial_exactness(self, k):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            steps = rng.uniform(0.5, 1.5, size=k).tolist()
            sch = bdf_coefficients(steps, k)
            assert abs(sch.delta.sum()) < 1e-12
            assert abs(sch.xi - sch.history_weights.sum()) < 1e-12
            ts = np.concatenate([[0.0], np.cumsum(steps)])
            poly = np.polynomial.Polynomial(rng.normal(size=k + 1))
            states = poly(ts[::-1])
            deriv = float(np.dot(sch.delta, states)) / steps[-1]
            worst = max(worst, abs(deriv - float(poly.deriv()(ts[-1]))))
        assert worst <= 1e-12

    def test_beta_scaling(self):
        sch = bdf_coefficients([0.2, 0.2], 2, c_e=3.0)
        assert abs(sch.beta - 3.0 / 1.5) < 1e-14

    def test_bad_steps_rejected(self):
        with pytest.raises(InvalidStepError):
            bdf_coefficients([0.1, -0.1], 2)
        with pytest.raises(InvalidStepError):
            bdf_coefficients([0.1], 2)


class TestPredictor:
    def test_order0_normalizes_latest(self):
        space = _space()
        hist = TimeHistory()
        m = _const_field(space, [0.0, 0.0, 2.0])
        hist.push(0.0, 0.0, m, _const_field(space, [0, 0, 0]))
        mhat = predictor(hist, 0.5, 0)
        assert np.allclose(mhat.values[2], 1.0)

    def test_constant_history_any_order(self):
        space = _space()
        hist = TimeHistory()
        vec = np.array([0.6, 0.8, 0.0])
        for i, t in enumerate([0.0, 0.1, 0.25]):
            hist.push(t, 0.1 if i else 0.0, _const_field(space, vec),
                      _const_field(space, [0, 0, 0]))
        for order in (0, 1, 2):
            mhat = predictor(hist, 0.4, order)
            assert np.allclose(mhat.values, np.outer(vec, np.ones(space.ndof)),
                               atol=1e-13)

    def test_linear_extrapolation_and_normalization(self):
        space = _space()
        hist = TimeHistory()
        hist.push(0.0, 0.0, _const_field(space, [1, 0, 0]),
                  _const_field(space, [0, 0, 0]))
        hist.push(1.0, 1.0, _const_field(space, [0, 1, 0]),
                  _const_field(space, [0, 0, 0]))
        mhat = predictor(hist, 2.0, 1)
        expect = np.array([-1.0, 2.0, 0.0]) / math.sqrt(5.0)
        assert np.allclose(mhat.values[:, 0], expect, atol=1e-14)

    def test_degenerate_extrapolant_raises(self):
        space = _space()
        hist = TimeHistory()
        hist.push(0.0, 0.0, _const_field(space, [1, 0, 0]),
                  _const_field(space, [0, 0, 0]))
        hist.push(1.0, 1.0, _const_field(space, [-1, 0, 0]),
                  _const_field(space, [0, 0, 0]))
        with pytest.raises(DegeneratePredictorError):
            predictor(hist, 0.5, 1)


class TestStepSystem:
    def test_equilibrium_rhs_vanishes(self):
        space = _space()
        hist = TimeHistory()
        m0 = _const_field(space, [0.0, 0.0, 1.0])
        hist.push(0.0, 0.0, m0, _const_field(space, [0, 0, 0]))
        sch = bdf_coefficients([0.1], 1)
        sys = assemble_step_system(space, sch, hist, m0, 0.1, None, 1.0)
        assert np.abs(sys.f).max() < 1e-14

    def test_tau_limit_continuity(self):
        space = _space()
        hist = TimeHistory()
        rng = np.random.default_rng(1)
        m0 = FieldCoeffs(space, rng.normal(size=(3, space.ndof))).normalized()
        hist.push(0.0, 0.0, m0, _const_field(space, [0, 0, 0]))
        sch = bdf_coefficients([1.0], 1)
        sys_tiny = assemble_step_system(space, sch, hist, m0, 1e-14, None, 0.7)
        sys_zero = assemble_step_system(space, sch, hist, m0, 0.0, None, 0.7)
        diff = (sys_tiny.A - sys_zero.A)
        assert abs(diff).max() < 1e-12

    def test_manufactured_residual_decreases_with_h(self):
        # plug the interpolated exact time derivative and multiplier into
        # the assembled system; the H1-dual residual must shrink at least
        # at rate p
        import scipy.sparse.linalg as spla

        prob = get_example("example1")
        p = 2
        res_prev = None
        rates = []
        for n in (4, 8, 16):
            space = FESpace(create_rect_mesh(prob.bounds, n, n), p)
            h_p = (1.0 / n) ** p
            tau = 1e-3 * h_p  # keep the BDF consistency term subdominant
            hist = TimeHistory()
            m0 = fem.interpolate(lambda X: prob.exact_m(0.0, X), space)
            hist.push(0.0, 0.0, m0, _const_field(space, [0, 0, 0]))
            sch = bdf_coefficients([tau], 1, prob.c_e)
            mhat = fem.interpolate(lambda X: prob.exact_m(tau, X), space).normalized()
            sys = assemble_step_system(space, sch, hist, mhat, tau,
                                       prob.h_ext, prob.alpha, t_n=tau)
            v_ex = fem.interpolate(lambda X: prob.dt_m(tau, X), space)
            lam_vals = -prob.c_e * _laplace_normal(prob, tau, space)
            lam_ex = FieldCoeffs(space, lam_vals)
            resid = sys.f - sys.A @ v_ex.stacked() - sys.B.T @ lam_ex.stacked()
            h1 = spla.splu((space.mass() + space.stiffness()).tocsc())
            parts = resid.reshape(3, space.ndof)
            dual = math.sqrt(sum(float(parts[c] @ h1.solve(parts[c]))
                                 for c in range(3)))
            if res_prev is not None:
                rates.append(math.log2(res_prev / dual))
            res_prev = dual
        assert min(rates) >= p - 0.4

    def test_stationary_step(self):
        space = _space()
        hist = TimeHistory()
        m0 = _const_field(space, [0.0, 0.0, 1.0])
        hist.push(0.0, 0.0, m0, _const_field(space, [0, 0, 0]))
        sch = bdf_coefficients([0.05], 1)
        res = do_step(hist, sch, 0.05, m0, StationaryProblem())
        assert np.abs(res.v.values).max() < 1e-12
        assert np.allclose(res.m.values, m0.values, atol=1e-12)
        assert np.abs(res.lam.values).max() < 1e-10
        assert res.constraint_residual < 1e-12


def _laplace_normal(prob, t, space):
    """Scalar multiplier field lambda = -C_e (lap m . m) = C_e |grad m|^2."""
    X = space.dof_coords
    g = prob.exact_grad_m(t, X)  # (n, 3, 2)
    return (np.einsum("nck,nck->n", g, g))[None, :]


class TestDoStepOnManufactured:
    def test_constraint_residual_small_over_run(self):
        prob = get_example("example1")
        space = FESpace(create_rect_mesh(prob.bounds, 8, 8), 2)
        hist = TimeHistory()
        m0 = fem.interpolate(lambda X: prob.exact_m(0.0, X), space)
        v0 = fem.interpolate(lambda X: prob.dt_m(0.0, X), space)
        hist.push(0.0, 0.0, m0, v0)
        tau = 1e-3
        worst = 0.0
        for n in range(10):
            k = 1 if len(hist) < 2 else 2
            sch = bdf_coefficients([tau] * k, k, prob.c_e)
            mhat = predictor(hist, hist.latest.t + tau, min(k, len(hist) - 1))
            res = do_step(hist, sch, tau, mhat, prob, normalize=False)
            hist.push(hist.latest.t + tau, tau, res.m, res.v)
            worst = max(worst, res.constraint_residual)
        assert worst <= 1e-9

    def test_unnormalized_length_drift_is_order_tau(self):
        prob = get_example("example1")
        space = FESpace(create_rect_mesh(prob.bounds, 8, 8), 2)
        drifts = {}
        for tau in (2e-3, 1e-3):
            hist = TimeHistory()
            m0 = fem.interpolate(lambda X: prob.exact_m(0.0, X), space)
            v0 = fem.interpolate(lambda X: prob.dt_m(0.0, X), space)
            hist.push(0.0, 0.0, m0, v0)
            nsteps = int(round(0.02 / tau))
            for n in range(nsteps):
                k = 1 if len(hist) < 2 else 2
                sch = bdf_coefficients([tau] * k, k, prob.c_e)
                mhat = predictor(hist, hist.latest.t + tau, min(k, len(hist) - 1))
                res = do_step(hist, sch, tau, mhat, prob, normalize=False)
                hist.push(hist.latest.t + tau, tau, res.m, res.v)
            drifts[tau] = np.abs(hist.latest.m.nodal_lengths() - 1.0).max()
        # same final time with half the step: drift should shrink roughly
        # linearly in tau (allow generous slack; regression guard)
        assert drifts[1e-3] < 0.75 * drifts[2e-3]
        assert drifts[2e-3] < 0.05


class TestEnergyDecayBdf1:
    def test_zero_field_energy_nonincreasing(self):
        prob = get_example("example3", t_final=0.02)
        space = FESpace(create_rect_mesh(prob.bounds, 4, 4), 1)
        hist = TimeHistory()
        m0 = fem.interpolate(prob.m0, space).normalized()
        hist.push(0.0, 0.0, m0, _const_field(space, [0, 0, 0]))
        tau = 1e-3
        energies = [fem.norms(m0)["h1_semi"] ** 2]
        for _ in range(10):
            sch = bdf_coefficients([tau], 1, prob.c_e)
            mhat = predictor(hist, hist.latest.t + tau, 0)
            res = do_step(hist, sch, tau, mhat, prob, normalize=False)
            hist.push(hist.latest.t + tau, tau, res.m, res.v)
            energies.append(fem.norms(res.m)["h1_semi"] ** 2)
        for a, b in zip(energies, energies[1:]):
            assert b <= a * (1 + 1e-9)
