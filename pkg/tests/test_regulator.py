import numpy as np
import pytest
from scipy.integrate import solve_ivp

from orlfc.exo import build_constant_exo, build_scenario3_exo
from orlfc.network import GridState, dynamics_rhs, optimal_dispatch, steady_state_solve
from orlfc.regulator import (FeasibilityError, InternalModelRegulator,
                             SteppingRegulator, classical_control,
                             equivalent_control, hyperbolicity_check,
                             lie_relative_degree_check, manifold_evaluate,
                             solve_feasible_angles, zero_dynamics_rhs)


class TestRelativeDegree:
    def test_structural_zero_and_coefficient(self, params, scenario1_exo):
        rep = lie_relative_degree_check(params, scenario1_exo, n_samples=10, seed=2)
        assert rep.max_lg_h == 0.0
        assert rep.max_dev_lglf_h < 1e-6

    def test_area1_coefficient_value(self, params, scenario1_exo):
        rep = lie_relative_degree_check(params, scenario1_exo, n_samples=3, seed=0)
        # arithmetic from the benchmark constants: 1 / (3.95 * 7.2)
        assert rep.expected_diag[0] == pytest.approx(1.0 / 28.44, abs=1e-12)
        assert rep.expected_diag[0] == pytest.approx(0.035162, abs=5e-7)


class TestFeasibleAngles:
    def test_zero_flows(self, params):
        V = np.full(params.n, 0.45)
        P_d = np.array([0.1, -0.2, 0.05, 0.05])
        theta, phi = solve_feasible_angles(-P_d, V, P_d, params)
        assert np.max(np.abs(theta)) < 1e-12

    def test_scalar_arcsin_case(self):
        from orlfc.network import CostModel, NetworkParams
        params = NetworkParams(
            n=2, edges=((0, 1, 1.0),), b_self=np.array([-2.0, -2.0]),
            tau_p=np.ones(2), tau_v=np.ones(2), tau_c=np.ones(2),
            tau_delta=np.ones(2), psi=np.ones(2), xi=np.ones(2),
            x_d=np.full(2, 1.5), x_d_prime=np.full(2, 0.5),
            e_field=np.ones(2), cost=CostModel(np.ones(2), np.zeros(2), np.zeros(2)),
            comm_edges=((0, 1),))
        p = 0.6
        theta, _ = solve_feasible_angles(np.array([p, -p]), np.ones(2),
                                         np.zeros(2), params)
        assert theta[0] == pytest.approx(np.arcsin(p), abs=1e-12)

    def test_random_balanced_injections(self, params):
        rng = np.random.default_rng(4)
        V = np.full(params.n, 0.45)
        from orlfc.network import line_coupling
        for _ in range(20):
            inj = 0.3 * rng.standard_normal(params.n)
            inj -= np.mean(inj)
            theta, phi = solve_feasible_angles(inj, V, np.zeros(params.n), params)
            resid = params.incidence @ (line_coupling(V, params) * np.sin(theta)) - inj
            assert np.max(np.abs(resid)) < 1e-10
            assert np.all(np.abs(theta) < np.pi / 2)

    def test_imbalance_rejected(self, params):
        with pytest.raises(FeasibilityError, match="balance"):
            solve_feasible_angles(np.ones(params.n), np.full(params.n, 0.45),
                                  np.zeros(params.n), params)

    def test_overload_leaves_branch(self, params):
        V = np.full(params.n, 0.45)  # line capacity ~ V^2 B ~ 5.7 p.u.
        inj = np.array([8.0, -8.0, 0.0, 0.0])
        with pytest.raises(FeasibilityError):
            solve_feasible_angles(inj, V, np.zeros(params.n), params)


class TestEquivalentControl:
    def test_reduces_to_dispatch_at_equilibrium(self, params, steady0):
        # voltage residual and exosystem rate both vanish
        u = equivalent_control(steady0.state.V, steady0.state.P_c,
                               steady0.state.theta, np.zeros(params.n), params)
        assert np.allclose(u, steady0.state.P_c, atol=1e-9)

    def test_zero_angles_kill_voltage_term(self, params):
        V = np.full(params.n, 0.6)  # far from voltage equilibrium
        P_c = np.zeros(params.n)
        gs = np.array([0.1, -0.1, 0.2, 0.0])
        u = equivalent_control(V, P_c, np.zeros(params.m), gs, params)
        assert np.allclose(u, P_c - params.tau_c * gs, atol=1e-14)

    def test_second_output_derivative_vanishes(self, params, scenario1_exo):
        # finite-difference h-double-dot along the closed-loop flow on the
        # zero set: the defining property of the equivalent control
        rng = np.random.default_rng(8)
        n, m = params.n, params.m
        d = scenario1_exo.initial_state()
        for trial in range(3):
            V = 0.42 + 0.05 * rng.random(n)
            P_c = 0.2 * rng.standard_normal(n)
            P_d = scenario1_exo.output(d)
            P_c -= np.mean(P_c + P_d)  # balance
            theta, _ = solve_feasible_angles(P_c, V, P_d, params)
            delta = 0.1 * rng.standard_normal(n)
            gs = scenario1_exo.output_rate(d)
            u_e = equivalent_control(V, P_c, theta, gs, params)
            x = np.concatenate([theta, np.zeros(n), V, P_c, delta])

            def omega_dot(xv, dv):
                return dynamics_rhs(xv, scenario1_exo.output(dv), u_e,
                                    params)[m:m + n]

            # step at the central-difference noise floor of the 1e-13-level
            # roundoff in the flow sums
            h = 3e-5
            k = dynamics_rhs(x, P_d, u_e, params)
            dd = scenario1_exo.derivative(d)
            fwd = omega_dot(x + h * k, d + h * dd)
            bwd = omega_dot(x - h * k, d - h * dd)
            hdd = (fwd - bwd) / (2 * h)
            assert np.max(np.abs(hdd)) < 1e-8

    def test_nonpositive_voltage_rejected(self, params):
        with pytest.raises(FeasibilityError, match="voltage"):
            equivalent_control(np.array([0.5, -0.1, 0.5, 0.5]), np.zeros(4),
                               np.zeros(params.m), np.zeros(4), params)


class TestZeroDynamics:
    def test_equilibrium_fixed_point(self, params, steady0, mean_injection):
        xb = np.concatenate([steady0.state.V, steady0.state.P_c, steady0.state.delta])
        dxb, theta, _ = zero_dynamics_rhs(xb, mean_injection, np.zeros(params.n),
                                          params)
        assert np.max(np.abs(dxb)) < 1e-9
        assert np.allclose(theta, steady0.state.theta, atol=1e-9)

    def test_delta_block_eigenvalues(self, params):
        # eigensolver oracle on -tau_delta^-1 (I + xi^-1 Q Lcom Q)
        q = params.cost.q
        M = np.eye(params.n) + (q[:, None] * params.l_com * q[None, :]) / params.xi[:, None]
        A33 = -M / params.tau_delta[:, None]
        w = np.linalg.eigvals(A33)
        assert np.all(np.real(w) < 0)

    def test_feasible_angles_are_first_integrals(self, params, steady0,
                                                 mean_injection):
        # theta* is conserved by the zero dynamics: two starts on different
        # leaves converge to responses separated by their dispatch offset,
        # while equal-leaf starts merge
        n = params.n
        rng = np.random.default_rng(3)
        xb0 = np.concatenate([steady0.state.V, steady0.state.P_c,
                              steady0.state.delta])

        def integrate(xb, T=12.0):
            sol = solve_ivp(lambda _, z: zero_dynamics_rhs(
                z, mean_injection, np.zeros(n), params, balance="project")[0],
                (0, T), xb, rtol=1e-11, atol=1e-13)
            return sol.y[:, -1]

        # same leaf: perturb delta only (theta* untouched)
        xb_a = xb0.copy()
        xb_a[2 * n:] += 0.05 * rng.standard_normal(n)
        assert np.max(np.abs(integrate(xb_a) - integrate(xb0))) < 1e-7

        # different leaf: re-dispatch within the balance plane
        shift = np.array([0.05, -0.05, 0.0, 0.0])
        other = steady_state_solve(mean_injection, params,
                                   dispatch=steady0.state.P_c + shift)
        xb_b = np.concatenate([other.state.V, other.state.P_c, other.state.delta])
        end_b = integrate(xb_b)
        end_0 = integrate(xb0)
        assert np.max(np.abs(end_b[n:2 * n] - end_0[n:2 * n] - shift)) < 1e-7

        theta_b, _ = solve_feasible_angles(end_b[n:2 * n], end_b[:n],
                                           mean_injection, params)
        assert np.allclose(theta_b, other.state.theta, atol=1e-7)


class TestHyperbolicity:
    def test_benchmark_network_passes(self, params, steady0, mean_injection):
        rep = hyperbolicity_check(params, steady0, mean_injection)
        assert rep.passed
        assert rep.n_neutral == params.n
        assert rep.neutral_alignment < 1e-6
        assert rep.transverse_margin > 1.0
        assert np.all(rep.a33_eigenvalues < 0)
        # the raw determinant scan dips to zero along the dispatch family
        assert rep.min_abs_det_raw < 1e-12
        assert rep.min_abs_det_deflated > 1e-3

    def test_full_spectrum_against_eigen_oracle(self, params, steady0,
                                                mean_injection):
        # independent assembly: finite-difference Jacobian of the zero
        # dynamics (coarser step) and direct eigensolve
        n = params.n
        xb = np.concatenate([steady0.state.V, steady0.state.P_c,
                             steady0.state.delta])

        def f(z):
            return zero_dynamics_rhs(z, mean_injection, np.zeros(n), params,
                                     balance="project")[0]

        J = np.zeros((3 * n, 3 * n))
        h = 3e-6
        for k in range(3 * n):
            e = np.zeros(3 * n)
            e[k] = h
            J[:, k] = (f(xb + e) - f(xb - e)) / (2 * h)
        w = np.sort(np.real(np.linalg.eigvals(J)))
        rep = hyperbolicity_check(params, steady0, mean_injection)
        w_rep = np.sort(np.real(rep.full_eigenvalues))
        assert np.max(np.abs(w - w_rep)) < 1e-4
        # nonneutral part strictly in the left half-plane
        assert np.sum(np.abs(w) < 1e-4) == n
        assert np.all(w[np.abs(w) >= 1e-4] < 0)

    def test_decoupled_blocks_reduce_to_spectra(self):
        # with A12 = A21 = 0 the Schur condition is the two block spectra
        a11 = np.diag([-1.0, -2.0])
        a22 = np.diag([-3.0, -0.5])
        for rho in np.linspace(0, 10, 50):
            S = a22 - 1j * rho * np.eye(2)
            assert abs(np.linalg.det(S)) > 0.1


class TestManifold:
    def test_constant_exo_reduces_to_steady_state(self, params, mean_injection):
        exo = build_constant_exo(mean_injection)
        pts, resid = manifold_evaluate(params, exo, exo.initial_state(),
                                       np.array([0.0, 5.0]), warmup=40.0)
        ss = steady_state_solve(mean_injection, params)
        for pt in pts:
            assert np.allclose(pt.V, ss.state.V, atol=1e-8)
            assert np.allclose(pt.P_c, ss.state.P_c, atol=1e-8)
            assert np.allclose(pt.delta, ss.state.delta, atol=1e-8)
            assert np.allclose(pt.u, ss.u_bar, atol=1e-8)
            assert np.all(pt.omega == 0.0)
        assert resid < 1e-6

    def test_periodicity_and_invariance(self, params, scenario1_exo):
        period = 15.0
        times = np.array([0.0, 3.0, 7.5, period, period + 3.0])
        pts, resid = manifold_evaluate(params, scenario1_exo,
                                       scenario1_exo.initial_state(), times,
                                       warmup=80.0)
        assert resid < 1e-6
        for a, b in [(0, 3), (1, 4)]:
            assert np.max(np.abs(pts[a].P_c - pts[b].P_c)) < 1e-6
            assert np.max(np.abs(pts[a].V - pts[b].V)) < 1e-6
            assert np.max(np.abs(pts[a].delta - pts[b].delta)) < 1e-6
            assert np.max(np.abs(pts[a].u - pts[b].u)) < 1e-6

    def test_warmup_lands_on_attractor(self, params, scenario1_exo):
        reg = InternalModelRegulator(params, scenario1_exo, warmup=60.0)
        xb = reg.prepare(scenario1_exo.initial_state())
        rate = reg.internal_rhs(xb, scenario1_exo.initial_state())
        # V settled: voltage row of the zero dynamics near zero
        assert np.max(np.abs(rate[:params.n])) < 1e-8


class TestControlLaw:
    def test_on_manifold_feedback_vanishes(self, params, scenario1_exo):
        reg = InternalModelRegulator(params, scenario1_exo, warmup=30.0)
        d0 = scenario1_exo.initial_state()
        xb = reg.prepare(d0)
        pt = reg.manifold_point(xb, d0)
        u = classical_control(pt.as_state(), pt)
        assert np.allclose(u, pt.u, atol=1e-14)

    def test_constant_injection_reduces_to_shifted_delta_law(
            self, params, mean_injection):
        # u = u_bar + (delta - delta_bar): the stabilizing droop law family
        exo = build_constant_exo(mean_injection)
        reg = InternalModelRegulator(params, exo, warmup=30.0)
        xb = reg.prepare(exo.initial_state())
        ss = steady_state_solve(mean_injection, params)
        rng = np.random.default_rng(1)
        for _ in range(5):
            delta = ss.state.delta + 0.2 * rng.standard_normal(params.n)
            u = reg.control(delta, xb, exo.initial_state())
            expected = ss.u_bar + (delta - ss.state.delta)
            assert np.allclose(u, expected, atol=1e-8)

    def test_stepping_interface(self, params, scenario1_exo, mean_injection):
        ss = steady_state_solve(mean_injection, params)
        reg = SteppingRegulator(InternalModelRegulator(params, scenario1_exo,
                                                       warmup=30.0))
        reg.reset(scenario1_exo.initial_state())
        u0 = reg.step(0.0, ss.state, 0.01)
        assert u0.shape == (params.n,)
        u1 = reg.step(0.01, ss.state, 0.01)
        assert np.all(np.isfinite(u1))
        assert len(reg.residuals) == 2


class TestScenario3Internal:
    def test_bank_exosystem_manifold(self, params):
        # frozen line flows: the bank injections are absorbed area-locally
        exo = build_scenario3_exo(params)
        d0 = exo.initial_state()
        times = np.array([0.0, 40.0])
        pts, resid = manifold_evaluate(params, exo, d0, times, anchor="local",
                                       warmup=60.0)
        assert resid < 1e-5
        d40 = exo.flow(d0, 40.0)
        delta_inj = exo.output(d40) - exo.output(d0)
        assert np.max(np.abs((pts[1].P_c - pts[0].P_c) + delta_inj)) < 1e-5
