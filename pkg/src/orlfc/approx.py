"""Approximate optimal regulation: penalty functional and the gradient loop.

The candidate manifold x(d) and feedforward u~(d) are expanded on a
trigonometric basis over the exosystem's attractor.  The attractor is
parameterized either by the phases of the rotation blocks (a low-dimensional
torus, integrated with the tensor trapezoid rule, which is spectrally
accurate for periodic integrands) or, when the frequency set is too rich for
a tensor grid, by time along one representative window of the trajectory.

The loop alternately re-solves the invariance equation for x(d) given u~(d)
(Fourier collocation Newton, with trajectory integration as a fallback) and
descends the quadrature penalty with a finite-difference gradient and a
backtracking line search, stopping once the penalty reaches the requested
level.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .network import GridState, dynamics_rhs, optimal_dispatch

__all__ = [
    "extended_output",
    "tracking_error",
    "TrigBasis",
    "PenaltyDomain",
    "penalty_eval",
    "penalty_of_u",
    "penalty_gradient_fd",
    "solve_invariance_pde",
    "algorithm1_run",
    "ApproxSolution",
    "ApproxController",
    "Algorithm1Stall",
    "classical_init",
]


def extended_output(state):
    """q(x) = (omega, P_c), the pair driven to (0, optimal dispatch)."""
    return np.concatenate([state.omega, state.P_c])


def tracking_error(state, P_d, cost):
    """e = q(x) - q_ref with q_ref = (0, optimal dispatch of the injections)."""
    ref = np.concatenate([np.zeros(len(state.omega)), optimal_dispatch(P_d, cost)])
    return extended_output(state) - ref


# ---------------------------------------------------------------------------
# basis


class TrigBasis:
    """Real trigonometric basis over p linear-in-time coordinates.

    Functions are tensor products over coordinates of {1, sin(k c), cos(k c)}
    restricted to total order <= the per-coordinate maximum.  For a
    time-parameterized domain, pass a single coordinate with the explicit
    frequency list instead of integer harmonics.
    """

    def __init__(self, rates, harmonics):
        # rates: d(coord_j)/dt along the flow; harmonics: per-coordinate list
        # of positive frequencies-in-coordinate (integers for phases).
        self.rates = np.asarray(rates, dtype=float)
        self.harmonics = [list(map(float, h)) for h in harmonics]
        self.p = len(self.rates)
        modes = []
        per_coord = []
        for freqs in self.harmonics:
            opts = [("one", 0.0)]
            for f in freqs:
                opts.append(("sin", f))
                opts.append(("cos", f))
            per_coord.append(opts)
        for combo in itertools.product(*per_coord):
            modes.append(tuple(combo))
        self.modes = modes
        self.K = len(modes)

    @staticmethod
    def _fval(kind, f, c):
        if kind == "one":
            return np.ones_like(c)
        if kind == "sin":
            return np.sin(f * c)
        return np.cos(f * c)

    @staticmethod
    def _fder(kind, f, c):
        if kind == "one":
            return np.zeros_like(c)
        if kind == "sin":
            return f * np.cos(f * c)
        return -f * np.sin(f * c)

    def eval(self, coords):
        """(M, K) matrix of basis values at coordinate rows."""
        C = np.atleast_2d(np.asarray(coords, dtype=float))
        if C.shape[1] != self.p:
            C = C.reshape(-1, self.p)
        M = C.shape[0]
        out = np.ones((M, self.K))
        for k, mode in enumerate(self.modes):
            val = np.ones(M)
            for j, (kind, f) in enumerate(mode):
                val = val * self._fval(kind, f, C[:, j])
            out[:, k] = val
        return out

    def flow_deriv(self, coords):
        """(M, K) matrix of d/dt of each basis function along the flow."""
        C = np.atleast_2d(np.asarray(coords, dtype=float))
        if C.shape[1] != self.p:
            C = C.reshape(-1, self.p)
        M = C.shape[0]
        out = np.zeros((M, self.K))
        for k, mode in enumerate(self.modes):
            vals = [self._fval(kind, f, C[:, j]) for j, (kind, f) in enumerate(mode)]
            ders = [self._fder(kind, f, C[:, j]) for j, (kind, f) in enumerate(mode)]
            total = np.zeros(M)
            for j in range(self.p):
                term = self.rates[j] * ders[j]
                for i in range(self.p):
                    if i != j:
                        term = term * vals[i]
                total += term
            out[:, k] = total
        return out

    def spec(self):
        return {"rates": self.rates.tolist(), "harmonics": self.harmonics}

    @classmethod
    def from_spec(cls, spec):
        return cls(spec["rates"], spec["harmonics"])


# ---------------------------------------------------------------------------
# penalty domain


@dataclass
class PenaltyDomain:
    """Quadrature over the exosystem attractor, with matching basis."""

    kind: str                 # "point" | "torus" | "trajectory"
    coords: np.ndarray        # (M, p) node coordinates
    weights: np.ndarray       # positive, summing to the domain measure
    d_nodes: np.ndarray       # (M, dim_d) exosystem state at each node
    basis: TrigBasis
    exo: object
    rates: np.ndarray         # d(coords)/dt, used at runtime
    meta: dict = field(default_factory=dict)

    @property
    def measure(self):
        return float(np.sum(self.weights))

    def coords_at_time(self, t):
        return self.rates * t + (self.meta.get("coord0") or np.zeros(len(self.rates)))

    @classmethod
    def from_exo(cls, exo_model, order=5, nodes_per_phase=32, max_phases=2,
                 window=None, n_traj_nodes=128):
        """Build the attractor parameterization for a given exosystem.

        Rotation-only exosystems with at most ``max_phases`` distinct
        frequencies become phase tori; richer frequency sets (or active wind
        blocks) fall back to a time-window parameterization whose basis
        carries the exact exosystem frequencies.
        """
        d0 = exo_model.initial_state()
        freqs = exo_model.frequencies()
        rotational = exo_model.is_effectively_rotational()
        active = []
        for f in freqs:
            # a frequency group is active when some block of it has nonzero state
            probe = exo_model.advance_group(d0, f, np.pi / 3) - d0
            if np.max(np.abs(probe)) > 1e-14:
                active.append(f)
        if not active and rotational:
            basis = TrigBasis([], [])
            return cls(kind="point", coords=np.zeros((1, 0)), weights=np.ones(1),
                       d_nodes=d0[None, :], basis=basis, exo=exo_model,
                       rates=np.zeros(0), meta={"coord0": []})
        if rotational and len(active) <= max_phases:
            grids = [np.arange(nodes_per_phase) * (2 * np.pi / nodes_per_phase)
                     for _ in active]
            mesh = np.meshgrid(*grids, indexing="ij")
            coords = np.column_stack([g.ravel() for g in mesh])
            M = coords.shape[0]
            weights = np.full(M, (2 * np.pi) ** len(active) / M)
            d_nodes = np.empty((M, exo_model.dim))
            for idx in range(M):
                d = d0
                for j, f in enumerate(active):
                    d = exo_model.advance_group(d, f, coords[idx, j])
                d_nodes[idx] = d
            basis = TrigBasis(active, [list(range(1, order + 1)) for _ in active])
            return cls(kind="torus", coords=coords, weights=weights, d_nodes=d_nodes,
                       basis=basis, exo=exo_model, rates=np.asarray(active),
                       meta={"coord0": [0.0] * len(active), "order": order})
        # trajectory window
        if window is None:
            fmin = min(active) if active else 2 * np.pi / 600.0
            window = 2 * np.pi / fmin
        ts = np.linspace(0.0, window, n_traj_nodes, endpoint=False)
        d_nodes = np.empty((len(ts), exo_model.dim))
        d = d0.copy()
        d_nodes[0] = d
        for k in range(1, len(ts)):
            d = exo_model.flow(d, ts[k] - ts[k - 1])
            d_nodes[k] = d
        weights = np.full(len(ts), window / len(ts))
        basis = TrigBasis([1.0], [sorted(active)])
        return cls(kind="trajectory", coords=ts[:, None], weights=weights,
                   d_nodes=d_nodes, basis=basis, exo=exo_model, rates=np.ones(1),
                   meta={"coord0": [0.0], "window": window})


# ---------------------------------------------------------------------------
# penalty and invariance equation


def _states_from_coeffs(x_coeffs, domain):
    return domain.basis.eval(domain.coords) @ x_coeffs.T  # (M, dim_x)


def penalty_eval(x_coeffs, domain, params):
    """Quadrature value of the squared tracking error of a candidate manifold."""
    X = _states_from_coeffs(np.asarray(x_coeffs, dtype=float), domain)
    m, n = params.m, params.n
    total = 0.0
    for j in range(X.shape[0]):
        omega = X[j, m:m + n]
        P_c = X[j, m + 2 * n:m + 3 * n]
        ref = optimal_dispatch(domain.exo.gamma @ domain.d_nodes[j], params.cost)
        total += domain.weights[j] * (np.sum(omega ** 2) + np.sum((P_c - ref) ** 2))
    return float(total)


def _closed_loop_rhs(x, d_state, u_ff, params, exo_gamma):
    n = params.n
    m = params.m
    delta = x[m + 3 * n:m + 4 * n]
    return dynamics_rhs(x, exo_gamma @ d_state, u_ff + delta, params)


def _rhs_jacobian(x, d_state, u_ff, params, exo_gamma, h=1e-7):
    dim = x.size
    J = np.empty((dim, dim))
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        J[:, k] = (_closed_loop_rhs(x + e, d_state, u_ff, params, exo_gamma)
                   - _closed_loop_rhs(x - e, d_state, u_ff, params, exo_gamma)) / (2 * h)
    return J


class InvarianceError(RuntimeError):
    pass


def solve_invariance_pde(u_coeffs, domain, params, exo_model, x_init=None,
                         tol=1e-10, max_iter=40):
    """Solve the invariance equation for x(d) given the feedforward u~(d).

    Collocation on the basis nodes: find coefficients X with
        X b'(tau_j) = f(X b(tau_j), d_j) + g (u~_j + K_x X b(tau_j))
    by a Gauss-Newton iteration with analytic block structure.  Falls back to
    integrating the (stable) closed loop along the attractor and projecting
    when no starting point is supplied or Newton fails.
    """
    u_coeffs = np.asarray(u_coeffs, dtype=float)
    B = domain.basis.eval(domain.coords)          # (M, K)
    Bdot = domain.basis.flow_deriv(domain.coords)  # (M, K)
    U = B @ u_coeffs.T                             # (M, n)
    M, K = B.shape
    dim_x = params.m + 4 * params.n

    if x_init is None:
        x_init = _trajectory_projection(u_coeffs, domain, params, exo_model)
    X = np.asarray(x_init, dtype=float).copy()

    def residual(Xc):
        S = B @ Xc.T  # states at nodes
        R = Bdot @ Xc.T
        for j in range(M):
            R[j] -= _closed_loop_rhs(S[j], domain.d_nodes[j], U[j], params,
                                     exo_model.gamma)
        return R, S

    R, S = residual(X)
    rmax = float(np.max(np.abs(R)))
    for _ in range(max_iter):
        if rmax < tol:
            break
        # assemble dense Gauss-Newton system over vec(X) (column-major by basis)
        A_big = np.zeros((M * dim_x, dim_x * K))
        for j in range(M):
            Jf = _rhs_jacobian(S[j], domain.d_nodes[j], U[j], params, exo_model.gamma)
            blk = np.kron(Bdot[j][None, :], np.eye(dim_x)) \
                - np.kron(B[j][None, :], Jf).reshape(dim_x, dim_x * K)
            A_big[j * dim_x:(j + 1) * dim_x] = blk
        rhs = -R.reshape(M * dim_x)
        step, *_ = np.linalg.lstsq(A_big, rhs, rcond=None)
        dX = _unvec(step, dim_x, K)
        lam = 1.0
        improved = False
        while lam > 1e-6:
            Xt = X + lam * dX
            Rt, St = residual(Xt)
            rt = float(np.max(np.abs(Rt)))
            if rt < rmax:
                X, R, S, rmax = Xt, Rt, St, rt
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
    if rmax >= tol:
        # trajectory fallback, then a final Newton pass
        X = _trajectory_projection(u_coeffs, domain, params, exo_model)
        R, S = residual(X)
        rmax = float(np.max(np.abs(R)))
        if rmax >= max(tol, 1e-8) * 100:
            raise InvarianceError(
                f"invariance solve failed (residual {rmax:.3e})")
    return X, rmax


def _unvec(step, dim_x, K):
    # kron(b^T, I) layout: step ordered as K blocks of dim_x
    return step.reshape(K, dim_x).T


def _trajectory_projection(u_coeffs, domain, params, exo_model, settle=80.0):
    """Bounded response of the stable closed loop, projected on the basis."""
    from .network import steady_state_solve
    u_coeffs = np.asarray(u_coeffs, dtype=float)
    B = domain.basis.eval(domain.coords)

    if domain.kind == "point":
        d = domain.d_nodes[0]
        P_d = exo_model.gamma @ d
        u_ff = (B @ u_coeffs.T)[0]
        x = _steady_under_feedforward(u_ff, P_d, params)
        return x[:, None]

    # start from the steady state of the mean injection, integrate through a
    # settle period plus the window, sample at the nodes
    d0 = domain.d_nodes[0]
    P_d0 = exo_model.output(d0)
    ss = steady_state_solve(P_d0, params)
    x0 = ss.state.as_vector()
    z0 = np.concatenate([exo_model.flow(d0, -settle), x0])
    nd = exo_model.dim

    def rhs(t, z):
        d = z[:nd]
        x = z[nd:]
        coords = domain.coords_at_time(t - settle)
        u_ff = (domain.basis.eval(coords) @ u_coeffs.T)[0]
        return np.concatenate([exo_model.derivative(d),
                               _closed_loop_rhs(x, d, u_ff, params, exo_model.gamma)])

    if domain.basis.p != 1:
        raise InvarianceError("trajectory fallback supports one-phase domains only")
    t_nodes = np.asarray([settle + c[0] / domain.rates[0] for c in domain.coords])
    sol = solve_ivp(rhs, (0.0, float(np.max(t_nodes)) + 1e-9), z0, method="RK45",
                    rtol=1e-10, atol=1e-12, t_eval=np.sort(t_nodes))
    if not sol.success:
        raise InvarianceError(f"trajectory fallback failed: {sol.message}")
    order = np.argsort(t_nodes)
    S = np.empty((len(t_nodes), params.m + 4 * params.n))
    S[order] = sol.y[nd:].T
    coeffs, *_ = np.linalg.lstsq(B, S, rcond=None)
    return coeffs.T


def _steady_under_feedforward(u_ff, P_d, params, tol=1e-12, max_iter=80):
    """Fixed point of the closed loop with constant feedforward u = u_ff + delta."""
    from .network import steady_state_solve
    ss = steady_state_solve(np.asarray(P_d, dtype=float), params)
    x = ss.state.as_vector()

    def F(xv):
        delta = xv[params.m + 3 * params.n:]
        return dynamics_rhs(xv, P_d, u_ff + delta, params)

    r = F(x)
    rn = float(np.max(np.abs(r)))
    dim = x.size
    for _ in range(max_iter):
        if rn < tol:
            break
        J = np.empty((dim, dim))
        h = 1e-7
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = h
            J[:, k] = (F(x + e) - F(x - e)) / (2 * h)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        lam = 1.0
        while lam > 1e-8:
            xt = x + lam * step
            if np.any(xt[params.m + params.n:params.m + 2 * params.n] <= 0):
                lam *= 0.5
                continue
            rt = F(xt)
            if np.max(np.abs(rt)) < rn:
                x, r = xt, rt
                rn = float(np.max(np.abs(r)))
                break
            lam *= 0.5
        else:
            break
    if rn > 1e-8:
        raise InvarianceError(f"closed-loop steady state did not converge ({rn:.2e})")
    return x


# ---------------------------------------------------------------------------
# the iteration


def penalty_of_u(u_coeffs, domain, params, exo_model, x_init=None, tol=1e-10):
    X, _ = solve_invariance_pde(u_coeffs, domain, params, exo_model,
                                x_init=x_init, tol=tol)
    return penalty_eval(X, domain, params), X


def penalty_gradient_fd(u_coeffs, domain, params, exo_model, x_current,
                        h=1e-6, tol=1e-10):
    """Central-difference gradient of the penalty in the u~ coefficients."""
    u_coeffs = np.asarray(u_coeffs, dtype=float)
    grad = np.zeros_like(u_coeffs)
    for idx in np.ndindex(u_coeffs.shape):
        up = u_coeffs.copy()
        up[idx] += h
        um = u_coeffs.copy()
        um[idx] -= h
        Ip, _ = penalty_of_u(up, domain, params, exo_model, x_init=x_current, tol=tol)
        Im, _ = penalty_of_u(um, domain, params, exo_model, x_init=x_current, tol=tol)
        grad[idx] = (Ip - Im) / (2 * h)
    return grad


class Algorithm1Stall(RuntimeError):
    def __init__(self, msg, best):
        super().__init__(msg)
        self.best = best


@dataclass
class ApproxSolution:
    """Basis-parameterized approximate regulator-equation solution."""

    domain_kind: str
    basis_spec: dict
    u_coeffs: np.ndarray        # feedforward u~(d) coefficients, (n, K)
    x_coeffs: np.ndarray        # manifold coefficients, (m + 4n, K)
    penalty: float
    eps_bar: float
    iterations: int
    converged: bool
    history: list
    coord0: list
    rates: list

    FORMAT = 1

    def save(self, path):
        data = {
            "format": self.FORMAT,
            "domain_kind": self.domain_kind,
            "basis": self.basis_spec,
            "u_coeffs": self.u_coeffs.tolist(),
            "x_coeffs": self.x_coeffs.tolist(),
            "penalty": self.penalty,
            "eps_bar": self.eps_bar,
            "iterations": self.iterations,
            "converged": self.converged,
            "history": self.history,
            "coord0": self.coord0,
            "rates": self.rates,
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if data.get("format") != cls.FORMAT:
            raise ValueError(f"unsupported solution file format {data.get('format')!r}")
        return cls(domain_kind=data["domain_kind"], basis_spec=data["basis"],
                   u_coeffs=np.asarray(data["u_coeffs"]),
                   x_coeffs=np.asarray(data["x_coeffs"]),
                   penalty=float(data["penalty"]), eps_bar=float(data["eps_bar"]),
                   iterations=int(data["iterations"]), converged=bool(data["converged"]),
                   history=list(data["history"]), coord0=list(data["coord0"]),
                   rates=list(data["rates"]))


def classical_init(domain, params, exo_model, anchor="optimal", warmup=300.0):
    """Project the classical regulator solution onto the domain basis.

    Evaluates the internal-model manifold at the quadrature nodes, splits the
    law into u~ = u_e* - delta(d) and fits both u~(d) and x(d) on the basis;
    this realizes the initialization step of the gradient loop.
    """
    from .regulator import InternalModelRegulator
    reg = InternalModelRegulator(params, exo_model, anchor=anchor, warmup=warmup)
    B = domain.basis.eval(domain.coords)
    M = B.shape[0]
    dim_x = params.m + 4 * params.n
    S = np.empty((M, dim_x))
    Uff = np.empty((M, params.n))

    if domain.kind == "point":
        xb = reg.prepare(domain.d_nodes[0])
        pt = reg.manifold_point(xb, domain.d_nodes[0])
        S[0] = pt.as_state().as_vector()
        Uff[0] = pt.u - pt.delta
    elif domain.kind == "torus":
        # advance the internal pair through one fundamental period
        base_rate = float(domain.rates[0])
        period = 2 * np.pi / base_rate
        d0 = domain.d_nodes[0]
        xb0 = reg.prepare(d0)
        nd = exo_model.dim
        sol = solve_ivp(reg._pair_rhs, (0.0, period), np.concatenate([d0, xb0]),
                        method="RK45", rtol=1e-11, atol=1e-13, dense_output=True)
        if not sol.success:
            raise RuntimeError(f"classical initialization failed: {sol.message}")
        for j in range(M):
            t_j = domain.coords[j, 0] / base_rate
            z = sol.sol(t_j)
            pt = reg.manifold_point(z[nd:], z[:nd])
            S[j] = pt.as_state().as_vector()
            Uff[j] = pt.u - pt.delta
    else:
        window = domain.meta["window"]
        d0 = domain.d_nodes[0]
        xb0 = reg.prepare(d0)
        nd = exo_model.dim
        sol = solve_ivp(reg._pair_rhs, (0.0, window), np.concatenate([d0, xb0]),
                        method="RK45", rtol=1e-10, atol=1e-12, dense_output=True)
        if not sol.success:
            raise RuntimeError(f"classical initialization failed: {sol.message}")
        for j in range(M):
            z = sol.sol(domain.coords[j, 0])
            pt = reg.manifold_point(z[nd:], z[:nd])
            S[j] = pt.as_state().as_vector()
            Uff[j] = pt.u - pt.delta

    x_coeffs, *_ = np.linalg.lstsq(B, S, rcond=None)
    u_coeffs, *_ = np.linalg.lstsq(B, Uff, rcond=None)
    return u_coeffs.T, x_coeffs.T


def algorithm1_run(domain, params, exo_model, eps_bar=1e-7, max_iter=500,
                   init=None, anchor="optimal", step0=1e-2, step_max=64.0,
                   armijo=1e-4, stall_limit=10, grad_h=1e-6, inner_tol=1e-10,
                   verbose=False):
    """Gradient loop driving the quadrature penalty below eps_bar.

    ``init`` may be a (u_coeffs, x_coeffs) pair; by default the classical
    solution restricted to the domain is used.  Raises Algorithm1Stall (with
    the best iterate attached) if the line search stops making progress
    before the threshold is met.
    """
    if init is None:
        u_c, x_c = classical_init(domain, params, exo_model, anchor=anchor)
    else:
        u_c, x_c = (np.asarray(init[0], dtype=float), np.asarray(init[1], dtype=float))
    # tighten the initial invariance solve
    x_c, resid0 = solve_invariance_pde(u_c, domain, params, exo_model,
                                       x_init=x_c, tol=inner_tol)
    I_val = penalty_eval(x_c, domain, params)
    history = [I_val]
    # eps_bar = 0 means "as exact as floats allow"; the inner solves leave a
    # penalty floor around the square of their (condition-amplified) tolerance
    threshold = max(eps_bar, 1e-20)

    step = step0
    stall = 0
    it = 0
    u_prev = None
    g_prev = None
    while I_val > threshold and it < max_iter:
        grad = penalty_gradient_fd(u_c, domain, params, exo_model, x_c,
                                   h=grad_h, tol=inner_tol)
        gnorm2 = float(np.sum(grad ** 2))
        if gnorm2 < 1e-30:
            best = _make_solution(domain, u_c, x_c, I_val, eps_bar, it,
                                  False, history)
            raise Algorithm1Stall(
                f"penalty gradient vanished at {I_val:.3e} > {eps_bar:g}", best)
        if u_prev is not None:
            # Barzilai-Borwein seed for the line search; backtracking keeps
            # the accepted penalties monotone either way
            du = (u_c - u_prev).ravel()
            dg = (grad - g_prev).ravel()
            dgg = float(dg @ dg)
            if dgg > 1e-30:
                bb = abs(float(du @ dg)) / dgg
                if np.isfinite(bb) and bb > 0:
                    step = min(max(bb, 1e-12), step_max)
        u_prev, g_prev = u_c.copy(), grad.copy()
        accepted = False
        t_step = step
        while t_step > 1e-14:
            u_try = u_c - t_step * grad
            try:
                I_try, x_try = penalty_of_u(u_try, domain, params, exo_model,
                                            x_init=x_c, tol=inner_tol)
            except InvarianceError:
                t_step *= 0.5
                continue
            if I_try < I_val - armijo * t_step * gnorm2:
                u_c, x_c, I_val = u_try, x_try, I_try
                accepted = True
                step = min(t_step * 2.0, step_max)
                break
            t_step *= 0.5
        it += 1
        if accepted:
            stall = 0
            history.append(I_val)
            if verbose:
                print(f"iteration {it}: penalty {I_val:.6e}")
        else:
            stall += 1
            history.append(I_val)
            if stall >= stall_limit:
                best = _make_solution(domain, u_c, x_c, I_val, eps_bar, it,
                                      False, history)
                raise Algorithm1Stall(
                    f"penalty stalled at {I_val:.3e} > {eps_bar:g} "
                    f"after {it} iterations", best)

    converged = I_val <= threshold
    return _make_solution(domain, u_c, x_c, I_val, eps_bar, it, converged, history)


def _make_solution(domain, u_c, x_c, I_val, eps_bar, iterations, converged, history):
    return ApproxSolution(
        domain_kind=domain.kind, basis_spec=domain.basis.spec(),
        u_coeffs=np.asarray(u_c), x_coeffs=np.asarray(x_c), penalty=float(I_val),
        eps_bar=float(eps_bar), iterations=int(iterations), converged=bool(converged),
        history=[float(v) for v in history],
        coord0=list(domain.meta.get("coord0") or []), rates=list(np.asarray(domain.rates)))


class ApproxController:
    """Feedback u = u_eps(d) + K_x (x - x_eps(d)), which reduces to u~(d) + delta."""

    def __init__(self, solution, params):
        self.solution = solution
        self.params = params
        self.basis = TrigBasis.from_spec(solution.basis_spec)
        self.rates = np.asarray(solution.rates, dtype=float)
        self.coord0 = np.asarray(solution.coord0, dtype=float)

    def coords_at(self, t):
        return self.coord0 + self.rates * t

    def feedforward(self, t):
        if self.basis.p == 0:
            return self.solution.u_coeffs[:, 0]
        b = self.basis.eval(self.coords_at(t))[0]
        return self.solution.u_coeffs @ b

    def reference_state(self, t):
        if self.basis.p == 0:
            x = self.solution.x_coeffs[:, 0]
        else:
            b = self.basis.eval(self.coords_at(t))[0]
            x = self.solution.x_coeffs @ b
        return GridState.from_vector(x, self.params)

    def control(self, state, t):
        return self.feedforward(t) + state.delta
