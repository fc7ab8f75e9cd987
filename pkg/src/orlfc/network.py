"""Physical network model: parameters, dynamics, dispatch and steady state.

All quantities are in per unit on the system power base unless noted.
Frequency deviations are in rad/s; angles in rad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CostModel",
    "NetworkParams",
    "GridState",
    "SteadyState",
    "SecurityReport",
    "NetworkError",
    "SteadyStateError",
    "incidence_from_edges",
    "e_matrix",
    "line_coupling",
    "dynamics_rhs",
    "generation_cost",
    "optimal_dispatch",
    "steady_state_solve",
    "security_check",
]


class NetworkError(ValueError):
    """Invalid network description (topology or parameter ranges)."""


class SteadyStateError(RuntimeError):
    """Steady-state Newton solve failed to converge."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


def _check_connected(n, pairs, what):
    adj = [[] for _ in range(n)]
    for i, j in pairs:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for k in adj[stack.pop()]:
            if k not in seen:
                seen.add(k)
                stack.append(k)
    if len(seen) != n:
        missing = sorted(set(range(n)) - seen)
        raise NetworkError(f"{what} graph is disconnected; unreachable nodes {missing}")


def incidence_from_edges(edges, n):
    """Node-line incidence matrix of an undirected graph.

    ``edges`` is a sequence of (i, j) node pairs (0-based).  The positive end
    of each line is the lower node index.  Columns therefore hold one +1 and
    one -1, and the columns sum to zero.
    """
    m = len(edges)
    A = np.zeros((n, m))
    seen = set()
    for k, (i, j) in enumerate(edges):
        if i == j:
            raise NetworkError(f"edge {k} is a self-loop at node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise NetworkError(f"edge {k}=({i},{j}) references a node outside 0..{n - 1}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise NetworkError(f"duplicate edge between nodes {key[0]} and {key[1]}")
        seen.add(key)
        lo, hi = key
        A[lo, k] = 1.0
        A[hi, k] = -1.0
    _check_connected(n, [(i, j) for i, j in edges], "physical")
    return A


@dataclass(frozen=True)
class CostModel:
    """Linear-quadratic generation cost  J(P_c) = P_c^T Q P_c + R^T P_c + 1^T C."""

    q: np.ndarray  # diagonal of Q, strictly positive
    r: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        if np.any(self.q <= 0):
            raise NetworkError("cost requires strictly positive quadratic coefficients")

    @property
    def n(self):
        return self.q.size


@dataclass(frozen=True)
class NetworkParams:
    """Per-area constants, line data and communication graph.

    ``edges`` holds (i, j, b) with b > 0 the line susceptance magnitude; the
    self-susceptances ``b_self`` are negative and strictly dominate the row
    sums of the line values.  Derived arrays (incidence, line endpoints,
    chi_d, communication Laplacian) are precomputed once.
    """

    n: int
    edges: tuple
    b_self: np.ndarray
    tau_p: np.ndarray
    tau_v: np.ndarray
    tau_c: np.ndarray
    tau_delta: np.ndarray
    psi: np.ndarray
    xi: np.ndarray
    x_d: np.ndarray
    x_d_prime: np.ndarray
    e_field: np.ndarray
    cost: CostModel
    comm_edges: tuple
    omega_base: float = 120.0 * np.pi
    s_base_mva: float = 1000.0

    # derived, filled in __post_init__
    m: int = field(init=False)
    incidence: np.ndarray = field(init=False)
    abs_incidence: np.ndarray = field(init=False)
    line_b: np.ndarray = field(init=False)
    line_from: np.ndarray = field(init=False)
    line_to: np.ndarray = field(init=False)
    chi_d: np.ndarray = field(init=False)
    l_com: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("b_self", "tau_p", "tau_v", "tau_c", "tau_delta", "psi",
                     "xi", "x_d", "x_d_prime", "e_field"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.n,):
                raise NetworkError(f"{name} must have length n={self.n}")
            object.__setattr__(self, name, arr)
        if self.cost.n != self.n:
            raise NetworkError("cost dimension differs from node count")

        chi = self.x_d - self.x_d_prime
        if np.any(chi <= 0):
            raise NetworkError("synchronous reactance must exceed the transient reactance")
        object.__setattr__(self, "chi_d", chi)

        pairs = [(i, j) for i, j, _ in self.edges]
        A = incidence_from_edges(pairs, self.n)
        b = np.array([float(b) for _, _, b in self.edges])
        if np.any(b <= 0):
            raise NetworkError("line susceptances must be positive")
        object.__setattr__(self, "m", len(self.edges))
        object.__setattr__(self, "incidence", A)
        object.__setattr__(self, "abs_incidence", np.abs(A))
        object.__setattr__(self, "line_b", b)
        object.__setattr__(self, "line_from", np.array([min(i, j) for i, j in pairs]))
        object.__setattr__(self, "line_to", np.array([max(i, j) for i, j in pairs]))

        if np.any(self.b_self >= 0):
            raise NetworkError("self-susceptances must be negative")
        rowsum = np.zeros(self.n)
        for (i, j), bk in zip(pairs, b):
            rowsum[i] += bk
            rowsum[j] += bk
        # E(theta) positive definiteness needs 1/chi_d - B_ii to dominate the
        # incident line susceptances; the benchmark data misses plain |B_ii|
        # dominance by 0.3 p.u. at one area, which the 1/chi_d term covers.
        if np.any(1.0 / chi + np.abs(self.b_self) <= rowsum):
            raise NetworkError(
                "voltage coupling matrix is not diagonally dominant: "
                "1/chi_d_i + |B_ii| must exceed the incident line susceptances")
        object.__setattr__(self, "_plain_dominance",
                           bool(np.all(np.abs(self.b_self) > rowsum)))

        _check_connected(self.n, list(self.comm_edges), "communication")
        L = np.zeros((self.n, self.n))
        for i, j in self.comm_edges:
            L[i, i] += 1.0
            L[j, j] += 1.0
            L[i, j] -= 1.0
            L[j, i] -= 1.0
        object.__setattr__(self, "l_com", L)

    # -- frequently used products -------------------------------------------------

    def consensus_coupling(self):
        """G := xi^-1 Q L_com, so that delta' = tau_delta^-1 (-delta + P_c - G (q*delta + r))."""
        return (self.cost.q[:, None] * self.l_com) / self.xi[:, None]


def e_matrix(theta, params):
    """Voltage coupling matrix E(theta).

    E_ii = 1/chi_d_i - B_ii, E_ij = -B_ij cos(theta_k) for line k ~ {i, j}.
    Symmetric and strictly diagonally dominant with positive diagonal, hence
    positive definite for every theta.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (params.m,):
        raise ValueError(f"theta must have length m={params.m}")
    E = np.diag(1.0 / params.chi_d - params.b_self)
    c = params.line_b * np.cos(theta)
    for k in range(params.m):
        i, j = params.line_from[k], params.line_to[k]
        E[i, j] -= c[k]
        E[j, i] -= c[k]
    return E


def _e_times_v(theta, V, params):
    # E(theta) @ V without forming E; hot path of the integrators.
    out = (1.0 / params.chi_d - params.b_self) * V
    c = params.line_b * np.cos(theta)
    np.add.at(out, params.line_from, -c * V[params.line_to])
    np.add.at(out, params.line_to, -c * V[params.line_from])
    return out


def line_coupling(V, params):
    """Diagonal entries of Upsilon(V): V_i V_j B_ij per line."""
    return V[params.line_from] * V[params.line_to] * params.line_b


@dataclass
class GridState:
    """Augmented state (theta, omega, V, P_c, delta) of the compact model.

    ``validate=False`` skips the positivity check on V, for objects that hold
    state derivatives rather than states.
    """

    theta: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    P_c: np.ndarray
    delta: np.ndarray
    validate: bool = True

    def __post_init__(self):
        for name in ("theta", "omega", "V", "P_c", "delta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.validate and np.any(self.V <= 0):
            raise ValueError("voltages must be strictly positive")

    @classmethod
    def from_vector(cls, x, params, validate=True):
        m, n = params.m, params.n
        return cls(x[:m], x[m:m + n], x[m + n:m + 2 * n],
                   x[m + 2 * n:m + 3 * n], x[m + 3 * n:m + 4 * n], validate=validate)

    def as_vector(self):
        return np.concatenate([self.theta, self.omega, self.V, self.P_c, self.delta])

    @classmethod
    def from_node_angles(cls, phi, omega, V, P_c, delta, params):
        """Build theta = A^T phi so the cycle-space constraint holds by construction."""
        return cls(params.incidence.T @ np.asarray(phi, dtype=float), omega, V, P_c, delta)


def dynamics_rhs(state, P_d, u, params, pc_for_consensus=None):
    """Time derivative of the augmented grid model.

    ``pc_for_consensus`` optionally substitutes the generation value fed into
    the consensus block (used to model a corrupted P_c sensor); the physical
    blocks always use the true state.
    """
    if isinstance(state, GridState):
        return GridState.from_vector(
            dynamics_rhs(state.as_vector(), P_d, u, params, pc_for_consensus),
            params, validate=False)
    x = np.asarray(state, dtype=float)
    P_d = np.asarray(P_d, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(P_d)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    m, n = params.m, params.n
    theta = x[:m]
    omega = x[m:m + n]
    V = x[m + n:m + 2 * n]
    P_c = x[m + 2 * n:m + 3 * n]
    delta = x[m + 3 * n:m + 4 * n]
    pc_meas = P_c if pc_for_consensus is None else np.asarray(pc_for_consensus, dtype=float)

    A = params.incidence
    flow = A @ (line_coupling(V, params) * np.sin(theta))
    q, r = params.cost.q, params.cost.r

    d_theta = A.T @ omega
    d_omega = (-params.psi * omega + P_c + P_d - flow) / params.tau_p
    d_V = (-params.chi_d * _e_times_v(theta, V, params) + params.e_field) / params.tau_v
    d_P_c = (-P_c - omega / params.xi + u) / params.tau_c
    d_delta = (-delta + pc_meas
               - q * (params.l_com @ (q * delta + r)) / params.xi) / params.tau_delta
    return np.concatenate([d_theta, d_omega, d_V, d_P_c, d_delta])


def generation_cost(P_c, cost):
    """Total generation cost J(P_c)."""
    P_c = np.asarray(P_c, dtype=float)
    return float(P_c @ (cost.q * P_c) + cost.r @ P_c + np.sum(cost.c))


def optimal_dispatch(P_d, cost):
    """Cost-minimizing dispatch balancing the injections.

    Closed form of the equality-constrained minimizer:
        P_c = Q^-1 ( 1 1^T (Q^-1 R - P_d) / (1^T Q^-1 1) - R ),
    which satisfies 1^T (P_c + P_d) = 0 with equal marginal costs across areas.
    """
    P_d = np.asarray(P_d, dtype=float)
    qinv = 1.0 / cost.q
    lam = np.sum(qinv * cost.r - P_d) / np.sum(qinv)
    return qinv * (lam - cost.r)


def _consensus_solve(P_c, params):
    # Unique delta with 0 = -delta + P_c - xi^-1 Q L (Q delta + R).
    q, r = params.cost.q, params.cost.r
    G = params.consensus_coupling()
    M = np.eye(params.n) + G * q[None, :]
    return np.linalg.solve(M, P_c - G @ r)


@dataclass
class SteadyState:
    state: GridState
    u_bar: np.ndarray
    phi: np.ndarray           # node angles with phi_1 = 0
    residual: float
    secure: bool
    security: "SecurityReport"


def steady_state_solve(P_d, params, dispatch=None, initial_guess=None,
                       tol=1e-10, max_iter=200):
    """Solve the constant-injection steady state with omega = 0.

    The stationarity conditions leave the dispatch free on the balance plane
    1^T (P_c + P_d) = 0; ``dispatch`` selects the member (default: the
    cost-optimal dispatch, for which the stationary set is also an optimal
    operating point).  Damped Newton on the node angles and voltages, with
    step halving whenever the residual fails to decrease.
    """
    P_d = np.asarray(P_d, dtype=float)
    n = params.n
    if dispatch is None:
        P_c = optimal_dispatch(P_d, params.cost)
    else:
        P_c = np.asarray(dispatch, dtype=float)
        bal = abs(np.sum(P_c + P_d))
        if bal > 1e-9:
            raise SteadyStateError(f"dispatch violates the balance constraint by {bal:.2e}")

    inj = P_c + P_d
    A = params.incidence
    if initial_guess is not None:
        phi = np.zeros(n)
        phi[1:] = np.linalg.lstsq(A.T[:, 1:], initial_guess.theta, rcond=None)[0]
        V = initial_guess.V.copy()
    else:
        phi = np.zeros(n)
        V = np.linalg.solve(np.diag(params.chi_d) @ e_matrix(np.zeros(params.m), params),
                            params.e_field)
        # alternate power-flow and voltage solves for a sound Newton start
        from .regulator import FeasibilityError, solve_feasible_angles
        for _ in range(80):
            try:
                theta, phi = solve_feasible_angles(P_c, V, P_d, params, phi0=phi,
                                                   balance="project")
            except FeasibilityError as exc:
                raise SteadyStateError(
                    f"no secure power flow for the requested dispatch: {exc}") from exc
            V_new = np.linalg.solve(np.diag(params.chi_d) @ e_matrix(theta, params),
                                    params.e_field)
            if np.max(np.abs(V_new - V)) < 1e-12:
                V = V_new
                break
            V = V_new

    def residual_vec(phi, V):
        theta = A.T @ phi
        r1 = A @ (line_coupling(V, params) * np.sin(theta)) - inj
        r2 = params.chi_d * _e_times_v(theta, V, params) - params.e_field
        return np.concatenate([r1, r2]), theta

    r, theta = residual_vec(phi, V)
    rn = np.max(np.abs(r))
    for _ in range(max_iter):
        if rn < tol:
            break
        # central-difference Jacobian in (phi_2..n, V); small dense system
        z = np.concatenate([phi[1:], V])
        J = np.zeros((2 * n, 2 * n - 1))
        h = 1e-7
        for k in range(2 * n - 1):
            zp = z.copy(); zp[k] += h
            zm = z.copy(); zm[k] -= h
            rp, _ = residual_vec(np.concatenate([[0.0], zp[:n - 1]]), zp[n - 1:])
            rm, _ = residual_vec(np.concatenate([[0.0], zm[:n - 1]]), zm[n - 1:])
            J[:, k] = (rp - rm) / (2 * h)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        lam = 1.0
        while lam > 1e-6:
            zt = z + lam * step
            phit = np.concatenate([[0.0], zt[:n - 1]])
            Vt = zt[n - 1:]
            if np.any(Vt <= 0):
                lam *= 0.5
                continue
            rt, _ = residual_vec(phit, Vt)
            if np.max(np.abs(rt)) < rn:
                phi, V, r = phit, Vt, rt
                rn = np.max(np.abs(r))
                break
            lam *= 0.5
        else:
            raise SteadyStateError(
                f"steady-state Newton stalled at residual {rn:.3e}", residual=rn)
    else:
        raise SteadyStateError(
            f"steady-state Newton did not reach {tol:g} in {max_iter} iterations "
            f"(residual {rn:.3e})", residual=rn)

    theta = A.T @ phi
    delta = _consensus_solve(P_c, params)
    state = GridState(theta, np.zeros(n), V, P_c, delta)
    report = security_check(state, params)
    return SteadyState(state=state, u_bar=P_c.copy(), phi=phi, residual=rn,
                       secure=report.ok, security=report)


@dataclass
class SecurityReport:
    ok: bool
    theta_ok: bool
    min_margin: float
    angle_margins: np.ndarray   # pi/2 - |theta_l| per line
    node_margins: np.ndarray    # left-hand side of the per-node inequality


def security_check(state, params):
    """Operating-region check on angles and voltage coupling margins.

    Requires every line angle difference inside (-pi/2, pi/2) and, per node,
    1/chi_d_i - B_ii + sum_l B_ij (V_i + V_j sin^2 theta_l) / (V_i cos theta_l) > 0.
    """
    theta = state.theta
    V = state.V
    angle_margins = np.pi / 2 - np.abs(theta)
    theta_ok = bool(np.all(angle_margins > 0))
    node = 1.0 / params.chi_d - params.b_self
    ok = theta_ok
    if theta_ok:
        cos_t = np.cos(theta)
        for k in range(params.m):
            i, j = params.line_from[k], params.line_to[k]
            s2 = np.sin(theta[k]) ** 2
            bk = params.line_b[k]
            node[i] += bk * (V[i] + V[j] * s2) / (V[i] * cos_t[k])
            node[j] += bk * (V[j] + V[i] * s2) / (V[j] * cos_t[k])
        ok = bool(np.all(node > 0))
    else:
        node = np.full(params.n, -np.inf)
    min_margin = float(min(np.min(angle_margins), np.min(node))) if theta_ok \
        else float(np.min(angle_margins))
    return SecurityReport(ok=ok, theta_ok=theta_ok, min_margin=min_margin,
                          angle_margins=angle_margins, node_margins=node)
