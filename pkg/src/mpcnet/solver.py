"""Constrained SLQ solver for affine systems with quadratic tracking costs.

The horizon is split into intervals of length ``dt`` with inputs held constant
on each. The affine flow is discretised exactly and the running cost is
integrated by Gauss-Legendre quadrature, so the line-search merit, the rollout
and the quadratic model of the backward sweep all describe one function.
Equality constraints are eliminated by projecting the input onto the
constraint null space; inequality constraints enter the Lagrangian through a
relaxed log barrier. The outputs -- nominal trajectories, feedback gains, a
local quadratic value model and Lagrange multipliers -- are everything needed
to evaluate the control Hamiltonian.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable

import numpy as np
import scipy.linalg

from . import _kernels

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_BACKTRACKS = 20
REL_TOL = 1e-8
MAX_ITERATIONS = 50
DIVERGENCE_BOUND = 1e6


class SolverFailure(RuntimeError):
    pass


# -- barrier ----------------------------------------------------------------

def barrier(h, mu: float, delta: float):
    """Relaxed log barrier: ``-mu ln h`` above ``delta``, quadratic extension below."""
    h = np.asarray(h, dtype=float)
    safe = np.maximum(h, delta)
    z = (h - 2.0 * delta) / delta
    out = np.where(h >= delta, -mu * np.log(safe), mu * (-np.log(delta) + 0.5 * (z * z - 1.0)))
    return out if out.ndim else float(out)


def barrier_derivatives(h, mu: float, delta: float):
    """First and second derivative of :func:`barrier`."""
    h = np.asarray(h, dtype=float)
    safe = np.maximum(h, delta)
    d1 = np.where(h >= delta, -mu / safe, mu * (h - 2.0 * delta) / delta**2)
    d2 = np.where(h >= delta, mu / safe**2, mu / delta**2)
    return d1, d2


# -- problem definition -------------------------------------------------------

@dataclass(frozen=True)
class AffineSystem:
    """Flow map ``A x + B u + c`` with per-mode affine constraints.

    ``equality[mode] = (Gx, Gu, g0)`` encodes ``Gx x + Gu u + g0 = 0`` and
    ``inequality[mode] = (Hx, Hu, h0)`` encodes ``Hx x + Hu u + h0 >= 0``.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    modes: tuple = (None,)
    equality: dict = field(default_factory=dict)
    inequality: dict = field(default_factory=dict)
    initial_input: Callable[[Any], np.ndarray] | None = None

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def flow(self, x, u) -> np.ndarray:
        return self.A @ x + self.B @ u + self.c

    def eq(self, mode):
        n, m = self.state_dim, self.input_dim
        return self.equality.get(mode, (np.zeros((0, n)), np.zeros((0, m)), np.zeros(0)))

    def ineq(self, mode):
        n, m = self.state_dim, self.input_dim
        return self.inequality.get(mode, (np.zeros((0, n)), np.zeros((0, m)), np.zeros(0)))


@functools.lru_cache(maxsize=None)
def walker_system() -> AffineSystem:
    from . import model

    A, B, c = model.dynamics_matrices()
    modes = tuple(model.Mode)
    return AffineSystem(
        A, B, c, modes,
        {m: model.mode_constraints(m) for m in modes},
        {m: model.mode_inequalities(m) for m in modes},
        model.hover_input,
    )


@dataclass(frozen=True)
class OcpDefinition:
    horizon: float
    cost: Any
    schedule: Any = None
    barrier_mu: float = 0.1
    barrier_delta: float = 0.01
    dt: float = 0.01
    system: AffineSystem = field(default_factory=walker_system)

    def __post_init__(self):
        for name in ("horizon", "dt", "barrier_mu", "barrier_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def mode_at(self, t: float) -> Hashable:
        return self.system.modes[0] if self.schedule is None else self.schedule.mode_at(t)


class _ModeTables:
    """Padded per-mode constraint data so that all intervals share array shapes."""

    def __init__(self, system: AffineSystem):
        n, m = system.state_dim, system.input_dim
        self.modes = list(system.modes)
        self.index = {mode: i for i, mode in enumerate(self.modes)}
        neq = max([system.eq(md)[1].shape[0] for md in self.modes] + [0])
        nin = max([system.ineq(md)[1].shape[0] for md in self.modes] + [0])
        M = len(self.modes)
        self.Gx = np.zeros((M, neq, n))
        self.Gu = np.zeros((M, neq, m))
        self.g0 = np.zeros((M, neq))
        self.Dpinv = np.zeros((M, m, neq))
        self.nu_map = np.zeros((M, neq, m))
        self.default_u = np.zeros((M, m))
        self.N = np.zeros((M, m, m))
        self.pad = np.zeros((M, m))
        self.Hx = np.zeros((M, nin, n))
        self.Hu = np.zeros((M, nin, m))
        self.h0 = np.zeros((M, nin))
        self.hmask = np.zeros((M, nin))
        self.rows = []
        for i, md in enumerate(self.modes):
            Gx, Gu, g0 = (np.asarray(a, float) for a in system.eq(md))
            r = Gu.shape[0]
            self.rows.append(r)
            self.Gx[i, :r], self.Gu[i, :r], self.g0[i, :r] = Gx, Gu, g0
            if r:
                if np.linalg.matrix_rank(Gu) < r:
                    raise ValueError(f"equality constraints of mode {md} are not full row rank in u")
                self.Dpinv[i, :, :r] = np.linalg.pinv(Gu)
                self.nu_map[i, :r] = np.linalg.pinv(Gu.T)
                _, _, vt = np.linalg.svd(Gu)
                basis = vt[r:].T
            else:
                basis = np.eye(m)
            self.N[i, :, : m - r] = basis
            self.pad[i, m - r:] = 1.0
            if system.initial_input is not None:
                self.default_u[i] = system.initial_input(md)
            Hx, Hu, h0 = (np.asarray(a, float) for a in system.ineq(md))
            p = Hu.shape[0]
            self.Hx[i, :p], self.Hu[i, :p], self.h0[i, :p] = Hx, Hu, h0
            self.hmask[i, :p] = 1.0


_TABLE_CACHE: dict[int, tuple[AffineSystem, _ModeTables]] = {}


def _tables(system: AffineSystem) -> _ModeTables:
    hit = _TABLE_CACHE.get(id(system))
    if hit is None or hit[0] is not system:
        hit = _TABLE_CACHE[id(system)] = (system, _ModeTables(system))
    return hit[1]


# -- Lagrangian and Hamiltonian ------------------------------------------------

def eval_lagrangian(x, u, t, nu, mode, cost, system: AffineSystem | None = None,
                    mu: float = 0.1, delta: float = 0.01, use_barrier: bool = True) -> float:
    """``l(x,u,t) + nu' g(x,u,t) + sum_i b(h_i(x,u,t))``."""
    system = system or walker_system()
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    Gx, Gu, g0 = system.eq(mode)
    nu = np.asarray(nu, float).reshape(-1)
    if nu.shape[0] != Gu.shape[0]:
        raise ValueError(f"multiplier length {nu.shape[0]} does not match {Gu.shape[0]} equality rows")
    val = cost.intermediate(x, u, t) + float(nu @ (Gx @ x + Gu @ u + g0))
    if use_barrier:
        Hx, Hu, h0 = system.ineq(mode)
        val += float(np.sum(barrier(Hx @ x + Hu @ u + h0, mu, delta)))
    return val


@dataclass(frozen=True)
class HamiltonianData:
    """Everything needed to evaluate ``H(x, u, t)`` at a fixed ``(x, t)``."""

    x: np.ndarray
    t: float
    dVdx: np.ndarray
    dVdt: float
    nu: np.ndarray
    mode: Any


def eval_hamiltonian(data: HamiltonianData, u, cost, system: AffineSystem | None = None,
                     mu: float = 0.1, delta: float = 0.01) -> tuple[float, np.ndarray]:
    """Return ``H = L + dVdx . f`` and its exact input gradient."""
    system = system or walker_system()
    x = np.asarray(data.x, float)
    u = np.asarray(u, float)
    Gx, Gu, g0 = system.eq(data.mode)
    Hx, Hu, h0 = system.ineq(data.mode)
    nu = np.asarray(data.nu, float).reshape(-1)
    e = x - cost.desired(data.t)
    h = Hx @ x + Hu @ u + h0
    d1, _ = barrier_derivatives(h, mu, delta)
    H = (e @ cost.Q @ e + u @ cost.R @ u + nu @ (Gx @ x + Gu @ u + g0)
         + np.sum(barrier(h, mu, delta)) + data.dVdx @ system.flow(x, u))
    dHdu = 2.0 * cost.R @ u + Gu.T @ nu + Hu.T @ d1 + system.B.T @ data.dVdx
    return float(H), dHdu


def minimize_hamiltonian(data: HamiltonianData, cost, system: AffineSystem | None = None,
                         mu: float = 0.1, delta: float = 0.01, iters: int = 50) -> np.ndarray:
    """Unconstrained minimiser of ``H`` in ``u`` by Newton's method (``H`` is strictly convex)."""
    system = system or walker_system()
    Hx, Hu, h0 = system.ineq(data.mode)
    x = np.asarray(data.x, float)
    u = np.zeros(system.input_dim)
    for _ in range(iters):
        _, g = eval_hamiltonian(data, u, cost, system, mu, delta)
        _, d2 = barrier_derivatives(Hx @ x + Hu @ u + h0, mu, delta)
        hess = 2.0 * cost.R + Hu.T @ (d2[:, None] * Hu)
        step = np.linalg.solve(hess, g)
        u = u - step
        if np.max(np.abs(step)) < 1e-13 * (1.0 + np.max(np.abs(u))):
            break
    return u


# -- solution -------------------------------------------------------------------

@dataclass
class SolverSolution:
    """One solve. Knot arrays have ``N + 1`` entries; the input and gain of interval
    ``k`` are held on ``[t_k, t_k+1)`` and repeated at the final knot."""

    times: np.ndarray
    x_nom: np.ndarray
    u_nom: np.ndarray
    K: np.ndarray
    V: np.ndarray
    dVdx: np.ndarray
    dVdxx: np.ndarray
    dVdt: np.ndarray
    nu: list
    modes: list
    total_cost: float
    merit: float
    converged: bool
    iterations: int
    cost_history: list
    stationarity: np.ndarray

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def _locate(self, t: float) -> tuple[int, float]:
        if t < self.times[0] - 1e-9 or t > self.times[-1] + 1e-9:
            raise ValueError(f"t={t} outside solution horizon [{self.times[0]}, {self.times[-1]}]")
        N = len(self.times) - 1
        k = int(np.searchsorted(self.times, t + 1e-9, side="right")) - 1
        k = min(max(k, 0), N - 1)
        h = self.times[k + 1] - self.times[k]
        tau = min(max((t - self.times[k]) / h, 0.0), 1.0)
        return k, tau

    def nominal_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(x_nom, u_nom, K)`` at ``t``: state interpolated linearly, input and gain held."""
        k, tau = self._locate(t)
        x = (1 - tau) * self.x_nom[k] + tau * self.x_nom[k + 1]
        return x, self.u_nom[k], self.K[k]

    def value_gradient(self, k: int, x) -> np.ndarray:
        return self.dVdx[k] + self.dVdxx[k] @ (np.asarray(x, float) - self.x_nom[k])

    def value(self, k: int, x) -> float:
        d = np.asarray(x, float) - self.x_nom[k]
        return float(self.V[k] + self.dVdx[k] @ d + 0.5 * d @ self.dVdxx[k] @ d)

    def value_time_derivative(self, k: int, x) -> float:
        """Finite-difference ``dV/dt`` at fixed ``x`` from neighbouring knot models."""
        lo, hi = _fd_neighbours(self.times, self.modes, k)
        return (self.value(hi, x) - self.value(lo, x)) / (self.times[hi] - self.times[lo])

    def interval_data(self, k: int, dx=None) -> HamiltonianData:
        """Hamiltonian data at the middle of interval ``k``, displaced by ``dx`` from the nominal.

        The held input of an interval approximates the optimal control at its
        midpoint, so this is the point at which the minimiser of the Hamiltonian
        reproduces the solver's input to second order in ``dt``.
        """
        if not 0 <= k < len(self.times) - 1:
            raise IndexError(f"interval {k} outside 0..{len(self.times) - 2}")
        d = np.zeros(self.x_nom.shape[1]) if dx is None else np.asarray(dx, float)
        x = 0.5 * (self.x_nom[k] + self.x_nom[k + 1]) + d
        grad = 0.5 * (self.dVdx[k] + self.dVdx[k + 1] + (self.dVdxx[k] + self.dVdxx[k + 1]) @ d)
        h = self.times[k + 1] - self.times[k]
        dVdt = (self.value(k + 1, x) - self.value(k, x)) / h
        return HamiltonianData(x, float(0.5 * (self.times[k] + self.times[k + 1])), grad, dVdt,
                               self.nu[k], self.modes[k])

    def hamiltonian_data(self, k: int, x=None) -> HamiltonianData:
        x = self.x_nom[k] if x is None else np.asarray(x, float)
        return HamiltonianData(x, float(self.times[k]), self.value_gradient(k, x),
                               self.value_time_derivative(k, x), self.nu[k], self.modes[k])


def mpc_policy_eval(sol: SolverSolution, x, t: float) -> np.ndarray:
    """``u_nom(t) + K(t) (x - x_nom(t))``."""
    xn, un, K = sol.nominal_at(t)
    return un + K @ (np.asarray(x, float) - xn)


def _fd_neighbours(times, modes, k):
    """Central-difference neighbours; one-sided at the ends and at mode switches
    (using the right-hand side, matching the right-continuous schedule)."""
    N = len(times) - 1
    if N == 0:
        raise ValueError("need at least one interval")
    if k == 0:
        return 0, 1
    if k == N:
        return N - 1, N
    if modes[k - 1] != modes[k]:
        return k, k + 1
    return k - 1, k + 1


# -- discretisation ------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(3)


class _Discretization:
    """Exact zero-order-hold transition of the affine flow, also at the quadrature nodes."""

    def __init__(self, system: AffineSystem, h: float, Q: np.ndarray):
        n, m = system.state_dim, system.input_dim
        self.h = h
        self.tau = 0.5 * h * (_GL_NODES + 1.0)
        self.weights = 0.5 * h * _GL_WEIGHTS
        M = np.zeros((n + m + 1, n + m + 1))
        M[:n, :n] = system.A
        M[:n, n:n + m] = system.B
        M[:n, -1] = system.c

        def transition(t):
            E = scipy.linalg.expm(M * t)
            return E[:n, :n], E[:n, n:n + m], E[:n, -1]

        self.Phi, self.Gam, self.w = (np.ascontiguousarray(a) for a in transition(h))
        nodes = [transition(t) for t in self.tau]
        self.Phi_j = np.array([a for a, _, _ in nodes])
        self.Gam_j = np.array([b for _, b, _ in nodes])
        self.w_j = np.array([c for _, _, c in nodes])
        W = self.weights[:, None, None]
        QP = np.einsum("ab,jbc->jac", Q, self.Phi_j)
        QG = np.einsum("ab,jbc->jac", Q, self.Gam_j)
        self.Lxx = 2.0 * np.sum(W * np.einsum("jba,jbc->jac", self.Phi_j, QP), axis=0)
        self.Luu = 2.0 * np.sum(W * np.einsum("jba,jbc->jac", self.Gam_j, QG), axis=0)
        self.Lux = 2.0 * np.sum(W * np.einsum("jba,jbc->jac", self.Gam_j, QP), axis=0)


# -- SLQ -----------------------------------------------------------------------------

class _Nominal:
    __slots__ = ("x", "u")

    def __init__(self, x, u):
        self.x, self.u = x, u


class SlqSolver:
    """Receding-horizon SLQ solver. Holds a warm start between calls; not thread-safe."""

    def __init__(self, ocp: OcpDefinition, max_iterations: int = MAX_ITERATIONS, rel_tol: float = REL_TOL):
        self.ocp = ocp
        self.max_iterations = max_iterations
        self.rel_tol = rel_tol
        self.system = ocp.system
        self.tables = _tables(self.system)
        self.N = max(1, int(round(ocp.horizon / ocp.dt)))
        self.h = ocp.horizon / self.N
        self.disc = _Discretization(self.system, self.h, np.asarray(ocp.cost.Q, float))
        self._warm: SolverSolution | None = None
        self.step_sizes: list[float] = []
        self._mode_cache: dict = {}

    def reset(self):
        self._warm = None

    def _grid(self, t_s: float):
        times = t_s + self.h * np.arange(self.N + 1)
        # each interval takes the mode at its midpoint, snapping switches to the grid
        sched = self.ocp.schedule
        key = round((t_s % sched.cycle_duration if sched is not None else 0.0) / self.h, 6)
        hit = self._mode_cache.get(key)
        if hit is None:
            modes = [self.ocp.mode_at(t + 0.5 * self.h) for t in times[:-1]]
            midx = np.array([self.tables.index[m] for m in modes])
            if len(self._mode_cache) > 4096:
                self._mode_cache.clear()
            hit = self._mode_cache[key] = (modes, midx)
        return times, hit[0], hit[1]

    # cost -------------------------------------------------------------------------
    def _desired_nodes(self, times) -> np.ndarray:
        """Desired state at the quadrature nodes of every interval, shape ``(N, 3, n)``."""
        return np.ascontiguousarray(self.ocp.cost.desired(times[:-1, None] + self.disc.tau[None, :]))

    def _interval_costs(self, xd, midx, nom: _Nominal):
        ocp, tab, d = self.ocp, self.tables, self.disc
        cost = ocp.cost
        return _kernels.interval_costs(nom.x, nom.u, xd, d.Phi_j, d.Gam_j, d.w_j, d.weights, cost.Q, cost.R,
                                       self.h, midx, tab.Hx, tab.Hu, tab.h0, tab.hmask,
                                       ocp.barrier_mu, ocp.barrier_delta)

    def _evaluate(self, times, xd, midx, nom: _Nominal):
        """Objective (without barrier) and merit (with barrier) of a rollout."""
        run, bar = self._interval_costs(xd, midx, nom)
        final = self.ocp.cost.final(nom.x[-1], times[-1])
        total = float(np.sum(run) + final)
        return total, total + float(np.sum(bar))

    # rollout ----------------------------------------------------------------------
    def _rollout(self, x0, u_ff, K, x_ref):
        d = self.disc
        X, U, ok = _kernels.forward_rollout(x0, d.Phi, d.Gam, d.w, np.ascontiguousarray(u_ff),
                                            np.ascontiguousarray(K), np.ascontiguousarray(x_ref),
                                            DIVERGENCE_BOUND)
        return _Nominal(X, U), ok

    def _project_inputs(self, u, midx):
        """Project inputs onto the mode's equality constraints (state-independent part)."""
        tab = self.tables
        if not tab.Gu.shape[1]:
            return u
        resid = np.einsum("kij,kj->ki", tab.Gu[midx], u) + tab.g0[midx]
        return u - np.einsum("kij,kj->ki", tab.Dpinv[midx], resid)

    def _initial_guess(self, x0, times, modes, midx):
        N, n, m = self.N, self.system.state_dim, self.system.input_dim
        tab = self.tables
        K = np.zeros((N, m, n))
        x_ref = np.broadcast_to(x0, (N, n)).copy()
        u = tab.default_u[midx].copy()
        warm = self._warm
        if warm is not None and warm.start_time - 1e-9 <= times[0] <= warm.final_time:
            shift = (times[0] - warm.start_time) / self.h
            j = int(round(shift))
            if abs(shift - j) < 1e-6 and len(warm.times) == N + 1:
                # grids align: shift the previous solution
                n_keep = N - j
                x_ref[:n_keep] = warm.x_nom[j:N]
                u[:n_keep] = warm.u_nom[j:N]
                K[:n_keep] = warm.K[j:N]
                x_ref[n_keep:] = warm.x_nom[-1]
            else:
                for k in range(N):
                    if times[k] < warm.final_time - 1e-9 * self.h:
                        x_ref[k], u[k], K[k] = warm.nominal_at(times[k])
                    else:
                        x_ref[k] = warm.x_nom[-1]
            # warm inputs and gains must respect this grid's modes
            P = np.einsum("kij,klj->kil", tab.N[midx], tab.N[midx])
            Ex = -np.einsum("kir,krj->kij", tab.Dpinv[midx], tab.Gx[midx])
            K = Ex + np.einsum("kij,kjl->kil", P, K)
        u = self._project_inputs(u, midx)
        return self._rollout(x0, u, K, x_ref)

    # backward pass ------------------------------------------------------------------
    def _backward(self, times, xd, midx, nom: _Nominal):
        ocp, tab, d = self.ocp, self.tables, self.disc
        cost = ocp.cost
        lx, lu, lxx, luu, lux, Ex, eu = _kernels.quadratize(
            nom.x, nom.u, xd, d.Phi_j, d.Gam_j, d.w_j, d.weights, cost.Q, cost.R, self.h,
            d.Lxx, d.Luu, d.Lux, midx, tab.Gx, tab.Gu, tab.g0, tab.Dpinv, tab.Hx, tab.Hu, tab.h0,
            tab.hmask, ocp.barrier_mu, ocp.barrier_delta)
        ef = nom.x[-1] - cost.desired(times[-1])
        S, s, dV, K, du, Qu, pred, ok = _kernels.riccati_backward(
            d.Phi, d.Gam, lx, lu, lxx, luu, lux, Ex, eu, tab.N[midx], tab.pad[midx],
            2.0 * cost.Qf, 2.0 * cost.Qf @ ef)
        if not ok:
            raise SolverFailure("reduced input Hessian is not positive definite")
        return dict(S=S, s=s, dV=dV, K=K, du=du, Qu=Qu, pred=pred)

    # main loop ------------------------------------------------------------------------
    def solve(self, x_s, t_s: float) -> SolverSolution:
        x_s = np.asarray(x_s, dtype=float)
        if x_s.shape != (self.system.state_dim,) or not np.all(np.isfinite(x_s)):
            raise ValueError("initial state must be a finite vector of the system's state dimension")
        times, modes, midx = self._grid(float(t_s))
        xd = self._desired_nodes(times)
        nom, ok = self._initial_guess(x_s, times, modes, midx)
        if not ok:
            self._warm = None
            nom, ok = self._initial_guess(x_s, times, modes, midx)
            if not ok:
                raise SolverFailure("initial rollout diverged")
        cost, merit = self._evaluate(times, xd, midx, nom)
        history = [merit]
        self.step_sizes = []
        converged = False
        it = 0
        bw = self._backward(times, xd, midx, nom)
        while it < self.max_iterations:
            if -bw["pred"] <= 1e-14 * (1.0 + abs(merit)):
                converged = True
                break
            it += 1
            alpha = 1.0
            accepted = None
            for _ in range(MAX_BACKTRACKS + 1):
                cand, ok = self._rollout(x_s, nom.u + alpha * bw["du"], bw["K"], nom.x[:-1])
                if ok:
                    c_cost, c_merit = self._evaluate(times, xd, midx, cand)
                    if np.isfinite(c_merit) and c_merit <= merit + ARMIJO * alpha * bw["pred"]:
                        accepted = (cand, c_cost, c_merit)
                        break
                alpha *= 0.5
            if accepted is None:
                # no descent possible: converged iff the predicted decrease is negligible
                converged = -bw["pred"] <= 1e-10 * (1.0 + abs(merit))
                break
            self.step_sizes.append(alpha)
            cand, c_cost, c_merit = accepted
            decrease = merit - c_merit
            nom, cost, merit = cand, c_cost, c_merit
            history.append(merit)
            bw = self._backward(times, xd, midx, nom)
            if decrease <= self.rel_tol * max(abs(merit), 1e-12):
                converged = True
                break
        sol = self._package(times, xd, modes, midx, nom, bw, cost, merit, converged, it, history)
        self._warm = sol
        return sol

    def _package(self, times, xd, modes, midx, nom, bw, cost, merit, converged, it, history):
        N, h = self.N, self.h
        tab = self.tables
        u_nom = np.concatenate([nom.u, nom.u[-1:]], axis=0)
        K = np.concatenate([bw["K"], bw["K"][-1:]], axis=0)
        knot_modes = list(modes) + [modes[-1]]
        # value at the nominal: cost-to-go plus the (vanishing at convergence) model improvement
        run, bar = self._interval_costs(xd, midx, nom)
        run = run + bar
        V = np.empty(N + 1)
        V[N] = self.ocp.cost.final(nom.x[-1], times[-1])
        for k in range(N - 1, -1, -1):
            V[k] = V[k + 1] + run[k] + bw["dV"][k]
        # multipliers from stationarity of the interval Lagrangian, per unit time
        grad = bw["Qu"] / h
        nu_pad = -np.einsum("krm,km->kr", tab.nu_map[midx], grad)
        resid = grad + np.einsum("krm,kr->km", tab.Gu[midx], nu_pad)
        stat = np.empty(N + 1)
        stat[:N] = np.max(np.abs(resid), axis=1)
        stat[N] = stat[N - 1]
        nu = [nu_pad[k, :tab.rows[midx[k]]] for k in range(N)]
        nu.append(nu[-1].copy())
        sol = SolverSolution(
            times=times, x_nom=nom.x, u_nom=u_nom, K=K, V=V, dVdx=bw["s"], dVdxx=bw["S"],
            dVdt=np.zeros(N + 1), nu=nu, modes=knot_modes, total_cost=cost, merit=merit,
            converged=converged, iterations=it, cost_history=history, stationarity=stat)
        sol.dVdt = _knot_time_derivatives(sol)
        return sol


def _knot_time_derivatives(sol: SolverSolution) -> np.ndarray:
    """``dV/dt`` at every nominal knot state; vectorised form of ``value_time_derivative``."""
    N = len(sol.times) - 1
    lo = np.empty(N + 1, dtype=int)
    hi = np.empty(N + 1, dtype=int)
    for k in range(N + 1):
        lo[k], hi[k] = _fd_neighbours(sol.times, sol.modes, k)
    X = sol.x_nom

    def model_at(j):
        d = X - X[j]
        return sol.V[j] + np.einsum("ki,ki->k", sol.dVdx[j], d) + 0.5 * np.einsum("ki,kij,kj->k", d, sol.dVdxx[j], d)

    return (model_at(hi) - model_at(lo)) / (sol.times[hi] - sol.times[lo])


def solve(ocp: OcpDefinition, x_s, t_s: float = 0.0) -> SolverSolution:
    return SlqSolver(ocp).solve(x_s, t_s)


def trajectory_csv(sol: SolverSolution, cost) -> str:
    """``time, x[0..n], u[0..m], cost`` rows for debugging dumps."""
    n = sol.x_nom.shape[1]
    m = sol.u_nom.shape[1]
    header = ["time"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["cost"]
    lines = [",".join(header)]
    for k, t in enumerate(sol.times):
        c = cost.intermediate(sol.x_nom[k], sol.u_nom[k], t)
        vals = [t, *sol.x_nom[k], *sol.u_nom[k], c]
        lines.append(",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"
