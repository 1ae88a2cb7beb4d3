"""Hamiltonian-based imitation losses for the mixture-of-experts policy.

Every loss is reduced to two sets of coefficients: ``a_i`` multiplying the
Jacobian of expert output ``pi_i`` and ``b_i`` multiplying the Jacobian of
gating weight ``p_i``. Those are handed to the policy's vector-Jacobian
product, so no loss needs to know the network structure.

All loss functions work on batches: ``p`` is ``(B, E)``, expert outputs are
``(B, E, m)`` and the Hamiltonians come from a :class:`HamiltonianBatch`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import solver
from .policy import MenPolicy, ForwardTrace, backprop_output_jacobians, men_forward

PROB_FLOOR = 1e-12
VARIANTS = ("l1", "l2", "l3", "bc")


@dataclass(frozen=True)
class LossKind:
    variant: str = "l3"
    guided: bool = False
    lam: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        v = self.variant.lower()
        object.__setattr__(self, "variant", v)
        if v not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        if v in ("l3", "bc") and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if v == "bc" and self.guided:
            raise ValueError("the behavioral-cloning loss has no guided variant")


@dataclass
class LossEval:
    """Per-sample loss values and gradient coefficients (leading batch axis)."""

    value: np.ndarray          # (B,)
    per_expert_H: np.ndarray   # (B, E)
    p: np.ndarray              # (B, E)
    q: np.ndarray | None       # (B, E)
    a: np.ndarray              # (B, E, m)
    b: np.ndarray              # (B, E)

    @property
    def expert_grad_coeffs(self) -> np.ndarray:
        return self.a

    @property
    def gating_grad_coeffs(self) -> np.ndarray:
        return self.b


# -- Hamiltonian over a batch ----------------------------------------------------

@dataclass
class HamiltonianBatch:
    """``H(u) = const + lin.u + u'Ru + sum_j b(Hu_j u + hx_j)`` for each sample.

    The Hamiltonian is exactly quadratic in ``u`` apart from the barrier on the
    affine inequalities, so evaluating it for many candidate inputs only needs
    these per-sample coefficients.
    """

    const: np.ndarray   # (B,)
    lin: np.ndarray     # (B, m)
    R: np.ndarray       # (m, m)
    Hu: np.ndarray      # (B, nin, m)
    hx: np.ndarray      # (B, nin)
    mask: np.ndarray    # (B, nin)
    dVdt: np.ndarray    # (B,)
    mu: float = 0.1
    delta: float = 0.01

    @property
    def size(self) -> int:
        return self.const.shape[0]

    @classmethod
    def build(cls, err, x, dVdx, dVdt, nu, modes, cost, system=None, mu=0.1, delta=0.01):
        """From tracking errors, states, costates, ``dV/dt``, multipliers and modes."""
        system = system or solver.walker_system()
        tab = solver._tables(system)
        err = np.atleast_2d(np.asarray(err, float))
        x = np.atleast_2d(np.asarray(x, float))
        lam = np.atleast_2d(np.asarray(dVdx, float))
        B = err.shape[0]
        midx = np.array([tab.index[m] for m in modes])
        nu_pad = np.zeros((B, tab.Gu.shape[1]))
        for j, v in enumerate(nu):
            v = np.asarray(v, float).reshape(-1)
            if v.shape[0] != tab.rows[midx[j]]:
                raise ValueError(f"multiplier length {v.shape[0]} does not match mode {modes[j]}")
            nu_pad[j, :v.shape[0]] = v
        Gx, Gu, g0 = tab.Gx[midx], tab.Gu[midx], tab.g0[midx]
        const = (np.einsum("bi,ij,bj->b", err, cost.Q, err)
                 + np.einsum("br,br->b", nu_pad, np.einsum("bri,bi->br", Gx, x) + g0)
                 + np.einsum("bi,bi->b", lam, x @ system.A.T + system.c))
        lin = np.einsum("bri,br->bi", Gu, nu_pad) + lam @ system.B
        hx = np.einsum("bri,bi->br", tab.Hx[midx], x) + tab.h0[midx]
        return cls(const, lin, np.asarray(cost.R, float), tab.Hu[midx], hx, tab.hmask[midx],
                   np.asarray(dVdt, float).reshape(B), mu, delta)

    @classmethod
    def from_data(cls, data: Sequence[solver.HamiltonianData], cost, system=None, mu=0.1, delta=0.01):
        data = list(data)
        err = np.array([np.asarray(d.x, float) - cost.desired(d.t) for d in data])
        return cls.build(err, [d.x for d in data], [d.dVdx for d in data], [d.dVdt for d in data],
                         [d.nu for d in data], [d.mode for d in data], cost, system, mu, delta)

    @classmethod
    def from_tuples(cls, tuples, cost, system=None, mu=0.1, delta=0.01):
        return cls.build([t.xr for t in tuples], [t.x_abs for t in tuples], [t.dVdx for t in tuples],
                         [t.dVdt for t in tuples], [t.nu for t in tuples], [t.mode for t in tuples],
                         cost, system, mu, delta)

    def evaluate(self, U) -> tuple[np.ndarray, np.ndarray]:
        """``H`` and ``dH/du`` for inputs ``U`` of shape ``(B, m)`` or ``(B, E, m)``."""
        U = np.asarray(U, float)
        squeeze = U.ndim == 2
        if squeeze:
            U = U[:, None, :]
        h = np.einsum("bjm,bem->bej", self.Hu, U) + self.hx[:, None, :]
        bar = solver.barrier(h, self.mu, self.delta)
        d1, _ = solver.barrier_derivatives(h, self.mu, self.delta)
        mask = self.mask[:, None, :]
        UR = U @ self.R
        H = (self.const[:, None] + np.einsum("bm,bem->be", self.lin, U)
             + np.einsum("bem,bem->be", UR, U) + np.sum(mask * bar, axis=2))
        dH = self.lin[:, None, :] + 2.0 * UR + np.einsum("bej,bjm->bem", mask * d1, self.Hu)
        if squeeze:
            return H[:, 0], dH[:, 0]
        return H, dH


# -- building blocks ------------------------------------------------------------

def posterior(p, H, dVdt, beta: float) -> np.ndarray:
    """``q_i`` proportional to ``p_i exp(-beta (H_i + dVdt))``, normalised with a log-sum-exp shift."""
    q, _ = _posterior_and_lse(np.asarray(p, float), np.asarray(H, float), dVdt, beta)
    return q


def _posterior_and_lse(p, H, dVdt, beta):
    """Posterior and ``log sum_i p_i exp(-beta z_i)`` with ``z = H + dVdt``."""
    z = H + np.asarray(dVdt, float)[..., None] if np.ndim(H) > np.ndim(dVdt) else H + dVdt
    with np.errstate(divide="ignore"):
        logw = np.log(p) - beta * z
    shift = np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw - shift)
    s = np.sum(w, axis=-1, keepdims=True)
    return w / s, (np.log(s) + shift)[..., 0]


def cross_entropy(target, probs, floor: float = PROB_FLOOR):
    """``-sum_i target_i log(max(probs_i, floor))`` over the last axis."""
    target = np.asarray(target, float)
    probs = np.asarray(probs, float)
    return -np.sum(target * np.log(np.maximum(probs, floor)), axis=-1)


def map_mode_probabilities(mode_probs, mode_map: Sequence[int] | None, num_experts: int) -> np.ndarray:
    """Spread mode probabilities ``(..., M)`` onto experts; unmapped experts get zero."""
    mode_probs = np.asarray(mode_probs, float)
    M = mode_probs.shape[-1]
    mode_map = list(range(M)) if mode_map is None else list(mode_map)
    if len(mode_map) != M:
        raise ValueError(f"mode map has {len(mode_map)} entries for {M} modes")
    if any(not 0 <= e < num_experts for e in mode_map):
        raise ValueError(f"mode map {mode_map} refers to experts outside 0..{num_experts - 1}")
    out = np.zeros(mode_probs.shape[:-1] + (num_experts,))
    for mode, expert in enumerate(mode_map):
        out[..., expert] += mode_probs[..., mode]
    return out


def _safe_ratio(num, den):
    return num / np.maximum(den, np.finfo(float).tiny)


# -- losses on arrays ------------------------------------------------------------

def _l1(p, pi, hb: HamiltonianBatch) -> LossEval:
    u = np.einsum("be,bem->bm", p, pi)
    Hb, dHb = hb.evaluate(u)
    Hi, _ = hb.evaluate(pi)
    a = p[:, :, None] * dHb[:, None, :]
    b = np.einsum("bm,bem->be", dHb, pi)
    return LossEval(Hb, Hi, p, None, a, b)


def _l2(p, pi, hb: HamiltonianBatch) -> LossEval:
    Hi, dHi = hb.evaluate(pi)
    return LossEval(np.sum(p * Hi, axis=1), Hi, p, None, p[:, :, None] * dHi, Hi.copy())


def _l3(p, pi, hb: HamiltonianBatch, beta: float) -> LossEval:
    Hi, dHi = hb.evaluate(pi)
    q, lse = _posterior_and_lse(p, Hi, hb.dVdt, beta)
    return LossEval(-lse / beta, Hi, p, q, q[:, :, None] * dHi, -_safe_ratio(q, p) / beta)


def _l3_reformulated(p, pi, hb: HamiltonianBatch, beta: float) -> LossEval:
    Hi, dHi = hb.evaluate(pi)
    qbar = posterior(p, Hi, hb.dVdt, beta)  # held constant
    value = np.sum(qbar * Hi, axis=1) + cross_entropy(qbar, p) / beta
    b = -np.where(p >= PROB_FLOOR, _safe_ratio(qbar, p), 0.0) / beta
    return LossEval(value, Hi, p, qbar, qbar[:, :, None] * dHi, b)


def _bc(p, pi, u_mpc, beta: float) -> LossEval:
    diff = pi - np.asarray(u_mpc, float)[:, None, :]
    m = diff.shape[2]
    nmse = np.sum(diff * diff, axis=2) / m
    q, lse = _posterior_and_lse(p, nmse, 0.0, beta)
    a = q[:, :, None] * (2.0 / m) * diff
    return LossEval(-lse / beta, nmse, p, q, a, -_safe_ratio(q, p) / beta)


def _guide(ev: LossEval, target, kind: LossKind, hb: HamiltonianBatch, pi) -> LossEval:
    """Add ``lam * CE(target, p)`` (L1/L2) or ``lam * CE(target, q)`` (L3) with its gradient."""
    lam = kind.lam
    p = ev.p
    if kind.variant == "l3":
        q = ev.q
        live = np.where(q >= PROB_FLOOR, target, 0.0)  # floored entries have zero gradient
        T = np.sum(live, axis=1, keepdims=True)
        ce = cross_entropy(target, q)
        _, dHi = hb.evaluate(pi)
        # log q_i = log p_i - beta z_i - log Z
        db = -_safe_ratio(live, p) + T * _safe_ratio(q, p)
        da = (kind.beta * (live - T * q))[:, :, None] * dHi
    else:
        live = np.where(p >= PROB_FLOOR, target, 0.0)
        ce = cross_entropy(target, p)
        db = -_safe_ratio(live, p)
        da = np.zeros_like(ev.a)
    return LossEval(ev.value + lam * ce, ev.per_expert_H, p, ev.q, ev.a + lam * da, ev.b + lam * db)


def evaluate_loss(kind: LossKind, p, pi, hb: HamiltonianBatch | None = None, u_mpc=None,
                  mode_probs=None, mode_map=None) -> LossEval:
    """Loss values and coefficients for a batch of gating weights and expert outputs."""
    p = np.atleast_2d(np.asarray(p, float))
    pi = np.asarray(pi, float)
    if pi.ndim == 2:
        pi = pi[None]
    if kind.variant == "bc":
        if u_mpc is None:
            raise ValueError("behavioral cloning needs the MPC inputs")
        return _bc(p, pi, np.atleast_2d(u_mpc), kind.beta)
    if hb is None:
        raise ValueError(f"loss {kind.variant} needs Hamiltonian data")
    if kind.variant == "l1":
        ev = _l1(p, pi, hb)
    elif kind.variant == "l2":
        ev = _l2(p, pi, hb)
    else:
        ev = _l3(p, pi, hb, kind.beta)
    if kind.guided:
        if mode_probs is None:
            raise ValueError("guided losses need mode probabilities")
        target = map_mode_probabilities(np.atleast_2d(mode_probs), mode_map, p.shape[1])
        ev = _guide(ev, target, kind, hb, pi)
    return ev


# -- single-sample API -------------------------------------------------------------

def _single(trace: ForwardTrace, hdata, cost, **kw) -> HamiltonianBatch:
    if trace.batch_size != 1:
        raise ValueError("single-sample losses need a trace of one sample")
    return HamiltonianBatch.from_data([hdata], cost, **kw)


def loss_l1(trace: ForwardTrace, hdata, cost, **kw) -> LossEval:
    """Hamiltonian of the blended output."""
    return _l1(trace.p, trace.expert_outputs, _single(trace, hdata, cost, **kw))


def loss_l2(trace: ForwardTrace, hdata, cost, **kw) -> LossEval:
    """Gating-weighted average of the experts' Hamiltonians."""
    return _l2(trace.p, trace.expert_outputs, _single(trace, hdata, cost, **kw))


def loss_l3(trace: ForwardTrace, hdata, cost, beta: float = 1.0, **kw) -> LossEval:
    """``-(1/beta) log sum_i p_i exp(-beta (H_i + dV/dt))``."""
    return _l3(trace.p, trace.expert_outputs, _single(trace, hdata, cost, **kw), beta)


def loss_l3_reformulated(trace: ForwardTrace, hdata, cost, beta: float = 1.0, **kw) -> LossEval:
    """``sum_i q_i H_i + (1/beta) CE(q, p)`` with the posterior held fixed."""
    return _l3_reformulated(trace.p, trace.expert_outputs, _single(trace, hdata, cost, **kw), beta)


def loss_bc(trace: ForwardTrace, u_mpc, beta: float = 1.0) -> LossEval:
    """Log-partitioned normalised squared error to the MPC input."""
    return _bc(trace.p, trace.expert_outputs, np.atleast_2d(u_mpc), beta)


def loss_guided(kind: LossKind, trace: ForwardTrace, hdata, cost, mode_probs, mode_map=None,
                **kw) -> LossEval:
    if not kind.guided:
        raise ValueError("loss_guided needs a guided loss kind")
    hb = _single(trace, hdata, cost, **kw)
    return evaluate_loss(kind, trace.p, trace.expert_outputs, hb, mode_probs=mode_probs, mode_map=mode_map)


# -- batches ---------------------------------------------------------------------

def policy_inputs(tuples) -> tuple[np.ndarray, np.ndarray]:
    return np.array([t.gt for t in tuples]), np.array([t.xr for t in tuples])


def batch_loss(kind: LossKind, batch, policy: MenPolicy, cost, system=None, mode_map=None,
               mu: float = 0.1, delta: float = 0.01, accumulate: bool = True) -> tuple[float, LossEval]:
    """Average loss over replay tuples; accumulates the averaged gradient into ``policy.grads``."""
    batch = list(batch)
    if not batch:
        raise ValueError("batch must not be empty")
    gt, xr = policy_inputs(batch)
    trace = men_forward(policy, gt, xr)
    hb = None
    if kind.variant != "bc":
        hb = HamiltonianBatch.from_tuples(batch, cost, system, mu, delta)
    u_mpc = np.array([t.u_mpc for t in batch]) if kind.variant == "bc" else None
    mode_probs = np.array([t.mode_probs for t in batch]) if kind.guided else None
    ev = evaluate_loss(kind, trace.p, trace.expert_outputs, hb, u_mpc, mode_probs, mode_map)
    B = len(batch)
    if accumulate:
        backprop_output_jacobians(policy, trace, ev.a / B, ev.b / B)
    return float(np.mean(ev.value)), ev
