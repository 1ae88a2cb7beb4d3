"""Planar point-foot walker: dynamics, contact modes, gaits and policy inputs.

State layout (6): ``[px, pz, vx, vz, f1, f2]`` -- base position, base velocity
and the x-coordinate of both feet.

Input layout (6): ``[F1x, F1z, F2x, F2z, v1, v2]`` -- 2D contact force per foot
and a forward velocity command per foot.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

STATE_DIM = 6
INPUT_DIM = 6
NUM_FEET = 2

MASS = 10.0
GRAVITY = 9.81
Z_DEFAULT = 0.5
FAILURE_HEIGHT = 0.2
FOOT_OFFSETS = (0.1, -0.1)

# state indices
PX, PZ, VX, VZ, F1, F2 = range(6)
# input indices
F1X, F1Z, F2X, F2Z, V1, V2 = range(6)

_FORCE_IDX = ((F1X, F1Z), (F2X, F2Z))
_FOOT_VEL_IDX = (V1, V2)

# Boundary tolerance for schedule lookups; simulation clocks accumulate
# round-off of multiples of 0.0025 s.
_TIME_EPS = 1e-9


class Mode(enum.IntEnum):
    """Admissible contact modes. Flight (no foot in contact) is not modelled."""

    STANCE = 0
    SWING1 = 1
    SWING2 = 2

    @property
    def contact_flags(self) -> tuple[bool, bool]:
        return _CONTACT_FLAGS[self]

    @classmethod
    def from_flags(cls, flags: Sequence[bool]) -> "Mode":
        key = tuple(bool(f) for f in flags)
        for mode, value in _CONTACT_FLAGS.items():
            if value == key:
                return mode
        raise ValueError(f"inadmissible contact flags {key}: flight mode is not supported")

    @classmethod
    def parse(cls, name: str) -> "Mode":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown mode name {name!r}; expected one of {[m.name for m in cls]}") from None


_CONTACT_FLAGS = {
    Mode.STANCE: (True, True),
    Mode.SWING1: (False, True),
    Mode.SWING2: (True, False),
}

NUM_MODES = len(Mode)


def _check_vector(v, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_state(x) -> np.ndarray:
    return _check_vector(x, STATE_DIM, "state")


def as_input(u) -> np.ndarray:
    return _check_vector(u, INPUT_DIM, "input")


@dataclass(frozen=True)
class WalkerState:
    base_pos: tuple[float, float]
    base_vel: tuple[float, float]
    foot_pos: tuple[float, float]

    def to_array(self) -> np.ndarray:
        return as_state([*self.base_pos, *self.base_vel, *self.foot_pos])

    @classmethod
    def from_array(cls, x) -> "WalkerState":
        x = as_state(x)
        return cls((x[PX], x[PZ]), (x[VX], x[VZ]), (x[F1], x[F2]))


@dataclass(frozen=True)
class WalkerInput:
    foot_force: tuple[float, float, float, float]
    foot_vel: tuple[float, float]

    def to_array(self) -> np.ndarray:
        return as_input([*self.foot_force, *self.foot_vel])

    @classmethod
    def from_array(cls, u) -> "WalkerInput":
        u = as_input(u)
        return cls(tuple(u[:4]), tuple(u[4:]))


def default_state() -> np.ndarray:
    return np.array([0.0, Z_DEFAULT, 0.0, 0.0, FOOT_OFFSETS[0], FOOT_OFFSETS[1]])


# -- dynamics ---------------------------------------------------------------

def dynamics_matrices() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(A, B, c)`` with ``flow_map(x, u) == A @ x + B @ u + c``."""
    A = np.zeros((STATE_DIM, STATE_DIM))
    A[PX, VX] = 1.0
    A[PZ, VZ] = 1.0
    B = np.zeros((STATE_DIM, INPUT_DIM))
    B[VX, F1X] = B[VX, F2X] = 1.0 / MASS
    B[VZ, F1Z] = B[VZ, F2Z] = 1.0 / MASS
    B[F1, V1] = 1.0
    B[F2, V2] = 1.0
    c = np.zeros(STATE_DIM)
    c[VZ] = -GRAVITY
    return A, B, c


_A, _B, _C = dynamics_matrices()


def flow_map(x, u) -> np.ndarray:
    x = as_state(x)
    u = as_input(u)
    return _A @ x + _B @ u + _C


def mode_constraints(mode: Mode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Equality constraints ``Gx x + Gu u + g0 = 0`` of a contact mode.

    A swing foot contributes two rows (both force components vanish), a contact
    foot one row (its velocity command vanishes). Rows are ordered by foot.
    """
    rows = []
    for foot, in_contact in enumerate(Mode(mode).contact_flags):
        if in_contact:
            rows.append([_FOOT_VEL_IDX[foot]])
        else:
            rows.append(list(_FORCE_IDX[foot]))
    idx = [i for r in rows for i in r]
    Gu = np.zeros((len(idx), INPUT_DIM))
    Gu[np.arange(len(idx)), idx] = 1.0
    return np.zeros((len(idx), STATE_DIM)), Gu, np.zeros(len(idx))


def mode_inequalities(mode: Mode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unilateral contact ``Hx x + Hu u + h0 >= 0``: one row ``F_iz`` per contact foot."""
    idx = [_FORCE_IDX[foot][1] for foot, c in enumerate(Mode(mode).contact_flags) if c]
    Hu = np.zeros((len(idx), INPUT_DIM))
    Hu[np.arange(len(idx)), idx] = 1.0
    return np.zeros((len(idx), STATE_DIM)), Hu, np.zeros(len(idx))


def constraint_residual(x, u, mode: Mode) -> np.ndarray:
    Gx, Gu, g0 = mode_constraints(mode)
    return Gx @ np.asarray(x, float) + Gu @ np.asarray(u, float) + g0


def hover_input(mode: Mode) -> np.ndarray:
    """Gravity-compensating input with the weight split evenly over contact feet."""
    flags = Mode(mode).contact_flags
    u = np.zeros(INPUT_DIM)
    share = MASS * GRAVITY / sum(flags)
    for foot, c in enumerate(flags):
        if c:
            u[_FORCE_IDX[foot][1]] = share
    return u


def step(x, u, dt: float, mode: Mode | None = None) -> np.ndarray:
    """Advance the walker by one semi-implicit Euler step.

    When ``mode`` is given the step resolves contacts the way a physics engine
    would: stance feet do not move, swing feet transmit no force and contact
    forces cannot pull on the ground.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = as_state(x)
    u = as_input(u).copy()
    if mode is not None:
        for foot, in_contact in enumerate(Mode(mode).contact_flags):
            if in_contact:
                u[_FOOT_VEL_IDX[foot]] = 0.0
                fz = _FORCE_IDX[foot][1]
                u[fz] = max(u[fz], 0.0)
            else:
                u[list(_FORCE_IDX[foot])] = 0.0
    xdot = _A @ x + _B @ u + _C
    out = x.copy()
    out[VX:VZ + 1] = x[VX:VZ + 1] + dt * xdot[VX:VZ + 1]
    out[PX:PZ + 1] = x[PX:PZ + 1] + dt * out[VX:VZ + 1]
    out[F1:F2 + 1] = x[F1:F2 + 1] + dt * xdot[F1:F2 + 1]
    return out


def failure_check(x, x_ref=None) -> bool:
    """True when the base height deviates more than 20 cm from its default."""
    z_ref = Z_DEFAULT if x_ref is None else float(np.asarray(x_ref, float)[PZ])
    return bool(abs(float(np.asarray(x, float)[PZ]) - z_ref) > FAILURE_HEIGHT)


# -- mode schedules and gaits -----------------------------------------------

@dataclass(frozen=True)
class ModeSchedule:
    """Periodic sequence of contact modes.

    ``event_times`` lie strictly inside ``(0, cycle_duration)``; mode ``k`` is
    active on ``[event_times[k-1], event_times[k])`` within each cycle.
    """

    event_times: tuple[float, ...]
    modes: tuple[Mode, ...]
    cycle_duration: float

    def __post_init__(self):
        ev = tuple(float(t) for t in self.event_times)
        modes = tuple(Mode(m) for m in self.modes)
        object.__setattr__(self, "event_times", ev)
        object.__setattr__(self, "modes", modes)
        if len(modes) != len(ev) + 1:
            raise ValueError(f"need len(modes) == len(event_times) + 1, got {len(modes)} and {len(ev)}")
        if not self.cycle_duration > 0:
            raise ValueError("cycle_duration must be positive")
        bounds = (0.0, *ev, float(self.cycle_duration))
        if any(b <= a for a, b in zip(bounds[:-1], bounds[1:])):
            raise ValueError("event times must be strictly increasing inside (0, cycle_duration)")

    @property
    def boundaries(self) -> tuple[float, ...]:
        return (0.0, *self.event_times, float(self.cycle_duration))

    def _cycle_time(self, t: float) -> tuple[float, float]:
        cycles = math.floor((t + _TIME_EPS) / self.cycle_duration)
        return t - cycles * self.cycle_duration, cycles * self.cycle_duration

    def mode_at(self, t: float) -> Mode:
        """Active mode m(t); right-continuous at events."""
        tau, _ = self._cycle_time(t)
        k = int(np.searchsorted(self.event_times, tau + _TIME_EPS, side="right"))
        return self.modes[k]

    def mode_before(self, t: float) -> Mode:
        """Left limit m(t-)."""
        return self.mode_at(t - 2 * _TIME_EPS)

    def swing_intervals(self, foot: int) -> list[tuple[float, float]]:
        """Maximal swing intervals of ``foot`` within one cycle, merged across the cycle wrap."""
        b = self.boundaries
        spans = []
        for k, mode in enumerate(self.modes):
            if mode.contact_flags[foot]:
                continue
            if spans and abs(spans[-1][1] - b[k]) < _TIME_EPS:
                spans[-1] = (spans[-1][0], b[k + 1])
            else:
                spans.append((b[k], b[k + 1]))
        cyc = float(self.cycle_duration)
        if len(spans) >= 2 and spans[0][0] == 0.0 and abs(spans[-1][1] - cyc) < _TIME_EPS:
            first = spans.pop(0)
            last = spans.pop()
            spans.append((last[0], first[1] + cyc))
        elif len(spans) == 1 and spans[0] == (0.0, cyc):
            raise ValueError(f"foot {foot} never touches down")
        return spans


def leg_phase(t: float, foot: int, schedule: ModeSchedule) -> tuple[float, float]:
    """Swing phase and phase rate of one foot.

    Within a swing interval ``(t_lo, t_td]`` the phase rises linearly from 0 to 1;
    in contact, including the liftoff instant itself, both are zero.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    tau, _ = schedule._cycle_time(t)
    cyc = float(schedule.cycle_duration)
    for lo, td in schedule.swing_intervals(foot):
        for shift in (0.0, cyc, -cyc):
            s = tau + shift
            if lo + _TIME_EPS < s <= td + _TIME_EPS:
                dur = td - lo
                return min((s - lo) / dur, 1.0), 1.0 / dur
    return 0.0, 0.0


@dataclass(frozen=True)
class GeneralizedTime:
    phases: np.ndarray
    phase_rates: np.ndarray
    bumps: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.phases, self.phase_rates, self.bumps])


def generalized_time(t: float, schedule: ModeSchedule) -> np.ndarray:
    """``[phi_1, phi_2, dphi_1, dphi_2, sin(pi phi_1), sin(pi phi_2)]``."""
    out = np.zeros(3 * NUM_FEET)
    for foot in range(NUM_FEET):
        phi, rate = leg_phase(t, foot, schedule)
        out[foot] = phi
        out[NUM_FEET + foot] = rate
        out[2 * NUM_FEET + foot] = math.sin(math.pi * phi)
    return out


def relative_state(x, x_d, transform: np.ndarray | None = None) -> np.ndarray:
    """Tracking error ``T (x - x_d)``; ``T`` is the identity for the planar walker."""
    err = as_state(x) - as_state(x_d)
    return err if transform is None else np.asarray(transform, float) @ err


def mode_probabilities(t: float, schedule: ModeSchedule) -> np.ndarray:
    p = np.zeros(NUM_MODES)
    p[int(schedule.mode_at(t))] = 1.0
    return p


@dataclass(frozen=True)
class GaitSpec:
    name: str
    schedule: ModeSchedule


WALK = GaitSpec(
    "walk",
    ModeSchedule((0.2, 0.5, 0.7), (Mode.STANCE, Mode.SWING1, Mode.STANCE, Mode.SWING2), 1.0),
)
TROT_ANALOG = GaitSpec("trot-analog", ModeSchedule((0.3,), (Mode.SWING1, Mode.SWING2), 0.6))
BUILTIN_GAITS = {g.name: g for g in (WALK, TROT_ANALOG)}


def get_gait(name: str) -> GaitSpec:
    try:
        return BUILTIN_GAITS[name]
    except KeyError:
        raise ValueError(f"unknown gait {name!r}; built-in gaits: {sorted(BUILTIN_GAITS)}") from None


def gait_from_config(section: dict[str, str]) -> GaitSpec:
    """Build a gait from ``gait.name/events/modes/cycle`` config entries."""
    missing = {"name", "events", "modes", "cycle"} - set(section)
    if missing:
        raise ValueError(f"gait section missing keys: {sorted(missing)}")
    events = tuple(float(v) for v in section["events"].split(",") if v.strip())
    modes = tuple(Mode.parse(v) for v in section["modes"].split(",") if v.strip())
    return GaitSpec(section["name"].strip(), ModeSchedule(events, modes, float(section["cycle"])))


# -- tracking cost ------------------------------------------------------------

@dataclass(frozen=True)
class TrackingReference:
    """Constant-height, constant-forward-velocity reference for base and feet."""

    forward_velocity: float = 0.0
    start_x: float = 0.0
    height: float = Z_DEFAULT
    foot_offsets: tuple[float, float] = FOOT_OFFSETS

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        px = self.start_x + self.forward_velocity * t
        out = np.zeros(t.shape + (STATE_DIM,))
        out[..., PX] = px
        out[..., PZ] = self.height
        out[..., VX] = self.forward_velocity
        out[..., F1] = px + self.foot_offsets[0]
        out[..., F2] = px + self.foot_offsets[1]
        return out


DEFAULT_Q = np.diag([10.0, 200.0, 10.0, 20.0, 10.0, 10.0])
DEFAULT_R = np.diag([1e-3, 1e-3, 1e-3, 1e-3, 0.1, 0.1])


def infinite_horizon_weight(Q, R) -> np.ndarray:
    """Final weight equal to the infinite-horizon value of the unconstrained tracking problem.

    Using it as ``Qf`` keeps the backward Riccati sweep free of the stiff
    transient a much heavier final weight would cause.
    """
    S = scipy.linalg.solve_continuous_are(_A, _B, 2.0 * np.asarray(Q), 2.0 * np.asarray(R))
    S = 0.5 * (S + S.T)
    return 0.5 * S


DEFAULT_QF = infinite_horizon_weight(DEFAULT_Q, DEFAULT_R)


@dataclass(frozen=True)
class CostSpec:
    """Quadratic tracking cost ``(x-x_d)' Q (x-x_d) + u' R u`` with final weight ``Qf``."""

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    desired: Callable = field(default_factory=TrackingReference)

    def __post_init__(self):
        for name in ("Q", "R", "Qf"):
            mat = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if mat.shape[0] != mat.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric")
            eig = np.linalg.eigvalsh(mat)
            if name == "R" and eig.min() <= 0:
                raise ValueError("R must be positive definite")
            if eig.min() < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
            object.__setattr__(self, name, mat)

    def intermediate(self, x, u, t) -> float:
        e = np.asarray(x, float) - self.desired(t)
        u = np.asarray(u, float)
        return float(e @ self.Q @ e + u @ self.R @ u)

    def final(self, x, t) -> float:
        e = np.asarray(x, float) - self.desired(t)
        return float(e @ self.Qf @ e)


def walker_cost(reference: Callable | None = None) -> CostSpec:
    return CostSpec(DEFAULT_Q, DEFAULT_R, DEFAULT_QF, reference or TrackingReference())
