"""MPC-Net training loop: data generation with the MPC teacher, replay buffer, learner and metrics.

Data-generation jobs roll the walker out under the behavioral policy
``alpha * pi_mpc + (1 - alpha) * pi`` while the solver is re-run every
``d_d`` simulation steps; each solve contributes one tuple at the nominal
state and ``n_s`` tuples at states sampled around it. The learner draws
batches from the replay buffer and takes one Adam step per batch.

Two execution modes exist. The deterministic mode interleaves data-generation
runs and learner iterations on one thread at fixed iterations, so equal seeds
give bitwise-equal results. The asynchronous mode runs ``n_t`` worker
threads next to the learner, communicating only through the buffer and
policy snapshots.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from . import losses, model, solver
from .policy import MenConfig, MenPolicy, adam_step, men_forward

log = logging.getLogger(__name__)

METRICS_HEADER = "iteration,constraint_violation,cost,survival_time,completed"
TIME_FEATURES = ("full", "bumps")


@dataclass(frozen=True)
class TrainConfig:
    dt: float = 0.0025
    duration: float = 4.0
    n_threads: int = 5
    n_jobs: int = 10
    n_samples: int = 1
    data_decimation: int = 4
    metrics_decimation: int = 200
    beta: float = 1.0
    lam: float = 1.0
    num_experts: int = 4
    batch_size: int = 32
    learning_rate: float = 1e-3
    iterations: int = 20000
    buffer_capacity: int = 100000
    sigma_sample: float = 0.02
    sigma_pos: float = 0.05
    sigma_vel: float = 0.1
    max_command: float = 0.5
    seed: int = 0
    horizon: float = 1.0
    ocp_dt: float = 0.01
    barrier_mu: float = 0.1
    barrier_delta: float = 0.01
    data_runs: int = 8
    time_features: str = "full"
    benchmark_duration: float = 20.0
    disturbance_rate: float = 1.0
    startup_timeout: float = 600.0
    expert_hidden: tuple = (32, 32)
    gating_hidden: tuple = (32,)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "expert_hidden", tuple(int(v) for v in self.expert_hidden))
        object.__setattr__(self, "gating_hidden", tuple(int(v) for v in self.gating_hidden))
        positive = ("dt", "duration", "n_threads", "n_jobs", "data_decimation", "metrics_decimation",
                    "num_experts", "batch_size", "learning_rate", "buffer_capacity", "sigma_sample",
                    "horizon", "ocp_dt", "barrier_mu", "barrier_delta", "data_runs", "benchmark_duration",
                    "startup_timeout")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_samples", "iterations", "sigma_pos", "sigma_vel", "max_command", "lam",
                     "disturbance_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.time_features not in TIME_FEATURES:
            raise ValueError(f"time_features must be one of {TIME_FEATURES}")
        ratio = self.ocp_dt / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("ocp_dt must be a multiple of the simulation dt")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def men_config(self) -> MenConfig:
        return MenConfig(num_experts=self.num_experts, expert_hidden=self.expert_hidden,
                         gating_hidden=self.gating_hidden, activation=self.activation, seed=self.seed)


# -- data records ---------------------------------------------------------------

@dataclass(frozen=True)
class ReplayTuple:
    gt: np.ndarray
    xr: np.ndarray
    x_abs: np.ndarray
    t_abs: float
    dVdx: np.ndarray
    dVdt: float
    nu: np.ndarray
    mode: model.Mode
    mode_probs: np.ndarray
    u_mpc: np.ndarray


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    constraint_violation: float
    cost: float
    survival_time: float
    completed: bool

    def csv_row(self) -> str:
        return (f"{self.iteration},{self.constraint_violation!r},{self.cost!r},"
                f"{self.survival_time!r},{int(self.completed)}")


def metrics_csv(history: Sequence[MetricsRecord]) -> str:
    return "\n".join([METRICS_HEADER, *(r.csv_row() for r in history)]) + "\n"


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling with replacement; thread-safe."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list = []
        self._next = 0
        self._lock = threading.Lock()
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def push(self, tuples) -> None:
        with self._lock:
            for t in tuples:
                if len(self._items) < self.capacity:
                    self._items.append(t)
                else:
                    self._items[self._next] = t
                self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int) -> list:
        if batch_size < 1:
            raise ValueError("batch size must be at least 1")
        with self._lock:
            if not self._items:
                raise ValueError("cannot sample from an empty replay buffer")
            idx = self._rng.integers(len(self._items), size=batch_size)
            return [self._items[i] for i in idx]

    def contents(self) -> list:
        """Tuples in insertion order, oldest first."""
        with self._lock:
            if len(self._items) < self.capacity:
                return list(self._items)
            return self._items[self._next:] + self._items[:self._next]


def buffer_push(buffer: ReplayBuffer, tuples) -> None:
    buffer.push(tuples)


def buffer_sample(buffer: ReplayBuffer, batch_size: int) -> list:
    return buffer.sample(batch_size)


# -- policies acting on the walker ---------------------------------------------------

def alpha_schedule(iteration: int, total: int) -> float:
    """Mixing weight of the MPC policy, decreasing linearly from 1 to 0."""
    if total <= 0:
        return 0.0
    return float(min(max(1.0 - iteration / total, 0.0), 1.0))


def time_feature_mask(kind: str) -> np.ndarray:
    """Mask applied to ``[phi, dphi, sin(pi phi)]``; ``bumps`` keeps only the last block."""
    if kind == "full":
        return np.ones(6)
    if kind == "bumps":
        return np.array([0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
    raise ValueError(f"unknown time features {kind!r}")


def policy_input(t: float, x, schedule: model.ModeSchedule, reference, mask=None):
    gt = model.generalized_time(t, schedule)
    if mask is not None:
        gt = gt * mask
    return gt, model.relative_state(x, reference(t))


def learned_action(policy: MenPolicy, x, t, schedule, reference, mask=None) -> np.ndarray:
    gt, xr = policy_input(t, x, schedule, reference, mask)
    return men_forward(policy, gt, xr).blended[0]


def behavioral_action(alpha: float, sol: solver.SolverSolution, policy_snapshot: MenPolicy | None, x, t,
                      schedule, reference=None, mask=None) -> np.ndarray:
    """``alpha * pi_mpc + (1 - alpha) * pi``."""
    u_mpc = solver.mpc_policy_eval(sol, x, t)
    if alpha >= 1.0 or policy_snapshot is None:
        return u_mpc
    reference = reference or model.TrackingReference()
    u_pi = learned_action(policy_snapshot, x, t, schedule, reference, mask)
    if alpha <= 0.0:
        return u_pi
    return alpha * u_mpc + (1.0 - alpha) * u_pi


# -- tasks -------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    gait: model.GaitSpec
    reference: model.TrackingReference
    x0: np.ndarray


def sample_task(rng: np.random.Generator, gaits: Sequence[model.GaitSpec], config: TrainConfig) -> Task:
    """Random gait, forward-velocity command and perturbed initial state."""
    gait = gaits[int(rng.integers(len(gaits)))] if len(gaits) > 1 else gaits[0]
    ref = model.TrackingReference(forward_velocity=float(rng.uniform(-config.max_command, config.max_command)))
    x0 = ref(0.0).copy()
    x0[model.VX] = 0.0
    pos = [model.PX, model.PZ, model.F1, model.F2]
    x0[pos] += rng.normal(0.0, config.sigma_pos, len(pos))
    x0[[model.VX, model.VZ]] += rng.normal(0.0, config.sigma_vel, 2)
    return Task(gait, ref, x0)


def make_solver(config: TrainConfig, task: Task) -> solver.SlqSolver:
    ocp = solver.OcpDefinition(config.horizon, model.walker_cost(task.reference), task.gait.schedule,
                               config.barrier_mu, config.barrier_delta, config.ocp_dt)
    return solver.SlqSolver(ocp)


def _tuple_from(sol: solver.SolverSolution, dx, schedule, reference, mask) -> ReplayTuple:
    hd = sol.interval_data(0, dx)
    x = hd.x
    gt = model.generalized_time(hd.t, schedule) * mask
    u_mpc = sol.u_nom[0] + sol.K[0] @ (x - 0.5 * (sol.x_nom[0] + sol.x_nom[1]))
    return ReplayTuple(gt, model.relative_state(x, reference(hd.t)), x, hd.t, hd.dVdx, float(hd.dVdt),
                       np.asarray(hd.nu, float), model.Mode(hd.mode),
                       model.mode_probabilities(hd.t, schedule), u_mpc)


@dataclass
class JobResult:
    tuples: list
    failed: bool = False
    solver_failed: bool = False
    steps: int = 0


def run_job(config: TrainConfig, task: Task, policy_snapshot: MenPolicy | None, alpha: float,
            rng: np.random.Generator) -> JobResult:
    """One data-generation rollout; returns its tuples (empty if the walker fails)."""
    mask = time_feature_mask(config.time_features)
    slq = make_solver(config, task)
    schedule = task.gait.schedule
    x = task.x0.copy()
    tuples = []
    sol = None
    n_state = x.shape[0]
    for i in range(config.steps):
        t = round(i * config.dt, 12)
        if i % config.data_decimation == 0:
            try:
                sol = slq.solve(x, t)
            except solver.SolverFailure:
                return JobResult([], failed=True, solver_failed=True, steps=i)
            tuples.append(_tuple_from(sol, None, schedule, task.reference, mask))
            for _ in range(config.n_samples):
                dx = rng.normal(0.0, config.sigma_sample, n_state)
                tuples.append(_tuple_from(sol, dx, schedule, task.reference, mask))
        u = behavioral_action(alpha, sol, policy_snapshot, x, t, schedule, task.reference, mask)
        x = model.step(x, u, config.dt, schedule.mode_at(t))
        if model.failure_check(x):
            return JobResult([], failed=True, steps=i + 1)
    return JobResult(tuples, steps=config.steps)


@dataclass
class Diagnostics:
    jobs: int = 0
    failed_jobs: int = 0
    solver_failures: int = 0
    tuples: int = 0
    data_runs: int = 0
    seconds_data: float = 0.0
    seconds_learning: float = 0.0
    seconds_metrics: float = 0.0


def generate_data(worker_id: int, config: TrainConfig, gaits: Sequence[model.GaitSpec],
                  policy_snapshot: MenPolicy | None, alpha: float, run_index: int = 0,
                  n_jobs: int | None = None, diagnostics: Diagnostics | None = None) -> list:
    """Run ``n_jobs`` jobs (default ``config.n_jobs``) and return the tuples of the successful ones."""
    out = []
    for j in range(config.n_jobs if n_jobs is None else n_jobs):
        rng = np.random.default_rng([config.seed, 1, run_index, worker_id, j])
        task = sample_task(rng, gaits, config)
        res = run_job(config, task, policy_snapshot, alpha, rng)
        if diagnostics is not None:
            diagnostics.jobs += 1
            diagnostics.failed_jobs += int(res.failed)
            diagnostics.solver_failures += int(res.solver_failed)
            diagnostics.tuples += len(res.tuples)
        out.extend(res.tuples)
    return out


# -- evaluation rollouts -----------------------------------------------------------

class PolicyController:
    """Learned policy as a feedback law ``u(x, t)``."""

    def __init__(self, policy: MenPolicy, time_features: str = "full"):
        self.policy = policy
        self.mask = time_feature_mask(time_features)

    def reset(self, task: Task, config: TrainConfig):
        self.task = task

    def __call__(self, x, t, step_index):
        return learned_action(self.policy, x, t, self.task.gait.schedule, self.task.reference, self.mask)


class MpcController:
    """The MPC teacher, re-solved every ``d_d`` steps."""

    def reset(self, task: Task, config: TrainConfig):
        self.slq = make_solver(config, task)
        self.decimation = config.data_decimation
        self.sol = None

    def __call__(self, x, t, step_index):
        if step_index % self.decimation == 0 or self.sol is None:
            self.sol = self.slq.solve(x, t)
        return solver.mpc_policy_eval(self.sol, x, t)


def disturbance_times(rng: np.random.Generator, rate: float, duration: float) -> list[float]:
    out = []
    if rate <= 0:
        return out
    t = rng.exponential(1.0 / rate)
    while t < duration:
        out.append(t)
        t += rng.exponential(1.0 / rate)
    return out


def metrics_rollout(controller, gaits, config: TrainConfig, disturbance_scale: float = 0.0,
                    rng: np.random.Generator | None = None, duration: float | None = None,
                    iteration: int = 0, task: Task | None = None) -> MetricsRecord:
    """Roll a controller out on a random task and measure violation, cost and survival.

    ``controller`` is a :class:`PolicyController`, :class:`MpcController` or a bare
    :class:`MenPolicy`. Base-velocity impulses of magnitude ``disturbance_scale``
    arrive as a Poisson process.
    """
    if isinstance(controller, MenPolicy):
        controller = PolicyController(controller, config.time_features)
    if isinstance(gaits, model.GaitSpec):
        gaits = [gaits]
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    duration = config.duration if duration is None else duration
    task = task or sample_task(rng, gaits, config)
    kicks = disturbance_times(rng, config.disturbance_rate, duration) if disturbance_scale > 0 else []
    angles = rng.uniform(0.0, 2.0 * math.pi, len(kicks))
    controller.reset(task, config)
    schedule = task.gait.schedule
    cost = model.walker_cost(task.reference)
    steps = int(round(duration / config.dt))
    x = task.x0.copy()
    violation = 0.0
    incurred = 0.0
    k_next = 0
    survived = duration
    completed = True
    n = 0
    for i in range(steps):
        t = round(i * config.dt, 12)
        while k_next < len(kicks) and kicks[k_next] <= t:
            x[model.VX] += disturbance_scale * math.cos(angles[k_next])
            x[model.VZ] += disturbance_scale * math.sin(angles[k_next])
            k_next += 1
        try:
            u = controller(x, t, i)
        except solver.SolverFailure:
            survived, completed = t, False
            break
        mode = schedule.mode_at(t)
        violation += float(np.linalg.norm(model.constraint_residual(x, u, mode)))
        incurred += cost.intermediate(x, u, t) * config.dt
        x = model.step(x, u, config.dt, mode)
        n += 1
        if not np.all(np.isfinite(x)) or model.failure_check(x):
            survived, completed = round((i + 1) * config.dt, 12), False
            break
    if completed:
        incurred += cost.final(x, duration)
    return MetricsRecord(iteration, violation / max(n, 1), incurred, survived, completed)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: MenPolicy
    history: list
    diagnostics: Diagnostics
    losses: list = field(default_factory=list)


def _learner_step(policy, buffer, kind, config, cost, mode_map):
    batch = buffer.sample(config.batch_size)
    J, _ = losses.batch_loss(kind, batch, policy, cost, mode_map=mode_map,
                             mu=config.barrier_mu, delta=config.barrier_delta)
    adam_step(policy, config.learning_rate)
    return J


def _metrics_rng(config: TrainConfig, iteration: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, 2, iteration])


def train(config: TrainConfig, gaits: Sequence[model.GaitSpec], loss_kind: losses.LossKind,
          deterministic: bool = True, mode_map: Sequence[int] | None = None,
          policy: MenPolicy | None = None, progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train a policy with MPC-Net; returns the policy and one metrics record every ``d_m`` iterations."""
    gaits = list(gaits)
    if not gaits:
        raise ValueError("need at least one gait")
    policy = policy or MenPolicy(config.men_config())
    diag = Diagnostics()
    if config.iterations == 0:
        return TrainResult(policy, [], diag)
    # the quadratic part of H only depends on Q and R, which all tasks share
    cost = model.walker_cost()
    if deterministic:
        return _train_deterministic(config, gaits, loss_kind, policy, diag, cost, mode_map, progress)
    return _train_async(config, gaits, loss_kind, policy, diag, cost, mode_map, progress)


def _data_run(config, gaits, policy, alpha, run_index, buffer, diag):
    t0 = time.perf_counter()
    snapshot = policy.snapshot()
    for w in range(config.n_threads):
        # the run's jobs are dealt round-robin to the workers
        n = len(range(w, config.n_jobs, config.n_threads))
        if n:
            buffer.push(generate_data(w, config, gaits, snapshot, alpha, run_index, n, diag))
    diag.data_runs += 1
    diag.seconds_data += time.perf_counter() - t0


def _train_deterministic(config, gaits, kind, policy, diag, cost, mode_map, progress):
    buffer = ReplayBuffer(config.buffer_capacity, config.seed)
    run_starts = sorted({r * config.iterations // config.data_runs for r in range(config.data_runs)})
    history, loss_trace = [], []
    run_index = 0
    for it in range(config.iterations):
        if it in run_starts:
            _data_run(config, gaits, policy, alpha_schedule(it, config.iterations), run_index, buffer, diag)
            run_index += 1
            while len(buffer) == 0:
                if run_index > 3 * config.data_runs:
                    raise RuntimeError("replay buffer is still empty: every data-generation job failed")
                _data_run(config, gaits, policy, alpha_schedule(it, config.iterations), run_index, buffer, diag)
                run_index += 1
        t0 = time.perf_counter()
        J = _learner_step(policy, buffer, kind, config, cost, mode_map)
        diag.seconds_learning += time.perf_counter() - t0
        loss_trace.append(J)
        if (it + 1) % config.metrics_decimation == 0:
            t0 = time.perf_counter()
            rec = metrics_rollout(policy, gaits, config, 0.0, _metrics_rng(config, it + 1), iteration=it + 1)
            diag.seconds_metrics += time.perf_counter() - t0
            history.append(rec)
            if progress:
                progress(it + 1, J)
    return TrainResult(policy, history, diag, loss_trace)


class _SharedState:
    """What workers read from the learner: the mixing weight and a policy snapshot."""

    def __init__(self, policy: MenPolicy, alpha: float):
        self._lock = threading.Lock()
        self._snapshot = policy.snapshot()
        self._alpha = alpha
        self.stop = threading.Event()

    def publish(self, policy: MenPolicy, alpha: float):
        snap = policy.snapshot()
        with self._lock:
            self._snapshot, self._alpha = snap, alpha

    def read(self):
        with self._lock:
            return self._snapshot, self._alpha


def _train_async(config, gaits, kind, policy, diag, cost, mode_map, progress):
    buffer = ReplayBuffer(config.buffer_capacity, config.seed)
    shared = _SharedState(policy, 1.0)
    diag_lock = threading.Lock()
    errors = []

    def worker(wid):
        run = 0
        jobs_per_run = max(1, config.n_jobs // config.n_threads)
        try:
            while not shared.stop.is_set():
                snap, alpha = shared.read()
                local = Diagnostics()
                data = generate_data(wid, config, gaits, snap, alpha, run, jobs_per_run, local)
                buffer.push(data)
                with diag_lock:
                    diag.jobs += local.jobs
                    diag.failed_jobs += local.failed_jobs
                    diag.solver_failures += local.solver_failures
                    diag.tuples += local.tuples
                    diag.data_runs += 1
                run += 1
        except Exception as exc:  # surfaced to the learner
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(config.n_threads)]
    for th in threads:
        th.start()
    history, loss_trace = [], []
    try:
        t_start = time.perf_counter()
        while len(buffer) < config.batch_size:
            if errors:
                raise RuntimeError(f"data generation failed: {errors[0]}") from errors[0]
            if time.perf_counter() - t_start > config.startup_timeout:
                raise RuntimeError("replay buffer did not fill before the startup timeout")
            time.sleep(0.05)
        for it in range(config.iterations):
            J = _learner_step(policy, buffer, kind, config, cost, mode_map)
            loss_trace.append(J)
            if (it + 1) % 100 == 0:
                shared.publish(policy, alpha_schedule(it + 1, config.iterations))
            if (it + 1) % config.metrics_decimation == 0:
                rec = metrics_rollout(policy, gaits, config, 0.0, _metrics_rng(config, it + 1), iteration=it + 1)
                history.append(rec)
                if progress:
                    progress(it + 1, J)
    finally:
        shared.stop.set()
        for th in threads:
            th.join()
    return TrainResult(policy, history, diag, loss_trace)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
