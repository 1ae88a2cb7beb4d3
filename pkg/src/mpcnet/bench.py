"""Benchmark harness: loss ablation, robustness against behavioral cloning, multi-gait training.

Each benchmark trains policies in deterministic mode, evaluates them and
writes CSV reports plus a ``summary.txt`` with the pass/fail state of every
encoded check. Trained results are memoized per process so that benchmarks
sharing a training configuration do not repeat it.
"""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model
from .losses import LossKind
from .policy import MenPolicy, men_forward
from .training import (MetricsRecord, MpcController, PolicyController, Task, TrainConfig, TrainResult,
                       metrics_rollout, policy_input, sample_task, time_feature_mask, train)

log = logging.getLogger(__name__)

RESPONSIBILITY_THRESHOLD = 0.8
ABLATION_HEADER = "loss,beta,gait,seed,single_resp,violation,survival"
BC_HEADER = "scale,controller,n,mean_survival,std_survival"
MULTIGAIT_HEADER = "loss,guided,gaits,seed,single_resp,violation,survival"
TRACE_HEADER_PREFIX = "time,active_mode,argmax_expert"


# -- single responsibility -------------------------------------------------------

@dataclass(frozen=True)
class ResponsibilityReport:
    assignment: dict          # Mode -> (dominant expert, mean dominant weight)
    single_responsibility: bool
    per_seed: tuple = ()

    def describe(self) -> str:
        parts = [f"{model.Mode(m).name.lower()}->{e}({w:.2f})" for m, (e, w) in sorted(self.assignment.items())]
        return " ".join(parts)


def responsibility_from_weights(p: np.ndarray, modes: Sequence[int],
                                threshold: float = RESPONSIBILITY_THRESHOLD) -> ResponsibilityReport:
    """Average gating weights per mode and apply the injectivity and threshold rule."""
    p = np.asarray(p, float)
    modes = np.asarray(modes)
    assignment = {}
    for m in sorted(set(int(v) for v in modes)):
        mean = p[modes == m].mean(axis=0)
        e = int(np.argmax(mean))
        assignment[model.Mode(m)] = (e, float(mean[e]))
    experts = [e for e, _ in assignment.values()]
    injective = len(set(experts)) == len(experts)
    ok = injective and all(w >= threshold for _, w in assignment.values())
    return ResponsibilityReport(assignment, bool(ok))


_EVAL_CACHE: dict = {}


def teacher_points(gait: model.GaitSpec, config: TrainConfig, n_points: int, n_rollouts: int = 2):
    """``(t, x, mode, task)`` samples from MPC teacher rollouts, evenly thinned to ``n_points``."""
    key = (gait, config.dt, config.duration, config.horizon, config.ocp_dt, config.barrier_mu,
           config.barrier_delta, config.data_decimation, config.max_command, config.sigma_pos,
           config.sigma_vel, n_points, n_rollouts)
    if key in _EVAL_CACHE:
        return _EVAL_CACHE[key]
    pts = []
    for r in range(n_rollouts):
        rng = np.random.default_rng([7, 3, r])
        task = sample_task(rng, [gait], config)
        ctrl = MpcController()
        ctrl.reset(task, config)
        x = task.x0.copy()
        for i in range(config.steps):
            t = round(i * config.dt, 12)
            mode = gait.schedule.mode_at(t)
            pts.append((t, x.copy(), int(mode), task))
            u = ctrl(x, t, i)
            x = model.step(x, u, config.dt, mode)
            if model.failure_check(x):
                break
    idx = np.linspace(0, len(pts) - 1, min(n_points, len(pts))).round().astype(int)
    out = [pts[i] for i in idx]
    _EVAL_CACHE[key] = out
    return out


def gating_weights(policy: MenPolicy, points, schedule, time_features: str = "full") -> np.ndarray:
    mask = time_feature_mask(time_features)
    gts, xrs = [], []
    for t, x, _, task in points:
        gt, xr = policy_input(t, x, schedule, task.reference, mask)
        gts.append(gt)
        xrs.append(xr)
    return men_forward(policy, np.array(gts), np.array(xrs)).p


def responsibility_stats(policy: MenPolicy, gait: model.GaitSpec, n_eval_points: int = 400,
                         config: TrainConfig | None = None, threshold: float = RESPONSIBILITY_THRESHOLD,
                         ) -> ResponsibilityReport:
    """Gating statistics per active mode over states visited by the MPC teacher."""
    config = config or TrainConfig()
    points = teacher_points(gait, config, n_eval_points)
    p = gating_weights(policy, points, gait.schedule, config.time_features)
    return responsibility_from_weights(p, [m for _, _, m, _ in points], threshold)


# -- shared training cache -------------------------------------------------------

_TRAIN_CACHE: dict = {}
TRAIN_SECONDS: dict = {}   # wall time of each memoized training run, same keys as the cache


def _train_key(config, gaits, kind, mode_map):
    return (config, tuple(gaits), kind, None if mode_map is None else tuple(mode_map))


def training_seconds(config: TrainConfig, gaits: Sequence[model.GaitSpec], kind: LossKind,
                     mode_map: Sequence[int] | None = None) -> float:
    """Wall time the memoized run took when it was first trained."""
    return TRAIN_SECONDS[_train_key(config, gaits, kind, mode_map)]


def trained(config: TrainConfig, gaits: Sequence[model.GaitSpec], kind: LossKind,
            mode_map: Sequence[int] | None = None) -> TrainResult:
    """Deterministic training, memoized on all of its inputs."""
    key = _train_key(config, gaits, kind, mode_map)
    if key not in _TRAIN_CACHE:
        log.info("training %s on %s (seed %d)", kind, [g.name for g in gaits], config.seed)
        t0 = time.perf_counter()
        _TRAIN_CACHE[key] = train(config, list(gaits), kind, deterministic=True, mode_map=mode_map)
        TRAIN_SECONDS[key] = time.perf_counter() - t0
    return _TRAIN_CACHE[key]


def clear_cache() -> None:
    _TRAIN_CACHE.clear()
    TRAIN_SECONDS.clear()
    _EVAL_CACHE.clear()


def final_tasks(gait: model.GaitSpec, config: TrainConfig, n: int) -> list[Task]:
    """Fixed evaluation tasks shared by every policy compared on a gait."""
    return [sample_task(np.random.default_rng([11, 5, i]), [gait], config) for i in range(n)]


def final_metrics(policy: MenPolicy, gait: model.GaitSpec, config: TrainConfig, n: int) -> tuple[float, float]:
    """Mean constraint violation and survival over the fixed evaluation tasks."""
    recs = [metrics_rollout(PolicyController(policy, config.time_features), [gait], config, 0.0,
                            np.random.default_rng([11, 6, i]), task=task)
            for i, task in enumerate(final_tasks(gait, config, n))]
    return (float(np.mean([r.constraint_violation for r in recs])),
            float(np.mean([r.survival_time for r in recs])))


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def _summary(checks: list[tuple[str, bool]], extra: Sequence[str] = ()) -> str:
    lines = [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in checks]
    return "\n".join([*lines, *extra]) + "\n"


def _fmt(v: float) -> str:
    return repr(float(v))


# -- ablation -------------------------------------------------------------------------

@dataclass
class AblationRow:
    loss: str
    beta: float
    gait: str
    seed: int
    single_resp: bool
    violation: float
    survival: float
    time_features: str = "full"

    def csv_row(self) -> str:
        return (f"{self.loss},{_fmt(self.beta)},{self.gait},{self.seed},{int(self.single_resp)},"
                f"{_fmt(self.violation)},{_fmt(self.survival)}")


@dataclass
class AblationReport:
    rows: list
    bumps_rows: list
    percentages: dict          # (loss, beta, gait) -> percent single responsibility
    checks: list = field(default_factory=list)

    def csv(self) -> str:
        return "\n".join([ABLATION_HEADER, *(r.csv_row() for r in self.rows)]) + "\n"

    def table(self) -> str:
        gaits = sorted({k[2] for k in self.percentages})
        lines = ["loss,beta," + ",".join(gaits)]
        for loss, beta in sorted({k[:2] for k in self.percentages}):
            vals = [_fmt(self.percentages[(loss, beta, g)]) for g in gaits]
            lines.append(f"{loss},{_fmt(beta)}," + ",".join(vals))
        return "\n".join(lines) + "\n"


def percentage(flags: Sequence[bool]) -> float:
    return 100.0 * sum(bool(f) for f in flags) / len(flags) if flags else 0.0


def _ablation_row(config, gait, kind, seed, n_eval_points, threshold, final_runs):
    cfg = replace(config, seed=seed, beta=kind.beta)
    try:
        res = trained(cfg, [gait], kind)
    except Exception as exc:  # recorded, not fatal
        log.warning("run %s %s seed %d failed: %s", kind.variant, gait.name, seed, exc)
        return AblationRow(kind.variant, kind.beta, gait.name, seed, False, math.nan, 0.0, cfg.time_features)
    rep = responsibility_stats(res.policy, gait, n_eval_points, cfg, threshold)
    viol, surv = final_metrics(res.policy, gait, cfg, final_runs)
    return AblationRow(kind.variant, kind.beta, gait.name, seed, rep.single_responsibility, viol, surv,
                       cfg.time_features)


def run_ablation(config: TrainConfig, seeds: Sequence[int], gaits: Sequence[model.GaitSpec] | None = None,
                 betas: Sequence[float] = (0.5, 1.0, 2.0), include_l2: bool = True, bumps: bool = True,
                 n_eval_points: int = 400, threshold: float = RESPONSIBILITY_THRESHOLD, final_runs: int = 10,
                 out_dir: str | None = None) -> AblationReport:
    """L2 against L3 at several beta values on each gait, plus full against bumps-only time features."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("the ablation needs at least two seeds")
    gaits = list(gaits or (model.WALK, model.TROT_ANALOG))
    kinds = ([LossKind("l2")] if include_l2 else []) + [LossKind("l3", beta=b) for b in betas]
    rows = [_ablation_row(config, g, k, s, n_eval_points, threshold, final_runs)
            for g in gaits for k in kinds for s in seeds]
    percentages = {}
    for k in kinds:
        for g in gaits:
            flags = [r.single_resp for r in rows if r.loss == k.variant and r.beta == k.beta and r.gait == g.name]
            percentages[(k.variant, k.beta, g.name)] = percentage(flags)
    bumps_rows = []
    if bumps:
        bcfg = replace(config, time_features="bumps")
        bumps_rows = [_ablation_row(bcfg, g, LossKind("l3", beta=1.0), s, n_eval_points, threshold, final_runs)
                      for g in gaits for s in seeds]
    report = AblationReport(rows, bumps_rows, percentages)
    for g in gaits:
        l3 = percentages.get(("l3", 1.0, g.name))
        if l3 is None:
            continue
        if include_l2:
            report.checks.append((f"l3(beta=1) rate >= l2 rate on {g.name}", l3 >= percentages[("l2", 1.0, g.name)]))
        report.checks.append((f"l3(beta=1) rate >= 70% on {g.name}", l3 >= 70.0))
    if bumps:
        full_v = [r.violation for r in rows if r.loss == "l3" and r.beta == 1.0]
        bump_v = [r.violation for r in bumps_rows]
        report.checks.append(("full generalized time violation < bumps-only violation",
                              bool(np.nanmean(full_v) < np.nanmean(bump_v))))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "ablation.csv"), report.csv())
        _write(os.path.join(out_dir, "ablation_table.csv"), report.table())
        if bumps_rows:
            _write(os.path.join(out_dir, "time_features.csv"),
                   "\n".join(["time_features," + ABLATION_HEADER,
                              *(f"{r.time_features},{r.csv_row()}"
                                for r in [*(x for x in rows if x.loss == "l3" and x.beta == 1.0), *bumps_rows])]) + "\n")
        _write(os.path.join(out_dir, "summary.txt"), _summary(report.checks, ["", report.table()]))
    return report


# -- robustness against behavioral cloning ---------------------------------------

@dataclass
class SurvivalReport:
    rows: list                 # (scale, controller, n, mean, std)
    duration: float
    checks: list = field(default_factory=list)

    def csv(self) -> str:
        body = [f"{_fmt(s)},{c},{n},{_fmt(m)},{_fmt(sd)}" for s, c, n, m, sd in self.rows]
        return "\n".join([BC_HEADER, *body]) + "\n"

    def mean(self, scale: float, controller: str) -> float:
        for s, c, _, m, _ in self.rows:
            if s == scale and c == controller:
                return m
        raise KeyError((scale, controller))

    def std(self, scale: float, controller: str) -> float:
        for s, c, _, _, sd in self.rows:
            if s == scale and c == controller:
                return sd
        raise KeyError((scale, controller))


def survival_runs(controller, gait: model.GaitSpec, config: TrainConfig, scale: float, n: int,
                  duration: float, seed: int = 0) -> list[float]:
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 4, int(round(scale * 1000)), i])
        rec: MetricsRecord = metrics_rollout(controller, [gait], config, scale, rng, duration=duration)
        out.append(rec.survival_time)
    return out


def run_bc_benchmark(config: TrainConfig, seeds: Sequence[int], scales: Sequence[float] = (0.0, 0.3, 0.6),
                     gait: model.GaitSpec = model.TROT_ANALOG, n_runs: int = 50, teacher_runs: int | None = None,
                     duration: float | None = None, out_dir: str | None = None) -> SurvivalReport:
    """Survival of MPC, MPC-Net (L3) and behavioral cloning under random base-velocity impulses.

    The ``n_runs`` evaluation rollouts of each learned controller are split
    evenly over the training seeds. ``teacher_runs`` (default ``n_runs``)
    limits the rollouts of the comparatively slow MPC teacher.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    duration = config.benchmark_duration if duration is None else duration
    teacher_runs = n_runs if teacher_runs is None else teacher_runs
    policies = {"MPC-Net": [], "BC": []}
    for s in seeds:
        cfg = replace(config, seed=s)
        policies["MPC-Net"].append(trained(cfg, [gait], LossKind("l3", beta=cfg.beta)).policy)
        policies["BC"].append(trained(cfg, [gait], LossKind("bc", beta=cfg.beta)).policy)
    rows = []
    for scale in scales:
        surv = survival_runs(MpcController(), gait, config, scale, teacher_runs, duration, seed=config.seed)
        rows.append((float(scale), "MPC", len(surv), float(np.mean(surv)), float(np.std(surv))))
        for name in ("MPC-Net", "BC"):
            surv = []
            for j, pol in enumerate(policies[name]):
                k = len(range(j, n_runs, len(seeds)))
                surv += survival_runs(PolicyController(pol, config.time_features), gait, config, scale, k,
                                      duration, seed=seeds[j])
            rows.append((float(scale), name, len(surv), float(np.mean(surv)), float(np.std(surv))))
    report = SurvivalReport(rows, duration)
    top = max(scales)
    report.checks.append((f"MPC-Net mean survival >= BC mean survival at scale {top}",
                          report.mean(top, "MPC-Net") >= report.mean(top, "BC")))
    if 0.0 in [float(s) for s in scales]:
        full = all(report.mean(0.0, c) == duration and report.std(0.0, c) == 0.0 for c in ("MPC", "MPC-Net", "BC"))
        report.checks.append(("all controllers survive the full duration at scale 0", full))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "survival.csv"), report.csv())
        _write(os.path.join(out_dir, "summary.txt"), _summary(report.checks))
    return report


# -- multi-gait -----------------------------------------------------------------

@dataclass
class MultigaitRow:
    loss: str
    guided: bool
    gaits: str
    seed: int
    single_resp: bool
    violation: float
    survival: float

    def csv_row(self) -> str:
        return (f"{self.loss},{int(self.guided)},{self.gaits},{self.seed},{int(self.single_resp)},"
                f"{_fmt(self.violation)},{_fmt(self.survival)}")


@dataclass
class MultigaitReport:
    rows: list
    trace: list
    checks: list = field(default_factory=list)

    def csv(self) -> str:
        return "\n".join([MULTIGAIT_HEADER, *(r.csv_row() for r in self.rows)]) + "\n"

    def trace_csv(self, num_experts: int) -> str:
        head = TRACE_HEADER_PREFIX + "," + ",".join(f"p{i}" for i in range(num_experts))
        body = [f"{_fmt(t)},{model.Mode(m).name.lower()},{e}," + ",".join(_fmt(v) for v in p)
                for t, m, e, p in self.trace]
        return "\n".join([head, *body]) + "\n"


def switch_time(first: model.GaitSpec, second: model.GaitSpec, min_cycles: int = 2) -> float:
    """Earliest whole multiple of both cycle durations after ``min_cycles`` cycles of ``first``.

    Switching there keeps the phase of the second gait at zero, so its
    periodic schedule can be used unchanged in absolute time.
    """
    c1, c2 = first.schedule.cycle_duration, second.schedule.cycle_duration
    k = min_cycles
    while k < 1000:
        t = k * c1
        if abs(t / c2 - round(t / c2)) < 1e-9:
            return round(t, 12)
        k += 1
    raise ValueError("gait cycles have no common multiple below 1000 cycles")


def expert_trace(policy: MenPolicy, first: model.GaitSpec, second: model.GaitSpec, config: TrainConfig,
                 after_cycles: int = 2, stride: int = 4) -> list:
    """Roll the MPC teacher through a gait transition and record the policy's gating weights.

    Returns ``(time, active mode, argmax expert, p)`` every ``stride`` steps.
    """
    t_switch = switch_time(first, second)
    duration = t_switch + after_cycles * second.schedule.cycle_duration
    rng = np.random.default_rng([config.seed, 9])
    task = sample_task(rng, [first], config)
    mask = time_feature_mask(config.time_features)
    ctrl = MpcController()
    ctrl.reset(task, config)
    gait = first
    x = task.x0.copy()
    rows = []
    for i in range(int(round(duration / config.dt))):
        t = round(i * config.dt, 12)
        if gait is first and t >= t_switch:
            gait = second
            ctrl.reset(Task(second, task.reference, x.copy()), config)
        mode = gait.schedule.mode_at(t)
        if i % stride == 0:
            gt = model.generalized_time(t, gait.schedule) * mask
            p = men_forward(policy, gt, model.relative_state(x, task.reference(t))).p[0]
            rows.append((t, int(mode), int(np.argmax(p)), p.copy()))
        # the teacher plans with the active gait only, so it sees the switch as it happens
        u = ctrl(x, t, i)
        x = model.step(x, u, config.dt, mode)
        if model.failure_check(x):
            break
    return rows


def run_multigait(config: TrainConfig, seeds: Sequence[int], gaits: Sequence[model.GaitSpec] | None = None,
                  lam: float = 1.0, mode_map: Sequence[int] | None = None, n_eval_points: int = 400,
                  threshold: float = RESPONSIBILITY_THRESHOLD, final_runs: int = 10,
                  variants: Sequence[str] = ("l1", "l2", "l3"), unguided: bool = True,
                  out_dir: str | None = None) -> MultigaitReport:
    """Multi-gait training with the guided losses, compared with single-gait L3 policies."""
    seeds = list(seeds)
    gaits = list(gaits or (model.WALK, model.TROT_ANALOG))
    multi_cfg = replace(config, iterations=2 * config.iterations)
    label = "+".join(g.name for g in gaits)
    kinds = [LossKind(v, guided=True, lam=lam, beta=config.beta) for v in variants]
    if unguided:
        kinds.append(LossKind("l3", beta=config.beta))
    rows, first_policy = [], None

    def evaluate(policy, cfg):
        flags, viols, survs = [], [], []
        for g in gaits:
            flags.append(responsibility_stats(policy, g, n_eval_points, cfg, threshold))
            v, s = final_metrics(policy, g, cfg, final_runs)
            viols.append(v)
            survs.append(s)
        return all(r.single_responsibility for r in flags), viols, survs

    multi_viol, single_viol = {}, {}
    for kind in kinds:
        for s in seeds:
            cfg = replace(multi_cfg, seed=s)
            res = trained(cfg, gaits, kind, mode_map)
            first_policy = first_policy or res.policy
            ok, viols, survs = evaluate(res.policy, cfg)
            multi_viol[(kind, s)] = viols
            rows.append(MultigaitRow(kind.variant, kind.guided, label, s, ok, float(np.mean(viols)),
                                     float(np.mean(survs))))
    for s in seeds:
        for gi, g in enumerate(gaits):
            cfg = replace(config, seed=s)
            res = trained(cfg, [g], LossKind("l3", beta=config.beta))
            rep = responsibility_stats(res.policy, g, n_eval_points, cfg, threshold)
            v, surv = final_metrics(res.policy, g, cfg, final_runs)
            single_viol[(g.name, s)] = v
            rows.append(MultigaitRow("l3", False, g.name, s, rep.single_responsibility, v, surv))
    report = MultigaitReport(rows, [])
    for kind in kinds:
        if not kind.guided:
            continue
        flags = [r.single_resp for r in rows if r.loss == kind.variant and r.guided and r.gaits == label]
        report.checks.append((f"guided {kind.variant} single responsibility on >= 70% of seeds",
                              percentage(flags) >= 70.0))
        ratio_ok = all(
            np.mean([multi_viol[(kind, s)][gi] for s in seeds])
            <= 2.0 * np.mean([single_viol[(g.name, s)] for s in seeds])
            for gi, g in enumerate(gaits))
        report.checks.append((f"guided {kind.variant} multi-gait violation within 2x of single-gait", bool(ratio_ok)))
    if first_policy is not None and len(gaits) >= 2:
        report.trace = expert_trace(first_policy, gaits[0], gaits[1], config)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, "multigait.csv"), report.csv())
        if report.trace:
            _write(os.path.join(out_dir, "expert_trace.csv"), report.trace_csv(config.num_experts))
        _write(os.path.join(out_dir, "summary.txt"), _summary(report.checks))
    return report
