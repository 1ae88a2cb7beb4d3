"""Plain-text configuration: ``section.key = value`` lines with strict key checking.

Every key has a default, so an empty file is a valid configuration. The
resolved configuration prints back in the same grammar and parses to the same
values.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import model
from .losses import LossKind
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class BenchConfig:
    seeds: int = 10
    eval_runs: int = 50
    teacher_runs: int = 50
    scales: tuple[float, ...] = (0.0, 0.3, 0.6)
    betas: tuple[float, ...] = (0.5, 1.0, 2.0)
    responsibility_threshold: float = 0.8
    eval_points: int = 400
    final_runs: int = 10

    def __post_init__(self):
        for name in ("seeds", "eval_runs", "teacher_runs", "eval_points", "final_runs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 < self.responsibility_threshold <= 1:
            raise ValueError("responsibility_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class GaitConfig:
    name: str = "trot-analog"
    events: tuple[float, ...] = ()
    modes: tuple[str, ...] = ()
    cycle: float = 0.0
    mode_map: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.events and not self.modes and not self.cycle:
            # a bare name resolves to the built-in gait, written out in full
            sched = model.get_gait(self.name).schedule
            object.__setattr__(self, "events", tuple(sched.event_times))
            object.__setattr__(self, "modes", tuple(m.name.lower() for m in sched.modes))
            object.__setattr__(self, "cycle", float(sched.cycle_duration))
        if len(self.mode_map) != model.NUM_MODES:
            raise ValueError(f"gait.mode_map needs {model.NUM_MODES} entries, got {len(self.mode_map)}")

    def spec(self) -> model.GaitSpec:
        return model.gait_from_config({"name": self.name, "events": _fmt(self.events),
                                       "modes": ",".join(self.modes), "cycle": repr(float(self.cycle))})


@dataclass(frozen=True)
class ResolvedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossKind = field(default_factory=LossKind)
    gait: GaitConfig = field(default_factory=GaitConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


# (section, key) -> (object, attribute, parser)
_TRAIN_KEYS = {
    "dt": ("dt", float), "duration": ("duration", float), "threads": ("n_threads", int),
    "jobs": ("n_jobs", int), "samples": ("n_samples", int), "data_decimation": ("data_decimation", int),
    "metrics_decimation": ("metrics_decimation", int), "experts": ("num_experts", int),
    "batch_size": ("batch_size", int), "learning_rate": ("learning_rate", float),
    "iterations": ("iterations", int), "buffer_capacity": ("buffer_capacity", int),
    "sigma_sample": ("sigma_sample", float), "sigma_pos": ("sigma_pos", float),
    "sigma_vel": ("sigma_vel", float), "max_command": ("max_command", float), "seed": ("seed", int),
    "data_runs": ("data_runs", int), "time_features": ("time_features", str),
    "benchmark_duration": ("benchmark_duration", float), "disturbance_rate": ("disturbance_rate", float),
    "startup_timeout": ("startup_timeout", float),
}
_MPC_KEYS = {
    "horizon": ("horizon", float), "dt": ("ocp_dt", float),
    "barrier_mu": ("barrier_mu", float), "barrier_delta": ("barrier_delta", float),
}
_POLICY_KEYS = {
    "expert_hidden": ("expert_hidden", _ints), "gating_hidden": ("gating_hidden", _ints),
    "activation": ("activation", str),
}
_LOSS_KEYS = {
    "variant": ("variant", str), "guided": ("guided", _bool), "beta": ("beta", float), "lambda": ("lam", float),
}
_GAIT_KEYS = {
    "name": ("name", str), "events": ("events", _floats),
    "modes": ("modes", lambda raw: tuple(v.strip() for v in raw.split(",") if v.strip())),
    "cycle": ("cycle", float), "mode_map": ("mode_map", _ints),
}
_BENCH_KEYS = {
    "seeds": ("seeds", int), "eval_runs": ("eval_runs", int), "teacher_runs": ("teacher_runs", int),
    "scales": ("scales", _floats), "betas": ("betas", _floats),
    "responsibility_threshold": ("responsibility_threshold", float), "eval_points": ("eval_points", int),
    "final_runs": ("final_runs", int),
}
SECTIONS = {"train": _TRAIN_KEYS, "mpc": _MPC_KEYS, "policy": _POLICY_KEYS, "loss": _LOSS_KEYS,
            "gait": _GAIT_KEYS, "bench": _BENCH_KEYS}


def parse_config(text: str, source: str = "<config>") -> ResolvedConfig:
    """Parse config text; unknown keys, bad values and duplicates raise :class:`ConfigError`."""
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', found {line!r}")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"{source}:{lineno}: key {lhs!r} must have the form section.key")
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{lineno}: unknown section {section!r} in key {lhs!r}")
        if key not in SECTIONS[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {lhs!r}")
        if lhs in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {lhs!r} (first set on line {seen[lhs]})")
        seen[lhs] = lineno
        attr, parser = SECTIONS[section][key]
        try:
            values[section][attr] = parser(rhs)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: key {lhs!r} has invalid value {rhs!r}") from None
    try:
        loss = LossKind(**values["loss"])
        # the loss section is the single source of beta and lambda
        train = TrainConfig(**values["train"], **values["mpc"], **values["policy"], beta=loss.beta, lam=loss.lam)
        gait = GaitConfig(**values["gait"])
        gait.spec()
        bench = BenchConfig(**values["bench"])
        if max(gait.mode_map) >= train.num_experts or min(gait.mode_map) < 0:
            raise ValueError(f"gait.mode_map {gait.mode_map} refers to experts outside 0..{train.num_experts - 1}")
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return ResolvedConfig(train, loss, gait, bench)


def load_config(path) -> ResolvedConfig:
    with open(path) as f:
        return parse_config(f.read(), str(path))


def format_config(cfg: ResolvedConfig) -> str:
    """Every key with its resolved value, in the grammar accepted by :func:`parse_config`."""
    objects = {"train": cfg.train, "mpc": cfg.train, "policy": cfg.train, "loss": cfg.loss,
               "gait": cfg.gait, "bench": cfg.bench}
    lines = []
    for section, keys in SECTIONS.items():
        for key, (attr, _) in keys.items():
            value = getattr(objects[section], attr)
            if section == "gait" and key == "modes":
                value = ",".join(value)
            lines.append(f"{section}.{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def override(cfg: ResolvedConfig, seed=None, gait=None, loss=None, beta=None, lam=None,
             iterations=None) -> ResolvedConfig:
    """Apply command-line overrides."""
    train, lk, gc = cfg.train, cfg.loss, cfg.gait
    try:
        if seed is not None:
            train = replace(train, seed=seed)
        if iterations is not None:
            train = replace(train, iterations=iterations)
        if gait is not None:
            gc = GaitConfig(name=gait, mode_map=gc.mode_map)
            gc.spec()
        if loss is not None or beta is not None or lam is not None:
            lk = replace(lk, variant=loss if loss is not None else lk.variant,
                         beta=beta if beta is not None else lk.beta,
                         lam=lam if lam is not None else lk.lam)
            train = replace(train, beta=lk.beta, lam=lk.lam)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return replace(cfg, train=train, loss=lk, gait=gc)


def config_fields() -> list[str]:
    return [f"{s}.{k}" for s, keys in SECTIONS.items() for k in keys]


__all__ = ["BenchConfig", "ConfigError", "GaitConfig", "ResolvedConfig", "config_fields", "format_config",
           "load_config", "override", "parse_config"]
