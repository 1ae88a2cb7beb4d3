"""Mixture-of-experts policy with hand-written backpropagation and Adam.

A gating MLP with softmax output weights E independent expert MLPs; the
policy output is the weighted blend of the expert outputs. Expert parameters
are stored stacked along a leading expert axis so that all experts are
evaluated in one batched contraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model

CHECKPOINT_HEADER = "menpolicy-v1"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0.0).astype(float)),
}

# Inputs are the generalized time (6) followed by the relative state (6).
# The relative state is a few centimetres in normal operation, so it is
# magnified before entering the networks.
DEFAULT_INPUT_SCALE = (1.0,) * 6 + (10.0,) * 6
# Outputs are mapped as ``offset + scale * y`` so that unit-size network outputs
# cover the contact forces (tens of newtons) and foot velocities (m/s).
_HALF_WEIGHT = 0.5 * model.MASS * model.GRAVITY
DEFAULT_OUTPUT_SCALE = (50.0, 50.0, 50.0, 50.0, 1.0, 1.0)
DEFAULT_OUTPUT_OFFSET = (0.0, _HALF_WEIGHT, 0.0, _HALF_WEIGHT, 0.0, 0.0)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MenConfig:
    num_experts: int = 4
    input_dim: int = 12
    output_dim: int = 6
    expert_hidden: tuple[int, ...] = (32, 32)
    gating_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    seed: int = 0
    input_scale: tuple[float, ...] = DEFAULT_INPUT_SCALE
    output_scale: tuple[float, ...] = DEFAULT_OUTPUT_SCALE
    output_offset: tuple[float, ...] = DEFAULT_OUTPUT_OFFSET

    def __post_init__(self):
        for name in ("expert_hidden", "gating_hidden", "input_scale", "output_scale", "output_offset"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.num_experts < 1:
            raise ValueError("num_experts must be at least 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input and output dimensions must be positive")
        if any(h < 1 for h in self.expert_hidden + self.gating_hidden):
            raise ValueError("hidden layer sizes must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")
        if len(self.input_scale) != self.input_dim:
            raise ValueError(f"input_scale needs {self.input_dim} entries, got {len(self.input_scale)}")
        for name in ("output_scale", "output_offset"):
            if len(getattr(self, name)) != self.output_dim:
                raise ValueError(f"{name} needs {self.output_dim} entries, got {len(getattr(self, name))}")


@dataclass
class ForwardTrace:
    """Forward pass over a batch; single-sample calls keep a batch axis of one."""

    input: np.ndarray            # (B, in)
    p: np.ndarray                # (B, E)
    expert_outputs: np.ndarray   # (B, E, out)
    blended: np.ndarray          # (B, out)
    version: int
    gating_acts: list = field(default_factory=list, repr=False)
    expert_acts: list = field(default_factory=list, repr=False)

    @property
    def batch_size(self) -> int:
        return self.p.shape[0]


def _layer_sizes(cfg: MenConfig):
    expert = [cfg.input_dim, *cfg.expert_hidden, cfg.output_dim]
    gating = [cfg.input_dim, *cfg.gating_hidden, cfg.num_experts]
    return expert, gating


def parameter_shapes(cfg: MenConfig) -> dict[str, tuple[int, ...]]:
    expert, gating = _layer_sizes(cfg)
    E = cfg.num_experts
    shapes = {}
    for i, (a, b) in enumerate(zip(gating[:-1], gating[1:])):
        shapes[f"gating.{i}.W"] = (a, b)
        shapes[f"gating.{i}.b"] = (b,)
    for i, (a, b) in enumerate(zip(expert[:-1], expert[1:])):
        shapes[f"experts.{i}.W"] = (E, a, b)
        shapes[f"experts.{i}.b"] = (E, b)
    return shapes


class MenPolicy:
    """Gating network plus E expert networks, gradient buffers and Adam state."""

    def __init__(self, config: MenConfig | None = None, params: dict[str, np.ndarray] | None = None):
        self.config = config or MenConfig()
        shapes = parameter_shapes(self.config)
        if params is None:
            params = self._initial_params(shapes)
        else:
            for name, shape in shapes.items():
                if name not in params:
                    raise ValueError(f"missing parameter {name}")
                if tuple(params[name].shape) != shape:
                    raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: np.array(params[name], dtype=float) for name in shapes}
        self.grads = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.adam_m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.adam_v = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.step_count = 0
        self.version = 0
        self._in_scale = np.asarray(self.config.input_scale, float)
        self._out_scale = np.asarray(self.config.output_scale, float)
        self._out_offset = np.asarray(self.config.output_offset, float)

    def _initial_params(self, shapes):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        n_gate = len(cfg.gating_hidden) + 1
        n_exp = len(cfg.expert_hidden) + 1
        params = {}
        for name, shape in shapes.items():
            _, idx, kind = name.split(".")
            if kind == "b":
                params[name] = np.zeros(shape)
                continue
            fan_in = shape[-2]
            limit = math.sqrt(6.0 / fan_in)
            if name.startswith("gating") and int(idx) == n_gate - 1:
                limit *= 0.01  # near-uniform initial gating
            elif name.startswith("experts") and int(idx) == n_exp - 1:
                limit *= 0.1
            params[name] = rng.uniform(-limit, limit, size=shape)
        return params

    @property
    def num_experts(self) -> int:
        return self.config.num_experts

    def parameter_names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_parameters(self, flat) -> None:
        flat = np.asarray(flat, float)
        if flat.shape != (self.num_parameters(),):
            raise ValueError(f"expected {self.num_parameters()} parameters, got {flat.shape}")
        i = 0
        for name, v in self.params.items():
            v[...] = flat[i:i + v.size].reshape(v.shape)
            i += v.size
        self.version += 1

    def flat_gradients(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def snapshot(self) -> "MenPolicy":
        """Independent copy of the parameters (no optimizer state), for worker threads."""
        return MenPolicy(self.config, {k: v.copy() for k, v in self.params.items()})

    def copy(self) -> "MenPolicy":
        out = self.snapshot()
        for name in self.params:
            out.grads[name][...] = self.grads[name]
            out.adam_m[name][...] = self.adam_m[name]
            out.adam_v[name][...] = self.adam_v[name]
        out.step_count = self.step_count
        return out

    def __call__(self, gt, xr) -> np.ndarray:
        trace = men_forward(self, gt, xr)
        return trace.blended[0] if np.ndim(gt) == 1 else trace.blended


# -- forward / backward -----------------------------------------------------------

def men_forward(policy: MenPolicy, gt, xr) -> ForwardTrace:
    """Evaluate gating weights, expert outputs and their blend.

    ``gt`` and ``xr`` are single vectors or ``(B, 6)`` batches.
    """
    cfg = policy.config
    gt = np.atleast_2d(np.asarray(gt, dtype=float))
    xr = np.atleast_2d(np.asarray(xr, dtype=float))
    X = np.concatenate([gt, xr], axis=1)
    if X.shape[1] != cfg.input_dim or gt.shape[0] != xr.shape[0]:
        raise ValueError(f"input dimension {gt.shape[1]} + {xr.shape[1]} does not match {cfg.input_dim}")
    return _forward(policy, X)


def _forward(policy: MenPolicy, X: np.ndarray) -> ForwardTrace:
    act, _ = _ACTIVATIONS[policy.config.activation]
    P = policy.params
    Z = X * policy._in_scale
    n_gate = len(policy.config.gating_hidden) + 1
    n_exp = len(policy.config.expert_hidden) + 1

    gating_acts = [Z]
    h = Z
    for i in range(n_gate):
        z = h @ P[f"gating.{i}.W"] + P[f"gating.{i}.b"]
        h = act(z) if i < n_gate - 1 else z
        gating_acts.append(h)
    logits = h - h.max(axis=1, keepdims=True)
    w = np.exp(logits)
    p = w / w.sum(axis=1, keepdims=True)

    E = policy.config.num_experts
    h = np.broadcast_to(Z, (E,) + Z.shape)
    expert_acts = [h]
    for i in range(n_exp):
        z = np.matmul(h, P[f"experts.{i}.W"]) + P[f"experts.{i}.b"][:, None, :]
        h = act(z) if i < n_exp - 1 else z
        expert_acts.append(h)
    pi = policy._out_offset + policy._out_scale * np.transpose(h, (1, 0, 2))  # (B, E, out)
    blended = np.einsum("be,beo->bo", p, pi)
    return ForwardTrace(X, p, pi, blended, policy.version, gating_acts, expert_acts)


def backprop_output_jacobians(policy: MenPolicy, trace: ForwardTrace, a, b) -> None:
    """Accumulate ``sum_i a_i . d(pi_i)/d(theta) + b_i d(p_i)/d(theta)`` into the gradient buffers.

    ``a`` has shape ``(B, E, out)`` (or ``(E, out)``) and ``b`` shape ``(B, E)`` (or ``(E,)``);
    contributions of all batch entries are summed.
    """
    if trace.version != policy.version:
        raise ValueError("stale forward trace: parameters changed since the forward pass")
    B, E = trace.p.shape
    a = np.asarray(a, float).reshape(B, E, -1)
    b = np.asarray(b, float).reshape(B, E)
    _, dact = _ACTIVATIONS[policy.config.activation]
    P, G = policy.params, policy.grads

    # experts
    n_exp = len(trace.expert_acts) - 1
    delta = np.transpose(a * policy._out_scale, (1, 0, 2))  # (E, B, out)
    for i in range(n_exp - 1, -1, -1):
        h_in = trace.expert_acts[i]
        G[f"experts.{i}.W"] += np.matmul(np.transpose(h_in, (0, 2, 1)), delta)
        G[f"experts.{i}.b"] += delta.sum(axis=1)
        if i:
            delta = np.matmul(delta, np.transpose(P[f"experts.{i}.W"], (0, 2, 1))) * dact(trace.expert_acts[i])

    # gating: softmax Jacobian applied to b
    p = trace.p
    delta = p * (b - np.sum(p * b, axis=1, keepdims=True))
    n_gate = len(trace.gating_acts) - 1
    for i in range(n_gate - 1, -1, -1):
        h_in = trace.gating_acts[i]
        G[f"gating.{i}.W"] += h_in.T @ delta
        G[f"gating.{i}.b"] += delta.sum(axis=0)
        if i:
            delta = (delta @ P[f"gating.{i}.W"].T) * dact(trace.gating_acts[i])


def adam_step(policy: MenPolicy, learning_rate: float) -> None:
    """One Adam update from the gradient buffers, which are then cleared."""
    policy.step_count += 1
    t = policy.step_count
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, theta in policy.params.items():
        g = policy.grads[name]
        m = policy.adam_m[name]
        v = policy.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        theta -= learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        g[...] = 0.0
    policy.version += 1


# -- checkpoints -----------------------------------------------------------------

_CONFIG_FIELDS = ("num_experts", "input_dim", "output_dim", "expert_hidden", "gating_hidden",
                  "activation", "seed", "input_scale", "output_scale", "output_offset")


def _fmt_seq(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def save_checkpoint(policy: MenPolicy, path) -> None:
    """Write parameters as versioned plain text with round-trip exact decimals."""
    cfg = policy.config
    lines = [CHECKPOINT_HEADER, "[config]"]
    for name in _CONFIG_FIELDS:
        val = getattr(cfg, name)
        lines.append(f"{name} = {_fmt_seq(val) if isinstance(val, tuple) else val}")
    lines.append("[tensors]")
    for name, v in policy.params.items():
        lines.append(f"tensor {name} {'x'.join(str(s) for s in v.shape)}")
        lines.append(" ".join(repr(float(x)) for x in v.ravel()))
    lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_config(entries: dict[str, tuple[int, str]]) -> MenConfig:
    kwargs = {}
    ints = ("num_experts", "input_dim", "output_dim", "seed")
    int_seqs = ("expert_hidden", "gating_hidden")
    float_seqs = ("input_scale", "output_scale", "output_offset")
    for name in _CONFIG_FIELDS:
        if name not in entries:
            raise CheckpointError(f"config block is missing field {name!r}")
        lineno, raw = entries[name]
        try:
            if name in ints:
                kwargs[name] = int(raw)
            elif name in int_seqs:
                kwargs[name] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif name in float_seqs:
                kwargs[name] = tuple(float(v) for v in raw.split(",") if v.strip())
            else:
                kwargs[name] = raw
        except ValueError:
            raise CheckpointError(f"line {lineno}: field {name!r} has invalid value {raw!r}") from None
    try:
        return MenConfig(**kwargs)
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None


def load_checkpoint(path, expected_experts: int | None = None) -> MenPolicy:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` naming the offending line or field; nothing
    is returned for malformed or truncated files.
    """
    with open(path) as f:
        lines = f.read().split("\n")
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        found = lines[0].strip() if lines else ""
        raise CheckpointError(f"line 1: expected header {CHECKPOINT_HEADER!r}, found {found!r}")
    if len(lines) < 2 or lines[1].strip() != "[config]":
        raise CheckpointError("line 2: expected '[config]'")
    entries = {}
    i = 2
    while i < len(lines) and lines[i].strip() != "[tensors]":
        line = lines[i].strip()
        if line:
            if "=" not in line:
                raise CheckpointError(f"line {i + 1}: expected 'field = value', found {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise CheckpointError(f"line {i + 1}: unknown config field {key!r}")
            entries[key] = (i + 1, val)
        i += 1
    if i >= len(lines):
        raise CheckpointError("truncated file: missing '[tensors]' section")
    cfg = _parse_config(entries)
    if expected_experts is not None and cfg.num_experts != expected_experts:
        raise CheckpointError(f"expected {expected_experts} experts, found {cfg.num_experts}")
    shapes = parameter_shapes(cfg)
    params = {}
    i += 1
    while True:
        if i >= len(lines):
            raise CheckpointError("truncated file: missing 'end' marker")
        line = lines[i].strip()
        if line == "end":
            break
        parts = line.split()
        if len(parts) != 3 or parts[0] != "tensor":
            raise CheckpointError(f"line {i + 1}: expected 'tensor <name> <shape>', found {line!r}")
        name = parts[1]
        if name not in shapes:
            raise CheckpointError(f"line {i + 1}: unexpected tensor {name!r}")
        try:
            shape = tuple(int(s) for s in parts[2].split("x"))
        except ValueError:
            raise CheckpointError(f"line {i + 1}: bad shape {parts[2]!r} for tensor {name!r}") from None
        if shape != shapes[name]:
            if name.startswith("experts") and shape[0] != cfg.num_experts:
                raise CheckpointError(
                    f"line {i + 1}: tensor {name!r} holds {shape[0]} experts, expected {cfg.num_experts}")
            if name == f"gating.{len(cfg.gating_hidden)}.W" and shape[-1] != cfg.num_experts:
                raise CheckpointError(
                    f"line {i + 1}: gating output has {shape[-1]} experts, expected {cfg.num_experts}")
            raise CheckpointError(f"line {i + 1}: tensor {name!r} has shape {shape}, expected {shapes[name]}")
        if i + 1 >= len(lines):
            raise CheckpointError(f"truncated file: values of tensor {name!r} missing")
        try:
            values = np.array([float(v) for v in lines[i + 1].split()])
        except ValueError:
            raise CheckpointError(f"line {i + 2}: non-numeric value in tensor {name!r}") from None
        if values.size != math.prod(shape):
            raise CheckpointError(
                f"line {i + 2}: tensor {name!r} has {values.size} values, expected {math.prod(shape)}")
        params[name] = values.reshape(shape)
        i += 2
    missing = [n for n in shapes if n not in params]
    if missing:
        raise CheckpointError(f"missing tensors: {missing}")
    return MenPolicy(cfg, params)


def with_experts(config: MenConfig, num_experts: int) -> MenConfig:
    return replace(config, num_experts=num_experts)
