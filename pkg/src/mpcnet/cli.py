"""Command-line entry point: ``mpcnet <command> [flags]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 when the
command itself fails.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench, model, solver
from .config import ConfigError, ResolvedConfig, format_config, load_config, override
from .losses import VARIANTS
from .policy import CheckpointError, MenPolicy, load_checkpoint, save_checkpoint
from .training import (METRICS_HEADER, PolicyController, make_solver, metrics_csv,
                       metrics_rollout, sample_task, train)

COMMANDS = ("train", "eval", "bench-ablation", "bench-bc", "bench-multigait", "solve", "inspect")
NEEDS_CONFIG = ("train", "bench-ablation", "bench-bc", "bench-multigait", "solve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so that :func:`main` controls the exit code."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpcnet", description="MPC-guided imitation learning of mixture-of-experts policies.",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="commands:\n"
                       "  train            train a policy; writes policy.ckpt, metrics.csv, config.cfg\n"
                       "  eval             roll a checkpoint out once; prints and writes eval.csv\n"
                       "  bench-ablation   L2 vs L3 responsibility and time-feature ablation\n"
                       "  bench-bc         survival of MPC, MPC-Net and behavioral cloning under disturbances\n"
                       "  bench-multigait  guided multi-gait training against single-gait policies\n"
                       "  solve            one MPC solve; writes trajectory.csv\n"
                       "  inspect          print a checkpoint summary\n")
    p.add_argument("command", choices=COMMANDS, metavar="command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="config file (required by train, bench-*, solve)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded reproducible training (benchmarks are always deterministic)")
    p.add_argument("--gait", help="gait name; train accepts a comma-separated list for multi-gait training")
    p.add_argument("--loss", choices=VARIANTS, help="loss variant")
    p.add_argument("--beta", type=float, help="override loss.beta")
    p.add_argument("--lambda", dest="lam", type=float, help="override loss.lambda")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--checkpoint", help="policy checkpoint (eval, inspect)")
    p.add_argument("--disturbance", type=float, default=0.0, help="impulse magnitude for eval, m/s")
    p.add_argument("--seeds", type=int, help="override bench.seeds")
    return p


def _gaits(names: str | None, cfg: ResolvedConfig) -> list[model.GaitSpec]:
    if names is None:
        return [cfg.gait.spec()]
    out = []
    for name in (n.strip() for n in names.split(",")):
        if name == cfg.gait.name:
            out.append(cfg.gait.spec())
        else:
            try:
                out.append(model.get_gait(name))
            except ValueError as exc:
                raise UsageError(str(exc)) from None
    return out


def _resolve(args) -> ResolvedConfig:
    cfg = load_config(args.config) if args.config else ResolvedConfig()
    gait = args.gait if args.gait and "," not in args.gait else None
    cfg = override(cfg, seed=args.seed, gait=gait if gait != cfg.gait.name else None, loss=args.loss,
                   beta=args.beta, lam=args.lam, iterations=args.iterations)
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError("--seeds must be at least 1")
        cfg = replace(cfg, bench=replace(cfg.bench, seeds=args.seeds))
    return cfg


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def _cmd_train(args, cfg: ResolvedConfig) -> None:
    gaits = _gaits(args.gait, cfg)
    mode_map = list(cfg.gait.mode_map)
    res = train(cfg.train, gaits, cfg.loss, deterministic=args.deterministic, mode_map=mode_map,
                progress=lambda it, J: logging.info("iteration %d loss %.6g", it, J))
    save_checkpoint(res.policy, os.path.join(args.out, "policy.ckpt"))
    _write(os.path.join(args.out, "metrics.csv"), metrics_csv(res.history))
    _write(os.path.join(args.out, "config.cfg"), format_config(cfg))
    if res.history:
        print(f"final: {res.history[-1].csv_row()}")


def _cmd_eval(args, cfg: ResolvedConfig) -> None:
    policy = load_checkpoint(args.checkpoint, cfg.train.num_experts if args.config else None)
    gaits = _gaits(args.gait, cfg)
    train_cfg = replace(cfg.train, num_experts=policy.config.num_experts)
    rng = np.random.default_rng([train_cfg.seed, 8])
    rec = metrics_rollout(PolicyController(policy, train_cfg.time_features), gaits, train_cfg,
                          args.disturbance, rng, iteration=policy.step_count)
    for name in ("iteration", "constraint_violation", "cost", "survival_time", "completed"):
        print(f"{name} = {getattr(rec, name)}")
    _write(os.path.join(args.out, "eval.csv"), METRICS_HEADER + "\n" + rec.csv_row() + "\n")


def _seeds(cfg: ResolvedConfig) -> list[int]:
    return [cfg.train.seed + i for i in range(cfg.bench.seeds)]


def _cmd_ablation(args, cfg):
    gaits = _gaits(args.gait, cfg) if args.gait else None
    rep = bench.run_ablation(cfg.train, _seeds(cfg), gaits, betas=cfg.bench.betas,
                             n_eval_points=cfg.bench.eval_points, threshold=cfg.bench.responsibility_threshold,
                             final_runs=cfg.bench.final_runs, out_dir=args.out)
    print(open(os.path.join(args.out, "summary.txt")).read(), end="")
    return rep


def _cmd_bc(args, cfg):
    gait = _gaits(args.gait, cfg)[0]
    bench.run_bc_benchmark(cfg.train, _seeds(cfg), cfg.bench.scales, gait, n_runs=cfg.bench.eval_runs,
                           teacher_runs=cfg.bench.teacher_runs, out_dir=args.out)
    print(open(os.path.join(args.out, "summary.txt")).read(), end="")


def _cmd_multigait(args, cfg):
    gaits = _gaits(args.gait, cfg) if args.gait else None
    bench.run_multigait(cfg.train, _seeds(cfg), gaits, lam=cfg.loss.lam, mode_map=list(cfg.gait.mode_map),
                        n_eval_points=cfg.bench.eval_points, threshold=cfg.bench.responsibility_threshold,
                        final_runs=cfg.bench.final_runs, out_dir=args.out)
    print(open(os.path.join(args.out, "summary.txt")).read(), end="")


def _cmd_solve(args, cfg):
    gait = _gaits(args.gait, cfg)[0]
    task = sample_task(np.random.default_rng([cfg.train.seed, 10]), [gait], cfg.train)
    sol = make_solver(cfg.train, task).solve(task.x0, 0.0)
    _write(os.path.join(args.out, "trajectory.csv"), solver.trajectory_csv(sol, model.walker_cost(task.reference)))
    print(f"cost = {sol.total_cost!r}")
    print(f"iterations = {sol.iterations}")
    print(f"converged = {sol.converged}")


def _cmd_inspect(args, cfg):
    policy: MenPolicy = load_checkpoint(args.checkpoint)
    c = policy.config
    print(f"experts = {c.num_experts}")
    print(f"input_dim = {c.input_dim}")
    print(f"output_dim = {c.output_dim}")
    print(f"expert_hidden = {','.join(map(str, c.expert_hidden))}")
    print(f"gating_hidden = {','.join(map(str, c.gating_hidden))}")
    print(f"activation = {c.activation}")
    print(f"adam_steps = {policy.step_count}")
    print(f"parameters = {policy.flat_parameters().size}")
    for name, value in policy.params.items():
        print(f"  {name} {'x'.join(map(str, value.shape))} norm={float(np.linalg.norm(value)):.6g}")


HANDLERS = {"train": _cmd_train, "eval": _cmd_eval, "bench-ablation": _cmd_ablation, "bench-bc": _cmd_bc,
            "bench-multigait": _cmd_multigait, "solve": _cmd_solve, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in NEEDS_CONFIG and not args.config:
            raise UsageError(f"{args.command} requires --config")
        if args.command in ("eval", "inspect") and not args.checkpoint:
            raise UsageError(f"{args.command} requires --checkpoint")
        cfg = _resolve(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mpcnet: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mpcnet: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command in NEEDS_CONFIG:
        print("# resolved configuration")
        print(format_config(cfg), end="")
    try:
        os.makedirs(args.out, exist_ok=True)
        HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mpcnet: error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, RuntimeError, ValueError, solver.SolverFailure) as exc:
        print(f"mpcnet: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
