"""``deepfeedback`` command line: generate-data, train, bench, solve.

Every command accepts ``--config FILE`` with flat ``key = value`` lines whose
keys are the long flag names (dashes or underscores); flags given on the
command line override the file. Exit codes: 0 success, 1 runtime error,
2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import bench as benchmod
from .solver import SolverConfig, solve
from .store import (
    ConfigError,
    ObservationParseError,
    fmt,
    read_config,
    read_dataset,
    read_observation,
    read_task,
    read_weights,
    write_dataset,
    write_observation,
    write_task,
    write_weights,
)
from .tasks import generate_dataset, make_task, perfect_update
from .training import StagePlan, train_stagewise

TASKS = ("pose", "light", "ik")
log = logging.getLogger("deepfeedback")


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="deepfeedback", description="Deep feedback inverse-problem solver.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value file; flags override it")
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate-data", help="sample a dataset and write it to disk")
    common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--out")
    g.add_argument("--resolution", type=int)
    g.add_argument("--joints", type=int, help="ik chain length")
    g.add_argument("--skeleton-seed", type=int, help="ik skeleton seed")
    g.add_argument("--light-kind", choices=("directional", "point"))

    t = sub.add_parser("train", help="stage-wise training, writes stage{t}.dfnw")
    common(t)
    t.add_argument("--data")
    t.add_argument("--stages", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--out")

    b = sub.add_parser("bench", help="evaluate a solver mode on the test split")
    common(b)
    b.add_argument("--data")
    b.add_argument("--mode", choices=benchmod.MODES)
    b.add_argument("--weights")
    b.add_argument("--stages", type=int)
    b.add_argument("--lr", type=float, help="adam learning rate")
    b.add_argument("--max-iter", type=int)
    b.add_argument("--patience", type=int)
    b.add_argument("--memory", type=int, help="l-bfgs history length")
    b.add_argument("--prior-weight", type=float)
    b.add_argument("--time-budget", type=float, help="seconds per instance for adam/lbfgs")
    b.add_argument("--limit", type=int, help="only the first N test samples")
    b.add_argument("--no-timing", action="store_true", help="write timing columns as nan")
    b.add_argument("--out")

    s = sub.add_parser("solve", help="run the feedback loop on one observation")
    common(s)
    s.add_argument("--obs")
    s.add_argument("--weights")
    s.add_argument("--scene", type=int)
    s.add_argument("--stages", type=int)
    s.add_argument("--damping", action="store_true")
    s.add_argument("--oracle", help="debug: comma-separated x_gt for the perfect update")
    s.add_argument("--dump-trajectory")
    return p


DEFAULTS = {
    "generate-data": {"seed": 0, "count": 100, "resolution": 64, "joints": 8, "skeleton_seed": 0,
                      "light_kind": "directional"},
    "train": {"seed": 0, "epochs": 50, "lr": 1e-3, "batch": 32, "patience": 10},
    "bench": {"seed": 0, "lr": 0.05, "max_iter": 500, "patience": 20, "memory": 10, "prior_weight": 0.001},
    "solve": {"seed": 0, "scene": 0},
}
REQUIRED = {
    "generate-data": ("task", "out"),
    "train": ("data", "out"),
    "bench": ("data", "mode", "out"),
    "solve": ("obs", "weights"),
}


def _merge(parser, args):
    """Fill unset flags from ``--config`` then from defaults."""
    sp = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from None
        for key, raw in cfg.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
            if getattr(args, dest) not in (None, False):
                continue
            act = actions[dest]
            if act.nargs == 0:
                value = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    value = act.type(raw) if act.type else raw
                except ValueError:
                    raise UsageError(f"{args.config}: bad value {raw!r} for {key}") from None
                if act.choices and value not in act.choices:
                    raise UsageError(f"{args.config}: {key} must be one of {', '.join(act.choices)}")
            setattr(args, dest, value)
    for k, v in DEFAULTS[args.command].items():
        if getattr(args, k) is None:
            setattr(args, k, v)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing --{missing[0].replace('_', '-')}")
    return args


def _check_task(args, task):
    if args.task is not None and args.task != task.name:
        raise UsageError(f"--task {args.task} does not match the stored {task.name} task")


def cmd_generate(args):
    if args.count < 10:
        raise UsageError("--count must be at least 10")
    if args.task == "pose":
        task = make_task("pose", resolution=args.resolution)
    elif args.task == "light":
        task = make_task("light", kind=args.light_kind, resolution=args.resolution)
    else:
        task = make_task("ik", n_joints=args.joints, seed=args.skeleton_seed)
    ds = generate_dataset(task, args.count, args.seed)
    write_dataset(ds, args.out)
    sz = ds.sizes()
    print(f"train={sz['train']} val={sz['val']} test={sz['test']}")


def cmd_train(args):
    task, ds = read_dataset(args.data)
    _check_task(args, task)
    stages = args.stages or task.default_stages
    plan = StagePlan(stages, args.epochs, args.lr, args.batch, args.patience, args.seed)
    nets, tlog = train_stagewise(task, ds, plan)
    write_task(task, args.out)
    write_weights(nets, args.out)
    with open(os.path.join(args.out, "train_log.csv"), "w") as fh:
        fh.write(tlog.to_csv())
    for t in range(stages):
        print(f"stage {t}: val {benchmod.g6(tlog.best_val(t))}")


def cmd_bench(args):
    task, ds = read_dataset(args.data)
    _check_task(args, task)
    nets = None
    if args.mode in benchmod.LEARNED:
        if not args.weights:
            raise UsageError(f"--mode {args.mode} needs --weights")
        nets = read_weights(task, args.weights, args.stages)
    if args.limit is not None:
        keep = set(sorted(s.index for s in ds.split("test"))[: args.limit])
        ds.samples = [s for s in ds.samples if s.split != "test" or s.index in keep]
    cfg = benchmod.BenchConfig(args.stages, args.lr, args.max_iter, args.patience, args.memory,
                               args.prior_weight, time_budget=args.time_budget, timing=not args.no_timing)
    report, _ = benchmod.run_bench(task, ds, args.mode, nets, cfg)
    with open(args.out, "w") as fh:
        fh.write(report.to_csv(cfg.timing))
    if report.stage_means:
        stem = args.out[:-4] if args.out.endswith(".csv") else args.out
        with open(stem + ".stages.csv", "w") as fh:
            fh.write(report.stages_csv())
    print(report.to_csv(cfg.timing), end="")


def _stage_file(task, out, t):
    return os.path.join(out, f"stage{t}" + {"pose": ".pgm", "light": ".ppm", "ik": ".txt"}[task.name])


def cmd_solve(args):
    task = read_task(args.weights)
    _check_task(args, task)
    if not 0 <= args.scene < task.n_scenes:
        raise UsageError(f"--scene must lie in [0, {task.n_scenes})")
    x_gt = None
    if args.oracle is not None:
        try:
            x_gt = np.array([float(v) for v in args.oracle.split(",")])
        except ValueError:
            raise UsageError("--oracle must be comma-separated numbers") from None
        if x_gt.shape != (task.dim,):
            raise UsageError(f"--oracle needs {task.dim} values")
    y = read_observation(args.obs, task)
    model = task.model(args.scene)
    if x_gt is not None:
        stages = args.stages or task.default_stages
        fns = [perfect_update(x_gt)] * stages
    else:
        nets = read_weights(task, args.weights, args.stages)
        fns = [task.update_fn(n) for n in nets]
    cfg = SolverConfig(stages=len(fns), damping=args.damping, evaluate_final=True)
    traj = solve(y, model, task.initial_estimate(args.scene), fns, cfg)
    for t, (x, y_t) in enumerate(zip(traj.states, traj.simulations)):
        e = model.data_energy(y_t, y)
        lam = f" lambda {benchmod.g6(traj.lambdas[t - 1])}" if t and args.damping else ""
        print(f"stage {t}: E_data {benchmod.g6(e)}{lam}")
    print("x = " + " ".join(fmt(v) for v in traj.x))
    if args.dump_trajectory:
        os.makedirs(args.dump_trajectory, exist_ok=True)
        for t, y_t in enumerate(traj.simulations):
            write_observation(_stage_file(task, args.dump_trajectory, t), task, y_t)


COMMANDS = {"generate-data": cmd_generate, "train": cmd_train, "bench": cmd_bench, "solve": cmd_solve}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _merge(parser, args)
        COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"deepfeedback: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ConfigError, ObservationParseError, RuntimeError) as e:
        print(f"deepfeedback: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
