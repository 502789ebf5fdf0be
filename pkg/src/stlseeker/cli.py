"""Command-line front end.

Verbs: ``train`` runs the full alternating loop from a config file, ``eval``
scores a checkpoint on fresh plant rollouts, ``rollout`` records a single
trajectory (optionally without the safety filter, for ablations), ``export``
turns a finished run directory into robustness-curve and success-rate
artifacts, and ``check-grad`` runs the gradient cross-check suite.

Exit codes: 0 success, 1 usage or config problem, 2 training hit the cycle
cap without converging, 3 internal error (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import stl
from .config import ConfigError, load_config
from .model_learning import run_episode
from .orchestrator import (CheckpointError, checkpoint_load, evaluate,
                           latest_checkpoint, run)
from .policy_opt import gradient_check_suite


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="stlseeker", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    train = sub.add_parser("train", help="run the alternating training loop")
    train.add_argument("--config", required=True)
    train.add_argument("--out", default="runs/run")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
    train.add_argument("--resume", action="store_true")
    train.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--k", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None)
    _add_cbf_flags(ev)

    ro = sub.add_parser("rollout", help="record a single trajectory")
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--seed", type=int, default=0)
    ro.add_argument("--out", default="trajectory.csv")
    ro.add_argument("--svg", default=None, help="also draw regions and path")
    _add_cbf_flags(ro)

    ex = sub.add_parser("export", help="export curves and tables from a run")
    ex.add_argument("--run-dir", required=True)
    ex.add_argument("--out", default=None)

    cg = sub.add_parser("check-grad", help="run the gradient oracle suite")
    cg.add_argument("--seed", type=int, default=0)
    cg.add_argument("--instances", type=int, default=50)
    cg.add_argument("--max-t", type=int, default=6)
    cg.add_argument("--hidden-width", type=int, default=8)

    return parser


def _add_cbf_flags(sub):
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--with-cbf", dest="cbf", action="store_true",
                       default=True)
    group.add_argument("--no-cbf", dest="cbf", action="store_false")


def cmd_train(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    config = load_config(args.config, overrides)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    result = run(config, args.out, resume=args.resume, log=log)
    final = result.reports[-1] if result.reports else None
    if final is not None:
        gamma = final.gamma_full if final.gamma_full is not None else final.gamma_fast
        print(f"finished after {final.cycle} cycles: gamma={gamma:.3f} "
              f"converged={result.converged}")
    return 0 if result.converged else 2


def cmd_eval(args):
    bundle = checkpoint_load(args.checkpoint)
    config = bundle.config
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=args.k)
    rows = []
    for seed in seeds:
        child = np.random.default_rng(int(seed))
        traj = run_episode(config.plant, bundle.policy, bundle.model,
                           config.barrier, child, config.horizon,
                           with_cbf=args.cbf)
        rho = stl.robustness_classic(config.phi, traj.states)
        collided = any(config.barrier.value(x) < 0.0 for x in traj.states)
        rows.append((int(seed), rho, collided))
    gamma = sum(1 for _, rho, _ in rows if rho > 0.0) / len(rows)
    collision_rate = sum(1 for _, _, c in rows if c) / len(rows)
    mean_rho = float(np.mean([rho for _, rho, _ in rows]))
    print(f"gamma={gamma:.4f} collision_rate={collision_rate:.4f} "
          f"mean_rho={mean_rho:.4f} (K={args.k}, cbf={args.cbf})")
    out = args.out or "evaluation.csv"
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "rho", "collided"])
        for seed, rho, collided in rows:
            writer.writerow([seed, repr(rho), int(collided)])
    return 0


def cmd_rollout(args):
    bundle = checkpoint_load(args.checkpoint)
    config = bundle.config
    rng = np.random.default_rng(args.seed)
    traj = run_episode(config.plant, bundle.policy, bundle.model,
                       config.barrier, rng, config.horizon, with_cbf=args.cbf)
    traj.to_csv(args.out)
    rho = stl.robustness_classic(config.phi, traj.states)
    print(f"wrote {args.out}: rho={rho:.4f} "
          f"filtered_steps={int(np.sum(traj.filtered))}")
    if args.svg:
        _draw_trajectory(args.svg, config, [traj])
        print(f"wrote {args.svg}")
    return 0


def cmd_export(args):
    run_dir = Path(args.run_dir)
    cycle_dirs = sorted(p for p in run_dir.glob("cycle_*") if p.is_dir()
                        and (p / "trace.csv").exists())
    if not cycle_dirs:
        print(f"no cycle artifacts under {run_dir}", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    steps, smooth, classic = [], [], []
    boundaries = []
    offset = 0
    gammas = []
    for cdir in cycle_dirs:
        with open(cdir / "trace.csv", newline="") as f:
            reader = csv.reader(f)
            next(reader)
            count = 0
            for row in reader:
                steps.append(offset + int(row[0]))
                smooth.append(float(row[1]))
                classic.append(float(row[2]))
                count += 1
        offset += count
        boundaries.append(offset)
        report_file = cdir / "report.json"
        if report_file.exists():
            report = json.loads(report_file.read_text())
            gammas.append((report["cycle"],
                           report["gamma_full"] if report["gamma_full"] is not None
                           else report["gamma_fast"],
                           report["collision_rate"]))

    curve = out_dir / "robustness_curve.csv"
    with open(curve, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "avg_smooth_rho", "avg_classic_rho"])
        for row in zip(steps, smooth, classic):
            writer.writerow([row[0], repr(row[1]), repr(row[2])])

    table = out_dir / "gamma_table.csv"
    with open(table, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cycle", "gamma", "collision_rate"])
        for cycle, gamma, coll in gammas:
            writer.writerow([cycle, repr(gamma), repr(coll)])

    _draw_curve(out_dir / "robustness_curve.svg", steps, smooth, classic,
                boundaries[:-1])
    print(f"wrote {curve}, {table}, and robustness_curve.svg")
    return 0


def cmd_check_grad(args):
    rng = np.random.default_rng(args.seed)
    results = gradient_check_suite(args.instances, rng, t_max=args.max_t,
                                   hidden_max=args.hidden_width)
    worst = {key: max(r[key] for r in results) for key in results[0]}
    for key, value in worst.items():
        print(f"{key}: max relative error {value:.3e} over {len(results)} instances")
    ok = (worst["adjoint_vs_unroll"] < 1e-6
          and worst["adjoint_vs_fd"] < 1e-4
          and worst["unroll_vs_fd"] < 1e-4)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 3


def _draw_curve(path, steps, smooth, classic, boundaries):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, smooth, label="smooth robustness", lw=1.0)
    ax.plot(steps, classic, label="classical robustness", lw=1.0, alpha=0.7)
    for b in boundaries:
        ax.axvline(b, color="gray", ls="--", lw=0.8)
    ax.axhline(0.0, color="black", lw=0.6)
    ax.set_xlabel("optimization step")
    ax.set_ylabel("average robustness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _draw_trajectory(path, config, trajectories):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.patches as patches
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    colors = {"target": "#7bc47b", "obstacle": "#d9614c", "safe_interior": "#9db8d9"}
    for region in config.plant.regions.values():
        color = colors[region.polarity]
        if region.kind == "box":
            lox, loy, hix, hiy = region.params
            ax.add_patch(patches.Rectangle((lox, loy), hix - lox, hiy - loy,
                                           alpha=0.4, color=color))
            ax.annotate(region.name, ((lox + hix) / 2, (loy + hiy) / 2),
                        ha="center", va="center", fontsize=8)
        else:
            cx, cy, r = region.params
            fill = region.polarity != "safe_interior"
            ax.add_patch(patches.Circle((cx, cy), r, alpha=0.4 if fill else 1.0,
                                        color=color, fill=fill))
            ax.annotate(region.name, (cx, cy + (0 if fill else r * 0.9)),
                        ha="center", va="center", fontsize=8)
    for traj in trajectories:
        ax.plot(traj.states[:, 0], traj.states[:, 1], "-", lw=1.0)
        ax.plot(traj.states[0, 0], traj.states[0, 1], "ko", ms=3)
    ax.set_aspect("equal")
    ax.autoscale_view()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "rollout": cmd_rollout,
        "export": cmd_export,
        "check-grad": cmd_check_grad,
    }
    try:
        return handlers[args.verb](args)
    except (ConfigError, UsageError, FileNotFoundError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
