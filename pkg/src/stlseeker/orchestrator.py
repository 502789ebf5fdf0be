"""Outer training loop: alternate model learning and policy improvement.

One *cycle* collects plant data (random controls the first time, the filtered
policy afterwards), refits the dynamics net and its covariance, improves the
policy on the learned model, and evaluates the result on the true plant with
the safety filter active.  Success is always judged with the classical
robustness: a rollout counts only when its robustness is strictly positive.

Every cycle is checkpointed to its own directory; a run can resume from the
last complete checkpoint and, because the master RNG state is part of the
checkpoint, the continuation reproduces the interrupted run bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stl
from .config import ExperimentConfig
from .model_learning import (ModelSnapshot, TransitionDataset, collect_initial,
                             collect_with_policy, estimate_sigma, run_episode,
                             train_model)
from .nets import DenseNet, FeedforwardPolicy, RecurrentPolicy, policy_from_dict
from .policy_opt import ImproveOptions, improve_policy

CHECKPOINT_VERSION = 1


class OrchestratorError(Exception):
    pass


class CheckpointError(OrchestratorError):
    pass


@dataclass
class EvalResult:
    gamma: float
    collision_rate: float
    mean_rho: float
    n_rollouts: int


@dataclass
class CycleReport:
    cycle: int
    dataset_size: int
    model_loss: float
    policy_steps: int
    policy_stopped: str
    final_smooth_rho: float
    final_classic_rho: float
    gamma_fast: float
    gamma_full: float | None
    collision_rate: float
    mean_rho: float
    wall_time: float
    error: str | None = None

    def to_dict(self):
        return dict(vars(self))

    @classmethod
    def from_dict(cls, blob):
        return cls(**blob)


@dataclass
class RunResult:
    converged: bool
    reports: list = field(default_factory=list)
    out_dir: str | None = None


def eval_threads():
    try:
        return max(1, int(os.environ.get("STLSEEKER_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(plant_cfg, policy, model, barrier, phi, horizon, n_rollouts, rng,
             with_cbf=True, threads=None):
    """Roll K episodes on the true plant and score them classically.

    gamma is the fraction with strictly positive robustness; a collision is
    any state whose barrier value goes negative.  Each rollout owns an RNG
    seeded from the master stream, so the result is identical whether the
    rollouts run serially or across threads.
    """
    seeds = rng.integers(0, 2 ** 63 - 1, size=n_rollouts)

    def one(seed):
        child = np.random.default_rng(int(seed))
        traj = run_episode(plant_cfg, policy, model, barrier, child, horizon,
                           with_cbf=with_cbf)
        rho = stl.robustness_classic(phi, traj.states)
        collided = any(barrier.value(x) < 0.0 for x in traj.states)
        return rho, collided

    threads = eval_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]

    rhos = np.array([r for r, _ in results])
    collisions = sum(1 for _, c in results if c)
    return EvalResult(gamma=float(np.mean(rhos > 0.0)),
                      collision_rate=collisions / n_rollouts,
                      mean_rho=float(np.mean(rhos)),
                      n_rollouts=n_rollouts)


def _build_policy(config, rng):
    cls = RecurrentPolicy if config.policy.kind == "rnn" else FeedforwardPolicy
    return cls(config.plant.state_dim, config.plant.control_lo,
               config.plant.control_hi, hidden=config.policy.hidden,
               layers=config.policy.layers, rng=rng)


def _improve_options(config):
    p = config.policy
    return ImproveOptions(m_samples=p.batch, k=p.temperature, lr=p.lr,
                          max_steps=p.max_steps, conv_window=p.conv_window,
                          conv_tol=p.conv_tol,
                          divergence_margin=p.divergence_margin,
                          divergence_patience=p.divergence_patience,
                          grad_clip=p.grad_clip, output_decay=p.output_decay)


def checkpoint_save(path, config, cycle, model, policy, dataset, rng, report):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "cycle": cycle,
        "plant_kind": config.plant.kind,
    }
    (path / "manifest.json").write_text(json.dumps(manifest))
    (path / "config.json").write_text(json.dumps(config.to_dict()))
    (path / "model.json").write_text(json.dumps(model.to_dict()))
    (path / "policy.json").write_text(json.dumps(policy.to_dict()))
    (path / "rng.json").write_text(json.dumps(rng.bit_generator.state))
    if report is not None:
        (path / "report.json").write_text(json.dumps(report.to_dict()))
    dataset.to_csv(path / "dataset.csv")


@dataclass
class CheckpointBundle:
    config: ExperimentConfig
    cycle: int
    model: ModelSnapshot
    policy: object
    dataset: TransitionDataset
    rng_state: dict
    report: CycleReport | None


def checkpoint_load(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"not a checkpoint directory: {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest in {path}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    try:
        config = ExperimentConfig.from_dict(
            json.loads((path / "config.json").read_text()))
        model = ModelSnapshot.from_dict(
            json.loads((path / "model.json").read_text()))
        policy = policy_from_dict(json.loads((path / "policy.json").read_text()))
        rng_state = json.loads((path / "rng.json").read_text())
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint in {path}: {e}") from e
    if manifest.get("plant_kind") != config.plant.kind:
        raise CheckpointError("manifest plant kind disagrees with the config")
    if policy.state_dim != config.plant.state_dim:
        raise CheckpointError(
            f"policy expects {policy.state_dim}-dim states but plant "
            f"{config.plant.kind!r} has {config.plant.state_dim}")
    dataset = TransitionDataset.from_csv(
        path / "dataset.csv", config.plant.state_dim, config.plant.control_dim)
    report = None
    if (path / "report.json").exists():
        report = CycleReport.from_dict(
            json.loads((path / "report.json").read_text()))
    return CheckpointBundle(config=config, cycle=manifest["cycle"], model=model,
                            policy=policy, dataset=dataset, rng_state=rng_state,
                            report=report)


def _cycle_dirs(out_dir):
    return sorted(p for p in Path(out_dir).glob("cycle_*") if p.is_dir())


def latest_checkpoint(out_dir):
    dirs = _cycle_dirs(out_dir)
    if not dirs:
        raise CheckpointError(f"no cycle checkpoints under {out_dir}")
    return dirs[-1]


def _write_trace(path, trace):
    with open(path, "w") as f:
        f.write("step,avg_smooth_rho,avg_classic_rho,grad_norm\n")
        for step, s, c, g in trace:
            f.write(f"{step},{s!r},{c!r},{g!r}\n")


def run(config, out_dir, resume=False, log=None):
    """Alternate model learning and policy improvement until gamma converges.

    Convergence requires the fast evaluation to reach ``gamma_target`` and a
    full-size evaluation to confirm it; the loop is capped at
    ``config.max_cycles`` cycles.
    """
    log = log or (lambda msg: None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plant_cfg = config.plant
    n, m = plant_cfg.state_dim, plant_cfg.control_dim
    reports = []

    if resume and _cycle_dirs(out_dir):
        bundle = checkpoint_load(latest_checkpoint(out_dir))
        # max_cycles is run control, not experiment identity: resuming with a
        # higher cap continues the same run
        ours, theirs = config.to_dict(), bundle.config.to_dict()
        ours.pop("max_cycles"), theirs.pop("max_cycles")
        if ours != theirs:
            raise CheckpointError("checkpointed config differs from the given one")
        model = bundle.model
        policy = bundle.policy
        dataset = bundle.dataset
        rng = np.random.default_rng()
        rng.bit_generator.state = bundle.rng_state
        start_cycle = bundle.cycle + 1
        for cdir in _cycle_dirs(out_dir):
            report_file = cdir / "report.json"
            if report_file.exists():
                reports.append(CycleReport.from_dict(
                    json.loads(report_file.read_text())))
        log(f"resuming after cycle {bundle.cycle}")
    else:
        rng = np.random.default_rng(config.seed)
        net = DenseNet(n + m, config.model.hidden, n,
                       dropout=config.model.dropout, rng=rng)
        wrap = (2,) if plant_cfg.kind == "unicycle" else ()
        model = ModelSnapshot(net=net, wrap_dims=wrap)
        policy = _build_policy(config, rng)
        dataset = TransitionDataset(n, m)
        start_cycle = 1
        (out_dir / "run.json").write_text(json.dumps(
            {"config": config.to_dict(), "version": CHECKPOINT_VERSION}))

    opts = _improve_options(config)
    converged = False

    for cycle in range(start_cycle, config.max_cycles + 1):
        t0 = time.perf_counter()
        report = None
        # A policy stuck near gamma = 0 keeps collecting the same useless
        # data; redrawing its weights gives the (steadily improving) model a
        # fresh basin to optimize from.
        if config.restart_patience and len(reports) >= config.restart_patience:
            recent = reports[-config.restart_patience:]
            if all(r.gamma_fast < config.restart_floor for r in recent):
                policy = _build_policy(config, rng)
                log(f"cycle {cycle}: policy restarted after "
                    f"{config.restart_patience} stagnant cycles")
        try:
            if len(dataset) == 0:
                collect_initial(plant_cfg, config.model.episodes_initial,
                                config.horizon, rng, dataset)
                epochs = config.model.epochs_initial
            else:
                collect_with_policy(plant_cfg, policy, model, config.barrier,
                                    config.model.episodes_per_cycle,
                                    config.horizon, rng, cycle, dataset)
                epochs = config.model.epochs_refit
            log(f"cycle {cycle}: dataset has {len(dataset)} transitions")

            inputs = model.training_inputs(dataset)
            history = train_model(dataset, model.net, epochs,
                                  config.model.batch, config.model.lr, rng,
                                  inputs=inputs)
            model.loss_history.extend(history)
            if model.net.dropout > 0.0:
                model.sigma = estimate_sigma(model.net, inputs.min(axis=0),
                                             inputs.max(axis=0),
                                             config.model.sigma_inputs,
                                             config.model.sigma_masks, rng)
            else:
                model.sigma = np.zeros((n, n))
            log(f"cycle {cycle}: model loss {history[-1]:.5f}")

            improve = improve_policy(model, config.phi, policy,
                                     plant_cfg.sample_initial, rng, opts)
            log(f"cycle {cycle}: policy {improve.stopped} after "
                f"{improve.steps} steps")

            fast = evaluate(plant_cfg, policy, model, config.barrier,
                            config.phi, config.horizon, config.k_eval_fast, rng)
            gamma_full = None
            collision_rate, mean_rho = fast.collision_rate, fast.mean_rho
            if fast.gamma >= config.gamma_target:
                full = evaluate(plant_cfg, policy, model, config.barrier,
                                config.phi, config.horizon,
                                config.k_eval_full, rng)
                gamma_full = full.gamma
                collision_rate, mean_rho = full.collision_rate, full.mean_rho
                converged = full.gamma >= config.gamma_target
            log(f"cycle {cycle}: gamma_fast={fast.gamma:.3f}"
                + (f" gamma_full={gamma_full:.3f}" if gamma_full is not None else ""))

            last = improve.trace[-1] if improve.trace else (0, np.nan, np.nan, 0.0)
            report = CycleReport(
                cycle=cycle, dataset_size=len(dataset),
                model_loss=history[-1], policy_steps=improve.steps,
                policy_stopped=improve.stopped, final_smooth_rho=last[1],
                final_classic_rho=last[2], gamma_fast=fast.gamma,
                gamma_full=gamma_full, collision_rate=collision_rate,
                mean_rho=mean_rho, wall_time=time.perf_counter() - t0)
            reports.append(report)
            cdir = out_dir / f"cycle_{cycle:03d}"
            checkpoint_save(cdir, config, cycle, model, policy, dataset, rng,
                            report)
            _write_trace(cdir / "trace.csv", improve.trace)
        except Exception as e:
            partial = CycleReport(
                cycle=cycle, dataset_size=len(dataset), model_loss=np.nan,
                policy_steps=0, policy_stopped="error", final_smooth_rho=np.nan,
                final_classic_rho=np.nan, gamma_fast=np.nan, gamma_full=None,
                collision_rate=np.nan, mean_rho=np.nan,
                wall_time=time.perf_counter() - t0, error=repr(e))
            fail_dir = out_dir / f"cycle_{cycle:03d}_failed"
            fail_dir.mkdir(parents=True, exist_ok=True)
            (fail_dir / "report.json").write_text(json.dumps(partial.to_dict()))
            raise

        if converged:
            break

    result = RunResult(converged=converged, reports=reports,
                       out_dir=str(out_dir))
    (out_dir / "result.json").write_text(json.dumps({
        "converged": converged,
        "cycles": [r.to_dict() for r in reports],
    }))
    return result
