import json

import numpy as np
import pytest

from stlseeker import stl
from stlseeker.config import ExperimentConfig, ModelOptions, PolicyOptions
from stlseeker.model_learning import ModelSnapshot
from stlseeker.nets import DenseNet, FeedforwardPolicy
from stlseeker.orchestrator import (CheckpointError, CycleReport, checkpoint_load,
                                    checkpoint_save, evaluate, latest_checkpoint,
                                    run)
from stlseeker.safety import BarrierSpec
from stlseeker.world import PlantConfig, Region


def tiny_config(seed=0, max_cycles=2, policy_kind="rnn"):
    """A fast integrator experiment: reach the right half-plane, avoid a far disk."""
    regions = {
        "Goal": Region("Goal", "box", (0.6, -1.5, 3.0, 1.5)),
        "Obs": Region("Obs", "disk", (50.0, 50.0, 1.0), polarity="obstacle"),
    }
    plant = PlantConfig(kind="integrator", control_lo=(-1.0, -1.0),
                        control_hi=(1.0, 1.0), noise=(0.01, 0.01),
                        x0_lo=(-0.4, -0.4), x0_hi=(0.0, 0.0), regions=regions,
                        stop_distance=0.5)
    text = "F[0,3] Goal"
    phi = stl.parse_formula(text, {"Goal": stl.InsideBox((0.6, -1.5), (3.0, 1.5)),
                                   "Obs": stl.InsideDisk((50.0, 50.0), 1.0)})
    barrier = BarrierSpec(kind="outside_disk", center=(50.0, 50.0), radius=1.0,
                          alpha=0.7, weights=(1.0, 1.0))
    return ExperimentConfig(
        name="tiny", seed=seed, plant=plant, formula_text=text, phi=phi,
        horizon=3, barrier=barrier,
        model=ModelOptions(hidden=(12,), dropout=0.1, epochs_initial=60,
                           epochs_refit=30, batch=16, lr=3e-3,
                           episodes_initial=4, episodes_per_cycle=2,
                           sigma_inputs=10, sigma_masks=5),
        policy=PolicyOptions(kind=policy_kind, hidden=8, layers=1, lr=3e-3,
                             batch=2, temperature=10.0, max_steps=60,
                             conv_window=10, conv_tol=1e-3),
        max_cycles=max_cycles, gamma_target=2.0,  # unreachable: run all cycles
        k_eval_fast=20, k_eval_full=30)


def exact_linear_model(n=2):
    net = DenseNet(2 * n, (4,), n, dropout=0.0)
    return ModelSnapshot(net=net)


def test_run_episode_accounting(tmp_path):
    config = tiny_config(max_cycles=3)
    result = run(config, tmp_path / "run")
    assert not result.converged  # target 2.0 is unreachable by construction
    assert len(result.reports) == 3
    # N0 + (cycles-1)*N episodes; horizon 3, no unsafe region nearby
    expected = (4 + 2 * 2) * 3
    assert result.reports[-1].dataset_size == expected
    sizes = [r.dataset_size for r in result.reports]
    assert sizes == [12, 18, 24]


def test_run_writes_cycle_artifacts(tmp_path):
    out = tmp_path / "run"
    run(tiny_config(), out)
    cdir = out / "cycle_002"
    for name in ("manifest.json", "config.json", "model.json", "policy.json",
                 "rng.json", "report.json", "dataset.csv", "trace.csv"):
        assert (cdir / name).exists()
    result = json.loads((out / "result.json").read_text())
    assert len(result["cycles"]) == 2


def test_run_deterministic_given_seed(tmp_path):
    r1 = run(tiny_config(seed=3), tmp_path / "a")
    r2 = run(tiny_config(seed=3), tmp_path / "b")
    for a, b in zip(r1.reports, r2.reports):
        assert a.gamma_fast == b.gamma_fast
        assert a.model_loss == b.model_loss
        assert a.dataset_size == b.dataset_size


def test_resume_reproduces_interrupted_run(tmp_path):
    full = run(tiny_config(seed=5, max_cycles=3), tmp_path / "full")
    partial_dir = tmp_path / "partial"
    run(tiny_config(seed=5, max_cycles=2), partial_dir)
    resumed = run(tiny_config(seed=5, max_cycles=3), partial_dir, resume=True)
    assert len(resumed.reports) == 3
    for a, b in zip(full.reports, resumed.reports):
        assert a.gamma_fast == b.gamma_fast
        assert a.model_loss == b.model_loss


def test_resume_rejects_changed_config(tmp_path):
    out = tmp_path / "run"
    run(tiny_config(seed=1), out)
    with pytest.raises(CheckpointError, match="config"):
        run(tiny_config(seed=2), out, resume=True)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    config = tiny_config()
    out = tmp_path / "run"
    run(config, out)
    bundle = checkpoint_load(latest_checkpoint(out))
    raw = json.loads((out / "cycle_002" / "policy.json").read_text())
    for key, arr in bundle.policy.params.items():
        flat = [float(v) for v in arr.ravel()]
        assert flat == raw["params"][key]["data"]
    assert bundle.cycle == 2
    assert len(bundle.dataset) == bundle.report.dataset_size


def test_checkpoint_load_rejects_missing_and_corrupt(tmp_path):
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        checkpoint_load(tmp_path)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt"):
        checkpoint_load(bad)


def test_checkpoint_load_rejects_wrong_plant_kind(tmp_path):
    config = tiny_config()
    out = tmp_path / "run"
    run(config, out)
    cdir = latest_checkpoint(out)
    manifest = json.loads((cdir / "manifest.json").read_text())
    manifest["plant_kind"] = "unicycle"
    (cdir / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="plant kind"):
        checkpoint_load(cdir)


def test_checkpoint_version_gate(tmp_path):
    config = tiny_config()
    out = tmp_path / "run"
    run(config, out)
    cdir = latest_checkpoint(out)
    manifest = json.loads((cdir / "manifest.json").read_text())
    manifest["version"] = 99
    (cdir / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(cdir)


# -- evaluation ---------------------------------------------------------------

def test_evaluate_tautology_gives_gamma_one():
    config = tiny_config()
    phi = stl.parse_formula(
        "F[0,3] Everywhere",
        {"Everywhere": stl.HalfPlane((0.0, 0.0), -100.0)})
    policy = FeedforwardPolicy(2, config.plant.control_lo,
                               config.plant.control_hi, hidden=4, layers=1,
                               rng=np.random.default_rng(0))
    res = evaluate(config.plant, policy, exact_linear_model(), config.barrier,
                   phi, 3, 25, np.random.default_rng(1))
    assert res.gamma == 1.0
    assert res.collision_rate == 0.0


def test_evaluate_deterministic_under_seed():
    config = tiny_config()
    policy = FeedforwardPolicy(2, config.plant.control_lo,
                               config.plant.control_hi, hidden=4, layers=1,
                               rng=np.random.default_rng(2))
    args = (config.plant, policy, exact_linear_model(), config.barrier,
            config.phi, 3, 40)
    r1 = evaluate(*args, np.random.default_rng(7))
    r2 = evaluate(*args, np.random.default_rng(7))
    assert (r1.gamma, r1.collision_rate, r1.mean_rho) == \
        (r2.gamma, r2.collision_rate, r2.mean_rho)


def test_evaluate_threads_match_serial():
    config = tiny_config()
    policy = FeedforwardPolicy(2, config.plant.control_lo,
                               config.plant.control_hi, hidden=4, layers=1,
                               rng=np.random.default_rng(3))
    args = (config.plant, policy, exact_linear_model(), config.barrier,
            config.phi, 3, 30)
    serial = evaluate(*args, np.random.default_rng(9), threads=1)
    threaded = evaluate(*args, np.random.default_rng(9), threads=4)
    assert (serial.gamma, serial.mean_rho) == (threaded.gamma, threaded.mean_rho)


def test_gamma_uses_strict_positivity():
    # rho == 0 counts as failure: engineered by a noiseless deterministic
    # plant pinned exactly on the predicate boundary
    regions = {"Edge": Region("Edge", "box", (0.0, -1.0, 2.0, 1.0))}
    plant = PlantConfig(kind="integrator", control_lo=(0.0, 0.0),
                        control_hi=(0.0, 0.0),  # zero-width box: u = 0 always
                        noise=(0.0, 0.0), x0_lo=(0.0, 0.0), x0_hi=(0.0, 0.0),
                        regions=regions)
    phi = stl.parse_formula("G[0,2] Edge",
                            {"Edge": stl.InsideBox((0.0, -1.0), (2.0, 1.0))})
    rho = stl.robustness_classic(phi, np.zeros((3, 2)))
    assert rho == 0.0


def test_cycle_report_roundtrip():
    report = CycleReport(cycle=1, dataset_size=10, model_loss=0.5,
                         policy_steps=20, policy_stopped="converged",
                         final_smooth_rho=0.1, final_classic_rho=0.2,
                         gamma_fast=0.9, gamma_full=None, collision_rate=0.0,
                         mean_rho=0.3, wall_time=1.0)
    assert CycleReport.from_dict(json.loads(json.dumps(report.to_dict()))) == report
