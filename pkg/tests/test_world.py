import math

import numpy as np
import pytest

from stlseeker.world import (ControlOutsideBoxError, IntegratorPlant, PlantConfig,
                             Region, Trajectory, UnicyclePlant, WorldError,
                             distance_to_unsafe, observe, sample_initial)


# -- unicycle ----------------------------------------------------------------

def test_unicycle_arc_step_exact():
    plant = UnicyclePlant()
    x = plant.step(np.array([0.0, 0.0, 0.0]), np.array([0.75, math.pi / 2]))
    r = 0.75 / (math.pi / 2)
    assert x[0] == pytest.approx(r * (math.sin(math.pi / 2) - 0.0))
    assert x[1] == pytest.approx(r * (1.0 - math.cos(math.pi / 2)))
    assert x[0] == pytest.approx(0.47746, abs=1e-5)
    assert x[1] == pytest.approx(0.47746, abs=1e-5)
    assert x[2] == pytest.approx(math.pi / 2)


def test_unicycle_zero_omega_limit():
    plant = UnicyclePlant()
    theta = 0.7
    x = plant.step(np.array([1.0, 2.0, theta]), np.array([0.5, 0.0]))
    np.testing.assert_allclose(
        x, [1.0 + 0.5 * math.cos(theta), 2.0 + 0.5 * math.sin(theta), theta])


def test_unicycle_zero_speed_only_turns():
    plant = UnicyclePlant()
    x = plant.step(np.array([1.0, 2.0, 0.3]), np.array([0.0, 0.5]))
    np.testing.assert_allclose(x, [1.0, 2.0, 0.8])


def test_unicycle_continuous_at_omega_zero():
    plant = UnicyclePlant()
    x0 = np.array([0.0, 0.0, 0.4])
    limit = plant.step(x0, np.array([0.6, 0.0]))
    for omega in (1e-7, -1e-7):
        arc = plant.step(x0, np.array([0.6, omega]))
        assert np.max(np.abs(arc[:2] - limit[:2])) < 1e-8


def test_unicycle_step_displacement_bounded_by_speed():
    plant = UnicyclePlant()
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.normal(size=3)
        u = rng.uniform(plant.control_lo, plant.control_hi)
        nxt = plant.step(x, u)
        assert math.hypot(nxt[0] - x[0], nxt[1] - x[1]) <= u[0] + 1e-12


def test_unicycle_rejects_control_outside_box():
    with pytest.raises(ControlOutsideBoxError):
        UnicyclePlant().step(np.zeros(3), np.array([1.0, 0.0]))


# -- integrator ----------------------------------------------------------------

def test_integrator_addition_and_fixed_point():
    plant = IntegratorPlant()
    np.testing.assert_array_equal(
        plant.step(np.array([0.0, 0.0]), np.array([1.0, -1.0])), [1.0, -1.0])
    np.testing.assert_array_equal(
        plant.step(np.array([3.0, 4.0]), np.zeros(2)), [3.0, 4.0])


def test_integrator_telescoping():
    plant = IntegratorPlant()
    rng = np.random.default_rng(1)
    x = np.array([0.5, -0.5])
    us = rng.uniform(-2.0, 2.0, size=(10, 2))
    xt = x.copy()
    for u in us:
        xt = plant.step(xt, u)
    np.testing.assert_allclose(xt, x + us.sum(axis=0))


def test_integrator_step_bounded():
    plant = IntegratorPlant()
    rng = np.random.default_rng(2)
    for _ in range(100):
        u = rng.uniform(-2.0, 2.0, size=2)
        nxt = plant.step(np.zeros(2), u)
        assert np.linalg.norm(nxt) <= 2.0 * math.sqrt(2.0) + 1e-12


# -- observation and initial states ---------------------------------------------

def test_observe_zero_width_identity():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(
        observe(x, np.zeros(3), np.random.default_rng(0)), x)


def test_observe_mean_concentrates():
    rng = np.random.default_rng(3)
    x = np.array([1.0, -2.0])
    draws = np.array([observe(x, (0.1, 0.1), rng) for _ in range(10_000)])
    assert np.max(np.abs(draws.mean(axis=0) - x)) < 0.005
    assert np.all(np.abs(draws - x) <= 0.1)


def test_observe_seeded_repeat():
    x = np.zeros(2)
    a = observe(x, (0.1, 0.1), np.random.default_rng(4))
    b = observe(x, (0.1, 0.1), np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_sample_initial_degenerate_box():
    x = sample_initial((1.0, 2.0), (1.0, 2.0), np.random.default_rng(5))
    np.testing.assert_array_equal(x, [1.0, 2.0])


def test_sample_initial_uniform_mean_and_support():
    rng = np.random.default_rng(6)
    draws = np.array([sample_initial((0.5, 0.5), (2.0, 2.0), rng)
                      for _ in range(10_000)])
    assert np.max(np.abs(draws.mean(axis=0) - 1.25)) < 0.02
    assert np.all(draws >= 0.5) and np.all(draws <= 2.0)


def test_sample_initial_heading_range():
    rng = np.random.default_rng(7)
    draws = np.array([sample_initial((0.0, 0.0), (1.0, 1.0), rng, heading=True)
                      for _ in range(1000)])
    assert draws.shape[1] == 3
    assert np.all(np.abs(draws[:, 2]) <= math.pi)


# -- regions and distances ---------------------------------------------------

def test_distance_to_unsafe_disk_obstacle():
    obs = Region("Obs", "disk", (3.0, 3.0, 1.0), polarity="obstacle")
    assert distance_to_unsafe(np.array([3.0, 3.0]), [obs]) == pytest.approx(-1.0)
    assert distance_to_unsafe(np.array([4.0, 3.0]), [obs]) == pytest.approx(0.0)
    assert distance_to_unsafe(np.array([5.0, 3.0]), [obs]) == pytest.approx(1.0)


def test_distance_to_unsafe_safe_disk():
    safe = Region("Safe", "disk", (0.0, 0.0, 5.0), polarity="safe_interior")
    assert distance_to_unsafe(np.zeros(2), [safe]) == pytest.approx(5.0)
    assert distance_to_unsafe(np.array([5.0, 0.0]), [safe]) == pytest.approx(0.0)
    assert distance_to_unsafe(np.array([6.0, 0.0]), [safe]) == pytest.approx(-1.0)


def test_box_obstacle_clearance():
    box = Region("Wall", "box", (0.0, 0.0, 2.0, 1.0), polarity="obstacle")
    assert box.boundary_clearance(np.array([3.0, 0.5])) == pytest.approx(1.0)
    assert box.boundary_clearance(np.array([1.0, 0.5])) == pytest.approx(-0.5)
    assert box.boundary_clearance(np.array([3.0, 2.0])) == pytest.approx(math.hypot(1.0, 1.0))


def test_region_validation():
    with pytest.raises(WorldError, match="radius"):
        Region("Bad", "disk", (0.0, 0.0, 0.0))
    with pytest.raises(WorldError, match="corners"):
        Region("Bad", "box", (1.0, 0.0, 0.0, 1.0))


def test_target_regions_have_no_violation_boundary():
    target = Region("RegA", "box", (0.0, 0.0, 1.0, 1.0))
    assert distance_to_unsafe(np.zeros(2), [target]) == math.inf


# -- trajectories --------------------------------------------------------------

def test_trajectory_length_invariant():
    with pytest.raises(WorldError, match="one more state"):
        Trajectory(states=np.zeros((3, 2)), controls=np.zeros((3, 2)))


def test_trajectory_csv_roundtrip():
    rng = np.random.default_rng(8)
    traj = Trajectory(states=rng.normal(size=(6, 3)),
                      controls=rng.normal(size=(5, 2)),
                      filtered=np.array([0, 1, 0, 0, 1], dtype=bool))
    traj.to_csv("/tmp/traj_test.csv")
    back = Trajectory.from_csv("/tmp/traj_test.csv")
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.controls, traj.controls)
    np.testing.assert_array_equal(back.filtered, traj.filtered)
    assert not back.stopped_early


def test_trajectory_csv_header_and_stop_flag(tmp_path):
    path = tmp_path / "t.csv"
    traj = Trajectory(states=np.zeros((3, 2)), controls=np.ones((2, 2)),
                      stopped_early=True, stop_index=2)
    traj.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "t,px,py,u1,u2,filtered,stopped"
    back = Trajectory.from_csv(path)
    assert back.stopped_early and back.stop_index == 2


def test_plant_config_roundtrip():
    cfg = PlantConfig(kind="unicycle", control_lo=(0.0, -1.0), control_hi=(0.75, 1.0),
                      noise=(0.1, 0.1, 0.1), x0_lo=(0.5, 0.5), x0_hi=(2.0, 2.0),
                      regions={"Obs": Region("Obs", "disk", (3.0, 3.0, 1.0),
                                             polarity="obstacle")},
                      stop_distance=0.75)
    back = PlantConfig.from_dict(cfg.to_dict())
    assert back.kind == "unicycle"
    assert back.regions["Obs"].polarity == "obstacle"
    np.testing.assert_array_equal(back.control_hi, cfg.control_hi)
