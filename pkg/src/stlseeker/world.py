"""Ground-truth plants, region geometry, noise, and trajectory records.

The plants stand in for the real system: training code only touches them
through episode rollouts, never through their equations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# Below this angular speed the unicycle arc update switches to its
# straight-line limit to avoid the 0/0.
OMEGA_EPS = 1e-6


class WorldError(Exception):
    pass


class ControlOutsideBoxError(WorldError):
    pass


def _check_box(u, lo, hi, tol=1e-9):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < lo - tol) or np.any(u > hi + tol):
        raise ControlOutsideBoxError(f"control {u} outside box [{lo}, {hi}]")
    return u


class UnicyclePlant:
    """Discrete-time unicycle: state [px, py, theta], control [v, omega]."""

    kind = "unicycle"
    state_dim = 3
    control_dim = 2
    position_dims = (0, 1)

    def __init__(self, control_lo=(0.0, -math.pi / 2), control_hi=(0.75, math.pi / 2)):
        self.control_lo = np.asarray(control_lo, dtype=np.float64)
        self.control_hi = np.asarray(control_hi, dtype=np.float64)

    def step(self, x, u):
        u = _check_box(u, self.control_lo, self.control_hi)
        px, py, theta = np.asarray(x, dtype=np.float64)
        v, omega = u
        if abs(omega) < OMEGA_EPS:
            return np.array([px + v * math.cos(theta),
                             py + v * math.sin(theta),
                             theta + omega])
        r = v / omega
        return np.array([px + r * (math.sin(theta + omega) - math.sin(theta)),
                         py + r * (math.cos(theta) - math.cos(theta + omega)),
                         theta + omega])


class IntegratorPlant:
    """Single integrator: state [px, py], control is the per-step velocity."""

    kind = "integrator"
    state_dim = 2
    control_dim = 2
    position_dims = (0, 1)

    def __init__(self, control_lo=(-2.0, -2.0), control_hi=(2.0, 2.0)):
        self.control_lo = np.asarray(control_lo, dtype=np.float64)
        self.control_hi = np.asarray(control_hi, dtype=np.float64)

    def step(self, x, u):
        u = _check_box(u, self.control_lo, self.control_hi)
        return np.asarray(x, dtype=np.float64) + u


def observe(x, noise_halfwidth, rng):
    """State plus uniform noise from the symmetric box [-w, w] per axis."""
    w = np.asarray(noise_halfwidth, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) + rng.uniform(-w, w)


def sample_initial(lo, hi, rng, heading=False):
    """Uniform draw from the box, optionally appending a Uniform(-pi, pi] heading."""
    pos = rng.uniform(np.asarray(lo, dtype=np.float64),
                      np.asarray(hi, dtype=np.float64))
    if heading:
        return np.append(pos, rng.uniform(-math.pi, math.pi))
    return pos


@dataclass(frozen=True)
class Region:
    """Named box or disk with a polarity: target, obstacle, or safe_interior."""

    name: str
    kind: str  # "box" | "disk"
    params: tuple  # box: (lox, loy, hix, hiy); disk: (cx, cy, r)
    polarity: str = "target"

    def __post_init__(self):
        if self.kind == "disk":
            if self.params[2] <= 0:
                raise WorldError(f"region {self.name}: radius must be positive")
        elif self.kind == "box":
            lox, loy, hix, hiy = self.params
            if hix <= lox or hiy <= loy:
                raise WorldError(f"region {self.name}: box corners out of order")
        else:
            raise WorldError(f"region {self.name}: unknown kind {self.kind!r}")
        if self.polarity not in ("target", "obstacle", "safe_interior"):
            raise WorldError(f"region {self.name}: bad polarity {self.polarity!r}")

    def boundary_clearance(self, p):
        """Signed distance to the violation boundary; negative once violated.

        Obstacles: distance outside the region (negative inside).  Safe
        interiors: distance to the boundary from inside (negative outside).
        Targets have no violation semantics and raise.
        """
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "disk":
            cx, cy, r = self.params
            d = math.hypot(p[0] - cx, p[1] - cy)
            if self.polarity == "obstacle":
                return d - r
            if self.polarity == "safe_interior":
                return r - d
        else:
            lox, loy, hix, hiy = self.params
            dx = max(lox - p[0], 0.0, p[0] - hix)
            dy = max(loy - p[1], 0.0, p[1] - hiy)
            outside = math.hypot(dx, dy)
            inside = min(p[0] - lox, hix - p[0], p[1] - loy, hiy - p[1])
            signed_out = outside if outside > 0.0 else -inside
            if self.polarity == "obstacle":
                return signed_out
            if self.polarity == "safe_interior":
                return -signed_out
        raise WorldError(f"region {self.name} has no violation boundary")


def distance_to_unsafe(x, regions):
    """Clearance to the nearest unsafe boundary over all non-target regions."""
    clearances = [r.boundary_clearance(x[:2]) for r in regions
                  if r.polarity != "target"]
    if not clearances:
        return math.inf
    return min(clearances)


@dataclass
class Trajectory:
    """States (T+1, n), applied controls (T, m), and per-step filter flags."""

    states: np.ndarray
    controls: np.ndarray
    filtered: np.ndarray = None
    stopped_early: bool = False
    stop_index: int | None = None
    raw_controls: np.ndarray = None
    slacks: np.ndarray = None
    statuses: list = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if len(self.states) != len(self.controls) + 1:
            raise WorldError("trajectory must have exactly one more state than controls")
        if self.stopped_early and self.stop_index is None:
            raise WorldError("stopped_early requires a stop index")
        if self.filtered is None:
            self.filtered = np.zeros(len(self.controls), dtype=bool)

    def __len__(self):
        return len(self.controls)

    def to_csv(self, path):
        n = self.states.shape[1]
        has_theta = n >= 3
        header = ["t", "px", "py"] + (["theta"] if has_theta else []) \
            + ["u1", "u2", "filtered", "stopped"]
        log = self.raw_controls is not None
        if log:
            header += ["raw_u1", "raw_u2", "slack", "status"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            T = len(self.controls)
            for t in range(len(self.states)):
                row = [t] + [repr(float(v)) for v in self.states[t][:3]]
                if t < T:
                    row += [repr(float(self.controls[t][0])),
                            repr(float(self.controls[t][1])),
                            int(self.filtered[t]),
                            int(self.stopped_early and t == self.stop_index)]
                    if log:
                        row += [repr(float(self.raw_controls[t][0])),
                                repr(float(self.raw_controls[t][1])),
                                repr(float(self.slacks[t])),
                                self.statuses[t]]
                else:
                    row += ["", "", "", int(self.stopped_early and t == self.stop_index)]
                    if log:
                        row += ["", "", "", ""]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            has_theta = "theta" in header
            n = 3 if has_theta else 2
            states, controls, filtered = [], [], []
            stop_index = None
            for row in reader:
                t = int(row[0])
                states.append([float(v) for v in row[1:1 + n]])
                u1 = row[1 + n]
                if u1 != "":
                    controls.append([float(u1), float(row[2 + n])])
                    filtered.append(bool(int(row[3 + n])))
                if row[4 + n] not in ("", "0"):
                    stop_index = t
        return cls(states=np.array(states), controls=np.array(controls),
                   filtered=np.array(filtered, dtype=bool),
                   stopped_early=stop_index is not None, stop_index=stop_index)


@dataclass
class PlantConfig:
    """Everything needed to run the true system: plant, noise, X0, geometry."""

    kind: str
    control_lo: np.ndarray
    control_hi: np.ndarray
    noise: np.ndarray  # per-state-axis halfwidths
    x0_lo: np.ndarray  # position box
    x0_hi: np.ndarray
    regions: dict = field(default_factory=dict)
    stop_distance: float = 0.0

    def __post_init__(self):
        self.control_lo = np.asarray(self.control_lo, dtype=np.float64)
        self.control_hi = np.asarray(self.control_hi, dtype=np.float64)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        self.x0_lo = np.asarray(self.x0_lo, dtype=np.float64)
        self.x0_hi = np.asarray(self.x0_hi, dtype=np.float64)

    def make_plant(self):
        if self.kind == "unicycle":
            return UnicyclePlant(self.control_lo, self.control_hi)
        if self.kind == "integrator":
            return IntegratorPlant(self.control_lo, self.control_hi)
        raise WorldError(f"unknown plant kind {self.kind!r}")

    @property
    def state_dim(self):
        return 3 if self.kind == "unicycle" else 2

    @property
    def control_dim(self):
        return 2

    def sample_initial(self, rng):
        return sample_initial(self.x0_lo, self.x0_hi, rng,
                              heading=self.kind == "unicycle")

    def observe(self, x, rng):
        return observe(x, self.noise, rng)

    def unsafe_regions(self):
        return [r for r in self.regions.values() if r.polarity != "target"]

    def to_dict(self):
        return {
            "kind": self.kind,
            "control_lo": [float(v) for v in self.control_lo],
            "control_hi": [float(v) for v in self.control_hi],
            "noise": [float(v) for v in self.noise],
            "x0_lo": [float(v) for v in self.x0_lo],
            "x0_hi": [float(v) for v in self.x0_hi],
            "stop_distance": self.stop_distance,
            "regions": [
                {"name": r.name, "kind": r.kind, "params": list(r.params),
                 "polarity": r.polarity}
                for r in self.regions.values()
            ],
        }

    @classmethod
    def from_dict(cls, blob):
        regions = {
            entry["name"]: Region(entry["name"], entry["kind"],
                                  tuple(entry["params"]), entry["polarity"])
            for entry in blob["regions"]
        }
        return cls(kind=blob["kind"], control_lo=blob["control_lo"],
                   control_hi=blob["control_hi"], noise=blob["noise"],
                   x0_lo=blob["x0_lo"], x0_hi=blob["x0_hi"], regions=regions,
                   stop_distance=blob["stop_distance"])
