"""Experiment configuration: flat key-value files with section headers.

The file format is INI as read by :mod:`configparser`.  ``--set
section.key=value`` overrides are applied textually before typing and
validation, so every hyperparameter stays reachable from the command line.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from . import stl
from .safety import BarrierSpec
from .world import PlantConfig, Region


class ConfigError(Exception):
    pass


@dataclass
class ModelOptions:
    hidden: tuple = (32, 32)
    dropout: float = 0.1
    epochs_initial: int = 500
    epochs_refit: int = 200
    batch: int = 64
    lr: float = 1e-3
    episodes_initial: int = 10
    episodes_per_cycle: int = 3
    sigma_inputs: int = 100
    sigma_masks: int = 50


@dataclass
class PolicyOptions:
    kind: str = "rnn"
    hidden: int = 32
    layers: int = 2
    lr: float = 1e-3
    batch: int = 4  # trajectories per gradient estimate
    temperature: float = 10.0  # smooth min/max sharpness
    max_steps: int = 2000
    conv_window: int = 50
    conv_tol: float = 1e-3
    divergence_margin: float = 2.0
    divergence_patience: int = 200
    grad_clip: float = 50.0
    output_decay: float = 1e-3


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    plant: PlantConfig
    formula_text: str
    phi: stl.Formula
    horizon: int
    barrier: BarrierSpec
    model: ModelOptions = field(default_factory=ModelOptions)
    policy: PolicyOptions = field(default_factory=PolicyOptions)
    max_cycles: int = 10
    gamma_target: float = 0.99
    k_eval_fast: int = 200
    k_eval_full: int = 1000
    restart_patience: int = 2  # stagnant cycles before a policy re-draw; 0 disables
    restart_floor: float = 0.05

    def predicates(self):
        return predicates_from_regions(self.plant.regions)

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "plant": self.plant.to_dict(),
            "formula_text": self.formula_text,
            "horizon": self.horizon,
            "barrier": self.barrier.to_dict(),
            "model": vars(self.model) | {"hidden": list(self.model.hidden)},
            "policy": dict(vars(self.policy)),
            "max_cycles": self.max_cycles,
            "gamma_target": self.gamma_target,
            "k_eval_fast": self.k_eval_fast,
            "k_eval_full": self.k_eval_full,
            "restart_patience": self.restart_patience,
            "restart_floor": self.restart_floor,
        }

    @classmethod
    def from_dict(cls, blob):
        plant = PlantConfig.from_dict(blob["plant"])
        phi = stl.parse_formula(blob["formula_text"],
                                predicates_from_regions(plant.regions))
        model = ModelOptions(**{**blob["model"],
                                "hidden": tuple(blob["model"]["hidden"])})
        return cls(name=blob["name"], seed=blob["seed"], plant=plant,
                   formula_text=blob["formula_text"], phi=phi,
                   horizon=blob["horizon"],
                   barrier=BarrierSpec.from_dict(blob["barrier"]),
                   model=model, policy=PolicyOptions(**blob["policy"]),
                   max_cycles=blob["max_cycles"],
                   gamma_target=blob["gamma_target"],
                   k_eval_fast=blob["k_eval_fast"],
                   k_eval_full=blob["k_eval_full"],
                   restart_patience=blob["restart_patience"],
                   restart_floor=blob["restart_floor"])


def predicates_from_regions(regions):
    """Every region is readable by name in formulas as an inside-region margin."""
    preds = {}
    for region in regions.values():
        if region.kind == "box":
            lox, loy, hix, hiy = region.params
            preds[region.name] = stl.InsideBox(lo=(lox, loy), hi=(hix, hiy))
        else:
            cx, cy, r = region.params
            preds[region.name] = stl.InsideDisk(center=(cx, cy), radius=r)
    return preds


def _floats(text):
    try:
        return tuple(float(v) for v in text.split())
    except ValueError as e:
        raise ConfigError(f"expected numbers, got {text!r}") from e


def _ints(text):
    try:
        return tuple(int(v) for v in text.split())
    except ValueError as e:
        raise ConfigError(f"expected integers, got {text!r}") from e


def _get(cp, section, key, conv, default=None):
    if not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from e


def _parse_region(name, text):
    parts = text.split()
    if len(parts) < 2:
        raise ConfigError(f"region {name}: expected '<polarity> <kind> <params...>'")
    polarity, kind = parts[0], parts[1]
    params = tuple(float(v) for v in parts[2:])
    want = 4 if kind == "box" else 3
    if kind not in ("box", "disk") or len(params) != want:
        raise ConfigError(f"region {name}: bad geometry {text!r}")
    try:
        return Region(name=name, kind=kind, params=params, polarity=polarity)
    except Exception as e:
        raise ConfigError(f"region {name}: {e}") from e


def apply_overrides(cp, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, option = key.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option.strip(), value.strip())


def load_config(path, overrides=()):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # region names are case-sensitive predicate names
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    apply_overrides(cp, overrides)
    return config_from_parser(cp)


def config_from_parser(cp):
    for section in ("experiment", "plant", "regions", "formula", "safety"):
        if not cp.has_section(section):
            raise ConfigError(f"missing [{section}] section")

    kind = _get(cp, "plant", "kind", str)
    if kind not in ("unicycle", "integrator"):
        raise ConfigError(f"unknown plant kind {kind!r}")
    state_dim = 3 if kind == "unicycle" else 2
    default_lo = "0.0 " + repr(-math.pi / 2) if kind == "unicycle" else "-2.0 -2.0"
    default_hi = "0.75 " + repr(math.pi / 2) if kind == "unicycle" else "2.0 2.0"
    regions = {name: _parse_region(name, cp.get("regions", name))
               for name in cp.options("regions")}
    plant = PlantConfig(
        kind=kind,
        control_lo=_get(cp, "plant", "control_lo", _floats, _floats(default_lo)),
        control_hi=_get(cp, "plant", "control_hi", _floats, _floats(default_hi)),
        noise=_get(cp, "plant", "noise", _floats, (0.0,) * state_dim),
        x0_lo=_get(cp, "plant", "x0_lo", _floats),
        x0_hi=_get(cp, "plant", "x0_hi", _floats),
        regions=regions,
        stop_distance=_get(cp, "plant", "stop_distance", float, 0.0),
    )
    if len(plant.noise) != state_dim:
        raise ConfigError(f"noise needs {state_dim} halfwidths for plant {kind!r}")

    formula_text = _get(cp, "formula", "text", str)
    try:
        phi = stl.parse_formula(formula_text, predicates_from_regions(regions))
    except stl.StlError as e:
        raise ConfigError(f"formula: {e}") from e
    horizon = stl.horizon(phi)
    if cp.has_option("formula", "horizon"):
        declared = cp.getint("formula", "horizon")
        if declared != horizon:
            raise ConfigError(
                f"declared horizon {declared} != formula horizon {horizon}")

    barrier_parts = _get(cp, "safety", "barrier", str).split()
    if len(barrier_parts) != 4 or barrier_parts[0] not in ("outside_disk", "inside_disk"):
        raise ConfigError("barrier must be '<outside_disk|inside_disk> cx cy r'")
    weights = _get(cp, "safety", "deviation_weights", _floats, (1.0, 1.0))
    try:
        barrier = BarrierSpec(
            kind=barrier_parts[0],
            center=tuple(float(v) for v in barrier_parts[1:3]),
            radius=float(barrier_parts[3]),
            alpha=_get(cp, "safety", "alpha", float),
            weights=weights,
            margin_mult=_get(cp, "safety", "margin_multiplier", float, 2.0),
        )
    except Exception as e:
        raise ConfigError(f"safety: {e}") from e

    model = ModelOptions(
        hidden=_get(cp, "model", "hidden", _ints, (32, 32)),
        dropout=_get(cp, "model", "dropout", float, 0.1),
        epochs_initial=_get(cp, "model", "epochs_initial", int, 500),
        epochs_refit=_get(cp, "model", "epochs_refit", int, 200),
        batch=_get(cp, "model", "batch", int, 64),
        lr=_get(cp, "model", "lr", float, 1e-3),
        episodes_initial=_get(cp, "model", "episodes_initial", int, 10),
        episodes_per_cycle=_get(cp, "model", "episodes_per_cycle", int, 3),
        sigma_inputs=_get(cp, "model", "sigma_inputs", int, 100),
        sigma_masks=_get(cp, "model", "sigma_masks", int, 50),
    ) if cp.has_section("model") else ModelOptions()

    policy = PolicyOptions(
        kind=_get(cp, "policy", "kind", str, "rnn"),
        hidden=_get(cp, "policy", "hidden", int, 32),
        layers=_get(cp, "policy", "layers", int, 2),
        lr=_get(cp, "policy", "lr", float, 1e-3),
        batch=_get(cp, "policy", "batch", int, 4),
        temperature=_get(cp, "policy", "temperature", float, 10.0),
        max_steps=_get(cp, "policy", "max_steps", int, 2000),
        conv_window=_get(cp, "policy", "conv_window", int, 50),
        conv_tol=_get(cp, "policy", "conv_tol", float, 1e-3),
        divergence_margin=_get(cp, "policy", "divergence_margin", float, 2.0),
        divergence_patience=_get(cp, "policy", "divergence_patience", int, 200),
        grad_clip=_get(cp, "policy", "grad_clip", float, 50.0),
        output_decay=_get(cp, "policy", "output_decay", float, 1e-3),
    ) if cp.has_section("policy") else PolicyOptions()
    if policy.kind not in ("rnn", "fnn"):
        raise ConfigError(f"unknown policy kind {policy.kind!r}")

    counts = {
        "max_cycles": _get(cp, "experiment", "max_cycles", int, 10),
        "k_eval_fast": _get(cp, "experiment", "k_eval_fast", int, 200),
        "k_eval_full": _get(cp, "experiment", "k_eval_full", int, 1000),
    }
    for key, value in counts.items():
        if value <= 0:
            raise ConfigError(f"{key} must be positive")

    return ExperimentConfig(
        name=_get(cp, "experiment", "name", str, "experiment"),
        seed=_get(cp, "experiment", "seed", int, 0),
        plant=plant,
        formula_text=formula_text,
        phi=phi,
        horizon=horizon,
        barrier=barrier,
        model=model,
        policy=policy,
        gamma_target=_get(cp, "experiment", "gamma_target", float, 0.99),
        restart_patience=_get(cp, "experiment", "restart_patience", int, 2),
        restart_floor=_get(cp, "experiment", "restart_floor", float, 0.05),
        **counts,
    )
