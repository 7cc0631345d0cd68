"""Experiment configuration: one YAML document mapped onto nested dataclasses
with strict unknown-key rejection, plus canonical serialisation and hashing
so every artifact can embed the exact configuration that produced it."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from . import mcl, sim
from .errors import ConfigError
from .features import FeatureTrainConfig
from .gp import SvgpTrainConfig


@dataclass
class FeatureSection:
    input_px: int = 64
    input_blur_px: float = 1.5
    layer_sizes: tuple = (512, 256)
    feature_dim: int = 128
    epochs: int = 200
    batch_pairs: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.95
    lr_floor: float = 1e-7
    grad_clip: float = 5.0
    lam: float = 1.0
    consistency_weight: float = 1.0
    optimizer: str = "momentum"
    momentum: float = 0.9

    def train_config(self) -> FeatureTrainConfig:
        return FeatureTrainConfig(
            epochs=self.epochs, batch_pairs=self.batch_pairs, lr=self.lr,
            lr_decay=self.lr_decay, lr_floor=self.lr_floor,
            grad_clip=self.grad_clip, lam=self.lam,
            consistency_weight=self.consistency_weight,
            optimizer=self.optimizer, momentum=self.momentum)


@dataclass
class GpSection:
    m: int = 350
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-2
    lr_decay: float = 0.95
    lr_floor: float = 1e-7
    discount_heads: float = 0.1
    discount_trunk: float = 0.01
    freeze_trunk: bool = True
    optimizer: str = "adam"
    jitter: float = 1e-8
    noise_var: float = 0.05
    warm_start: bool = True

    def train_config(self) -> SvgpTrainConfig:
        return SvgpTrainConfig(
            m=self.m, batch_size=self.batch_size, epochs=self.epochs,
            lr=self.lr, lr_decay=self.lr_decay, lr_floor=self.lr_floor,
            discount_heads=self.discount_heads,
            discount_trunk=self.discount_trunk,
            freeze_trunk=self.freeze_trunk, optimizer=self.optimizer,
            jitter=self.jitter, noise_var=self.noise_var,
            warm_start=self.warm_start)


@dataclass
class NdtSection:
    cell_size: float = 1.0
    min_points: int = 3
    c0: float = 0.01
    c1: float = 0.99
    subsample: int = 200


@dataclass
class NoiseSection:
    trans_per_unit: tuple = (0.05, 0.05, 0.01)
    rot_per_unit: tuple = (0.002, 0.002, 0.01)
    trans_floor: tuple = (0.02, 0.02, 0.005)
    rot_floor: tuple = (0.002, 0.002, 0.005)

    def motion_noise(self) -> mcl.MotionNoise:
        return mcl.MotionNoise(self.trans_per_unit, self.rot_per_unit,
                               self.trans_floor, self.rot_floor)


@dataclass
class MclSection:
    n_sys1: int = 500
    n_sys2: int = 500
    max_particles: int = 1000
    injection: str = "until_converged"
    converged_trace: float = 2.0
    noise: NoiseSection = field(default_factory=NoiseSection)
    rot_spread: tuple = (0.0225, 0.25, 0.0225)
    fixed_cov: tuple = (70.0, 70.0, 3.0)
    floor_reset_steps: int = 3
    uniform_voxel: float = 0.2
    uniform_yaws: int = 8
    uniform_fraction: float = 0.6
    uniform_min_particles: int = 1000

    def mcl_config(self, ndt_sec: NdtSection) -> mcl.MclConfig:
        return mcl.MclConfig(
            n_sys1=self.n_sys1, n_sys2=self.n_sys2,
            max_particles=self.max_particles, injection=self.injection,
            converged_trace=self.converged_trace,
            noise=self.noise.motion_noise(), c1=ndt_sec.c1, c0=ndt_sec.c0,
            subsample=ndt_sec.subsample, rot_spread=tuple(self.rot_spread),
            floor_reset_steps=self.floor_reset_steps,
            fixed_cov=tuple(self.fixed_cov),
            uniform_voxel=self.uniform_voxel, uniform_yaws=self.uniform_yaws,
            uniform_fraction=self.uniform_fraction,
            uniform_min_particles=self.uniform_min_particles)


@dataclass
class EvalSection:
    trials: int = 100
    success_threshold_m: float = 0.75
    max_iterations: int = 140
    methods: tuple = ("hybrid-gp", "hybrid-fixed", "uniform-mcl")
    regression_frames: int = 200

    def eval_config(self) -> sim.EvalConfig:
        return sim.EvalConfig(trials=self.trials,
                              success_threshold_m=self.success_threshold_m,
                              max_iterations=self.max_iterations)


@dataclass
class TestSessionSection:
    """How the held-out session differs from the mapping session."""

    start_angle: float = 0.7
    wobble_amp: float = 4.0
    wobble_freq: int = 3
    wobble_phase: float = 1.3
    n_steps: int = 0  # 0: same as the training session


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: sim.WorldConfig = field(default_factory=sim.WorldConfig)
    session: sim.SessionConfig = field(default_factory=sim.SessionConfig)
    test_session: TestSessionSection = field(default_factory=TestSessionSection)
    observation: sim.ObservationConfig = field(default_factory=sim.ObservationConfig)
    features: FeatureSection = field(default_factory=FeatureSection)
    gp: GpSection = field(default_factory=GpSection)
    ndt: NdtSection = field(default_factory=NdtSection)
    mcl: MclSection = field(default_factory=MclSection)
    eval: EvalSection = field(default_factory=EvalSection)


_LEAF_TYPES = (int, float, str, bool)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub_path = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if is_dataclass(default.__class__) and isinstance(value, dict):
            kwargs[name] = _build(default.__class__, value, sub_path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub_path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{sub_path}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{sub_path}: expected an integer")
            if float(value) != int(value):
                raise ConfigError(f"{sub_path}: expected an integer")
            kwargs[name] = int(value)
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{sub_path}: expected a number")
            kwargs[name] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{sub_path}: expected a string")
            kwargs[name] = value
        else:
            raise ConfigError(f"{sub_path}: unsupported config field")
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path=None) -> ExperimentConfig:
    """Parse a YAML config file; a missing path yields the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    """Canonical plain-dict form (tuples become lists)."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
