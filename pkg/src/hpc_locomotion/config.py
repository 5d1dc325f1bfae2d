"""Run configuration: nested dataclasses, YAML load with strict keys, resolved dump."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .noise import DomainRandomSpec, TerrainNoiseSpec
from .terrain import TRAIN_FAMILIES


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    kp: float = 80.0
    kd: float = 2.0
    torque_limit: float = 80.0
    episode_seconds: float = 20.0
    action_clip: float = 1.0
    init_joint_noise: float = 0.05
    command_lin_vel: list = field(default_factory=lambda: [0.3, 1.0])
    command_ang_vel: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class TerrainConfig:
    families: list = field(default_factory=lambda: list(TRAIN_FAMILIES))
    length: float = 40.0
    cell_size: float = 0.02
    max_level: int = 9
    promotion_distance: float = 8.0
    demotion_distance: float = 2.0
    initial_level: int = 0


@dataclass
class NoiseConfig:
    alpha_range: list = field(default_factory=lambda: [0.8, 1.2])
    beta_std: float = 0.05
    gp_variance: float = 0.03 ** 2
    l_start: float = 0.02
    l_end: float = 0.2
    ramp_steps: int = 2000
    per_cell_alpha: bool = False
    per_cell_beta: bool = False
    intensity: float = 1.0
    oracle_dynamics_randomization: bool = True
    dynamics_randomization: bool = True

    def terrain_spec(self) -> TerrainNoiseSpec:
        return TerrainNoiseSpec(tuple(self.alpha_range), self.beta_std, self.gp_variance, self.l_end,
                                self.l_start, self.l_end, self.ramp_steps, self.per_cell_alpha,
                                self.per_cell_beta)

    def domain_spec(self) -> DomainRandomSpec:
        return DomainRandomSpec()


@dataclass
class RewardConfig:
    lin_vel: float = 2.0
    ang_vel: float = 1.0
    alive: float = 0.5
    torque: float = -1e-4
    action_rate: float = -0.01
    joint_limit: float = -1.0
    vertical_vel: float = -0.5
    orientation: float = -1.0
    fall: float = -100.0
    tracking_sharpness: float = 4.0
    soft_limit_fraction: float = 0.9


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    lr: float = 3e-4
    envs: int = 64
    horizon: int = 128
    iterations: int = 300
    max_grad_norm: float = 1.0
    reward_scale: float = 0.02
    init_std: float = 0.3
    terrain_hidden: int = 64
    terrain_latent: int = 16
    lstm_hidden: int = 128
    mlp_hidden: int = 64
    checkpoint_every: int = 50


@dataclass
class StudentConfig:
    window: int = 16
    latent: int = 32
    lstm_hidden: int = 128
    terrain_hidden: int = 64
    terrain_latent: int = 16
    decoder_hidden: int = 128
    policy_hidden: list = field(default_factory=lambda: [128, 64])
    head_hidden: int = 64
    imitation_weight_lambda: float = 0.5
    beta_start: float = 0.01
    beta_rate: float = 1e-5
    beta_max: float = 0.5
    log_sigma_min: float = -5.0
    log_sigma_max: float = 2.0
    envs: int = 64
    steps_per_round: int = 32
    updates: int = 200
    minibatch: int = 256
    epochs: int = 4
    lr: float = 1e-3
    buffer_capacity: int = 2_000_000
    stop_gradient: bool = False
    checkpoint_every: int = 100


@dataclass
class EvalConfig:
    episodes: int = 100
    noise: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: list = field(default_factory=lambda: ["oracle", "student", "student_no_wm", "student_no_distill"])
    envs: int = 64
    episodes_per_env: int = 2
    seed_offset: int = 100_000


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _apply(obj, node: yaml.MappingNode, source: str, prefix: str) -> None:
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key_node, value_node in node.value:
        key = key_node.value
        line = key_node.start_mark.line + 1
        where = f"{source}:{line}: {prefix}{key}"
        if key not in known:
            raise ConfigError(f"{where}: unknown key (expected one of {sorted(known)})")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value_node, yaml.MappingNode):
                raise ConfigError(f"{where}: expected a mapping")
            _apply(current, value_node, source, f"{prefix}{key}.")
            continue
        value = yaml.safe_load(yaml.serialize(value_node))
        setattr(obj, key, _coerce(value, current, where))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if node is None:
        return cfg
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{node.start_mark.line + 1}: top level must be a mapping")
    _apply(cfg, node, source, "")
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def validate(cfg: RunConfig) -> None:
    if not 0.0 <= cfg.ppo.gamma < 1.0:
        raise ConfigError(f"ppo.gamma must lie in [0, 1), got {cfg.ppo.gamma}")
    if cfg.ppo.envs % cfg.ppo.minibatches:
        raise ConfigError("ppo.envs must be divisible by ppo.minibatches")
    if cfg.student.window < 1:
        raise ConfigError("student.window must be >= 1")
    for fam in cfg.terrain.families:
        from .terrain import FAMILIES

        if fam not in FAMILIES:
            raise ConfigError(f"terrain.families: unknown family {fam!r}")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def write_run_metadata(out_dir, cfg: RunConfig, seed: int | None, command: str) -> None:
    """Everything needed to regenerate an output directory."""
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    meta = {"command": command, "seed": seed, "version": __version__}
    (out / "run.yaml").write_text(yaml.safe_dump(meta, sort_keys=False))
