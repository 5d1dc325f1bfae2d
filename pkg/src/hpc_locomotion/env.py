"""Vectorised locomotion environment: walkers, terrains, curriculum, commands, rewards and noise."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import noise as nz
from .config import RunConfig
from .sim.observations import (
    PRIVILEGED_SLICES, STUDENT_SLICES, privileged_batch, student_from_privileged, target_from_privileged,
)
from .sim.walker import (
    CONTROL_DT, DEFAULT_POSE, JOINT_LOWER, JOINT_UPPER, PdGains, PhysicsParams, WalkerBatch, WalkerState,
    initial_state,
)
from .terrain import CurriculumState, generate, sample_scan_batch, update_curriculum


@dataclass
class EpisodeStats:
    env: int
    episode: int
    family: str
    level: int
    next_level: int
    length: int
    reward: float
    distance: float
    vel_error: float
    ang_error: float
    fallen: bool
    command: float


@dataclass
class StepResult:
    reward: np.ndarray
    done: np.ndarray
    fallen: np.ndarray
    timeout: np.ndarray
    episodes: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)
    tracking: np.ndarray | None = None  # [n, 4]: vx, pitch rate, commanded vx, commanded rate (pre-reset)


def compute_reward(cfg, vx, vz, pitch, pitch_rate, cmd, torques, action, last_action, joint_pos, fallen):
    """Weighted regularisation and tracking terms; returns (total, per-term dict)."""
    sharp = cfg.tracking_sharpness
    mid = 0.5 * (JOINT_LOWER + JOINT_UPPER)
    half = 0.5 * (JOINT_UPPER - JOINT_LOWER) * cfg.soft_limit_fraction
    beyond = np.maximum(np.abs(joint_pos - mid) - half, 0.0).sum(axis=1)
    terms = {
        "lin_vel": cfg.lin_vel * np.exp(-sharp * (vx - cmd[:, 0]) ** 2),
        "ang_vel": cfg.ang_vel * np.exp(-sharp * (pitch_rate - cmd[:, 1]) ** 2),
        "alive": np.full(len(vx), cfg.alive),
        "torque": cfg.torque * np.sum(torques ** 2, axis=1),
        "action_rate": cfg.action_rate * np.sum((action - last_action) ** 2, axis=1),
        "joint_limit": cfg.joint_limit * beyond,
        "vertical_vel": cfg.vertical_vel * vz ** 2,
        "orientation": cfg.orientation * np.sin(pitch) ** 2,
        "fall": cfg.fall * fallen.astype(float),
    }
    return sum(terms.values()), terms


class LocomotionEnv:
    """``n`` walkers stepping in lockstep; finished episodes reset automatically.

    ``noisy`` switches on the student corruption stack (terrain noise plus
    proprioceptive perturbation at ``intensity``). ``randomize`` switches on
    per-episode dynamics randomisation. Every random draw of env ``i``'s
    ``k``-th episode comes from ``episode_stream(seed, i, k)``.
    """

    def __init__(self, cfg: RunConfig, n: int, seed: int, noisy: bool = False, intensity: float = 1.0,
                 randomize: bool = False, start_levels=None, families=None):
        self.cfg = cfg
        self.n = n
        self.seed = seed
        self.noisy = noisy
        self.intensity = intensity
        self.randomize = randomize
        self.families = list(families or cfg.terrain.families)
        self.tspec = cfg.noise.terrain_spec()
        self.dspec = cfg.noise.domain_spec()
        self.length_scale = self.tspec.l_end
        n_cells = int(round(cfg.terrain.length / cfg.terrain.cell_size)) + 1
        self.walkers = WalkerBatch(n, cfg.terrain.cell_size, n_cells)
        self.nominal = PhysicsParams(gains=PdGains(kp=cfg.sim.kp, kd=cfg.sim.kd, torque_limit=cfg.sim.torque_limit))
        if start_levels is None:
            start_levels = [cfg.terrain.initial_level] * n
        self.curriculum = [CurriculumState(int(lv), cfg.terrain.promotion_distance, cfg.terrain.demotion_distance,
                                           cfg.terrain.max_level) for lv in start_levels]
        self.episode_index = np.zeros(n, dtype=np.int64)
        self.rngs: list[np.random.Generator] = [None] * n
        self.commands = np.zeros((n, 2))
        self.last_action = np.zeros((n, 4))
        self.draws: list[nz.EpisodeNoiseDraw] = [None] * n
        self.family_of = [""] * n
        self.level_of = np.zeros(n, dtype=np.int64)
        self.start_x = np.zeros(n)
        self.ep_reward = np.zeros(n)
        self.ep_vel_err = np.zeros(n)
        self.ep_ang_err = np.zeros(n)
        self.episode_start = np.ones(n, dtype=bool)
        self.priv_obs = np.zeros((n, 0))
        self.student_obs = np.zeros((n, 0))
        self.clean_student_obs = np.zeros((n, 0))
        self.target = np.zeros((n, 0))
        for i in range(n):
            self._reset(i)
        self._observe()

    # -- episode lifecycle ----------------------------------------------------
    def _reset(self, i: int) -> None:
        cfg = self.cfg
        rng = nz.episode_stream(self.seed, i, int(self.episode_index[i]))
        self.rngs[i] = rng
        family = self.families[i % len(self.families)]
        level = self.curriculum[i].level
        terrain = generate(family, self.curriculum[i].difficulty, int(rng.integers(2**31)),
                           length=cfg.terrain.length, cell_size=cfg.terrain.cell_size)
        self.walkers.set_terrain(i, terrain)
        lo, hi = cfg.sim.command_lin_vel
        alo, ahi = cfg.sim.command_ang_vel
        self.commands[i] = (rng.uniform(lo, hi), rng.uniform(alo, ahi))
        physics = nz.randomize_dynamics(self.dspec, rng, self.nominal) if self.randomize else self.nominal
        self.walkers.set_physics(i, physics)
        state = initial_state(terrain)
        state.joint_pos = state.joint_pos + rng.uniform(-1, 1, 4) * cfg.sim.init_joint_noise
        self.walkers.set_state(i, state)
        self.draws[i] = nz.draw_terrain_noise(self.tspec, rng, self.length_scale) if self.noisy else None
        self.family_of[i] = family
        self.level_of[i] = level
        self.start_x[i] = state.root_position[0]
        self.last_action[i] = 0.0
        self.ep_reward[i] = 0.0
        self.ep_vel_err[i] = 0.0
        self.ep_ang_err[i] = 0.0
        self.episode_start[i] = True

    def _observe(self) -> None:
        w = self.walkers
        scan = sample_scan_batch(w.heights, w.origins, w.cell_size, w.qpos[:, 0], w.qpos[:, 1])
        self.priv_obs = privileged_batch(w.root_height(), w.qpos[:, 2], w.qvel[:, :2], w.qvel[:, 2],
                                         self.commands, w.fnormal, w.qpos[:, 3:], w.qvel[:, 3:],
                                         self.last_action, scan)
        self.target = target_from_privileged(self.priv_obs, w.contact)
        self.clean_student_obs = student_from_privileged(self.priv_obs)
        if not self.noisy:
            self.student_obs = self.clean_student_obs
            return
        obs = self.clean_student_obs.copy()
        ssl = STUDENT_SLICES["scan"]
        for i in range(self.n):
            rng = self.rngs[i]
            eps = nz.sample_gp_noise(nz.SCAN_OFFSETS, self.tspec, rng, self.draws[i].length_scale)
            obs[i, ssl] = nz.corrupt_scan(obs[i, ssl], self.draws[i], self.intensity, eps)
            obs[i, :ssl.start] += nz.proprio_noise(self.dspec, rng, 1, self.intensity, STUDENT_SLICES)[0, :ssl.start]
        self.student_obs = obs

    @property
    def levels(self) -> np.ndarray:
        return np.array([c.level for c in self.curriculum])

    def step(self, actions: np.ndarray) -> StepResult:
        cfg = self.cfg
        clip = cfg.sim.action_clip
        actions = np.clip(np.nan_to_num(np.asarray(actions, dtype=float), nan=0.0), -clip, clip)
        w = self.walkers
        w.step(actions)
        fallen, timeout = w.termination(cfg.sim.episode_seconds)
        reward, terms = compute_reward(cfg.reward, w.qvel[:, 0], w.qvel[:, 1], w.qpos[:, 2], w.qvel[:, 2],
                                       self.commands, w.torques, actions, self.last_action, w.qpos[:, 3:], fallen)
        reward = np.nan_to_num(reward, nan=cfg.reward.fall)
        self.ep_reward += reward
        self.ep_vel_err += np.abs(w.qvel[:, 0] - self.commands[:, 0])
        self.ep_ang_err += np.abs(w.qvel[:, 2] - self.commands[:, 1])
        tracking = np.column_stack([w.qvel[:, 0], w.qvel[:, 2], self.commands])
        self.last_action = actions
        self.episode_start[:] = False
        done = fallen | timeout
        episodes = []
        for i in np.flatnonzero(done):
            length = int(w.steps[i])
            distance = float(w.qpos[i, 0] - self.start_x[i]) if np.isfinite(w.qpos[i, 0]) else 0.0
            before = self.curriculum[i]
            self.curriculum[i] = update_curriculum(before, max(distance, 0.0), bool(fallen[i]))
            episodes.append(EpisodeStats(i, int(self.episode_index[i]), self.family_of[i], int(self.level_of[i]),
                                         self.curriculum[i].level, length, float(self.ep_reward[i]), distance,
                                         float(self.ep_vel_err[i] / max(length, 1)),
                                         float(self.ep_ang_err[i] / max(length, 1)), bool(fallen[i]),
                                         float(self.commands[i, 0])))
            self.episode_index[i] += 1
            self._reset(i)
        self._observe()
        return StepResult(reward, done, fallen, timeout, episodes, terms, tracking)

    def get_state(self, i: int) -> WalkerState:
        return self.walkers.get_state(i)

    @property
    def time(self) -> np.ndarray:
        return self.walkers.steps * CONTROL_DT
