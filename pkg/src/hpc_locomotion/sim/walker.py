"""Planar biped walker: state containers, control-step integration and termination."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from ..terrain import HeightField
from . import dynamics

CONTROL_DT = 0.02
N_SUBSTEPS = 4
PHYSICS_DT = CONTROL_DT / N_SUBSTEPS
EPISODE_SECONDS = 20.0
MIN_ROOT_HEIGHT = 0.4
MAX_PITCH = 1.0

JOINT_NAMES = ("hip_l", "knee_l", "hip_r", "knee_r")
DEFAULT_POSE = np.array([0.25, -0.1, -0.15, -0.1])
JOINT_LOWER = np.array([-1.2, -2.0, -1.2, -2.0])
JOINT_UPPER = np.array([1.2, 0.2, 1.2, 0.2])


@dataclass
class PdGains:
    kp: np.ndarray = field(default_factory=lambda: np.full(4, 80.0))
    kd: np.ndarray = field(default_factory=lambda: np.full(4, 2.0))
    torque_limit: float = 80.0

    def __post_init__(self):
        self.kp = np.broadcast_to(np.asarray(self.kp, dtype=float), (4,)).copy()
        self.kd = np.broadcast_to(np.asarray(self.kd, dtype=float), (4,)).copy()
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("PD gains must be positive")


@dataclass
class PhysicsParams:
    """Nominal physical constants; domain randomisation produces per-episode overrides."""

    gravity: float = 9.81
    friction: float = 1.0
    payload: float = 0.0
    gains: PdGains = field(default_factory=PdGains)
    motor_offset: np.ndarray = field(default_factory=lambda: np.zeros(4))
    contact_stiffness: float = 20000.0
    contact_damping: float = 200.0
    tangential_stiffness: float = 5000.0
    tangential_damping: float = 50.0
    limit_stiffness: float = 200.0
    limit_damping: float = 5.0


@dataclass
class Command:
    target_lin_vel: float = 0.0
    target_ang_vel: float = 0.0

    def __post_init__(self):
        if abs(self.target_lin_vel) > 1.5 or abs(self.target_ang_vel) > 1.0:
            raise ValueError(f"command out of range: {self}")


@dataclass
class WalkerState:
    root_position: np.ndarray
    root_pitch: float
    root_lin_vel: np.ndarray
    root_ang_vel: float
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    foot_contact: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=bool))
    foot_contact_force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    time: float = 0.0
    fault: bool = False

    @property
    def qpos(self) -> np.ndarray:
        return np.concatenate([self.root_position, [self.root_pitch], self.joint_pos])

    @property
    def qvel(self) -> np.ndarray:
        return np.concatenate([self.root_lin_vel, [self.root_ang_vel], self.joint_vel])

    @classmethod
    def from_arrays(cls, qpos, qvel, contact=None, force=None, time=0.0, fault=False) -> "WalkerState":
        return cls(np.array(qpos[:2], dtype=float), float(qpos[2]), np.array(qvel[:2], dtype=float),
                   float(qvel[2]), np.array(qpos[3:], dtype=float), np.array(qvel[3:], dtype=float),
                   np.zeros(2, bool) if contact is None else np.array(contact, bool),
                   np.zeros(2) if force is None else np.array(force, float), float(time), bool(fault))


class Termination(enum.Enum):
    ALIVE = "alive"
    FALLEN = "fallen"
    TIMEOUT = "timeout"


def standing_height() -> float:
    foot = dynamics.foot_positions(np.concatenate([[0.0, 0.0, 0.0], DEFAULT_POSE]), dynamics.BODY)
    return float(-foot[:, 1].min())


def initial_state(terrain: HeightField, x: float = 0.0, clearance: float = 0.005) -> WalkerState:
    z = float(terrain.height_at(x)) + standing_height() + clearance
    return WalkerState(np.array([x, z]), 0.0, np.zeros(2), 0.0, DEFAULT_POSE.copy(), np.zeros(4))


class WalkerBatch:
    """N independent walkers advanced together; each owns its terrain row and physics draw."""

    def __init__(self, n: int, cell_size: float, n_cells: int):
        self.n = n
        self.cell_size = cell_size
        self.qpos = np.zeros((n, 7))
        self.qvel = np.zeros((n, 7))
        self.anchors = np.zeros((n, 2, 2))
        self.anchor_on = np.zeros((n, 2), dtype=bool)
        self.contact = np.zeros((n, 2), dtype=bool)
        self.fnormal = np.zeros((n, 2))
        self.torques = np.zeros((n, 4))
        self.fault = np.zeros(n, dtype=bool)
        self.steps = np.zeros(n, dtype=np.int64)
        self.heights = np.zeros((n, n_cells))
        self.origins = np.zeros(n)
        self.gravity = np.full(n, 9.81)
        self.friction = np.ones(n)
        self.payload = np.zeros(n)
        self.kp = np.full((n, 4), 80.0)
        self.kd = np.full((n, 4), 2.0)
        self.motor_offset = np.zeros((n, 4))
        self.torque_limit = 80.0
        self.contact_params = (20000.0, 200.0, 5000.0, 50.0)
        self.limit_params = (200.0, 5.0)

    @property
    def time(self) -> np.ndarray:
        return self.steps * CONTROL_DT

    def set_terrain(self, i: int, terrain: HeightField) -> None:
        if len(terrain.heights) != self.heights.shape[1] or terrain.cell_size != self.cell_size:
            raise ValueError("terrain grid does not match the batch layout")
        self.heights[i] = terrain.heights
        self.origins[i] = terrain.origin

    def set_physics(self, i: int, params: PhysicsParams) -> None:
        self.gravity[i] = params.gravity
        self.friction[i] = params.friction
        self.payload[i] = params.payload
        self.kp[i] = params.gains.kp
        self.kd[i] = params.gains.kd
        self.motor_offset[i] = params.motor_offset
        self.torque_limit = params.gains.torque_limit
        self.contact_params = (params.contact_stiffness, params.contact_damping,
                               params.tangential_stiffness, params.tangential_damping)
        self.limit_params = (params.limit_stiffness, params.limit_damping)

    def set_state(self, i: int, state: WalkerState) -> None:
        self.qpos[i] = state.qpos
        self.qvel[i] = state.qvel
        self.anchor_on[i] = False
        self.contact[i] = state.foot_contact
        self.fnormal[i] = state.foot_contact_force
        self.fault[i] = state.fault
        self.steps[i] = int(round(state.time / CONTROL_DT))
        self.torques[i] = 0.0

    def get_state(self, i: int) -> WalkerState:
        return WalkerState.from_arrays(self.qpos[i], self.qvel[i], self.contact[i], self.fnormal[i],
                                       self.steps[i] * CONTROL_DT, self.fault[i])

    def step(self, actions: np.ndarray) -> None:
        """Apply joint-position offsets (relative to the default pose) for one 50 Hz control step."""
        actions = np.asarray(actions, dtype=float)
        targets = actions + DEFAULT_POSE[None, :] + self.motor_offset
        k_n, c_n, k_t, c_t = self.contact_params
        limit_k, limit_c = self.limit_params
        bad = ~np.all(np.isfinite(targets), axis=1)
        self.fault |= bad
        targets = np.where(bad[:, None], 0.0, targets)
        dynamics.step_batch(self.qpos, self.qvel, targets, self.kp, self.kd, self.torque_limit,
                            JOINT_LOWER, JOINT_UPPER, limit_k, limit_c, dynamics.BODY, self.payload,
                            self.gravity, self.friction, self.heights, self.origins, self.cell_size,
                            k_n, c_n, k_t, c_t, self.anchors, self.anchor_on, self.contact,
                            self.fnormal, self.torques, self.fault, N_SUBSTEPS, PHYSICS_DT)
        self.steps += 1

    def root_height(self) -> np.ndarray:
        """Root height above the terrain directly below it."""
        idx = (self.qpos[:, 0] - self.origins) / self.cell_size
        n_cells = self.heights.shape[1]
        idx = np.clip(idx, 0.0, n_cells - 1)
        i0 = np.minimum(np.floor(idx).astype(np.int64), n_cells - 2)
        frac = idx - i0
        rows = np.arange(self.n)
        ground = self.heights[rows, i0] * (1 - frac) + self.heights[rows, i0 + 1] * frac
        return self.qpos[:, 1] - ground

    def termination(self, episode_seconds: float = EPISODE_SECONDS):
        """Returns (fallen, timeout) boolean arrays; faults count as falls."""
        fallen = (self.root_height() < MIN_ROOT_HEIGHT) | (np.abs(self.qpos[:, 2]) > MAX_PITCH) | self.fault
        timeout = (self.steps * CONTROL_DT >= episode_seconds - 1e-9) & ~fallen
        return fallen, timeout


def _single_batch(state: WalkerState, terrain: HeightField, physics: PhysicsParams) -> WalkerBatch:
    batch = WalkerBatch(1, terrain.cell_size, len(terrain.heights))
    batch.set_terrain(0, terrain)
    batch.set_physics(0, physics)
    batch.set_state(0, state)
    return batch


def step(state: WalkerState, action, terrain: HeightField, physics: PhysicsParams | None = None,
         anchors: np.ndarray | None = None) -> WalkerState:
    """One control step of a single walker.

    Friction anchors are not part of :class:`WalkerState`; a fresh contact is
    assumed at every call unless the caller passes ``anchors`` through.
    """
    physics = physics or PhysicsParams()
    batch = _single_batch(state, terrain, physics)
    if anchors is not None:
        batch.anchors[0] = anchors
        batch.anchor_on[0] = True
    batch.step(np.asarray(action, dtype=float)[None, :])
    return batch.get_state(0)


def check_termination(state: WalkerState, terrain: HeightField,
                      episode_seconds: float = EPISODE_SECONDS) -> Termination:
    height = state.root_position[1] - float(terrain.height_at(state.root_position[0]))
    if state.fault or height < MIN_ROOT_HEIGHT or abs(state.root_pitch) > MAX_PITCH:
        return Termination.FALLEN
    if state.time >= episode_seconds - 1e-9:
        return Termination.TIMEOUT
    return Termination.ALIVE


def mechanical_energy(state: WalkerState, physics: PhysicsParams | None = None) -> float:
    physics = physics or PhysicsParams()
    return float(dynamics.mechanical_energy(state.qpos, state.qvel, dynamics.BODY, physics.payload,
                                            physics.gravity))


TRACE_COLUMNS = ("step", "time", "x", "z", "pitch", "vx", "vz", "pitch_rate",
                 *[f"q_{j}" for j in JOINT_NAMES], *[f"qd_{j}" for j in JOINT_NAMES],
                 "contact_l", "contact_r", "force_l", "force_r",
                 *[f"action_{j}" for j in JOINT_NAMES])


class TraceWriter:
    """CSV state trace, one row per control step, columns in :data:`TRACE_COLUMNS` order."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRACE_COLUMNS)

    def write(self, step_idx: int, state: WalkerState, action) -> None:
        row = [step_idx, f"{state.time:.4f}", *state.root_position, state.root_pitch, *state.root_lin_vel,
               state.root_ang_vel, *state.joint_pos, *state.joint_vel, int(state.foot_contact[0]),
               int(state.foot_contact[1]), *state.foot_contact_force, *np.asarray(action)]
        self._writer.writerow([r if isinstance(r, (int, str)) else f"{float(r):.9g}" for r in row])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
