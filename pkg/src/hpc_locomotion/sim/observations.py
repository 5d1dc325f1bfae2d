"""Observation layouts for the privileged (teacher) and student streams.

Privileged, 43 values::

    root_height 1 | projected_gravity 2 | lin_vel 2 | ang_vel 1 | cmd_lin_vel 1 |
    cmd_ang_vel 1 | contact_force 2 | joint_pos 4 | joint_vel 4 | last_action 4 | scan 21

Student, 40 values (privileged minus root_height and contact_force)::

    ang_vel 1 | projected_gravity 2 | lin_vel 2 | cmd_lin_vel 1 | cmd_ang_vel 1 |
    joint_pos 4 | joint_vel 4 | last_action 4 | scan 21

Joint positions are reported relative to the default pose. Projected gravity
is the unit gravity vector in the body frame: (0, -1) upright.
"""
from __future__ import annotations

import numpy as np

from ..terrain import SCAN_SIZE, HeightField, sample_scan
from .walker import DEFAULT_POSE, Command, WalkerState, standing_height


def _layout(fields):
    slices, pos = {}, 0
    for name, width in fields:
        slices[name] = slice(pos, pos + width)
        pos += width
    return slices, pos


PRIVILEGED_FIELDS = (("root_height", 1), ("projected_gravity", 2), ("lin_vel", 2), ("ang_vel", 1),
                     ("cmd_lin_vel", 1), ("cmd_ang_vel", 1), ("contact_force", 2), ("joint_pos", 4),
                     ("joint_vel", 4), ("last_action", 4), ("scan", SCAN_SIZE))
STUDENT_FIELDS = (("ang_vel", 1), ("projected_gravity", 2), ("lin_vel", 2), ("cmd_lin_vel", 1),
                  ("cmd_ang_vel", 1), ("joint_pos", 4), ("joint_vel", 4), ("last_action", 4),
                  ("scan", SCAN_SIZE))
PRIVILEGED_ONLY = ("root_height", "contact_force")
PRIVILEGED_SLICES, PRIVILEGED_DIM = _layout(PRIVILEGED_FIELDS)
STUDENT_SLICES, STUDENT_DIM = _layout(STUDENT_FIELDS)
PROPRIO_DIM = STUDENT_DIM - SCAN_SIZE
PRIVILEGED_PROPRIO_DIM = PRIVILEGED_DIM - SCAN_SIZE

# reconstruction target: root height, root velocity, contact flags, clean scan
TARGET_FIELDS = (("root_height", 1), ("lin_vel", 2), ("contact", 2), ("scan", SCAN_SIZE))
TARGET_SLICES, TARGET_DIM = _layout(TARGET_FIELDS)


def nominal_target() -> np.ndarray:
    """Target of a walker standing still on flat ground, half the time on each foot."""
    out = np.zeros(TARGET_DIM)
    out[TARGET_SLICES["root_height"]] = standing_height()
    out[TARGET_SLICES["contact"]] = 0.5
    out[TARGET_SLICES["scan"]] = -standing_height()
    return out


def projected_gravity(pitch):
    pitch = np.asarray(pitch, dtype=float)
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def privileged_batch(root_height, pitch, lin_vel, ang_vel, cmd, contact_force, joint_pos, joint_vel,
                     last_action, scan) -> np.ndarray:
    n = len(pitch)
    out = np.empty((n, PRIVILEGED_DIM))
    s = PRIVILEGED_SLICES
    out[:, s["root_height"]] = root_height[:, None]
    out[:, s["projected_gravity"]] = projected_gravity(pitch)
    out[:, s["lin_vel"]] = lin_vel
    out[:, s["ang_vel"]] = ang_vel[:, None]
    out[:, s["cmd_lin_vel"]] = cmd[:, 0:1]
    out[:, s["cmd_ang_vel"]] = cmd[:, 1:2]
    out[:, s["contact_force"]] = contact_force
    out[:, s["joint_pos"]] = joint_pos - DEFAULT_POSE
    out[:, s["joint_vel"]] = joint_vel
    out[:, s["last_action"]] = last_action
    out[:, s["scan"]] = scan
    return out


def student_from_privileged(priv: np.ndarray) -> np.ndarray:
    """Drop the privileged-only fields; every other value is copied verbatim."""
    priv = np.asarray(priv)
    parts = [priv[..., PRIVILEGED_SLICES[name]] for name, _ in STUDENT_FIELDS]
    return np.concatenate(parts, axis=-1)


def target_from_privileged(priv: np.ndarray, contact: np.ndarray) -> np.ndarray:
    priv = np.asarray(priv)
    return np.concatenate([priv[..., PRIVILEGED_SLICES["root_height"]], priv[..., PRIVILEGED_SLICES["lin_vel"]],
                           np.asarray(contact, dtype=float), priv[..., PRIVILEGED_SLICES["scan"]]], axis=-1)


def extract_privileged_obs(state: WalkerState, cmd: Command, terrain: HeightField, last_action) -> np.ndarray:
    x, z = state.root_position
    height = z - float(terrain.height_at(x))
    scan = sample_scan(terrain, x, z)
    return privileged_batch(np.array([height]), np.array([state.root_pitch]), state.root_lin_vel[None],
                            np.array([state.root_ang_vel]),
                            np.array([[cmd.target_lin_vel, cmd.target_ang_vel]]),
                            state.foot_contact_force[None], state.joint_pos[None], state.joint_vel[None],
                            np.asarray(last_action, dtype=float)[None], scan[None])[0]


def extract_student_obs(state: WalkerState, cmd: Command, last_action, terrain: HeightField | None = None) -> np.ndarray:
    """Clean student observation; the scan is zero when no terrain is given."""
    if terrain is None:
        from ..terrain import generate

        terrain = generate("flat", 0.0, 0)
        priv = extract_privileged_obs(state, cmd, terrain, last_action)
        priv[PRIVILEGED_SLICES["scan"]] = 0.0
    else:
        priv = extract_privileged_obs(state, cmd, terrain, last_action)
    return student_from_privileged(priv)
