"""Terrain-perception noise (gain, offset, Matérn-correlated jitter) and domain randomisation.

A perceived scan is ``alpha * e + beta + eps`` with a per-episode gain
``alpha``, a per-episode offset ``beta`` and a fresh spatially correlated
draw ``eps`` every control step. ``intensity`` rescales every deviation
from the clean signal: 0 is the identity, 1 is nominal, 2 doubles the
spread.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .sim.walker import PdGains, PhysicsParams
from .terrain import SCAN_OFFSETS

SQRT3 = np.sqrt(3.0)


class NoiseModelError(ValueError):
    pass


@dataclass(frozen=True)
class TerrainNoiseSpec:
    alpha_range: tuple = (0.8, 1.2)
    beta_std: float = 0.05
    gp_variance: float = 0.03 ** 2
    length_scale: float = 0.2
    l_start: float = 0.02
    l_end: float = 0.2
    ramp_steps: int = 200_000
    per_cell_alpha: bool = False
    per_cell_beta: bool = False

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (0 < lo <= hi):
            raise NoiseModelError(f"alpha_range must be positive, got {self.alpha_range}")
        if self.length_scale <= 0 or self.l_start <= 0 or self.l_end <= 0:
            raise NoiseModelError("length scales must be positive")
        if self.beta_std < 0 or self.gp_variance < 0:
            raise NoiseModelError("beta_std and gp_variance must be non-negative")

    def length_scale_at(self, step: int) -> float:
        """Linear ramp from ``l_start`` to ``l_end`` over ``ramp_steps`` training steps."""
        if self.ramp_steps <= 0:
            return self.l_end
        frac = min(max(step, 0) / self.ramp_steps, 1.0)
        return self.l_start + (self.l_end - self.l_start) * frac


@dataclass(frozen=True)
class RandomRow:
    name: str
    unit: str
    low: float
    high: float
    operator: str  # "scaling", "additive" or "sample"


TABLE_ROWS = (
    RandomRow("angular_velocity", "rad/s", -0.2, 0.2, "scaling"),
    RandomRow("projected_gravity", "-", -0.1, 0.1, "scaling"),
    RandomRow("joint_position", "rad", -0.1, 0.1, "scaling"),
    RandomRow("joint_velocity", "rad/s", -1.5, 1.5, "scaling"),
    RandomRow("friction", "-", 0.2, 1.5, "sample"),
    RandomRow("payload", "kg", -5.0, 5.0, "additive"),
    RandomRow("gravity", "m/s^2", -0.1, 0.1, "additive"),
    RandomRow("joint_damping", "-", 0.8, 1.2, "scaling"),
    RandomRow("joint_stiffness", "-", 0.8, 1.2, "scaling"),
    RandomRow("motor_offset", "rad", -0.1, 0.1, "additive"),
)
SENSOR_ROWS = ("angular_velocity", "projected_gravity", "joint_position", "joint_velocity")
DYNAMICS_ROWS = ("friction", "payload", "gravity", "joint_damping", "joint_stiffness", "motor_offset")


@dataclass(frozen=True)
class DomainRandomSpec:
    """Sensor rows perturb observations every step (uniform in the row range,
    amplitude scaled by intensity). Dynamics rows are drawn once per episode:
    ``scaling`` multiplies the nominal, ``additive`` adds to it, ``sample``
    replaces it."""

    rows: tuple = TABLE_ROWS

    def row(self, name: str) -> RandomRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass
class EpisodeNoiseDraw:
    alpha: float | np.ndarray = 1.0
    beta: float | np.ndarray = 0.0
    length_scale: float = 0.2
    dynamics: dict = field(default_factory=dict)


def matern_kernel(d, length_scale: float, variance: float):
    """Matérn covariance with smoothness 3/2."""
    if length_scale <= 0:
        raise NoiseModelError(f"length scale must be positive, got {length_scale}")
    r = SQRT3 * np.abs(np.asarray(d, dtype=float)) / length_scale
    return variance * (1.0 + r) * np.exp(-r)


def kernel_matrix(offsets, length_scale: float, variance: float) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=float)
    return matern_kernel(offsets[:, None] - offsets[None, :], length_scale, variance)


_CHOL_CACHE: dict = {}


def cholesky_factor(offsets, length_scale: float, variance: float, jitter: float = 1e-10) -> np.ndarray:
    key = (tuple(np.round(np.asarray(offsets, float), 12)), float(length_scale), float(variance))
    low = _CHOL_CACHE.get(key)
    if low is None:
        cov = kernel_matrix(offsets, length_scale, variance) + jitter * np.eye(len(offsets))
        try:
            low = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise NoiseModelError("kernel matrix is not positive definite after jitter") from None
        if len(_CHOL_CACHE) > 256:
            _CHOL_CACHE.clear()
        _CHOL_CACHE[key] = low
    return low


def sample_gp_noise(offsets, spec: TerrainNoiseSpec, rng: np.random.Generator,
                    length_scale: float | None = None, size: int | None = None) -> np.ndarray:
    """Zero-mean correlated noise at ``offsets`` via the Cholesky factor of the kernel matrix."""
    offsets = np.asarray(offsets, dtype=float)
    n = len(offsets)
    z = rng.standard_normal(n if size is None else (size, n))
    if spec.gp_variance == 0.0:
        return np.zeros_like(z)
    low = cholesky_factor(offsets, length_scale or spec.length_scale, spec.gp_variance)
    return z @ low.T


def draw_terrain_noise(spec: TerrainNoiseSpec, rng: np.random.Generator, length_scale: float | None = None,
                       n_cells: int = len(SCAN_OFFSETS)) -> EpisodeNoiseDraw:
    lo, hi = spec.alpha_range
    alpha = rng.uniform(lo, hi, size=n_cells) if spec.per_cell_alpha else rng.uniform(lo, hi)
    beta = rng.normal(0.0, spec.beta_std, size=n_cells) if spec.per_cell_beta else rng.normal(0.0, spec.beta_std)
    return EpisodeNoiseDraw(alpha, beta, length_scale or spec.length_scale)


def corrupt_scan(scan, draw: EpisodeNoiseDraw, intensity: float, eps=None) -> np.ndarray:
    """``alpha * e + beta + eps`` with each deviation scaled by ``intensity``."""
    if intensity < 0:
        raise NoiseModelError("intensity must be non-negative")
    scan = np.asarray(scan, dtype=float)
    if intensity == 0.0:
        return scan.copy()
    alpha = 1.0 + intensity * (np.asarray(draw.alpha) - 1.0)
    out = alpha * scan + intensity * np.asarray(draw.beta)
    if eps is not None:
        out = out + intensity * np.asarray(eps)
    return out


def randomize_dynamics(spec: DomainRandomSpec, rng: np.random.Generator,
                       nominal: PhysicsParams | None = None) -> PhysicsParams:
    """One per-episode draw of every dynamics row applied to ``nominal``."""
    nominal = nominal or PhysicsParams()
    draws = {}
    for name in DYNAMICS_ROWS:
        r = spec.row(name)
        size = 4 if name == "motor_offset" else None
        draws[name] = rng.uniform(r.low, r.high, size=size)
    gains = PdGains(kp=nominal.gains.kp * draws["joint_stiffness"],
                    kd=nominal.gains.kd * draws["joint_damping"],
                    torque_limit=nominal.gains.torque_limit)
    return replace(nominal, friction=float(draws["friction"]),
                   payload=nominal.payload + float(draws["payload"]),
                   gravity=nominal.gravity + float(draws["gravity"]),
                   gains=gains, motor_offset=nominal.motor_offset + draws["motor_offset"])


def proprio_noise(spec: DomainRandomSpec, rng: np.random.Generator, n: int, intensity: float,
                  slices: dict) -> np.ndarray:
    """Additive per-step sensor perturbation for ``n`` student observations (scan excluded)."""
    width = max(s.stop for s in slices.values())
    noise = np.zeros((n, width))
    if intensity == 0.0:
        return noise
    field_of = {"angular_velocity": "ang_vel", "projected_gravity": "projected_gravity",
                "joint_position": "joint_pos", "joint_velocity": "joint_vel"}
    for name in SENSOR_ROWS:
        r = spec.row(name)
        sl = slices[field_of[name]]
        noise[:, sl] = intensity * rng.uniform(r.low, r.high, size=(n, sl.stop - sl.start))
    return noise


def corrupt_proprio(obs, spec: DomainRandomSpec, rng: np.random.Generator, intensity: float) -> np.ndarray:
    """Perturb the proprioceptive entries of clean student observation(s); commands, velocity,
    last action and scan are untouched."""
    from .sim.observations import STUDENT_SLICES

    obs = np.asarray(obs, dtype=float)
    flat = obs.reshape(-1, obs.shape[-1])
    if intensity == 0.0:
        return obs.copy()
    noise = proprio_noise(spec, rng, len(flat), intensity, STUDENT_SLICES)
    out = flat.copy()
    out[:, : noise.shape[1]] += noise
    return out.reshape(obs.shape)


def episode_stream(seed: int, env_index: int, episode_index: int) -> np.random.Generator:
    """Independent generator per (run seed, environment, episode)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed,
                                                                      spawn_key=(env_index, episode_index))))
