"""Procedural 1D terrain families, robot-centric elevation scans and the walk-distance curriculum."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FAMILIES = ("stair_up", "stair_down", "random_rough", "pyramid_slope", "boxes", "wave", "flat")
TRAIN_FAMILIES = FAMILIES[:6]

SCAN_OFFSETS = np.round(np.arange(-0.5, 1.5 + 1e-9, 0.1), 10)
SCAN_SIZE = len(SCAN_OFFSETS)

STAIR_RUN = 0.30
WAVE_PERIOD = 2.0
PYRAMID_HALF = 3.0
ROUGH_KNOT = 0.10


@dataclass(frozen=True)
class HeightField:
    """Elevations on a uniform grid along x; queries beyond the ends clamp to the edge value."""

    cell_size: float
    origin: float
    heights: np.ndarray
    family: str = "flat"
    difficulty: float = 0.0

    @property
    def length(self) -> float:
        return self.cell_size * (len(self.heights) - 1)

    def height_at(self, x):
        return np.interp(x, self.origin + self.cell_size * np.arange(len(self.heights)), self.heights)

    def xs(self) -> np.ndarray:
        return self.origin + self.cell_size * np.arange(len(self.heights))


def _stair_profile(x: np.ndarray, start: float, rise: float) -> np.ndarray:
    steps = np.floor((x - start) / STAIR_RUN) + 1.0
    return np.where(x >= start, steps * rise, 0.0)


def generate(family: str, difficulty: float, seed: int, length: float = 40.0,
             cell_size: float = 0.02, origin: float = -2.0, flat_start: float = 1.0) -> HeightField:
    """Build one terrain. Features begin ``flat_start`` metres past x=0 so every episode starts level."""
    if family not in FAMILIES:
        raise ValueError(f"unknown terrain family {family!r}; expected one of {FAMILIES}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    n = int(round(length / cell_size)) + 1
    x = origin + cell_size * np.arange(n)
    d = difficulty
    if family == "flat":
        h = np.zeros(n)
    elif family == "stair_up":
        h = _stair_profile(x, flat_start, 0.05 + 0.15 * d)
    elif family == "stair_down":
        h = -_stair_profile(x, flat_start, 0.05 + 0.15 * d)
    elif family == "random_rough":
        amp = 0.025 + 0.075 * d
        knots = np.arange(origin, origin + length + ROUGH_KNOT, ROUGH_KNOT)
        vals = rng.uniform(-amp, amp, size=len(knots))
        h = np.interp(x, knots, vals)
        h[x < flat_start] = 0.0
    elif family == "pyramid_slope":
        grade = 0.10 + 0.30 * d
        u = np.mod(np.maximum(x - flat_start, 0.0), 2 * PYRAMID_HALF)
        h = grade * np.where(u < PYRAMID_HALF, u, 2 * PYRAMID_HALF - u)
    elif family == "boxes":
        top = 0.05 + 0.20 * d
        h = np.zeros(n)
        pos = flat_start + rng.uniform(0.0, 0.5)
        while pos < origin + length:
            width = rng.uniform(0.4, 0.8)
            height = rng.uniform(0.5, 1.0) * top
            h[(x >= pos) & (x < pos + width)] = height
            pos += width + rng.uniform(0.4, 1.0)
    else:  # wave
        amp = 0.05 + 0.15 * d
        h = np.where(x >= flat_start, amp * np.sin(2 * np.pi * (x - flat_start) / WAVE_PERIOD), 0.0)
    h = np.ascontiguousarray(h, dtype=np.float64)
    h.setflags(write=False)
    return HeightField(cell_size, origin, h, family, float(difficulty))


def sample_scan(terrain: HeightField, root_x: float, root_z: float,
                offsets: np.ndarray = SCAN_OFFSETS) -> np.ndarray:
    """Terrain height minus root height at fixed offsets ahead of and behind the root."""
    return terrain.height_at(root_x + offsets) - root_z


def sample_scan_batch(heights: np.ndarray, origins: np.ndarray, cell_size: float,
                      root_x: np.ndarray, root_z: np.ndarray,
                      offsets: np.ndarray = SCAN_OFFSETS) -> np.ndarray:
    """Vectorised :func:`sample_scan` over a stack of equal-length height grids."""
    n_cells = heights.shape[1]
    pos = (root_x[:, None] + offsets[None, :] - origins[:, None]) / cell_size
    pos = np.clip(pos, 0.0, n_cells - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_cells - 2)
    frac = pos - i0
    rows = np.arange(len(root_x))[:, None]
    h = heights[rows, i0] * (1.0 - frac) + heights[rows, i0 + 1] * frac
    return h - root_z[:, None]


@dataclass(frozen=True)
class CurriculumState:
    level: int = 0
    promotion_distance: float = 8.0
    demotion_distance: float = 2.0
    max_level: int = 9

    @property
    def difficulty(self) -> float:
        return self.level / self.max_level


def update_curriculum(cur: CurriculumState, walked_distance: float, terminated_early: bool) -> CurriculumState:
    if walked_distance < 0:
        raise ValueError("walked_distance must be non-negative")
    level = cur.level
    if walked_distance >= cur.promotion_distance:
        level += 1
    elif terminated_early and walked_distance < cur.demotion_distance:
        level -= 1
    return replace(cur, level=int(min(max(level, 0), cur.max_level)))


# -- persistence ----------------------------------------------------------------
_TERRAIN_MAGIC = b"HPTF"


def dump_terrain(path, terrain: HeightField) -> None:
    """Binary dump: magic, family (uint8 len + utf8), difficulty, cell_size, origin (f64), count (uint32), heights."""
    fam = terrain.family.encode()
    header = _TERRAIN_MAGIC + struct.pack("<B", len(fam)) + fam
    header += struct.pack("<dddI", terrain.difficulty, terrain.cell_size, terrain.origin, len(terrain.heights))
    Path(path).write_bytes(header + np.asarray(terrain.heights, dtype="<f8").tobytes())


def load_terrain(path) -> HeightField:
    buf = Path(path).read_bytes()
    if buf[:4] != _TERRAIN_MAGIC:
        raise ValueError(f"{path}: not a terrain dump")
    n_fam = buf[4]
    fam = buf[5:5 + n_fam].decode()
    pos = 5 + n_fam
    diff, cell, origin, count = struct.unpack_from("<dddI", buf, pos)
    pos += struct.calcsize("<dddI")
    heights = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return HeightField(cell, origin, heights, fam, diff)


def export_terrain_csv(path, terrain: HeightField) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "height"])
        for x, h in zip(terrain.xs(), terrain.heights):
            writer.writerow([f"{x:.6f}", f"{h:.9f}"])
