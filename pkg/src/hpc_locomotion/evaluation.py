"""Evaluation harness: tracking and terrain metrics per (variant, noise intensity, seed),
aggregated tables, retention ratios and the ablation trainers."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import LstmState, Module, state_dict
from .config import RunConfig
from .env import EpisodeStats, LocomotionEnv
from .oracle import OracleNets, load_teacher
from .sim.observations import PRIVILEGED_SLICES, STUDENT_DIM, STUDENT_SLICES
from .student import DirectPolicyNets, StudentNets, direct_act, load_student, student_act

log = logging.getLogger(__name__)

VARIANTS = ("oracle", "student", "student_no_wm", "student_no_distill")
CHECKPOINT_NAMES = {
    "oracle": "teacher.bin",
    "student": "student.bin",
    "student_no_wm": "student_no_wm.bin",
    "student_no_distill": "student_no_distill.bin",
}
TABLE_COLUMNS = ("variant", "noise", "E_vel", "E_vel_std", "E_ang", "E_ang_std", "M_terrain", "M_terrain_std",
                 "M_reward", "M_reward_std", "episodes", "seeds")
SEED_COLUMNS = ("variant", "noise", "seed", "E_vel", "E_ang", "M_terrain", "M_reward", "episodes")


class MissingCheckpoint(FileNotFoundError):
    pass


def corrupt_privileged(priv: np.ndarray, student_obs: np.ndarray) -> np.ndarray:
    """Privileged observation whose shared fields carry the student's corrupted values."""
    out = priv.copy()
    for name, sl in STUDENT_SLICES.items():
        out[:, PRIVILEGED_SLICES[name]] = student_obs[:, sl]
    return out


class OraclePolicy:
    """Teacher as an evaluation policy; its shared inputs see the same corruption as the student."""

    def __init__(self, nets: OracleNets):
        self.nets = nets
        self.state: LstmState | None = None

    def __call__(self, env: LocomotionEnv) -> np.ndarray:
        if self.state is None:
            self.state = self.nets.actor.lstm.initial_state(env.n)
        self.state.reset(env.episode_start)
        obs = corrupt_privileged(env.priv_obs, env.student_obs) if env.noisy else env.priv_obs
        action, self.state = self.nets.act(obs, self.state)
        return action


class WindowPolicy:
    """Any policy reading the last ``window`` student frames (zero padded at episode start)."""

    def __init__(self, act_fn, window: int):
        self.act_fn = act_fn
        self.window = window
        self.frames: np.ndarray | None = None

    def __call__(self, env: LocomotionEnv) -> np.ndarray:
        if self.frames is None:
            self.frames = np.zeros((env.n, self.window, STUDENT_DIM))
        self.frames[env.episode_start] = 0.0
        self.frames[:, :-1] = self.frames[:, 1:]
        self.frames[:, -1] = env.student_obs
        return self.act_fn(self.frames)


def make_policy(nets: Module):
    if isinstance(nets, OracleNets):
        return OraclePolicy(nets)
    if isinstance(nets, DirectPolicyNets):
        return WindowPolicy(lambda w: direct_act(nets, w), nets.cfg.window)
    if isinstance(nets, StudentNets):
        return WindowPolicy(lambda w: student_act(nets, w), nets.cfg.window)
    if hasattr(nets, "act"):
        return WindowPolicy(nets.act, nets.cfg.window)
    raise TypeError(f"no evaluation policy for {type(nets).__name__}")


@dataclass
class MetricsRow:
    E_vel: float
    E_ang: float
    M_terrain: float
    M_reward: float
    E_vel_std: float
    E_ang_std: float
    M_terrain_std: float
    M_reward_std: float
    episodes: int


def metrics_row(episodes: list[EpisodeStats]) -> MetricsRow:
    """Means and standard deviations over finished episodes (sorted first, so order never matters).

    ``M_terrain`` is the curriculum level each episode leads to under the training promotion rule.
    """
    if not episodes:
        raise ValueError("no finished episodes to aggregate")
    eps = sorted(episodes, key=lambda e: (e.env, e.episode))
    cols = {
        "E_vel": np.array([e.vel_error for e in eps]),
        "E_ang": np.array([e.ang_error for e in eps]),
        "M_terrain": np.array([e.next_level for e in eps], dtype=float),
        "M_reward": np.array([e.reward for e in eps]),
    }
    stats = {k: float(v.mean()) for k, v in cols.items()}
    stats.update({f"{k}_std": float(v.std()) for k, v in cols.items()})
    return MetricsRow(episodes=len(eps), **stats)


@dataclass
class Trace:
    """Per-step dump of one evaluation run for offline checks."""

    lin_vel: list
    ang_vel: list
    commands: list
    done: list


def run_episodes(policy, cfg: RunConfig, seed: int, intensity: float, n_envs: int | None = None,
                 episodes_per_env: int | None = None, families=None, noisy: bool = True,
                 trace: Trace | None = None) -> list[EpisodeStats]:
    """Roll ``policy`` until every env has finished ``episodes_per_env`` episodes.

    Env ``i`` starts at curriculum level ``i mod (max_level + 1)``. The env seed is
    ``eval.seed_offset + seed``, which keeps evaluation streams apart from training runs.
    """
    ecfg = cfg.eval
    n = n_envs or ecfg.envs
    per_env = episodes_per_env or ecfg.episodes_per_env
    levels = [i % (cfg.terrain.max_level + 1) for i in range(n)]
    env = LocomotionEnv(cfg, n, ecfg.seed_offset + seed, noisy=noisy, intensity=intensity,
                        randomize=cfg.noise.dynamics_randomization, start_levels=levels, families=families)
    finished: list[EpisodeStats] = []
    counts = np.zeros(n, dtype=int)
    while np.any(counts < per_env):
        action = policy(env)
        result = env.step(action)
        if trace is not None:
            trace.lin_vel.append(result.tracking[:, 0])
            trace.ang_vel.append(result.tracking[:, 1])
            trace.commands.append(result.tracking[:, 2:])
            trace.done.append(result.done.copy())
        for ep in result.episodes:
            if counts[ep.env] < per_env:
                finished.append(ep)
            counts[ep.env] += 1
    return finished


def parameter_hash(nets: Module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(state_dict(nets).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def load_variant(variant: str, checkpoint_dir) -> Module:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    path = Path(checkpoint_dir) / CHECKPOINT_NAMES[variant]
    if not path.exists():
        raise MissingCheckpoint(f"missing checkpoint for variant {variant!r}: {path}")
    return load_teacher(path) if variant == "oracle" else load_student(path)


def evaluate(policies: dict[str, Module], cfg: RunConfig, noise=None, seeds=None, families=None,
             n_envs: int | None = None, progress=None) -> list[dict]:
    """One record per (variant, intensity, seed); each holds a MetricsRow's fields.

    Every variant runs on the same seeds, so the per-seed records pair up across variants.
    """
    noise = list(cfg.eval.noise if noise is None else noise)
    seeds = list(cfg.eval.seeds if seeds is None else seeds)
    records = []
    for variant, nets in policies.items():
        before = parameter_hash(nets)
        for intensity in noise:
            for seed in seeds:
                eps = run_episodes(make_policy(nets), cfg, seed, intensity, n_envs=n_envs, families=families)
                rec = {"variant": variant, "noise": float(intensity), "seed": int(seed)}
                rec.update(asdict(metrics_row(eps)))
                records.append(rec)
                if progress is not None:
                    progress(rec)
                log.info("%s noise %.2f seed %d: M_terrain %.3f E_vel %.3f", variant, intensity, seed,
                         rec["M_terrain"], rec["E_vel"])
        if parameter_hash(nets) != before:
            raise RuntimeError(f"evaluation modified the parameters of {variant}")
    return records


def aggregate(records: list[dict]) -> list[dict]:
    """Collapse the seed axis: mean of per-seed means, std across all episodes pooled."""
    rows = []
    keys = sorted({(r["variant"], r["noise"]) for r in records}, key=lambda k: (k[1], _variant_order(k[0])))
    for variant, intensity in keys:
        group = sorted((r for r in records if r["variant"] == variant and r["noise"] == intensity),
                       key=lambda r: r["seed"])
        row = {"variant": variant, "noise": intensity}
        total = sum(r["episodes"] for r in group)
        for m in ("E_vel", "E_ang", "M_terrain", "M_reward"):
            weights = np.array([r["episodes"] for r in group], dtype=float)
            means = np.array([r[m] for r in group])
            stds = np.array([r[f"{m}_std"] for r in group])
            pooled_mean = float(np.sum(weights * means) / total)
            pooled_var = float(np.sum(weights * (stds ** 2 + (means - pooled_mean) ** 2)) / total)
            row[m] = pooled_mean
            row[f"{m}_std"] = float(np.sqrt(pooled_var))
        row["episodes"] = total
        row["seeds"] = len(group)
        rows.append(row)
    return rows


def _variant_order(name: str) -> int:
    return VARIANTS.index(name) if name in VARIANTS else len(VARIANTS)


def retention_ratio(level_noisy: float, level_clean: float) -> float:
    """Share of the noise-free terrain level kept under corruption."""
    if level_clean <= 0:
        return float("nan")
    return level_noisy / level_clean


def retention_table(rows: list[dict]) -> list[dict]:
    clean = {r["variant"]: r["M_terrain"] for r in rows if r["noise"] == 0.0}
    return [{"variant": r["variant"], "noise": r["noise"],
             "retention": retention_ratio(r["M_terrain"], clean.get(r["variant"], float("nan")))}
            for r in rows]


def seed_retention(records: list[dict], variant: str, intensity: float) -> dict[int, float]:
    """Per-seed retention of M_terrain at ``intensity`` relative to the same seed at zero noise."""
    clean = {r["seed"]: r["M_terrain"] for r in records if r["variant"] == variant and r["noise"] == 0.0}
    return {r["seed"]: retention_ratio(r["M_terrain"], clean[r["seed"]])
            for r in records if r["variant"] == variant and r["noise"] == intensity and r["seed"] in clean}


def paired_lower_bound(a, b, confidence: float = 0.95) -> tuple[float, float]:
    """Mean of ``a - b`` and its one-sided lower confidence bound (Student t)."""
    from scipy import stats

    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    mean = float(d.mean())
    if len(d) < 2:
        return mean, float("-inf")
    sem = float(d.std(ddof=1) / np.sqrt(len(d)))
    return mean, mean - float(stats.t.ppf(confidence, len(d) - 1)) * sem


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def render_table(rows: list[dict]) -> str:
    """Plain-text table, one block per noise level."""
    lines = ["M_reward is the raw episode return (sum of per-step rewards), not normalised.", ""]
    header = f"{'variant':<20} {'E_vel':>14} {'E_ang':>14} {'M_terrain':>14} {'M_reward':>16} {'episodes':>9}"
    for intensity in sorted({r["noise"] for r in rows}):
        lines.append(f"noise {intensity * 100:.0f}%")
        lines.append(header)
        lines.append("-" * len(header))
        for r in (r for r in rows if r["noise"] == intensity):
            cells = [f"{r[m]:.3f}+-{r[m + '_std']:.3f}" for m in ("E_vel", "E_ang", "M_terrain", "M_reward")]
            lines.append(f"{r['variant']:<20} {cells[0]:>14} {cells[1]:>14} {cells[2]:>14} {cells[3]:>16} "
                         f"{r['episodes']:>9}")
        lines.append("")
    return "\n".join(lines)


def report(records: list[dict], out_dir, plots: bool = True) -> dict:
    """Write table.csv, table.txt, retention.csv, seeds.csv and (optionally) figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(records)
    retention = retention_table(rows)
    write_csv(out / "table.csv", rows, TABLE_COLUMNS)
    write_csv(out / "retention.csv", retention, ("variant", "noise", "retention"))
    write_csv(out / "seeds.csv", sorted(records, key=lambda r: (_variant_order(r["variant"]), r["noise"], r["seed"])),
              SEED_COLUMNS)
    (out / "table.txt").write_text(render_table(rows))
    files = {"table.csv": out / "table.csv", "table.txt": out / "table.txt", "retention.csv": out / "retention.csv",
             "seeds.csv": out / "seeds.csv"}
    if plots:
        from .plotting import plot_metrics, plot_retention

        files["retention.png"] = plot_retention(retention, out / "retention.png")
        files["metrics.png"] = plot_metrics(rows, out / "metrics.png")
    return files
