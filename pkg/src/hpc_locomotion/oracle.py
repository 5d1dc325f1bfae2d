"""Privileged teacher: recurrent actor-critic trained with PPO and GAE."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LSTM, MLP, Adam, LstmState, Module, Tensor, load_parameters, ops, save_parameters, state_dict
from .autodiff.checkpoint import load_state_dict
from .autodiff.tensor import ShapeError
from .config import PpoConfig, RunConfig, to_dict
from .env import LocomotionEnv
from .sim.observations import PRIVILEGED_DIM, PRIVILEGED_SLICES
from .terrain import SCAN_SIZE

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
SCAN = PRIVILEGED_SLICES["scan"]


def _obs_scale(slices: dict, dim: int) -> np.ndarray:
    """Fixed per-field input scaling so every field is roughly unit sized."""
    scale = np.ones(dim)
    for name, factor in (("joint_vel", 0.1), ("ang_vel", 0.25), ("contact_force", 0.005), ("lin_vel", 0.5)):
        if name in slices:
            scale[slices[name]] = factor
    return scale


PRIVILEGED_SCALE = _obs_scale(PRIVILEGED_SLICES, PRIVILEGED_DIM)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message if checkpoint is None else f"{message} (last good checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


class RecurrentBranch(Module):
    """Scan encoder, concatenation with the remaining observation, LSTM, MLP head."""

    def __init__(self, cfg: PpoConfig, n_out: int, rng: np.random.Generator, out_gain: float = 1.0):
        self.terrain_encoder = MLP([SCAN_SIZE, cfg.terrain_hidden, cfg.terrain_latent], rng)
        self.lstm = LSTM(cfg.terrain_latent + PRIVILEGED_DIM - SCAN_SIZE, cfg.lstm_hidden, rng)
        self.head = MLP([cfg.lstm_hidden, cfg.mlp_hidden, n_out], rng, out_gain=out_gain)

    def __call__(self, obs: Tensor, state: LstmState, keep=None):
        """obs [T, B, 43] -> outputs [T, B, n_out] and the carried state."""
        x = obs * PRIVILEGED_SCALE
        feat = self.terrain_encoder(x[..., SCAN])
        proprio = x[..., : SCAN.start]
        hidden, new_state = self.lstm(ops.concat([feat, proprio], axis=-1), state, keep)
        return self.head(hidden), new_state


class OracleNets(Module):
    """Actor and critic with disjoint parameters and identical backbone shapes."""

    def __init__(self, cfg: PpoConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.actor = RecurrentBranch(cfg, 4, rng, out_gain=0.01)
        self.critic = RecurrentBranch(cfg, 1, rng)
        self.log_std = Tensor(np.full(4, np.log(cfg.init_std)), requires_grad=True)

    def actor_parameters(self) -> dict[str, Tensor]:
        params = self.actor.named_parameters("actor.")
        params["log_std"] = self.log_std
        return params

    def critic_parameters(self) -> dict[str, Tensor]:
        return self.critic.named_parameters("critic.")

    def initial_state(self, batch: int) -> "OracleState":
        return OracleState(self.actor.lstm.initial_state(batch), self.critic.lstm.initial_state(batch))

    def act(self, obs: np.ndarray, state: LstmState) -> tuple[np.ndarray, LstmState]:
        """Deterministic (mean) actions for a single step of ``obs`` [B, 43]."""
        _check_obs(obs)
        mean, new_state = self.actor(Tensor(obs[None]), state)
        return mean.data[0], new_state


@dataclass
class OracleState:
    actor: LstmState
    critic: LstmState

    def reset(self, mask: np.ndarray) -> None:
        self.actor.reset(mask)
        self.critic.reset(mask)

    def copy(self) -> "OracleState":
        return OracleState(self.actor.copy(), self.critic.copy())


@dataclass
class Gaussian:
    mean: np.ndarray
    std: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return np.sum(-0.5 * z * z - np.log(self.std) - 0.5 * LOG_2PI, axis=-1)


def _check_obs(obs) -> None:
    if np.shape(obs)[-1] != PRIVILEGED_DIM:
        raise ShapeError(f"privileged observation must have width {PRIVILEGED_DIM}, got shape {np.shape(obs)}")


def oracle_forward(nets: OracleNets, obs: np.ndarray, state: OracleState | None = None):
    """One step: obs [B, 43] -> (action Gaussian, value [B], new state)."""
    _check_obs(obs)
    obs = np.asarray(obs, dtype=float)
    if state is None:
        state = nets.initial_state(obs.shape[0])
    x = Tensor(obs[None])
    mean, actor_state = nets.actor(x, state.actor)
    value, critic_state = nets.critic(x, state.critic)
    std = np.broadcast_to(np.exp(nets.log_std.data), mean.shape[1:])
    return Gaussian(mean.data[0], std), value.data[0, :, 0], OracleState(actor_state, critic_state)


@dataclass
class RolloutBatch:
    obs: np.ndarray  # [T, B, 43]
    actions: np.ndarray  # [T, B, 4]
    log_probs: np.ndarray  # [T, B]
    rewards: np.ndarray  # [T, B]
    values: np.ndarray  # [T, B]
    dones: np.ndarray  # [T, B]
    starts: np.ndarray  # [T, B], state reset before step t
    initial_state: OracleState
    last_value: np.ndarray  # [B]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float, normalize: bool = True):
    """Generalised advantage estimation; a done at t cuts the bootstrap from t+1."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    steps = len(rewards)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    next_value = np.asarray(last_value, dtype=float)
    for t in range(steps - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    returns = adv + values
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


@dataclass
class LossReport:
    policy: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    skipped: int = 0


def ppo_losses(nets: OracleNets, batch: RolloutBatch, envs, cfg: PpoConfig):
    """Clipped surrogate, value and entropy terms for the env columns ``envs``."""
    obs = Tensor(batch.obs[:, envs])
    keep = 1.0 - batch.starts[:, envs].astype(float)
    a_state = LstmState(batch.initial_state.actor.hidden[:, envs], batch.initial_state.actor.cell[:, envs])
    c_state = LstmState(batch.initial_state.critic.hidden[:, envs], batch.initial_state.critic.cell[:, envs])
    mean, _ = nets.actor(obs, a_state, keep)
    value, _ = nets.critic(obs, c_state, keep)
    log_std = nets.log_std
    actions = batch.actions[:, envs]
    z = (Tensor(actions) - mean) * ops.exp(-log_std)
    log_prob = (ops.square(z) * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)
    ratio = ops.exp(log_prob - batch.log_probs[:, envs])
    adv = batch.advantages[:, envs]
    surrogate = ops.minimum(ratio * adv, ops.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
    policy_loss = -surrogate.mean()
    entropy = (log_std + 0.5 * (1.0 + LOG_2PI)).sum()
    value_loss = ops.square(value[..., 0] - batch.returns[:, envs]).mean()
    actor_loss = policy_loss - cfg.entropy_coef * entropy
    critic_loss = value_loss * cfg.value_coef
    log_ratio = log_prob.data - batch.log_probs[:, envs]
    stats = {
        "approx_kl": float(np.mean(np.exp(log_ratio) - 1.0 - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip)),
    }
    return actor_loss, critic_loss, policy_loss, value_loss, entropy, stats


def ppo_update(nets: OracleNets, batch: RolloutBatch, cfg: PpoConfig, rng: np.random.Generator,
               actor_opt: Adam, critic_opt: Adam) -> LossReport:
    """Epochs of minibatch updates; minibatches are groups of whole env sequences
    so the LSTM is replayed from the stored initial state (truncated BPTT)."""
    if batch.advantages is None:
        raise ValueError("compute advantages before updating")
    n_envs = batch.obs.shape[1]
    per = n_envs // cfg.minibatches
    report = LossReport()
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n_envs)
        for k in range(cfg.minibatches):
            envs = np.sort(order[k * per: (k + 1) * per])
            actor_loss, critic_loss, pl, vl, ent, stats = ppo_losses(nets, batch, envs, cfg)
            if not (np.isfinite(actor_loss.data) and np.isfinite(critic_loss.data)):
                log.warning("non-finite PPO loss, minibatch skipped")
                report.skipped += 1
                continue
            actor_opt.zero_grad()
            critic_opt.zero_grad()
            (actor_loss + critic_loss).backward()
            actor_opt.step()
            critic_opt.step()
            report.policy += pl.item()
            report.value += vl.item()
            report.entropy += ent.item()
            report.approx_kl += stats["approx_kl"]
            report.clip_fraction += stats["clip_fraction"]
            count += 1
    if count:
        for name in ("policy", "value", "entropy", "approx_kl", "clip_fraction"):
            setattr(report, name, getattr(report, name) / count)
    return report


@dataclass
class RolloutStats:
    step_reward: float = 0.0
    episodes: list = field(default_factory=list)


def collect_rollout(nets: OracleNets, env: LocomotionEnv, state: OracleState, horizon: int,
                    rng: np.random.Generator, reward_scale: float) -> tuple[RolloutBatch, OracleState, RolloutStats]:
    """Step the actor for ``horizon`` steps. The critic does not influence
    actions, so its values are computed afterwards in one sequence pass."""
    n = env.n
    obs_buf = np.empty((horizon + 1, n, PRIVILEGED_DIM))
    act_buf = np.empty((horizon, n, 4))
    logp_buf = np.empty((horizon, n))
    rew_buf = np.empty((horizon, n))
    done_buf = np.empty((horizon, n), dtype=bool)
    start_buf = np.empty((horizon + 1, n), dtype=bool)
    state.reset(env.episode_start)
    initial = state.copy()
    stats = RolloutStats()
    raw = 0.0
    std = np.exp(nets.log_std.data)
    actor_state = state.actor
    for t in range(horizon):
        start_buf[t] = env.episode_start
        actor_state.reset(env.episode_start)
        obs = env.priv_obs
        mean, actor_state = nets.act(obs, actor_state)
        dist = Gaussian(mean, np.broadcast_to(std, mean.shape))
        action = dist.sample(rng)
        obs_buf[t] = obs
        act_buf[t] = action
        logp_buf[t] = dist.log_prob(action)
        result = env.step(action)
        rew_buf[t] = result.reward * reward_scale
        raw += float(result.reward.mean())
        done_buf[t] = result.done
        stats.episodes.extend(result.episodes)
    start_buf[horizon] = env.episode_start
    obs_buf[horizon] = env.priv_obs
    keep = 1.0 - start_buf.astype(float)
    values, critic_state = nets.critic(Tensor(obs_buf), initial.critic, keep)
    values = values.data[..., 0]
    critic_state.reset(env.episode_start)
    actor_state.reset(env.episode_start)
    stats.step_reward = raw / horizon
    batch = RolloutBatch(obs_buf[:horizon], act_buf, logp_buf, rew_buf, values[:horizon], done_buf,
                         start_buf[:horizon], initial, values[horizon])
    return batch, OracleState(actor_state, critic_state), stats


METRIC_COLUMNS = ("iteration", "reward", "episode_reward", "episodes", "distance", "E_vel", "E_ang", "M_terrain",
                  "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")


def _finite(nets: Module) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in nets.parameters())


def save_teacher(path, nets: OracleNets, cfg: RunConfig, meta: dict | None = None) -> None:
    info = {"kind": "teacher", "ppo": to_dict(cfg)["ppo"]}
    info.update(meta or {})
    save_parameters(path, state_dict(nets), info)


def load_teacher(path) -> OracleNets:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing teacher checkpoint: {path}")
    params, meta = load_parameters(path)
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path} is not a teacher checkpoint")
    nets = OracleNets(PpoConfig(**meta["ppo"]), np.random.default_rng(0))
    load_state_dict(nets, params)
    return nets


def train_oracle(cfg: RunConfig, seed: int, out_dir=None, iterations: int | None = None,
                 families=None, progress=None) -> OracleNets:
    """Rollout, GAE, PPO update; the curriculum advances on every finished episode.

    Writes ``metrics.csv`` and periodic ``teacher_<iter>.bin`` plus
    ``teacher.bin`` to ``out_dir`` when given.
    """
    pcfg = cfg.ppo
    iterations = pcfg.iterations if iterations is None else iterations
    ss = np.random.SeedSequence(seed)
    init_seed, act_seed, env_seed = ss.spawn(3)
    nets = OracleNets(pcfg, np.random.default_rng(init_seed))
    rng = np.random.default_rng(act_seed)
    env = LocomotionEnv(cfg, pcfg.envs, int(env_seed.generate_state(1)[0]), noisy=False,
                        randomize=cfg.noise.oracle_dynamics_randomization, families=families)
    actor_opt = Adam(nets.actor_parameters(), lr=pcfg.lr, max_grad_norm=pcfg.max_grad_norm)
    critic_opt = Adam(nets.critic_parameters(), lr=pcfg.lr, max_grad_norm=pcfg.max_grad_norm)
    state = nets.initial_state(pcfg.envs)
    out = Path(out_dir) if out_dir is not None else None
    writer = handle = None
    last_good = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(METRIC_COLUMNS)
    try:
        for it in range(1, iterations + 1):
            batch, state, stats = collect_rollout(nets, env, state, pcfg.horizon, rng, pcfg.reward_scale)
            batch.advantages, batch.returns = compute_gae(batch.rewards, batch.values, batch.dones,
                                                          batch.last_value, pcfg.gamma, pcfg.gae_lambda)
            report = ppo_update(nets, batch, pcfg, rng, actor_opt, critic_opt)
            if not _finite(nets):
                raise TrainingAborted(f"non-finite parameters at iteration {it}", last_good)
            eps = stats.episodes
            row = {
                "iteration": it,
                "reward": stats.step_reward,
                "episode_reward": np.mean([e.reward for e in eps]) if eps else np.nan,
                "episodes": len(eps),
                "distance": np.mean([e.distance for e in eps]) if eps else np.nan,
                "E_vel": np.mean([e.vel_error for e in eps]) if eps else np.nan,
                "E_ang": np.mean([e.ang_error for e in eps]) if eps else np.nan,
                "M_terrain": float(env.levels.mean()),
                "policy_loss": report.policy,
                "value_loss": report.value,
                "entropy": report.entropy,
                "approx_kl": report.approx_kl,
                "clip_fraction": report.clip_fraction,
            }
            if writer is not None:
                writer.writerow([repr(float(row[c])) if c != "iteration" and c != "episodes" else row[c]
                                 for c in METRIC_COLUMNS])
                handle.flush()
                if it % pcfg.checkpoint_every == 0 or it == iterations:
                    last_good = str(out / f"teacher_{it:05d}.bin")
                    save_teacher(last_good, nets, cfg, {"iteration": it, "seed": seed})
            if progress is not None:
                progress(row)
            log.info("iter %d reward %.3f dist %.2f level %.2f", it, row["reward"], row["distance"],
                     row["M_terrain"])
    finally:
        if handle is not None:
            handle.close()
    if out is not None:
        save_teacher(out / "teacher.bin", nets, cfg, {"iteration": iterations, "seed": seed})
    return nets
