"""Ablation trainers: the direct-policy student (no latent world model) and the
stage-two architecture trained from scratch with PPO plus reconstruction (no teacher)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam, LstmState, Module, Tensor, ops
from .config import RunConfig
from .env import LocomotionEnv
from .oracle import LOG_2PI, Gaussian, OracleNets, RecurrentBranch, TrainingAborted, compute_gae
from .sim.observations import PRIVILEGED_DIM, STUDENT_DIM, TARGET_DIM
from .student import (
    StudentNets, beta_schedule, encode, kl_divergence, reconstruction_loss, save_student, train_student,
)

log = logging.getLogger(__name__)

NO_DISTILL_COLUMNS = ("iteration", "reward", "episodes", "distance", "policy_loss", "value_loss", "entropy",
                      "recon_mse_total", "kl", "beta")


class NoDistillNets(Module):
    """Student network as the actor, a recurrent critic on privileged observations."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.student = StudentNets(cfg.student, rng)
        self.critic = RecurrentBranch(cfg.ppo, 1, rng)
        self.log_std = Tensor(np.full(4, np.log(cfg.ppo.init_std)), requires_grad=True)


@dataclass
class WindowRollout:
    windows: np.ndarray  # [T, B, H, 40]
    priv: np.ndarray  # [T + 1, B, 43]
    targets: np.ndarray  # [T, B, 26]
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    starts: np.ndarray  # [T + 1, B]
    critic_state: LstmState
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


def _collect(nets: NoDistillNets, env: LocomotionEnv, frames: np.ndarray, critic_state: LstmState, horizon: int,
             rng: np.random.Generator, reward_scale: float):
    n, window = env.n, frames.shape[1]
    ro = WindowRollout(np.empty((horizon, n, window, STUDENT_DIM)), np.empty((horizon + 1, n, PRIVILEGED_DIM)),
                       np.empty((horizon, n, TARGET_DIM)), np.empty((horizon, n, 4)), np.empty((horizon, n)),
                       np.empty((horizon, n)), np.empty((horizon, n), dtype=bool),
                       np.empty((horizon + 1, n), dtype=bool), critic_state.copy())
    ro.critic_state.reset(env.episode_start)
    std = np.exp(nets.log_std.data)
    raw, episodes = 0.0, []
    for t in range(horizon):
        ro.starts[t] = env.episode_start
        frames[env.episode_start] = 0.0
        frames[:, :-1] = frames[:, 1:]
        frames[:, -1] = env.student_obs
        mean = nets.student.policy(encode(nets.student, frames, mode="infer").mu).data
        dist = Gaussian(mean, np.broadcast_to(std, mean.shape))
        action = dist.sample(rng)
        ro.windows[t] = frames
        ro.priv[t] = env.priv_obs
        ro.targets[t] = env.target
        ro.actions[t] = action
        ro.log_probs[t] = dist.log_prob(action)
        result = env.step(action)
        ro.rewards[t] = result.reward * reward_scale
        ro.dones[t] = result.done
        raw += float(result.reward.mean())
        episodes.extend(result.episodes)
    ro.starts[horizon] = env.episode_start
    ro.priv[horizon] = env.priv_obs
    keep = 1.0 - ro.starts.astype(float)
    values, new_state = nets.critic(Tensor(ro.priv), ro.critic_state, keep)
    values = values.data[..., 0]
    new_state.reset(env.episode_start)
    ro.advantages, ro.returns = None, None
    return ro, values, new_state, raw / horizon, episodes


def train_no_distill(cfg: RunConfig, seed: int, out_dir=None, iterations: int | None = None, families=None,
                     progress=None) -> NoDistillNets:
    """PPO on the noisy student observation window, with the ELBO as an auxiliary loss.

    The critic reads privileged observations (asymmetric actor-critic); no teacher is involved.
    """
    pcfg, scfg = cfg.ppo, cfg.student
    iterations = pcfg.iterations if iterations is None else iterations
    init_seed, act_seed, env_seed = np.random.SeedSequence(seed).spawn(3)
    nets = NoDistillNets(cfg, np.random.default_rng(init_seed))
    rng = np.random.default_rng(act_seed)
    env = LocomotionEnv(cfg, pcfg.envs, int(env_seed.generate_state(1)[0]), noisy=True,
                        intensity=cfg.noise.intensity, randomize=cfg.noise.dynamics_randomization, families=families)
    actor_params = nets.student.named_parameters("student.")
    actor_params["log_std"] = nets.log_std
    actor_opt = Adam(actor_params, lr=pcfg.lr, max_grad_norm=pcfg.max_grad_norm)
    critic_opt = Adam(nets.critic.named_parameters("critic."), lr=pcfg.lr, max_grad_norm=pcfg.max_grad_norm)
    frames = np.zeros((pcfg.envs, scfg.window, STUDENT_DIM))
    critic_state = nets.critic.lstm.initial_state(pcfg.envs)
    out = Path(out_dir) if out_dir is not None else None
    handle = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(NO_DISTILL_COLUMNS)
    updates = 0
    per = pcfg.envs // pcfg.minibatches
    try:
        for it in range(1, iterations + 1):
            env.length_scale = env.tspec.length_scale_at(updates)
            ro, values, critic_state, step_reward, episodes = _collect(nets, env, frames, critic_state,
                                                                       pcfg.horizon, rng, pcfg.reward_scale)
            adv, returns = compute_gae(ro.rewards, values[:-1], ro.dones, values[-1], pcfg.gamma, pcfg.gae_lambda)
            sums = dict.fromkeys(("policy_loss", "value_loss", "entropy", "recon_mse_total", "kl", "beta"), 0.0)
            count = 0
            for _ in range(pcfg.epochs):
                order = rng.permutation(pcfg.envs)
                for k in range(pcfg.minibatches):
                    envs = np.sort(order[k * per: (k + 1) * per])
                    beta = beta_schedule(updates, scfg.beta_start, scfg.beta_rate, scfg.beta_max)
                    terms = _losses(nets, ro, envs, adv, returns, beta, rng, cfg)
                    total = terms["actor"] + terms["critic"]
                    if not np.isfinite(total.data):
                        log.warning("non-finite loss, minibatch skipped")
                        continue
                    actor_opt.zero_grad()
                    critic_opt.zero_grad()
                    total.backward()
                    actor_opt.step()
                    critic_opt.step()
                    updates += 1
                    count += 1
                    for name in sums:
                        sums[name] += float(terms[name]) if not isinstance(terms[name], Tensor) else terms[name].item()
            if not all(np.all(np.isfinite(p.data)) for p in nets.parameters()):
                raise TrainingAborted(f"non-finite parameters at iteration {it}")
            row = {"iteration": it, "reward": step_reward, "episodes": len(episodes),
                   "distance": float(np.mean([e.distance for e in episodes])) if episodes else float("nan")}
            row.update({k: v / max(count, 1) for k, v in sums.items()})
            if writer is not None:
                writer.writerow([row[c] if c in ("iteration", "episodes") else repr(float(row[c]))
                                 for c in NO_DISTILL_COLUMNS])
            if progress is not None:
                progress(row)
    finally:
        if handle is not None:
            handle.close()
    if out is not None:
        save_student(out / "student_no_distill.bin", nets.student, cfg, "student_no_distill",
                     {"iteration": iterations, "seed": seed})
    return nets


def _losses(nets: NoDistillNets, ro: WindowRollout, envs, adv, returns, beta, rng, cfg: RunConfig) -> dict:
    pcfg = cfg.ppo
    steps = ro.windows.shape[0]
    windows = ro.windows[:, envs].reshape((-1,) + ro.windows.shape[2:])
    belief = encode(nets.student, windows, rng, "train")
    mean = nets.student.policy(belief.mu)
    log_std = nets.log_std
    actions = ro.actions[:, envs].reshape(-1, 4)
    old_logp = ro.log_probs[:, envs].reshape(-1)
    a = adv[:, envs].reshape(-1)
    z = (Tensor(actions) - mean) * ops.exp(-log_std)
    log_prob = (ops.square(z) * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)
    ratio = ops.exp(log_prob - old_logp)
    surrogate = ops.minimum(ratio * a, ops.clip(ratio, 1.0 - pcfg.clip, 1.0 + pcfg.clip) * a)
    policy_loss = -surrogate.mean()
    entropy = (log_std + 0.5 * (1.0 + LOG_2PI)).sum()
    recon = reconstruction_loss(nets.student, belief.z, ro.targets[:, envs].reshape(-1, TARGET_DIM))
    kl = kl_divergence(belief.mu, belief.log_sigma).mean()
    elbo = recon + kl * beta
    keep = 1.0 - ro.starts[:, envs].astype(float)
    state = LstmState(ro.critic_state.hidden[:, envs], ro.critic_state.cell[:, envs])
    value, _ = nets.critic(Tensor(ro.priv[:, envs]), state, keep)
    value_loss = ops.square(value[:steps, :, 0] - returns[:, envs]).mean()
    return {
        "actor": policy_loss - pcfg.entropy_coef * entropy + elbo * cfg.student.imitation_weight_lambda,
        "critic": value_loss * pcfg.value_coef,
        "policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy,
        "recon_mse_total": recon, "kl": kl, "beta": beta,
    }


def train_ablations(cfg: RunConfig, teacher: OracleNets, seed: int, out_dir, families=None,
                    no_distill_iterations: int | None = None) -> dict[str, Path]:
    """Checkpoints for both ablations under ``out_dir/<variant>/``."""
    out = Path(out_dir)
    train_student(cfg, teacher, seed, out / "student_no_wm", world_model=False, families=families)
    train_no_distill(cfg, seed, out / "student_no_distill", iterations=no_distill_iterations, families=families)
    return {"student_no_wm": out / "student_no_wm" / "student_no_wm.bin",
            "student_no_distill": out / "student_no_distill" / "student_no_distill.bin"}
