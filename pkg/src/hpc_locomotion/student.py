"""Deployable student: variational world model over a noisy observation window,
a latent-conditioned policy, DAgger aggregation against the frozen teacher and
the deterministic inference export."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    MLP, Adam, BiLSTM, LstmState, Module, Tensor, load_parameters, load_state_dict, ops, save_parameters, state_dict,
)
from .config import RunConfig, StudentConfig
from .env import LocomotionEnv
from .oracle import OracleNets, TrainingAborted, _obs_scale
from .sim.observations import STUDENT_DIM, STUDENT_SLICES, TARGET_DIM, TARGET_SLICES, nominal_target
from .terrain import SCAN_SIZE

log = logging.getLogger(__name__)

STUDENT_SCALE = _obs_scale(STUDENT_SLICES, STUDENT_DIM)
SCAN = STUDENT_SLICES["scan"]
PROPRIO_WIDTH = SCAN.start
EXPORTED = ("terrain_encoder", "encoder", "mu_head", "policy")


def window_features(terrain_encoder: MLP, encoder: BiLSTM, window) -> Tensor:
    """window [B, H, 40] (oldest first) -> BiLSTM summary [B, 2 * hidden]."""
    x = Tensor(np.ascontiguousarray(np.swapaxes(np.asarray(window, dtype=float), 0, 1)) * STUDENT_SCALE)
    feat = terrain_encoder(x[..., SCAN])
    return encoder.summary(ops.concat([feat, x[..., :PROPRIO_WIDTH]], axis=-1))


class StudentNets(Module):
    """Scan encoder, BiLSTM window encoder with mean and log-sigma heads,
    decoder to the privileged target and a layer-normalised policy."""

    def __init__(self, cfg: StudentConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.terrain_encoder = MLP([SCAN_SIZE, cfg.terrain_hidden, cfg.terrain_latent], rng)
        self.encoder = BiLSTM(cfg.terrain_latent + PROPRIO_WIDTH, cfg.lstm_hidden, rng)
        summary = 2 * cfg.lstm_hidden
        self.mu_head = MLP([summary, cfg.head_hidden, cfg.latent], rng)
        self.log_sigma_head = MLP([summary, cfg.head_hidden, cfg.latent], rng, out_gain=0.1)
        self.decoder = MLP([cfg.latent, cfg.decoder_hidden, TARGET_DIM], rng)
        # targets sit far from zero (heights ~0.9 m); start the output there instead of
        # spending the first few hundred Adam steps walking the bias over
        self.decoder.layers[-1].bias.data[:] = nominal_target()
        self.policy = MLP([cfg.latent, *cfg.policy_hidden, 4], rng, layer_norm=True, out_gain=0.1)


@dataclass
class LatentBelief:
    mu: Tensor
    sigma: Tensor
    log_sigma: Tensor
    z: Tensor


def encode(nets: StudentNets, window, rng: np.random.Generator | None = None, mode: str = "train",
           eta: np.ndarray | None = None) -> LatentBelief:
    """Train mode samples ``z = mu + sigma * eta``; infer mode returns ``z = mu``
    and touches no random generator. ``eta`` overrides the sampled noise."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    h = window_features(nets.terrain_encoder, nets.encoder, window)
    mu = nets.mu_head(h)
    log_sigma = ops.clip(nets.log_sigma_head(h), nets.cfg.log_sigma_min, nets.cfg.log_sigma_max)
    sigma = ops.exp(log_sigma)
    if mode == "infer":
        return LatentBelief(mu, sigma, log_sigma, mu)
    if eta is None:
        eta = rng.standard_normal(mu.shape)
    return LatentBelief(mu, sigma, log_sigma, mu + sigma * eta)


def kl_divergence(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) per row: 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)."""
    return (ops.square(mu) + ops.exp(log_sigma * 2.0) - 1.0 - log_sigma * 2.0).sum(axis=-1) * 0.5


def beta_schedule(t, start: float = 0.01, rate: float = 1e-5, cap: float = 0.5) -> float:
    if t < 0:
        raise ValueError("training step must be non-negative")
    return min(cap, start + rate * t)


def reconstruction_loss(nets: StudentNets, z: Tensor, target) -> Tensor:
    """Unit-variance Gaussian likelihood, i.e. mean squared error over every entry."""
    return ops.square(nets.decoder(z) - np.asarray(target, dtype=float)).mean()


def elbo_loss(nets: StudentNets, window, target, beta: float, rng=None, eta=None, belief=None) -> Tensor:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    belief = belief or encode(nets, window, rng, "train", eta)
    return reconstruction_loss(nets, belief.z, target) + kl_divergence(belief.mu, belief.log_sigma).mean() * beta


def imitation_loss(nets: StudentNets, window, teacher_action, rng=None, eta=None, belief=None) -> Tensor:
    """Mean over batch and action dimensions of the squared action error."""
    belief = belief or encode(nets, window, rng, "train", eta)
    z = ops.stop_gradient(belief.z) if nets.cfg.stop_gradient else belief.z
    return ops.square(nets.policy(z) - np.asarray(teacher_action, dtype=float)).mean()


def student_loss(imitation, elbo, lam: float = 0.5):
    return imitation + lam * elbo


def student_act(nets: StudentNets, window) -> np.ndarray:
    """Deterministic deployment action: policy(mu)."""
    return nets.policy(encode(nets, window, mode="infer").mu).data


# -- no-world-model ablation ---------------------------------------------------

class DirectPolicyNets(Module):
    """Ablation without the latent bottleneck: the policy reads the window summary directly."""

    def __init__(self, cfg: StudentConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.terrain_encoder = MLP([SCAN_SIZE, cfg.terrain_hidden, cfg.terrain_latent], rng)
        self.encoder = BiLSTM(cfg.terrain_latent + PROPRIO_WIDTH, cfg.lstm_hidden, rng)
        self.policy = MLP([2 * cfg.lstm_hidden, *cfg.policy_hidden, 4], rng, layer_norm=True, out_gain=0.1)


def direct_act(nets: DirectPolicyNets, window) -> np.ndarray:
    return nets.policy(window_features(nets.terrain_encoder, nets.encoder, window)).data


# -- dataset aggregation ---------------------------------------------------------

@dataclass
class RoundRecord:
    first_id: int
    steps: int
    n_envs: int
    teacher_state: LstmState


class DaggerBuffer:
    """Aggregated dataset with FIFO eviction.

    Each entry holds one student frame plus the ids of the frames that
    precede it in its window, so windows are rebuilt by gathering instead of
    being stored ``H`` times. A frame that has been evicted reads as zero
    padding, the same as before an episode start.
    """

    def __init__(self, capacity: int, window: int):
        self.capacity = int(capacity)
        self.window = window
        self.total = 0
        self._alloc = 0
        self.frames = np.zeros((0, STUDENT_DIM))
        self.window_ids = np.zeros((0, window), dtype=np.int64)
        self.teacher_actions = np.zeros((0, 4))
        self.executed_actions = np.zeros((0, 4))
        self.targets = np.zeros((0, TARGET_DIM))
        self.privileged = np.zeros((0, 43))
        self.clean_scans = np.zeros((0, SCAN_SIZE))
        self.starts = np.zeros(0, dtype=bool)
        self.rounds: list[RoundRecord] = []

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    @property
    def first_live(self) -> int:
        return self.total - len(self)

    def _grow(self, needed: int) -> None:
        if needed <= self._alloc:
            return
        new = min(self.capacity, max(needed, 2 * self._alloc, 4096))
        for name in ("frames", "window_ids", "teacher_actions", "executed_actions", "targets", "privileged",
                     "clean_scans", "starts"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[: len(old)] = old
            setattr(self, name, arr)
        self._alloc = new

    def append(self, frames, window_ids, teacher_actions, executed_actions, targets, privileged, clean_scans,
               starts) -> np.ndarray:
        """Append a block of entries; returns their global ids."""
        n = len(frames)
        self._grow(min(self.total + n, self.capacity))
        ids = np.arange(self.total, self.total + n)
        slots = ids % self.capacity
        self.frames[slots] = frames
        self.window_ids[slots] = window_ids
        self.teacher_actions[slots] = teacher_actions
        self.executed_actions[slots] = executed_actions
        self.targets[slots] = targets
        self.privileged[slots] = privileged
        self.clean_scans[slots] = clean_scans
        self.starts[slots] = starts
        self.total += n
        return ids

    def slots(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if np.any(ids < self.first_live) or np.any(ids >= self.total):
            raise IndexError("entry id outside the live buffer")
        return ids % self.capacity

    def windows(self, ids) -> np.ndarray:
        slots = self.slots(ids)
        wid = self.window_ids[slots]
        live = wid >= self.first_live
        out = np.zeros(wid.shape + (STUDENT_DIM,))
        out[live] = self.frames[wid[live] % self.capacity]
        return out

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.first_live + rng.integers(0, len(self), size=size)



@dataclass
class DaggerCollector:
    """Persistent student-driven rollout state: the env, rolling windows and the teacher's memory."""

    env: LocomotionEnv
    window: int
    teacher_state: LstmState
    frame_ids: np.ndarray  # [n, H] global ids of the current window, -1 = padding
    frames: np.ndarray  # [n, H, 40]

    @classmethod
    def create(cls, env: LocomotionEnv, teacher: OracleNets, window: int) -> "DaggerCollector":
        n = env.n
        return cls(env, window, teacher.actor.lstm.initial_state(n), np.full((n, window), -1, dtype=np.int64),
                   np.zeros((n, window, STUDENT_DIM)))

    def push(self, obs: np.ndarray) -> None:
        starts = self.env.episode_start
        self.frames[starts] = 0.0
        self.frame_ids[starts] = -1
        self.frames[:, :-1] = self.frames[:, 1:]
        self.frames[:, -1] = obs


def dagger_round(student_act_fn, teacher: OracleNets, collector: DaggerCollector, buffer: DaggerBuffer,
                 steps: int) -> dict:
    """Roll out the student for ``steps`` control steps under corruption, labelling every
    step with the teacher's action on the clean privileged observation."""
    env = collector.env
    n = env.n
    first_id = buffer.total
    t_state = collector.teacher_state
    t_state.reset(env.episode_start)
    buffer.rounds.append(RoundRecord(first_id, steps, n, t_state.copy()))
    episodes = []
    for _ in range(steps):
        starts = env.episode_start.copy()
        t_state.reset(starts)
        collector.push(env.student_obs)
        ids = np.arange(buffer.total, buffer.total + n)
        collector.frame_ids[:, :-1] = collector.frame_ids[:, 1:]
        collector.frame_ids[:, -1] = ids
        window = collector.frames.copy()
        teacher_action, t_state = teacher.act(env.priv_obs, t_state)
        action = student_act_fn(window)
        buffer.append(env.student_obs, collector.frame_ids, teacher_action, action, env.target, env.priv_obs,
                      env.clean_student_obs[:, SCAN], starts)
        result = env.step(action)
        episodes.extend(result.episodes)
    t_state.reset(env.episode_start)
    collector.teacher_state = t_state
    return {"steps": steps * n, "episodes": episodes}


def replay_teacher(buffer: DaggerBuffer, teacher: OracleNets) -> list[tuple[np.ndarray, np.ndarray]]:
    """Recompute teacher labels round by round from the stored privileged
    observations (same batch layout as collection). Returns (stored, replayed)
    pairs for every round still fully in the buffer."""
    pairs = []
    for rec in buffer.rounds:
        if rec.first_id < buffer.first_live:
            continue
        state = rec.teacher_state.copy()
        stored, replayed = [], []
        for t in range(rec.steps):
            ids = np.arange(rec.first_id + t * rec.n_envs, rec.first_id + (t + 1) * rec.n_envs)
            slots = buffer.slots(ids)
            state.reset(buffer.starts[slots])
            action, state = teacher.act(buffer.privileged[slots], state)
            stored.append(buffer.teacher_actions[slots])
            replayed.append(action)
        pairs.append((np.stack(stored), np.stack(replayed)))
    return pairs


# -- training ------------------------------------------------------------------------

STUDENT_COLUMNS = ("update", "imitation_loss", "recon_mse_total", "recon_mse_scan", "kl", "beta",
                   "recon_mse_height", "recon_mse_vel", "recon_mse_contact", "scan_identity_mse", "buffer_size")


def _update_stats(nets: StudentNets, belief: LatentBelief, target, clean_scan, noisy_scan):
    pred = nets.decoder(belief.mu).data
    err = (pred - target) ** 2
    return {
        "recon_mse_total": float(err.mean()),
        "recon_mse_scan": float(err[:, TARGET_SLICES["scan"]].mean()),
        "recon_mse_height": float(err[:, TARGET_SLICES["root_height"]].mean()),
        "recon_mse_vel": float(err[:, TARGET_SLICES["lin_vel"]].mean()),
        "recon_mse_contact": float(err[:, TARGET_SLICES["contact"]].mean()),
        "scan_identity_mse": float(np.mean((noisy_scan - clean_scan) ** 2)),
    }


def save_student(path, nets: Module, cfg: RunConfig, kind: str = "student", meta: dict | None = None) -> None:
    info = {"kind": kind, "student": dataclasses.asdict(cfg.student)}
    info.update(meta or {})
    save_parameters(path, state_dict(nets), info)


def load_student(path) -> Module:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing student checkpoint: {path}")
    params, meta = load_parameters(path)
    cls = {"student": StudentNets, "student_no_distill": StudentNets,
           "student_no_wm": DirectPolicyNets}.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{path} is not a student checkpoint")
    nets = cls(StudentConfig(**meta["student"]), np.random.default_rng(0))
    load_state_dict(nets, params)
    return nets


def _batch_losses(nets, buffer: DaggerBuffer, idx, beta: float, rng, lam: float, world_model: bool):
    windows = buffer.windows(idx)
    slots = buffer.slots(idx)
    teacher_action = buffer.teacher_actions[slots]
    target = buffer.targets[slots]
    if not world_model:
        pred = nets.policy(window_features(nets.terrain_encoder, nets.encoder, windows))
        imit = ops.square(pred - teacher_action).mean()
        return imit, imit, {"kl": 0.0, "beta": 0.0}
    belief = encode(nets, windows, rng, "train")
    imit = imitation_loss(nets, windows, teacher_action, belief=belief)
    kl = kl_divergence(belief.mu, belief.log_sigma).mean()
    elbo = reconstruction_loss(nets, belief.z, target) + kl * beta
    stats = {"kl": kl.item(), "beta": beta}
    stats.update(_update_stats(nets, belief, target, buffer.clean_scans[slots], windows[:, -1, SCAN]))
    return student_loss(imit, elbo, lam), imit, stats


def train_student(cfg: RunConfig, teacher: OracleNets, seed: int, out_dir=None, updates: int | None = None,
                  world_model: bool = True, families=None, progress=None) -> tuple[Module, DaggerBuffer]:
    """Alternate DAgger rounds and minibatch updates of the combined loss.

    Every round adds ``envs * steps_per_round`` labelled steps, then runs
    ``epochs * round_size / minibatch`` updates drawn from the whole aggregate.
    ``world_model=False`` trains the direct-policy ablation on imitation only.
    """
    scfg = cfg.student
    total_updates = scfg.updates if updates is None else updates
    ss = np.random.SeedSequence(seed)
    init_seed, sample_seed, env_seed = ss.spawn(3)
    nets = (StudentNets if world_model else DirectPolicyNets)(scfg, np.random.default_rng(init_seed))
    rng = np.random.default_rng(sample_seed)
    env = LocomotionEnv(cfg, scfg.envs, int(env_seed.generate_state(1)[0]), noisy=True,
                        intensity=cfg.noise.intensity, randomize=cfg.noise.dynamics_randomization,
                        families=families)
    tspec = env.tspec
    env.length_scale = tspec.length_scale_at(0)
    collector = DaggerCollector.create(env, teacher, scfg.window)
    buffer = DaggerBuffer(scfg.buffer_capacity, scfg.window)
    opt = Adam(nets.named_parameters(), lr=scfg.lr, max_grad_norm=1.0)
    act_fn = (lambda w: student_act(nets, w)) if world_model else (lambda w: direct_act(nets, w))
    kind = "student" if world_model else "student_no_wm"
    out = Path(out_dir) if out_dir is not None else None
    handle = writer = None
    last_good = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(STUDENT_COLUMNS)
    done = 0
    try:
        while done < total_updates:
            env.length_scale = tspec.length_scale_at(done)
            info = dagger_round(act_fn, teacher, collector, buffer, scfg.steps_per_round)
            per_round = max(1, scfg.epochs * info["steps"] // scfg.minibatch)
            for _ in range(min(per_round, total_updates - done)):
                beta = beta_schedule(done, scfg.beta_start, scfg.beta_rate, scfg.beta_max)
                idx = buffer.sample(rng, scfg.minibatch)
                loss, imit, stats = _batch_losses(nets, buffer, idx, beta, rng, scfg.imitation_weight_lambda,
                                                  world_model)
                if not np.isfinite(loss.data):
                    raise TrainingAborted(f"non-finite student loss at update {done}", last_good)
                opt.zero_grad()
                loss.backward()
                opt.step()
                done += 1
                row = {"update": done, "imitation_loss": imit.item(), "buffer_size": len(buffer)}
                row.update(stats)
                if writer is not None:
                    writer.writerow([row[c] if c in ("update", "buffer_size") else repr(float(row.get(c, np.nan)))
                                     for c in STUDENT_COLUMNS])
                    if done % scfg.checkpoint_every == 0:
                        last_good = str(out / f"{kind}_{done:05d}.bin")
                        save_student(last_good, nets, cfg, kind, {"update": done, "seed": seed})
                if progress is not None:
                    progress(row)
    finally:
        if handle is not None:
            handle.close()
    if out is not None:
        save_student(out / f"{kind}.bin", nets, cfg, kind, {"update": done, "seed": seed})
    return nets, buffer


def denoising_report(nets: StudentNets, cfg: RunConfig, seed: int, steps: int = 64, intensity: float = 1.0,
                     families=None) -> dict:
    """Scan reconstruction error of decoder(mu) against the clean scan, next to the
    error of the raw corrupted scan, on fresh student-driven rollouts."""
    env = LocomotionEnv(cfg, cfg.student.envs, seed, noisy=True, intensity=intensity,
                        randomize=cfg.noise.dynamics_randomization, families=families)
    env.length_scale = env.tspec.l_end
    frames = np.zeros((env.n, nets.cfg.window, STUDENT_DIM))
    recon, identity = [], []
    for _ in range(steps):
        frames[env.episode_start] = 0.0
        frames[:, :-1] = frames[:, 1:]
        frames[:, -1] = env.student_obs
        belief = encode(nets, frames, mode="infer")
        pred = nets.decoder(belief.mu).data[:, TARGET_SLICES["scan"]]
        clean = env.target[:, TARGET_SLICES["scan"]]
        recon.append(np.mean((pred - clean) ** 2))
        identity.append(np.mean((env.student_obs[:, SCAN] - clean) ** 2))
        env.step(nets.policy(belief.mu).data)
    return {"recon_mse_scan": float(np.mean(recon)), "identity_mse_scan": float(np.mean(identity))}


# -- inference export ------------------------------------------------------------

class InferenceBundle(Module):
    """Scan encoder, BiLSTM encoder, mean head and policy; nothing else."""

    def __init__(self, cfg: StudentConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.terrain_encoder = MLP([SCAN_SIZE, cfg.terrain_hidden, cfg.terrain_latent], rng)
        self.encoder = BiLSTM(cfg.terrain_latent + PROPRIO_WIDTH, cfg.lstm_hidden, rng)
        self.mu_head = MLP([2 * cfg.lstm_hidden, cfg.head_hidden, cfg.latent], rng)
        self.policy = MLP([cfg.latent, *cfg.policy_hidden, 4], rng, layer_norm=True)

    def act(self, window) -> np.ndarray:
        h = window_features(self.terrain_encoder, self.encoder, window)
        return self.policy(self.mu_head(h)).data


def export_inference(nets: StudentNets) -> InferenceBundle:
    bundle = InferenceBundle(nets.cfg)
    full = state_dict(nets)
    load_state_dict(bundle, {k: v.copy() for k, v in full.items() if k.split(".")[0] in EXPORTED})
    return bundle


def save_bundle(path, bundle: InferenceBundle) -> None:
    save_parameters(path, state_dict(bundle), {"kind": "bundle", "student": dataclasses.asdict(bundle.cfg)})


def load_bundle(path) -> InferenceBundle:
    params, meta = load_parameters(path)
    if meta.get("kind") != "bundle":
        raise ValueError(f"{path} is not an inference bundle")
    bundle = InferenceBundle(StudentConfig(**meta["student"]))
    load_state_dict(bundle, params)
    return bundle

