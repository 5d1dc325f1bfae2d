import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpc_locomotion import oracle as orc
from hpc_locomotion.autodiff import Adam, ShapeError, Tensor
from hpc_locomotion.config import RewardConfig, RunConfig
from hpc_locomotion.env import compute_reward
from hpc_locomotion.oracle import (
    OracleNets, RolloutBatch, TrainingAborted, compute_gae, load_teacher, oracle_forward, ppo_losses, ppo_update,
    save_teacher, train_oracle,
)
from hpc_locomotion.sim.observations import PRIVILEGED_DIM, PRIVILEGED_SLICES


def small_cfg():
    cfg = RunConfig()
    p = cfg.ppo
    p.envs, p.horizon, p.minibatches, p.epochs, p.lstm_hidden, p.mlp_hidden = 4, 8, 2, 1, 8, 16
    return cfg


def _obs(rng, b=3):
    obs = rng.standard_normal((b, PRIVILEGED_DIM))
    obs[:, PRIVILEGED_SLICES["scan"]] -= 0.8
    return obs


def test_zero_parameters_give_zero_outputs():
    nets = OracleNets(small_cfg().ppo, np.random.default_rng(0))
    for p in nets.parameters():
        p.data[...] = 0.0
    dist, value, _ = oracle_forward(nets, _obs(np.random.default_rng(1)))
    assert np.all(dist.mean == 0.0) and np.all(value == 0.0)


def test_scan_is_live_and_forward_is_deterministic():
    nets = OracleNets(small_cfg().ppo, np.random.default_rng(0))
    obs = _obs(np.random.default_rng(1))
    d1, v1, _ = oracle_forward(nets, obs)
    d2, v2, _ = oracle_forward(nets, obs.copy())
    assert np.array_equal(d1.mean, d2.mean) and np.array_equal(v1, v2)
    bumped = obs.copy()
    bumped[:, PRIVILEGED_SLICES["scan"]] += 0.1
    d3, v3, _ = oracle_forward(nets, bumped)
    assert not np.allclose(d1.mean, d3.mean) and not np.allclose(v1, v3)


def test_layout_mismatch_raises():
    nets = OracleNets(small_cfg().ppo, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        oracle_forward(nets, np.zeros((2, 40)))


def test_actor_and_critic_disjoint():
    nets = OracleNets(small_cfg().ppo, np.random.default_rng(0))
    a = {id(t) for t in nets.actor_parameters().values()}
    c = {id(t) for t in nets.critic_parameters().values()}
    assert not a & c
    assert len(a) + len(c) == len(nets.parameters())


# -- advantage estimation -----------------------------------------------------

def brute_force_advantages(rewards, values, dones, last_value, gamma, lam):
    """Sum of discounted TD errors, cut after any done (independent of the recursion)."""
    T = len(rewards)
    nxt = np.append(values[1:], last_value)
    delta = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def test_one_step_td():
    adv, ret = compute_gae([[1.0]], [[0.0]], [[True]], [5.0], 0.99, 0.95, normalize=False)
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_gamma_zero_is_myopic():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    adv, _ = compute_gae(r, v, np.zeros((6, 3)), rng.standard_normal(3), 0.0, 0.95, normalize=False)
    assert np.allclose(adv, r - v, atol=1e-15)


def test_hand_trace_five_steps():
    rewards = np.array([1.0, 0.5, -0.2, 2.0, 0.3])
    values = np.array([0.4, 0.1, 0.7, -0.3, 0.2])
    dones = np.array([0, 0, 1, 0, 0], dtype=bool)
    adv, ret = compute_gae(rewards[:, None], values[:, None], dones[:, None], [0.9], 0.9, 0.8, normalize=False)
    expect = brute_force_advantages(rewards, values, dones, 0.9, 0.9, 0.8)
    assert np.allclose(adv[:, 0], expect, atol=1e-13)
    assert np.allclose(ret[:, 0], expect + values, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 0.999), lam=st.floats(0.0, 1.0))
def test_gae_matches_brute_force(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    T = 7
    r, v = rng.standard_normal(T), rng.standard_normal(T)
    d = rng.random(T) < 0.3
    last = rng.standard_normal()
    adv, _ = compute_gae(r[:, None], v[:, None], d[:, None], [last], gamma, lam, normalize=False)
    assert np.allclose(adv[:, 0], brute_force_advantages(r, v, d, last, gamma, lam), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_advantage_normalisation(seed):
    rng = np.random.default_rng(seed)
    r, v = rng.standard_normal((16, 4)) * 3, rng.standard_normal((16, 4))
    adv, _ = compute_gae(r, v, rng.random((16, 4)) < 0.1, rng.standard_normal(4), 0.99, 0.95)
    assert abs(adv.mean()) < 1e-6
    assert abs(adv.std() - 1.0) < 1e-6


# -- PPO losses -----------------------------------------------------------------

def _batch(nets, rng, T=4, B=2, adv=None, action=None, log_ratio=0.0):
    obs = np.stack([_obs(rng, B) for _ in range(T)])
    state = nets.initial_state(B)
    mean, _ = nets.actor(Tensor(obs), state.actor)
    std = np.exp(nets.log_std.data)
    actions = mean.data + 0.1 if action is None else np.broadcast_to(action, mean.shape).copy()
    dist = orc.Gaussian(mean.data, np.broadcast_to(std, mean.shape))
    batch = RolloutBatch(obs, actions, dist.log_prob(actions) - log_ratio, np.zeros((T, B)), np.zeros((T, B)),
                         np.zeros((T, B), bool), np.zeros((T, B), bool), state.copy(), np.zeros(B))
    batch.advantages = np.ones((T, B)) if adv is None else adv
    batch.returns = np.zeros((T, B))
    return batch


def _actor_weight_grad(nets, batch, cfg):
    nets.zero_grad()
    _, _, policy_loss, _, _, _ = ppo_losses(nets, batch, np.arange(batch.obs.shape[1]), cfg)
    policy_loss.backward()
    return nets.actor.head.layers[-1].weight.grad


def test_zero_advantage_gives_no_policy_gradient():
    cfg = small_cfg().ppo
    nets = OracleNets(cfg, np.random.default_rng(0))
    batch = _batch(nets, np.random.default_rng(1), adv=np.zeros((4, 2)))
    g = _actor_weight_grad(nets, batch, cfg)
    assert g is None or np.all(g == 0.0)


def test_clip_flattens_surrogate():
    cfg = small_cfg().ppo
    nets = OracleNets(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    # stored log-probs make the ratio exp(0.5) > 1.2 with positive advantages: clipped, no gradient
    clipped = _batch(nets, rng, log_ratio=0.5)
    g = _actor_weight_grad(nets, clipped, cfg)
    assert g is None or np.all(g == 0.0)
    inside = _batch(nets, np.random.default_rng(1), log_ratio=0.05)
    assert np.abs(_actor_weight_grad(nets, inside, cfg)).max() > 0


def test_clip_probe_finite_difference():
    """Surrogate as a function of the stored log-prob offset is flat beyond the clip range."""
    cfg = small_cfg().ppo
    nets = OracleNets(cfg, np.random.default_rng(0))

    def surrogate(log_ratio):
        b = _batch(nets, np.random.default_rng(3), T=1, B=1, log_ratio=log_ratio)
        return ppo_losses(nets, b, np.arange(1), cfg)[2].item()

    h = 1e-4
    assert abs(surrogate(0.4 + h) - surrogate(0.4 - h)) / (2 * h) < 1e-12
    slope_inside = (surrogate(0.05 + h) - surrogate(0.05 - h)) / (2 * h)
    assert slope_inside == pytest.approx(-np.exp(0.05), rel=1e-6)


def test_update_toward_rewarded_action():
    cfg = small_cfg().ppo
    cfg.epochs, cfg.minibatches = 1, 1
    nets = OracleNets(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    batch = _batch(nets, rng, T=8, B=4, action=np.ones(4), adv=np.ones((8, 4)))
    before, _ = nets.actor(Tensor(batch.obs), batch.initial_state.actor)
    actor_opt = Adam(nets.actor_parameters(), lr=1e-2)
    critic_opt = Adam(nets.critic_parameters(), lr=1e-2)
    ppo_update(nets, batch, cfg, rng, actor_opt, critic_opt)
    after, _ = nets.actor(Tensor(batch.obs), batch.initial_state.actor)
    assert np.all((after.data - before.data).mean(axis=(0, 1)) > 0)


def test_value_loss_does_not_touch_actor():
    cfg = small_cfg().ppo
    nets = OracleNets(cfg, np.random.default_rng(0))
    batch = _batch(nets, np.random.default_rng(1))
    batch.returns = np.full((4, 2), 3.0)
    nets.zero_grad()
    _, critic_loss, *_ = ppo_losses(nets, batch, np.arange(2), cfg)
    critic_loss.backward()
    for name, p in nets.actor_parameters().items():
        assert p.grad is None or np.all(p.grad == 0.0), name
    assert any(p.grad is not None and np.any(p.grad != 0) for p in nets.critic_parameters().values())


def test_update_requires_advantages():
    cfg = small_cfg().ppo
    nets = OracleNets(cfg, np.random.default_rng(0))
    batch = _batch(nets, np.random.default_rng(1))
    batch.advantages = None
    with pytest.raises(ValueError):
        ppo_update(nets, batch, cfg, np.random.default_rng(0), Adam(nets.actor_parameters()),
                   Adam(nets.critic_parameters()))


# -- reward ------------------------------------------------------------------------

def test_reward_perfect_tracking_upright():
    cfg = RewardConfig()
    total, terms = compute_reward(cfg, np.array([0.5]), np.array([0.0]), np.array([0.0]), np.array([0.0]),
                                  np.array([[0.5, 0.0]]), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)),
                                  np.zeros((1, 4)), np.array([False]))
    assert total[0] == pytest.approx(2.0 + 1.0 + 0.5)
    assert set(terms) == {"lin_vel", "ang_vel", "alive", "torque", "action_rate", "joint_limit", "vertical_vel",
                          "orientation", "fall"}


def test_reward_fall_penalty():
    total, _ = compute_reward(RewardConfig(), np.array([0.5]), np.array([0.0]), np.array([0.0]), np.array([0.0]),
                              np.array([[0.5, 0.0]]), np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)),
                              np.zeros((1, 4)), np.array([True]))
    assert total[0] == pytest.approx(3.5 - 100.0)


# -- training loop ------------------------------------------------------------------

def test_training_is_deterministic_and_writes_artifacts(tmp_path):
    cfg = small_cfg()
    cfg.ppo.checkpoint_every = 2
    for run in ("a", "b"):
        train_oracle(cfg, 5, tmp_path / run, iterations=3, families=["flat"])
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = next(csv.reader(a.decode().splitlines()))
    for col in ("iteration", "reward", "E_vel", "E_ang", "M_terrain", "policy_loss", "value_loss"):
        assert col in header
    assert (tmp_path / "a" / "teacher_00002.bin").exists()
    assert (tmp_path / "a" / "teacher.bin").read_bytes() == (tmp_path / "b" / "teacher.bin").read_bytes()


def test_oracle_env_is_noise_free(monkeypatch):
    seen = {}
    real = orc.LocomotionEnv

    def spy(*args, **kwargs):
        seen.update(kwargs)
        return real(*args, **kwargs)

    monkeypatch.setattr(orc, "LocomotionEnv", spy)
    train_oracle(small_cfg(), 0, iterations=1, families=["flat"])
    assert seen["noisy"] is False


def test_nan_parameters_abort_with_checkpoint(tmp_path, monkeypatch):
    cfg = small_cfg()
    cfg.ppo.checkpoint_every = 1
    real = orc.ppo_update
    calls = {"n": 0}

    def poisoned(nets, *args, **kwargs):
        report = real(nets, *args, **kwargs)
        calls["n"] += 1
        if calls["n"] == 2:
            nets.log_std.data[0] = np.nan
        return report

    monkeypatch.setattr(orc, "ppo_update", poisoned)
    with pytest.raises(TrainingAborted) as info:
        train_oracle(cfg, 0, tmp_path, iterations=3, families=["flat"])
    assert info.value.checkpoint.endswith("teacher_00001.bin")


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_cfg()
    nets = OracleNets(cfg.ppo, np.random.default_rng(2))
    save_teacher(tmp_path / "t.bin", nets, cfg)
    back = load_teacher(tmp_path / "t.bin")
    obs = _obs(np.random.default_rng(0))
    assert np.array_equal(oracle_forward(nets, obs)[0].mean, oracle_forward(back, obs)[0].mean)
    with pytest.raises(FileNotFoundError, match="missing teacher checkpoint"):
        load_teacher(tmp_path / "absent.bin")
