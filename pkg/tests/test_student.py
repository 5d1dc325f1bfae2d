import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from hpc_locomotion.autodiff import Tensor, state_dict
from hpc_locomotion.config import RunConfig, StudentConfig
from hpc_locomotion.env import LocomotionEnv
from hpc_locomotion.oracle import OracleNets
from hpc_locomotion.sim.observations import STUDENT_DIM
from hpc_locomotion import student as S


def small_student_cfg(**kw):
    base = dict(window=4, latent=6, lstm_hidden=8, terrain_hidden=8, terrain_latent=4, decoder_hidden=8,
                policy_hidden=[8, 8], head_hidden=8)
    base.update(kw)
    return StudentConfig(**base)


def _windows(rng, b=5, h=4):
    w = rng.standard_normal((b, h, STUDENT_DIM)) * 0.5
    return w


class CountingRng:
    """Stands in for a Generator and counts every draw."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self.rng, name)

        def counted(*a, **k):
            self.calls += 1
            return attr(*a, **k)

        return counted


# -- KL, beta, losses ------------------------------------------------------------------

def test_kl_known_values():
    assert S.kl_divergence(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 5)))).item() == 0.0
    mu = np.zeros((1, 5))
    mu[0, 0] = 1.0
    assert S.kl_divergence(Tensor(mu), Tensor(np.zeros((1, 5)))).item() == 0.5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_nonnegative_and_zero_only_at_prior(seed):
    rng = np.random.default_rng(seed)
    mu = rng.normal(0, 1, (3, 4))
    ls = rng.uniform(-2, 1, (3, 4))
    kl = S.kl_divergence(Tensor(mu), Tensor(ls)).data
    assert np.all(kl >= 0)
    assert np.all(kl > 1e-9) or np.allclose(mu, 0) and np.allclose(ls, 0)


def test_beta_schedule_values():
    assert S.beta_schedule(0) == 0.01
    assert S.beta_schedule(49_000) == 0.5
    assert S.beta_schedule(10**6) == 0.5
    assert S.beta_schedule(1000) == pytest.approx(0.02)
    with pytest.raises(ValueError):
        S.beta_schedule(-1)


def test_student_loss_arithmetic():
    assert S.student_loss(1.0, 2.0) == 2.0
    assert S.student_loss(0.0, 0.0) == 0.0


def test_imitation_offset_is_delta_squared():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    w = _windows(np.random.default_rng(1))
    eta = np.zeros((5, 6))
    belief = S.encode(nets, w, mode="train", eta=eta)
    out = nets.policy(belief.z).data
    for delta in (0.0, 0.3, -1.5):
        loss = S.imitation_loss(nets, w, out + delta, belief=belief).item()
        assert loss == pytest.approx(delta ** 2, rel=1e-12, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_imitation_nonnegative(seed):
    rng = np.random.default_rng(seed)
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    assert S.imitation_loss(nets, _windows(rng), rng.standard_normal((5, 4)), rng).item() >= 0


def test_elbo_rejects_negative_beta():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        S.elbo_loss(nets, _windows(np.random.default_rng(0)), np.zeros((5, 26)), -0.1, np.random.default_rng(0))


# -- encoder -------------------------------------------------------------------------

def test_infer_mode_deterministic_and_draws_nothing():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    w = _windows(np.random.default_rng(1))
    rng = CountingRng()
    state = np.random.get_state()[1].copy()
    a = S.encode(nets, w, rng, mode="infer")
    b = S.encode(nets, w, rng, mode="infer")
    assert rng.calls == 0
    assert np.array_equal(np.random.get_state()[1], state)
    assert np.array_equal(a.z.data, b.z.data) and np.array_equal(a.z.data, a.mu.data)
    S.encode(nets, w, rng, mode="train")
    assert rng.calls == 1


def test_unit_sigma_when_log_sigma_zero():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    for p in nets.log_sigma_head.parameters():
        p.data[...] = 0.0
    belief = S.encode(nets, _windows(np.random.default_rng(1)), mode="infer")
    assert np.all(belief.sigma.data == 1.0)


def test_log_sigma_clamped():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    last = nets.log_sigma_head.layers[-1]
    last.bias.data[:] = 50.0
    belief = S.encode(nets, _windows(np.random.default_rng(1)), mode="infer")
    assert np.all(belief.log_sigma.data == 2.0)
    last.bias.data[:] = -50.0
    belief = S.encode(nets, _windows(np.random.default_rng(1)), mode="infer")
    assert np.all(belief.log_sigma.data == -5.0)


def test_reparameterised_samples_centre_on_mu():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    w = np.repeat(_windows(np.random.default_rng(1), b=1), 10_000, axis=0)
    belief = S.encode(nets, w, np.random.default_rng(2), mode="train")
    mu, sigma = belief.mu.data[0], belief.sigma.data[0]
    assert np.all(np.abs(belief.z.data.mean(axis=0) - mu) < 3 * sigma / np.sqrt(10_000) + 1e-12)


def test_elbo_gradient_through_reparameterisation():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    w, target = _windows(rng, b=3), rng.standard_normal((3, 26))
    eta = rng.standard_normal((3, 6))
    for p in (nets.mu_head.layers[0].weight, nets.log_sigma_head.layers[-1].bias):
        nets.zero_grad()
        S.elbo_loss(nets, w, target, 0.3, eta=eta).backward()

        def f(arr, p=p):
            old = p.data.copy()
            p.data[...] = arr
            val = S.elbo_loss(nets, w, target, 0.3, eta=eta).item()
            p.data[...] = old
            return val

        assert rel_error(p.grad, numeric_grad(f, p.data.copy())) < 1e-3


def test_joint_loss_gradient_is_linear_combination():
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    w, target, act = _windows(rng, b=3), rng.standard_normal((3, 26)), rng.standard_normal((3, 4))
    eta = rng.standard_normal((3, 6))
    p = nets.encoder.fwd.w_ih

    def grad_of(build):
        nets.zero_grad()
        build().backward()
        return p.grad.copy()

    g_imit = grad_of(lambda: S.imitation_loss(nets, w, act, eta=eta))
    g_elbo = grad_of(lambda: S.elbo_loss(nets, w, target, 0.2, eta=eta))
    g_joint = grad_of(lambda: S.student_loss(S.imitation_loss(nets, w, act, eta=eta),
                                             S.elbo_loss(nets, w, target, 0.2, eta=eta)))
    assert np.allclose(g_joint, g_imit + 0.5 * g_elbo, rtol=1e-10, atol=1e-14)

    def f(arr):
        old = p.data.copy()
        p.data[...] = arr
        val = S.student_loss(S.imitation_loss(nets, w, act, eta=eta), S.elbo_loss(nets, w, target, 0.2, eta=eta))
        p.data[...] = old
        return val.item()

    assert rel_error(g_joint, numeric_grad(f, p.data.copy())) < 1e-4


def test_stop_gradient_flag_blocks_imitation_into_encoder():
    nets = S.StudentNets(small_student_cfg(stop_gradient=True), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    nets.zero_grad()
    S.imitation_loss(nets, _windows(rng), rng.standard_normal((5, 4)), rng).backward()
    assert nets.encoder.fwd.w_ih.grad is None or np.all(nets.encoder.fwd.w_ih.grad == 0)
    assert np.any(nets.policy.layers[0].weight.grad != 0)


def test_window_is_causal_in_time_order():
    """Only the supplied trailing window matters; earlier frames are padding zeros."""
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    w = _windows(np.random.default_rng(1), b=1)
    padded = w.copy()
    padded[:, :2] = 0.0
    a = S.student_act(nets, padded)
    b = S.student_act(nets, padded.copy())
    assert np.array_equal(a, b)
    assert not np.array_equal(S.student_act(nets, w), a)


# -- DAgger ----------------------------------------------------------------------------------

def dagger_setup(n=3, window=4, capacity=10_000):
    cfg = RunConfig()
    cfg.ppo.lstm_hidden, cfg.ppo.mlp_hidden = 8, 8
    cfg.student = small_student_cfg(window=window)
    teacher = OracleNets(cfg.ppo, np.random.default_rng(0))
    env = LocomotionEnv(cfg, n, 3, noisy=True, families=["flat"])
    collector = S.DaggerCollector.create(env, teacher, window)
    buffer = S.DaggerBuffer(capacity, window)
    return cfg, teacher, env, collector, buffer


def test_buffer_size_is_sum_of_rounds_and_actions_are_students():
    cfg, teacher, env, collector, buffer = dagger_setup()
    nets = S.StudentNets(cfg.student, np.random.default_rng(1))
    executed = []

    def act(w):
        a = S.student_act(nets, w)
        executed.append(a)
        return a

    S.dagger_round(act, teacher, collector, buffer, 10)
    S.dagger_round(act, teacher, collector, buffer, 7)
    assert len(buffer) == 3 * 17
    assert np.array_equal(buffer.executed_actions[:51], np.concatenate(executed))
    assert not np.array_equal(buffer.executed_actions[:51], buffer.teacher_actions[:51])


def test_replay_is_bit_exact_and_teacher_frozen():
    cfg, teacher, env, collector, buffer = dagger_setup()
    before = {k: v.copy() for k, v in state_dict(teacher).items()}
    S.dagger_round(lambda w: np.zeros((3, 4)), teacher, collector, buffer, 30)
    S.dagger_round(lambda w: np.full((3, 4), 0.2), teacher, collector, buffer, 20)
    for stored, replayed in S.replay_teacher(buffer, teacher):
        assert np.array_equal(stored, replayed)
    after = state_dict(teacher)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_windows_rebuild_and_episode_start_padding():
    cfg, teacher, env, collector, buffer = dagger_setup(n=2, window=4)
    S.dagger_round(lambda w: np.zeros((2, 4)), teacher, collector, buffer, 6)
    w = buffer.windows(np.arange(len(buffer)))
    # entry k of env e is at id 2*k + e; its window ends with its own frame
    assert np.array_equal(w[:, -1], buffer.frames[:len(buffer)])
    # the first step of the run has three padded slots
    assert np.all(w[0, :-1] == 0.0) and np.all(w[1, :-1] == 0.0)
    assert np.array_equal(w[4, -3], buffer.frames[0])


def test_eviction_turns_old_frames_into_padding():
    buf = S.DaggerBuffer(capacity=4, window=2)
    frames = np.arange(6 * STUDENT_DIM, dtype=float).reshape(6, STUDENT_DIM) + 1.0
    for k in range(6):
        ids = np.array([[k - 1 if k else -1, k]])
        buf.append(frames[k:k + 1], ids, np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 26)), np.zeros((1, 43)),
                   np.zeros((1, 21)), np.array([k == 0]))
    assert len(buf) == 4 and buf.first_live == 2
    w = buf.windows([2, 5])
    assert np.all(w[0, 0] == 0.0) and np.array_equal(w[0, 1], frames[2])
    assert np.array_equal(w[1, 0], frames[4])
    with pytest.raises(IndexError):
        buf.windows([1])


def test_train_student_logs_required_columns_and_is_deterministic(tmp_path):
    cfg, teacher, *_ = dagger_setup()
    cfg.student.envs, cfg.student.steps_per_round, cfg.student.minibatch = 3, 8, 8
    for run in ("a", "b"):
        S.train_student(cfg, teacher, 4, tmp_path / run, updates=5, families=["flat"])
    a = (tmp_path / "a" / "metrics.csv").read_text()
    assert a == (tmp_path / "b" / "metrics.csv").read_text()
    header = a.splitlines()[0].split(",")
    assert header[:6] == ["update", "imitation_loss", "recon_mse_total", "recon_mse_scan", "kl", "beta"]
    assert len(a.splitlines()) == 6
    loaded = S.load_student(tmp_path / "a" / "student.bin")
    assert isinstance(loaded, S.StudentNets)


def test_no_world_model_variant_has_no_decoder(tmp_path):
    cfg, teacher, *_ = dagger_setup()
    cfg.student.envs, cfg.student.steps_per_round, cfg.student.minibatch = 3, 4, 8
    nets, _ = S.train_student(cfg, teacher, 0, tmp_path, updates=2, world_model=False, families=["flat"])
    names = state_dict(S.load_student(tmp_path / "student_no_wm.bin"))
    assert not any(k.startswith(("decoder", "mu_head", "log_sigma_head")) for k in names)


# -- export ---------------------------------------------------------------------------------------

def test_bundle_matches_full_model_and_drops_decoder(tmp_path):
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    bundle = S.export_inference(nets)
    names = state_dict(bundle)
    assert not any(k.startswith(("decoder", "log_sigma_head")) for k in names)
    assert bundle.num_parameters() < nets.num_parameters()
    S.save_bundle(tmp_path / "b.bin", bundle)
    loaded = S.load_bundle(tmp_path / "b.bin")
    w = _windows(np.random.default_rng(1), b=20)
    assert np.array_equal(loaded.act(w), S.student_act(nets, w))
    with pytest.raises(ValueError):
        S.load_student(tmp_path / "b.bin")


def test_decoder_starts_at_nominal_target():
    from hpc_locomotion.sim.observations import TARGET_SLICES, nominal_target
    from hpc_locomotion.sim.walker import standing_height

    nominal = nominal_target()
    assert nominal[TARGET_SLICES["root_height"]][0] == standing_height()
    assert np.all(nominal[TARGET_SLICES["scan"]] == -standing_height())
    nets = S.StudentNets(small_student_cfg(), np.random.default_rng(0))
    assert np.array_equal(nets.decoder.layers[-1].bias.data, nominal)
