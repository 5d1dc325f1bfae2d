import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpc_locomotion.autodiff import (
    Adam, AdamState, BiLSTM, LSTM, LayerNorm, Linear, MLP, NonFiniteGradient, ShapeError, Tensor,
    adam_step, load_parameters, lstm_forward, ops, save_parameters, state_dict,
)

from gradcheck import numeric_grad, rel_error

UNARY = {
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "exp": ops.exp,
    "elu": ops.elu,
    "square": ops.square,
    "softmax": lambda t: ops.softmax(t, axis=-1),
    "sum": lambda t: t.sum(axis=0),
    "mean": lambda t: t.mean(axis=1, keepdims=True),
    "slice": lambda t: t[1:, ::2],
    "reshape": lambda t: t.reshape(-1),
    "transpose": lambda t: t.T,
}


def _check_unary(fn, x, weights):
    xt = Tensor(x.copy(), requires_grad=True)
    (fn(xt) * weights).sum().backward()

    def f(arr):
        return float(np.sum(fn(Tensor(arr)).data * weights))

    return rel_error(xt.grad, numeric_grad(f, x.copy()))


def test_basic_values():
    m = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    assert np.array_equal(m.data, [[1, 2], [3, 4]])
    assert ops.tanh(Tensor(0.0)).item() == 0.0
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(ops.softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3)


def test_square_grad_analytic():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_unrelated_leaf_gets_zero_or_none():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    (x * 3.0 + 0.0 * y).backward()
    assert y.grad == 0.0
    z = Tensor(1.0, requires_grad=True)
    loss = x * 2.0
    loss.backward()
    assert z.grad is None


def test_backward_accumulates():
    x = Tensor(1.5, requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_non_scalar_backward_raises():
    with pytest.raises(ShapeError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(3,\).*\(4,\)"):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_diamond_graph_visits_once():
    x = Tensor(2.0, requires_grad=True)
    y = ops.tanh(x)
    (y * y + y).backward()
    t = np.tanh(2.0)
    assert x.grad == pytest.approx((2 * t + 1) * (1 - t * t))


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_random(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=UNARY[name](Tensor(x)).shape)
        assert _check_unary(UNARY[name], x, w) < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "matmul", "minimum", "maximum", "concat"])
def test_binary_gradients_random(op):
    rng = np.random.default_rng(7)
    for _ in range(100):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2) if op == "matmul" else (1, 4))
        if op == "div":
            b = np.abs(b) + 0.5
        fn = {
            "add": ops.add, "sub": ops.sub, "mul": ops.mul, "div": ops.div, "matmul": ops.matmul,
            "minimum": ops.minimum, "maximum": ops.maximum,
            "concat": lambda p, q: ops.concat([p, q], axis=0),
        }[op]
        w = rng.normal(size=fn(Tensor(a), Tensor(b)).shape)
        at, bt = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
        (fn(at, bt) * w).sum().backward()
        ga = numeric_grad(lambda arr: float(np.sum(fn(Tensor(arr), Tensor(b)).data * w)), a.copy())
        gb = numeric_grad(lambda arr: float(np.sum(fn(Tensor(a), Tensor(arr)).data * w)), b.copy())
        assert rel_error(at.grad, ga) < 1e-4
        assert rel_error(bt.grad, gb) < 1e-4


def test_log_and_clip_gradients():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.uniform(0.2, 3.0, size=(5,))
        assert _check_unary(ops.log, x, rng.normal(size=5)) < 1e-4
        y = rng.normal(size=(5,))
        y = y[np.abs(np.abs(y) - 0.5) > 1e-3]
        assert _check_unary(lambda t: ops.clip(t, -0.5, 0.5), y, np.ones(len(y))) < 1e-4


def test_tanh_layer_against_finite_difference():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(3,))
    wt = Tensor(w.copy(), requires_grad=True)
    ops.tanh(wt @ Tensor(x)).sum().backward()
    fd = numeric_grad(lambda arr: float(np.tanh(arr @ x).sum()), w.copy())
    assert rel_error(wt.grad, fd) < 1e-4


def test_mlp_zero_and_linear_cases():
    rng = np.random.default_rng(1)
    mlp = MLP([5, 8, 3], rng)
    for p in mlp.parameters():
        p.data[...] = 0.0
    assert np.all(mlp(Tensor(rng.normal(size=(4, 5)))).data == 0.0)
    lin = Linear(5, 3, rng)
    x = rng.normal(size=(2, 5))
    assert np.array_equal(lin(Tensor(x)).data, x @ lin.weight.data + lin.bias.data)
    with pytest.raises(ShapeError):
        lin(Tensor(np.ones((2, 4))))


def test_layer_norm_statistics():
    rng = np.random.default_rng(2)
    ln = LayerNorm(16)
    x = rng.normal(3.0, 5.0, size=(10, 16))
    y = ln.normalize(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_mlp_layer_norm_gradient():
    rng = np.random.default_rng(4)
    mlp = MLP([6, 7, 5, 2], rng, layer_norm=True)
    x = rng.normal(size=(3, 6))
    for name, p in mlp.named_parameters().items():
        mlp.zero_grad()
        mlp(Tensor(x)).sum().backward()
        analytic = p.grad.copy()

        def f(arr, p=p):
            saved = p.data
            p.data = arr
            val = float(mlp(Tensor(x)).data.sum())
            p.data = saved
            return val

        assert rel_error(analytic, numeric_grad(f, p.data.copy())) < 1e-4, name


def test_lstm_zero_input_zero_output():
    lstm = LSTM(3, 5, np.random.default_rng(0))
    lstm.bias.data[...] = 0.0
    out, state = lstm(Tensor(np.zeros((6, 3))))
    assert np.all(out.data == 0.0)
    assert out.shape == (6, 5)


def test_lstm_causality():
    rng = np.random.default_rng(5)
    lstm = LSTM(3, 4, rng)
    x = rng.normal(size=(10, 3))
    base, _ = lstm(Tensor(x))
    x2 = x.copy()
    x2[6] += 1.0
    pert, _ = lstm(Tensor(x2))
    assert np.array_equal(base.data[:6], pert.data[:6])
    assert not np.array_equal(base.data[6:], pert.data[6:])


def test_bilstm_width_and_empty_sequence():
    rng = np.random.default_rng(6)
    bi = BiLSTM(3, 4, rng)
    out, _ = lstm_forward(bi, Tensor(rng.normal(size=(7, 3))), bidirectional=True)
    assert out.shape == (7, 8)
    with pytest.raises(ValueError):
        bi.fwd(Tensor(np.zeros((0, 1, 3))))


def test_lstm_gradients_with_resets():
    rng = np.random.default_rng(8)
    lstm = LSTM(3, 4, rng)
    x = rng.normal(size=(6, 2, 3))
    keep = np.ones((6, 2))
    keep[3, 0] = 0.0
    h0 = rng.normal(size=(1, 2, 4))
    from hpc_locomotion.autodiff.layers import LstmState
    state = LstmState(h0, rng.normal(size=(1, 2, 4)))
    w_out = rng.normal(size=(6, 2, 4))

    def loss_for(xarr):
        out, _ = lstm(Tensor(xarr), state, keep)
        return out

    xt = Tensor(x.copy(), requires_grad=True)
    lstm.zero_grad()
    (lstm(xt, state, keep)[0] * w_out).sum().backward()
    assert rel_error(xt.grad, numeric_grad(lambda a: float((loss_for(a).data * w_out).sum()), x.copy())) < 1e-4
    for name, p in lstm.named_parameters().items():
        def f(arr, p=p):
            saved = p.data
            p.data = arr
            val = float((loss_for(x).data * w_out).sum())
            p.data = saved
            return val
        assert rel_error(p.grad, numeric_grad(f, p.data.copy())) < 1e-4, name


def test_adam_behaviour():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamState(learning_rate=0.01)
    adam_step(opt, {"p": p}, {"p": np.array([0.5, -3.0])})
    # first bias-corrected step moves by lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], rtol=0, atol=1e-9)
    before = p.data.copy()
    adam_step(AdamState(), {"p": p}, {"p": np.zeros(2)})
    assert np.array_equal(p.data, before)
    q = Tensor(np.array([0.0]), requires_grad=True)
    st_ = AdamState(learning_rate=0.01)
    for _ in range(50):
        adam_step(st_, {"q": q}, {"q": np.array([2.0])})
    assert q.data[0] < 0
    assert st_.step_count == 50
    with pytest.raises(NonFiniteGradient, match="'q'"):
        adam_step(st_, {"q": q}, {"q": np.array([np.nan])})


def test_adam_global_clip():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, max_grad_norm=1.0)
    p.grad = np.array([30.0, 40.0, 0.0])
    norm = opt.step()
    assert norm == pytest.approx(50.0)
    np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0)


def test_checkpoint_roundtrip_and_determinism(tmp_path):
    a = MLP([4, 6, 2], np.random.default_rng(11))
    b = MLP([4, 6, 2], np.random.default_rng(11))
    save_parameters(tmp_path / "a.bin", state_dict(a), {"kind": "mlp"})
    save_parameters(tmp_path / "b.bin", state_dict(b), {"kind": "mlp"})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    params, meta = load_parameters(tmp_path / "a.bin")
    assert meta == {"kind": "mlp"}
    for name, arr in state_dict(a).items():
        assert np.array_equal(params[name], arr)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_forward_is_deterministic(values):
    x = np.array(values)
    a = ops.softmax(ops.tanh(Tensor(x))).data
    b = ops.softmax(ops.tanh(Tensor(x))).data
    assert np.array_equal(a, b)
    assert abs(a.sum() - 1.0) < 1e-12
