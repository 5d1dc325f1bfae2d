"""Parameterised layers: linear, layer norm, MLP, LSTM and bidirectional LSTM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = {
    "tanh": T.tanh,
    "relu": T.relu,
    "elu": T.elu,
    "sigmoid": T.sigmoid,
}


class Module:
    """Container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(kaiming_uniform(rng, n_in, (n_in, n_out), gain), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects width {self.n_in}, got input shape {x.shape}")
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def normalize(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = T.square(centred).mean(axis=-1, keepdims=True)
        return centred / T.sqrt(var + self.eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.gain + self.shift


class MLP(Module):
    """Stack of linear layers; optional layer norm after every hidden layer."""

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "elu",
                 layer_norm: bool = False, out_gain: float = 1.0):
        self.sizes = list(sizes)
        self.activation = activation
        n = len(self.sizes) - 1
        self.layers = [
            Linear(self.sizes[i], self.sizes[i + 1], rng, gain=out_gain if i == n - 1 else 1.0)
            for i in range(n)
        ]
        self.norms = [LayerNorm(self.sizes[i + 1]) for i in range(n - 1)] if layer_norm else []

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                if self.norms:
                    x = self.norms[i](x)
                x = act(x)
        return x


@dataclass
class LstmState:
    hidden: np.ndarray  # [layers, batch, width]
    cell: np.ndarray

    @classmethod
    def zeros(cls, layers: int, batch: int, width: int) -> "LstmState":
        return cls(np.zeros((layers, batch, width)), np.zeros((layers, batch, width)))

    def reset(self, mask: np.ndarray) -> None:
        """Zero the state of every batch row where ``mask`` is true."""
        self.hidden[:, mask] = 0.0
        self.cell[:, mask] = 0.0

    def copy(self) -> "LstmState":
        return LstmState(self.hidden.copy(), self.cell.copy())


_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_FAST = {"contract", "nsz", "arcp"}


@njit(cache=True, fastmath=_FAST)
def _exp_into(x, out, k_buf):
    """Vectorisable exp: Cody-Waite reduction, degree-11 Taylor polynomial, exponent by bit shift.
    Inputs are clamped to [-700, 700]; relative error ~1e-14."""
    n = x.size
    for i in range(n):
        v = x[i]
        v = 700.0 if v > 700.0 else v
        v = -700.0 if v < -700.0 else v
        k = np.floor(v * _LOG2E + 0.5)
        r = (v - k * _LN2_HI) - k * _LN2_LO
        p = 1.0 / 39916800.0
        p = 1.0 / 3628800.0 + r * p
        p = 1.0 / 362880.0 + r * p
        p = 1.0 / 40320.0 + r * p
        p = 1.0 / 5040.0 + r * p
        p = 1.0 / 720.0 + r * p
        p = 1.0 / 120.0 + r * p
        p = 1.0 / 24.0 + r * p
        p = 1.0 / 6.0 + r * p
        p = 0.5 + r * p
        p = 1.0 + r * p
        out[i] = 1.0 + r * p
        k_buf[i] = np.int64(k) + 1023
    scale = (k_buf << 52).view(np.float64)
    for i in range(n):
        out[i] *= scale[i]


@njit(cache=True, fastmath=_FAST)
def _lstm_forward_kernel(xw, h0, c0, wh, keep):
    """Gate order (input, forget, cell, output); sigmoid(u) = 1/(1+exp(-u)),
    tanh(u) = 2/(1+exp(-2u)) - 1."""
    steps, batch, four_h = xw.shape
    hid = four_h // 4
    n_big = batch * four_h
    n_small = batch * hid
    gates = np.empty((steps, n_big))
    cs = np.empty((steps, n_small))
    tcs = np.empty((steps, n_small))
    hs = np.empty((steps, n_small))
    h_prev_all = np.empty((steps, n_small))
    c_prev_all = np.empty((steps, n_small))
    x_flat = xw.reshape(steps, n_big)
    scale = np.empty(n_big)
    for b in range(batch):
        for j in range(four_h):
            scale[b * four_h + j] = 2.0 if 2 * hid <= j < 3 * hid else 1.0
    ex = np.empty(n_big)
    k_big = np.empty(n_big, dtype=np.int64)
    arg_c = np.empty(n_small)
    ex_c = np.empty(n_small)
    k_small = np.empty(n_small, dtype=np.int64)
    h_in = h0.reshape(n_small)
    c_in = c0.reshape(n_small)
    hp = h_prev_all[0]
    for t in range(steps):
        hp = h_prev_all[t]
        cp = c_prev_all[t]
        for b in range(batch):
            k = keep[t, b]
            for j in range(hid):
                i = b * hid + j
                hp[i] = h_in[i] * k
                cp[i] = c_in[i] * k
        z = np.dot(hp.reshape(batch, hid), wh).reshape(n_big)
        x_t = x_flat[t]
        for i in range(n_big):
            z[i] = -scale[i] * (z[i] + x_t[i])
        _exp_into(z, ex, k_big)
        g = gates[t]
        for i in range(n_big):
            g[i] = scale[i] / (1.0 + ex[i]) - (scale[i] - 1.0)
        c_t = cs[t]
        for b in range(batch):
            o = b * four_h
            for j in range(hid):
                i = b * hid + j
                cn = g[o + hid + j] * cp[i] + g[o + j] * g[o + 2 * hid + j]
                c_t[i] = cn
                arg_c[i] = -2.0 * cn
        _exp_into(arg_c, ex_c, k_small)
        tc_t = tcs[t]
        h_t = hs[t]
        for b in range(batch):
            o = b * four_h + 3 * hid
            for j in range(hid):
                i = b * hid + j
                tc = 2.0 / (1.0 + ex_c[i]) - 1.0
                tc_t[i] = tc
                h_t[i] = g[o + j] * tc
        h_in = h_t
        c_in = c_t
    shape = (steps, batch, hid)
    return (gates.reshape(steps, batch, four_h), cs.reshape(shape), tcs.reshape(shape), hs.reshape(shape),
            h_prev_all.reshape(shape), c_prev_all.reshape(shape))


@njit(cache=True)
def _lstm_backward_kernel(g_out, gates, tcs, c_prev_all, wh_t, keep):
    """Backpropagation through time for the gate pre-activations [T, B, 4H]."""
    steps, batch, four_h = gates.shape
    hid = four_h // 4
    dz_all = np.empty((steps, batch, four_h))
    dh_next = np.zeros((batch, hid))
    dc_next = np.zeros((batch, hid))
    for t in range(steps - 1, -1, -1):
        for b in range(batch):
            for j in range(hid):
                i_g = gates[t, b, j]
                f_g = gates[t, b, hid + j]
                g_g = gates[t, b, 2 * hid + j]
                o_g = gates[t, b, 3 * hid + j]
                tc = tcs[t, b, j]
                dh = g_out[t, b, j] + dh_next[b, j]
                dc = dc_next[b, j] + dh * o_g * (1.0 - tc * tc)
                dz_all[t, b, j] = dc * g_g * i_g * (1.0 - i_g)
                dz_all[t, b, hid + j] = dc * c_prev_all[t, b, j] * f_g * (1.0 - f_g)
                dz_all[t, b, 2 * hid + j] = dc * i_g * (1.0 - g_g * g_g)
                dz_all[t, b, 3 * hid + j] = dh * tc * o_g * (1.0 - o_g)
                dc_next[b, j] = dc * f_g * keep[t, b]
        dh_next = np.dot(dz_all[t], wh_t)
        for b in range(batch):
            k = keep[t, b]
            for j in range(hid):
                dh_next[b, j] *= k
    return dz_all


def lstm_sequence(x: Tensor, h0: np.ndarray, c0: np.ndarray, w_ih: Tensor, w_hh: Tensor,
                  bias: Tensor, keep: np.ndarray | None = None):
    """Run one LSTM layer over ``x`` of shape [T, B, D].

    ``keep`` [T, B] multiplies the carried state before each step (0 resets
    at an episode boundary). Returns the output tensor [T, B, H] and the final
    (h, c) arrays. Gradients flow to ``x`` and the weights; the initial state
    is treated as a constant.
    """
    steps, batch, d_in = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (d_in, 4 * hid):
        raise ShapeError(f"LSTM input width {d_in} does not match weight {w_ih.shape}")
    keep_arr = np.ones((steps, batch)) if keep is None else np.ascontiguousarray(keep, dtype=float)
    xw = (x.data.reshape(steps * batch, d_in) @ w_ih.data + bias.data).reshape(steps, batch, 4 * hid)
    gates, cs, tcs, hs, h_prev_all, c_prev_all = _lstm_forward_kernel(
        xw, np.ascontiguousarray(h0, dtype=float), np.ascontiguousarray(c0, dtype=float),
        np.ascontiguousarray(w_hh.data), keep_arr)

    def backward(g_out):
        dz_all = _lstm_backward_kernel(np.ascontiguousarray(g_out, dtype=float), gates, tcs, c_prev_all,
                                       np.ascontiguousarray(w_hh.data.T), keep_arr)
        flat_dz = dz_all.reshape(steps * batch, 4 * hid)
        gx = (flat_dz @ w_ih.data.T).reshape(steps, batch, d_in) if x.requires_grad else None
        gw_ih = x.data.reshape(steps * batch, d_in).T @ flat_dz
        gw_hh = h_prev_all.reshape(steps * batch, hid).T @ flat_dz
        gb = flat_dz.sum(axis=0)
        return gx, gw_ih, gw_hh, gb

    out = Tensor._make(hs, (x, w_ih, w_hh, bias), backward)
    return out, (hs[-1].copy(), cs[-1].copy())


class LSTM(Module):
    """Single-layer LSTM, gate order (input, forget, cell, output)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        self.n_in, self.hidden = n_in, hidden
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = Tensor(rng.uniform(-bound, bound, (n_in, 4 * hidden)), requires_grad=True)
        w_hh = np.concatenate([orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1)
        self.w_hh = Tensor(w_hh, requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden: 2 * hidden] = forget_bias
        self.bias = Tensor(b, requires_grad=True)

    def initial_state(self, batch: int) -> LstmState:
        return LstmState.zeros(1, batch, self.hidden)

    def __call__(self, x_seq: Tensor, state: LstmState | None = None, keep: np.ndarray | None = None):
        """x_seq: [T, B, D] (or [T, D]); returns (outputs, new state)."""
        squeeze = x_seq.ndim == 2
        if squeeze:
            x_seq = x_seq.reshape(x_seq.shape[0], 1, x_seq.shape[1])
        if x_seq.shape[0] < 1:
            raise ValueError("LSTM needs a sequence of length >= 1")
        batch = x_seq.shape[1]
        if state is None:
            state = self.initial_state(batch)
        out, (h, c) = lstm_sequence(x_seq, state.hidden[0], state.cell[0], self.w_ih, self.w_hh,
                                    self.bias, keep)
        new_state = LstmState(h[None].copy(), c[None].copy())
        if squeeze:
            out = out.reshape(out.shape[0], out.shape[2])
        return out, new_state


class BiLSTM(Module):
    """Forward and backward LSTMs over the same window, outputs concatenated."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.fwd = LSTM(n_in, hidden, rng)
        self.bwd = LSTM(n_in, hidden, rng)

    def __call__(self, x_seq: Tensor):
        """x_seq: [T, B, D] -> per-step outputs [T, B, 2H]."""
        fwd_out, _ = self.fwd(x_seq)
        rev = x_seq[::-1]
        bwd_out, _ = self.bwd(rev)
        return T.concat([fwd_out, bwd_out[::-1]], axis=-1)

    def summary(self, x_seq: Tensor) -> Tensor:
        """Window summary: forward pass at the last step, backward pass at the first."""
        fwd_out, _ = self.fwd(x_seq)
        bwd_out, _ = self.bwd(x_seq[::-1])
        return T.concat([fwd_out[-1], bwd_out[-1]], axis=-1)


def lstm_forward(lstm: LSTM | BiLSTM, x_seq: Tensor, state: LstmState | None = None,
                 bidirectional: bool = False):
    """Functional entry point: unidirectional returns (outputs, state)."""
    if bidirectional:
        if not isinstance(lstm, BiLSTM):
            raise TypeError("bidirectional=True needs a BiLSTM")
        squeeze = x_seq.ndim == 2
        if squeeze:
            x_seq = x_seq.reshape(x_seq.shape[0], 1, x_seq.shape[1])
        out = lstm(x_seq)
        if squeeze:
            out = out.reshape(out.shape[0], out.shape[2])
        return out, None
    return lstm(x_seq, state)
