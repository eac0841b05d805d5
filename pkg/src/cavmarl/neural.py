"""Minimal differentiable network core: dense and LSTM layers with exact
hand-written backward passes, Adam, finite-difference verification, and a flat
binary parameter format. 64-bit floats throughout."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, x)


def relu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # Subgradient 0 at the kink.
    return dy * (x > 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the softmax output p and dL/dp."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


class DenseLayer:
    """y = x W^T + b for batched row vectors."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng()
        self.W = _glorot(rng, out_dim, in_dim)
        self.b = np.zeros(out_dim)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.W.shape[1]:
            raise ValueError(f"dense expected width {self.W.shape[1]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.dW += flat_dy.T @ flat_x
        self.db += flat_dy.sum(axis=0)
        return dy @ self.W

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def grads(self) -> list[np.ndarray]:
        return [self.dW, self.db]

    def zero_grads(self) -> None:
        self.dW[:] = 0.0
        self.db[:] = 0.0


class LstmLayer:
    """Standard LSTM over a [B, T, in] sequence with exact truncated BPTT.

    Gate order in the stacked weights is input, forget, cell candidate, output.
    """

    def __init__(self, in_dim: int, hidden: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng()
        self.hidden = hidden
        self.Wx = _glorot(rng, 4 * hidden, in_dim)
        self.Wh = _glorot(rng, 4 * hidden, hidden)
        self.b = np.zeros(4 * hidden)
        self.dWx = np.zeros_like(self.Wx)
        self.dWh = np.zeros_like(self.Wh)
        self.db = np.zeros_like(self.b)
        self._cache: Optional[dict] = None

    def forward(self, seq: np.ndarray) -> np.ndarray:
        """Returns the hidden state after the last step, shape [B, hidden]."""
        if seq.ndim != 3 or seq.shape[-1] != self.Wx.shape[1]:
            raise ValueError(f"lstm expected [B, T, {self.Wx.shape[1]}], got {seq.shape}")
        B, T, _ = seq.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        steps = []
        for t in range(T):
            x = seq[:, t, :]
            z = x @ self.Wx.T + h @ self.Wh.T + self.b
            i = sigmoid(z[:, 0:H])
            f = sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H : 4 * H])
            c_new = f * c + i * g
            h_new = o * np.tanh(c_new)
            steps.append((x, h, c, i, f, g, o, c_new))
            h, c = h_new, c_new
        self._cache = {"steps": steps, "shape": seq.shape}
        return h

    def backward(self, dh_last: np.ndarray) -> np.ndarray:
        steps = self._cache["steps"]
        B, T, in_dim = self._cache["shape"]
        H = self.hidden
        dseq = np.zeros((B, T, in_dim))
        dh = dh_last
        dc = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            x, h_prev, c_prev, i, f, g, o, c_new = steps[t]
            tanh_c = np.tanh(c_new)
            do = dh * tanh_c
            dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            self.dWx += dz.T @ x
            self.dWh += dz.T @ h_prev
            self.db += dz.sum(axis=0)
            dseq[:, t, :] = dz @ self.Wx
            dh = dz @ self.Wh
            dc = dc * f
        return dseq

    def params(self) -> list[np.ndarray]:
        return [self.Wx, self.Wh, self.b]

    def grads(self) -> list[np.ndarray]:
        return [self.dWx, self.dWh, self.db]

    def zero_grads(self) -> None:
        self.dWx[:] = 0.0
        self.dWh[:] = 0.0
        self.db[:] = 0.0


class SequenceNet:
    """dense -> ReLU -> LSTM -> dense head over [B, T, in] sequences."""

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng or np.random.default_rng()
        self.d1 = DenseLayer(in_dim, hidden, rng)
        self.lstm = LstmLayer(hidden, hidden, rng)
        self.d2 = DenseLayer(hidden, out_dim, rng)
        self._pre: Optional[np.ndarray] = None

    def forward(self, seq: np.ndarray) -> np.ndarray:
        pre = self.d1.forward(seq)
        self._pre = pre
        h = self.lstm.forward(relu(pre))
        return self.d2.forward(h)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = self.d2.backward(dout)
        dz = self.lstm.backward(dh)
        return self.d1.backward(relu_bwd(self._pre, dz))

    def params(self) -> list[np.ndarray]:
        return self.d1.params() + self.lstm.params() + self.d2.params()

    def grads(self) -> list[np.ndarray]:
        return self.d1.grads() + self.lstm.grads() + self.d2.grads()

    def zero_grads(self) -> None:
        self.d1.zero_grads()
        self.lstm.zero_grads()
        self.d2.zero_grads()


def copy_params(params: list[np.ndarray]) -> list[np.ndarray]:
    return [p.copy() for p in params]


def set_params(dst: list[np.ndarray], src: list[np.ndarray]) -> None:
    for d, s in zip(dst, src):
        d[:] = s


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 0.01) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected Adam update; returns the new state and parameters."""
    t = state.step_count + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m1 = state.beta1 * m + (1.0 - state.beta1) * g
        v1 = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m1 / (1.0 - state.beta1**t)
        v_hat = v1 / (1.0 - state.beta2**t)
        new_m.append(m1)
        new_v.append(v1)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    new_state = AdamState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step_count=t,
        m=new_m,
        v=new_v,
    )
    return new_state, new_p


def apply_adam(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> AdamState:
    """In-place variant used by the trainers."""
    new_state, new_params = adam_step(state, params, grads)
    set_params(params, new_params)
    return new_state


def grad_check(
    loss_fn: Callable[[], float],
    params: list[np.ndarray],
    grads: list[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between ``grads`` and central finite differences of
    ``loss_fn`` over every parameter element."""
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + h
            up = loss_fn()
            flat_p[idx] = orig - h
            down = loss_fn()
            flat_p[idx] = orig
            num = (up - down) / (2.0 * h)
            ana = flat_g[idx]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, err)
    return worst


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. pred."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


_MAGIC = 0x63766D31  # "cvm1"


def save_params(path, params: list[np.ndarray]) -> None:
    """Flat little-endian binary: magic, array count, per-array ndim + dims, f64 data."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", _MAGIC, len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_params(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        magic, count = struct.unpack("<II", fh.read(8))
        if magic != _MAGIC:
            raise ValueError(f"not a parameter file: bad magic {magic:#x}")
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        out = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
            out.append(data.reshape(shape))
        return out
