"""Stacked-LSTM binary route classifier with BPTT, Adam and a gradient checker.

The network reads a ``seq_len x input_size`` window of link costs, encodes
it (see :func:`encode_windows`), runs it through ``num_layers`` LSTM layers
(zero initial state), and maps the final top-layer hidden state to one logit.
``sigmoid(logit)`` is the probability that route 1 should be used.

Parameter layout, per layer ``l`` with input width ``n_l``::

    W_l   (4H, n_l + H)  row-major, rows grouped by gate [i, f, g, o],
                         columns [input..., previous hidden...]
    b_l   (4H,)

followed by the output weights ``w_out (H,)`` and ``b_out (1,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import STREAM_INIT, ParameterVector, SeededRng

PROB_CLAMP = 1e-12
ENCODINGS = ("raw", "log_relative")


@dataclass(frozen=True)
class LstmConfig:
    input_size: int = 2
    hidden_size: int = 16
    num_layers: int = 2
    seq_len: int = 4
    output_size: int = 1
    input_encoding: str = "log_relative"
    input_gain: float = 20.0

    def __post_init__(self):
        for name in ("input_size", "hidden_size", "num_layers", "seq_len", "output_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.output_size != 1:
            raise ValueError("only a single output logit is supported")
        if self.input_encoding not in ENCODINGS:
            raise ValueError(f"input_encoding must be one of {ENCODINGS}, got {self.input_encoding!r}")
        if not (np.isfinite(self.input_gain) and self.input_gain > 0):
            raise ValueError("input_gain must be a positive finite number")

    @property
    def num_params(self) -> int:
        return param_count(self)


def param_count(config: LstmConfig) -> int:
    h = config.hidden_size
    total = 0
    n_in = config.input_size
    for _ in range(config.num_layers):
        total += 4 * h * (n_in + h + 1)
        n_in = h
    return total + h + 1


@dataclass(frozen=True)
class Prediction:
    probability: float
    chosen_route: int


def predict_route(probability: float) -> int:
    # ties at exactly 0.5 go to route 1
    return 1 if probability >= 0.5 else 0


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _unpack(theta: np.ndarray, config: LstmConfig):
    h = config.hidden_size
    layers = []
    offset = 0
    n_in = config.input_size
    for _ in range(config.num_layers):
        size_w = 4 * h * (n_in + h)
        W = theta[offset:offset + size_w].reshape(4 * h, n_in + h)
        offset += size_w
        b = theta[offset:offset + 4 * h]
        offset += 4 * h
        layers.append((W, b))
        n_in = h
    w_out = theta[offset:offset + h]
    b_out = theta[offset + h]
    return layers, w_out, b_out


def _theta(params, config: LstmConfig) -> np.ndarray:
    theta = params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=np.float64)
    if theta.shape != (param_count(config),):
        raise ValueError(
            f"parameter vector has length {theta.size}, config expects {param_count(config)}"
        )
    return theta


def init_params(config: LstmConfig, rng: SeededRng) -> ParameterVector:
    """Uniform initialisation in ``[-1/sqrt(H), 1/sqrt(H)]`` for every weight."""
    bound = 1.0 / np.sqrt(config.hidden_size)
    u = rng.random(param_count(config))
    return ParameterVector(-bound + 2.0 * bound * u)


def init_params_from_seed(config: LstmConfig, seed: int) -> ParameterVector:
    return init_params(config, SeededRng(seed).spawn(STREAM_INIT))


@dataclass
class ForwardCache:
    theta: np.ndarray
    x: np.ndarray
    # per layer, per time step: (input concat, i, f, g, o, c_prev, c, tanh_c)
    steps: list = field(repr=False)
    h_top: np.ndarray = field(repr=False)
    logits: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)


def _check_windows(x, config: LstmConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.seq_len, config.input_size):
        raise ValueError(
            f"window shape {x.shape[-2:] if x.ndim >= 2 else x.shape} does not match "
            f"({config.seq_len}, {config.input_size})"
        )
    return x


def encode_windows(x: np.ndarray, config: LstmConfig) -> np.ndarray:
    """Map raw costs to network inputs.

    ``raw`` passes costs through scaled by ``input_gain``.  ``log_relative``
    feeds ``gain * (log c[t, r] - mean_r log c[t, r])``: each route's cost
    relative to the other routes at the same step, invariant to a common
    rescaling of all costs.
    """
    if config.input_encoding == "raw":
        return config.input_gain * x
    if np.any(x <= 0):
        raise ValueError("log_relative encoding needs positive costs")
    logs = np.log(x)
    return config.input_gain * (logs - logs.mean(axis=2, keepdims=True))


def forward_batch(params, windows, config: LstmConfig) -> tuple[np.ndarray, ForwardCache]:
    """Probabilities for a ``(B, seq_len, input_size)`` batch of windows."""
    theta = _theta(params, config)
    x = _check_windows(windows, config)
    u = encode_windows(x, config)
    layers, w_out, b_out = _unpack(theta, config)
    batch = x.shape[0]
    hs = config.hidden_size
    h = [np.zeros((batch, hs)) for _ in layers]
    c = [np.zeros((batch, hs)) for _ in layers]
    steps = [[None] * config.seq_len for _ in layers]
    for t in range(config.seq_len):
        inp = u[:, t, :]
        for l, (W, b) in enumerate(layers):
            xh = np.concatenate([inp, h[l]], axis=1)
            z = xh @ W.T + b
            i = sigmoid(z[:, :hs])
            f = sigmoid(z[:, hs:2 * hs])
            g = np.tanh(z[:, 2 * hs:3 * hs])
            o = sigmoid(z[:, 3 * hs:])
            c_prev = c[l]
            c_new = f * c_prev + i * g
            tanh_c = np.tanh(c_new)
            h_new = o * tanh_c
            steps[l][t] = (xh, i, f, g, o, c_prev, c_new, tanh_c)
            h[l], c[l] = h_new, c_new
            inp = h_new
    logits = h[-1] @ w_out + b_out
    probs = sigmoid(logits)
    cache = ForwardCache(theta=theta.copy(), x=x.copy(), steps=steps, h_top=h[-1], logits=logits, probs=probs)
    return probs, cache


def lstm_forward(params, window, config: LstmConfig) -> tuple[float, ForwardCache]:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (config.seq_len, config.input_size):
        raise ValueError(f"window shape {window.shape} does not match ({config.seq_len}, {config.input_size})")
    probs, cache = forward_batch(params, window, config)
    return float(probs[0]), cache


def predict(params, window, config: LstmConfig) -> Prediction:
    p, _ = lstm_forward(params, window, config)
    return Prediction(probability=p, chosen_route=predict_route(p))


def bce_loss(probability, label) -> float:
    p = float(probability)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    p = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(-(label * np.log(p) + (1 - label) * np.log(1.0 - p)))


def _bce_vector(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(labels * np.log(p) + (1 - labels) * np.log(1.0 - p))


def _dlogits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # derivative of clamped BCE wrt the logit; zero where the clamp is active
    active = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    return np.where(active, probs - labels, 0.0)


def backward_batch(cache: ForwardCache, dlogits: np.ndarray, config: LstmConfig) -> np.ndarray:
    """Gradient of ``sum_b dlogits[b] * logit_b`` wrt every parameter."""
    theta = cache.theta
    layers, w_out, _ = _unpack(theta, config)
    hs = config.hidden_size
    grad = np.zeros_like(theta)
    grad_layers, gw_out, _ = _unpack(grad, config)  # views into grad

    gw_out += cache.h_top.T @ dlogits
    grad[-1] = dlogits.sum()

    batch = dlogits.shape[0]
    n_layers = len(layers)
    dh_next = [np.zeros((batch, hs)) for _ in layers]
    dc_next = [np.zeros((batch, hs)) for _ in layers]
    for t in range(config.seq_len - 1, -1, -1):
        dh_above = np.outer(dlogits, w_out) if t == config.seq_len - 1 else np.zeros((batch, hs))
        for l in range(n_layers - 1, -1, -1):
            W, _ = layers[l]
            gW, gb = grad_layers[l]
            xh, i, f, g, o, c_prev, _, tanh_c = cache.steps[l][t]
            dh = dh_above + dh_next[l]
            dc = dc_next[l] + dh * o * (1.0 - tanh_c * tanh_c)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * tanh_c * o * (1.0 - o),
                ],
                axis=1,
            )
            dc_next[l] = dc * f
            gW += dz.T @ xh
            gb += dz.sum(axis=0)
            dxh = dz @ W
            n_in = xh.shape[1] - hs
            dh_next[l] = dxh[:, n_in:]
            dh_above = dxh[:, :n_in]
    return grad


def backward(params, window, label, cache: ForwardCache, config: LstmConfig) -> ParameterVector:
    """Exact gradient of ``bce_loss(lstm_forward(...), label)`` for one window."""
    theta = _theta(params, config)
    window = np.asarray(window, dtype=np.float64)
    if (
        cache.x.shape[0] != 1
        or cache.x[0].shape != window.shape
        or not np.array_equal(cache.x[0], window)
        or not np.array_equal(cache.theta, theta)
    ):
        raise ValueError("forward cache does not match these parameters / window")
    dl = _dlogits(cache.probs, np.array([float(label)]))
    return ParameterVector(backward_batch(cache, dl, config))


def loss_and_grad(params, windows, labels, config: LstmConfig) -> tuple[float, np.ndarray]:
    """Mean BCE over a batch and its gradient (raw array, same layout)."""
    labels = np.asarray(labels, dtype=np.float64)
    probs, cache = forward_batch(params, windows, config)
    n = labels.shape[0]
    loss = float(_bce_vector(probs, labels).sum() / n)
    grad = backward_batch(cache, _dlogits(probs, labels) / n, config)
    return loss, grad


def batch_losses(params, windows, labels, config: LstmConfig) -> np.ndarray:
    probs, _ = forward_batch(params, windows, config)
    return _bce_vector(probs, np.asarray(labels, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, d: int, lr: float = 0.01, **kwargs) -> "AdamState":
        return cls(m=np.zeros(d), v=np.zeros(d), lr=lr, **kwargs)


def adam_step(params: ParameterVector, gradient, state: AdamState) -> tuple[ParameterVector, AdamState]:
    g = gradient.values if isinstance(gradient, ParameterVector) else np.asarray(gradient, dtype=np.float64)
    theta = params.values
    if not (theta.shape == g.shape == state.m.shape == state.v.shape):
        raise ValueError("parameter / gradient / optimizer state length mismatch")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParameterVector(new_theta), replace(state, m=m, v=v, step_count=t)


def grad_check(params, window, label, config: LstmConfig, h: float = 1e-5) -> float:
    """Max relative error between BPTT and central finite differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = _theta(params, config).copy()
    _, cache = lstm_forward(theta, window, config)
    analytic = backward(theta, window, label, cache, config).values

    def loss_at(vec):
        p, _ = lstm_forward(vec, window, config)
        return bce_loss(p, label)

    worst = 0.0
    for k in range(theta.size):
        orig = theta[k]
        theta[k] = orig + h
        up = loss_at(theta)
        theta[k] = orig - h
        down = loss_at(theta)
        theta[k] = orig
        numeric = (up - down) / (2.0 * h)
        err = abs(analytic[k] - numeric) / max(1.0, abs(analytic[k]), abs(numeric))
        worst = max(worst, err)
    return worst


def train_epoch(
    params: ParameterVector,
    samples: Sequence,
    batch_size: int,
    adam: AdamState,
    rng: SeededRng,
    config: LstmConfig,
) -> tuple[ParameterVector, AdamState, float]:
    """One shuffled pass over ``samples`` (objects with ``window`` and ``label``).

    Returns the updated parameters, optimizer state and the per-sample mean
    of the batch losses measured before each update.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(samples) == 0:
        raise ValueError("no samples to train on")
    order = rng.permutation(len(samples))
    windows = np.stack([np.asarray(samples[k].window, dtype=np.float64) for k in order])
    labels = np.array([float(samples[k].label) for k in order])
    total = 0.0
    for start in range(0, len(order), batch_size):
        xb = windows[start:start + batch_size]
        yb = labels[start:start + batch_size]
        loss, grad = loss_and_grad(params, xb, yb, config)
        params, adam = adam_step(params, grad, adam)
        total += loss * yb.shape[0]
    return params, adam, total / len(order)


def evaluate(params, samples: Sequence, config: LstmConfig) -> tuple[float, float]:
    """(accuracy, mean BCE) of ``params`` over ``samples``."""
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    windows = np.stack([np.asarray(s.window, dtype=np.float64) for s in samples])
    labels = np.array([float(s.label) for s in samples])
    probs, _ = forward_batch(params, windows, config)
    chosen = (probs >= 0.5).astype(np.float64)
    accuracy = float(np.mean(chosen == labels))
    return accuracy, float(_bce_vector(probs, labels).mean())
