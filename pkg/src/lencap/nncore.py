"""Dense numeric core: parameters, forward layers, exact gradients, Adam.

Everything is float64 numpy. Layers work on a single vector or on a batch
(leading axis), with weights stored as ``(out, in)`` so ``linear`` is
``x @ W.T + b``. Backward functions *accumulate* into gradient arrays so
calls can be summed over time steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

INIT_SCALE = 0.08
FORGET_BIAS = 1.0
# gate layout inside the 4*d_h pre-activation vector
GATE_I, GATE_F, GATE_O, GATE_G = range(4)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical output on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class LstmCache(NamedTuple):
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("lr and epsilon must be positive")


class ParamStore:
    """Named parameters with parallel gradient and Adam moment slots."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for d in (self.params, self.grads) for a in d.values())


def init_params(config, seed: int) -> ParamStore:
    """Uniform(-0.08, 0.08) init of every array in ``config.param_shapes()``.

    Parameters are drawn in declaration order from one seeded stream. LSTM
    bias vectors (names ending in ``lstm.b``) get +1 on the forget-gate slice.
    """
    rng = make_rng(seed)
    store = ParamStore()
    for name, shape in config.param_shapes().items():
        value = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        if name.endswith("lstm.b"):
            hidden = shape[0] // 4
            value[GATE_F * hidden:(GATE_F + 1) * hidden] += FORGET_BIAS
        store.add(name, value)
    return store


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def linear(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if W.shape[1] != x.shape[-1] or W.shape[0] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: W{W.shape}, b{b.shape}, x{x.shape}")
    return x @ W.T + b


def linear_backward(dy, x, W, dW, db) -> np.ndarray:
    """Accumulate dL/dW, dL/db; return dL/dx."""
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dW += dy2.T @ x2
    db += dy2.sum(axis=0)
    return dy @ W


def embedding_backward(dE: np.ndarray, ids: np.ndarray, dout: np.ndarray) -> None:
    np.add.at(dE, np.asarray(ids).reshape(-1), dout.reshape(-1, dE.shape[1]))


def lstm_step_cached(W, b, x, state: LstmState) -> tuple[LstmState, LstmCache]:
    """One LSTM step on ``[x; h]``; also returns the cache for backward."""
    hidden = state.h.shape[-1]
    if state.c.shape != state.h.shape:
        raise ValueError("h and c must have identical shapes")
    if W.shape != (4 * hidden, x.shape[-1] + hidden):
        raise ValueError(f"lstm weight {W.shape} does not fit x{x.shape}, h{state.h.shape}")
    xh = np.concatenate([x, state.h], axis=-1)
    z = xh @ W.T + b
    sig = sigmoid(z[..., :3 * hidden])
    i = sig[..., :hidden]
    f = sig[..., hidden:2 * hidden]
    o = sig[..., 2 * hidden:]
    g = np.tanh(z[..., 3 * hidden:])
    c = f * state.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return LstmState(h, c), LstmCache(xh, state.c, i, f, o, g, tanh_c)


def lstm_step(W, b, x, state: LstmState) -> LstmState:
    return lstm_step_cached(W, b, x, state)[0]


def lstm_gate_backward(dh, dc, cache: LstmCache) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. the gate pre-activations and the previous cell.

    ``dc`` is the gradient arriving from the next step's cell.
    """
    i, f, o, g, tanh_c = cache.i, cache.f, cache.o, cache.g, cache.tanh_c
    dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cache.c_prev * f * (1.0 - f),
        dh * tanh_c * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=-1)
    return dz, dc * f


def lstm_step_backward(dh, dc, cache: LstmCache, W, dW, db):
    """Backprop one step. Returns ``(dx, dh_prev, dc_prev)``."""
    if cache is None:
        raise ValueError("lstm_step_backward needs the forward cache")
    dz, dc_prev = lstm_gate_backward(dh, dc, cache)
    dxh = linear_backward(dz, cache.xh, W, dW, db)
    d_x = W.shape[1] - dh.shape[-1]
    return dxh[..., :d_x], dxh[..., d_x:], dc_prev


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    if not 0 <= target < logits.shape[-1]:
        raise ValueError(f"target {target} out of range for {logits.shape[-1]} classes")
    logp = log_softmax(logits)
    dlogits = np.exp(logp)
    dlogits[target] -= 1.0
    return float(-logp[target]), dlogits


def softmax_xent_batch(logits, targets, weights):
    """Weighted sum of cross-entropies over the leading axes.

    Returns ``(loss, dlogits)`` where ``dlogits`` already carries the weights.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    logp = log_softmax(flat)
    rows = np.arange(flat.shape[0])
    loss = float(-(w * logp[rows, tgt]).sum())
    d = np.exp(logp)
    d[rows, tgt] -= 1.0
    d *= w[:, None]
    return loss, d.reshape(logits.shape)


def adam_step(store: ParamStore, hyper: AdamHyper) -> None:
    hyper.step_count += 1
    t = hyper.step_count
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        p -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.epsilon)
        g.fill(0.0)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in store.grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in store.grads.values():
            g *= scale
    return total


def grad_check(loss_and_grad: Callable[[ParamStore], float], store: ParamStore,
               eps: float = 1e-5, n_coords: int = 256, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(store)`` must return the loss and fill ``store.grads``
    (it is responsible for zeroing them first). At least ``n_coords``
    coordinates are sampled, and every named parameter contributes at least one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = make_rng(seed)
    loss_and_grad(store)
    analytic = {k: g.copy() for k, g in store.grads.items()}

    names = store.names()
    total = store.num_values()
    picks: list[tuple[str, int]] = []
    for name in names:
        size = store[name].size
        k = min(size, max(1, int(np.ceil(n_coords * size / total))))
        for idx in rng.choice(size, size=k, replace=False):
            picks.append((name, int(idx)))

    worst = 0.0
    for name, idx in picks:
        flat = store[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = loss_and_grad(store)
        flat[idx] = orig - eps
        f_minus = loss_and_grad(store)
        flat[idx] = orig
        num = (f_plus - f_minus) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[idx]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    # leave the store's gradients as the analytic ones at the original point
    for k in store.grads:
        store.grads[k][...] = analytic[k]
    return worst

