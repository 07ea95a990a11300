"""Feature-conditioned LSTM captioner with three length-control variants.

* ``base``   - plain autoregressive decoder.
* ``lenemb`` - adds a learned embedding of the remaining length to every
  input word embedding: ``x_t = E_w[w_{t-1}] + E_l[clamp(T - t, 0, L_max)]``.
* ``marker`` - the desired length is a vocabulary token ``<len_T>`` that the
  model emits (and is fed) as its first word.

Every variant also carries a length-prediction head, a small MLP classifier
over ``{1..L_max}`` trained jointly from the reference length.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .data import CaptionedImage, Corpus, Vocab
from .nncore import AdamHyper, LstmState, ParamStore

log = logging.getLogger(__name__)

VARIANTS = ("base", "lenemb", "marker")


@dataclass
class ModelConfig:
    variant: str
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    feature_dim: int = 32
    max_length: int = 30

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "feature_dim", "max_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        V, d, H, D, L = (self.vocab_size, self.embed_dim, self.hidden_dim,
                         self.feature_dim, self.max_length)
        shapes = {"E_w": (V, d)}
        if self.variant == "lenemb":
            shapes["E_l"] = (L + 1, d)
        shapes.update({
            "W_h0": (H, D), "b_h0": (H,),
            "W_c0": (H, D), "b_c0": (H,),
            "lstm.W": (4 * H, d + H), "lstm.b": (4 * H,),
            "W_out": (V, H), "b_out": (V,),
            "W_l1": (H, D), "b_l1": (H,),
            "W_l2": (L, H), "b_l2": (L,),
        })
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)


def remaining_index(T, t, max_length: int):
    """Row of the length table used at step ``t`` for desired length ``T``."""
    return np.clip(np.asarray(T) - np.asarray(t), 0, max_length)


def marker_wrap_target(tokens: list[int], T_ref: int, vocab: Vocab) -> list[int]:
    """``[<len_T>] + tokens + [eos]``: the target sequence of a marker model."""
    if not tokens:
        raise ValueError("empty caption")
    if T_ref != len(tokens):
        raise ValueError("T_ref must equal the caption length")
    if T_ref not in vocab.marker_ids:
        raise ValueError(f"no length marker for T={T_ref}")
    return [vocab.marker_id(T_ref)] + list(tokens) + [vocab.eos_id]


class Captioner:
    """Config + vocab + parameters; the forward pieces used by decoding."""

    def __init__(self, config: ModelConfig, vocab: Vocab, store: ParamStore):
        if len(vocab) != config.vocab_size:
            raise ValueError("vocab size does not match config")
        if (config.variant == "marker") != vocab.has_markers:
            raise ValueError("marker models need a marker vocab, and only they do")
        self.config = config
        self.vocab = vocab
        self.store = store

    @classmethod
    def create(cls, variant: str, vocab: Vocab, seed: int = 0, **dims) -> "Captioner":
        if variant == "marker" and not vocab.has_markers:
            vocab = vocab.with_markers(dims.get("max_length", 30))
        config = ModelConfig(variant=variant, vocab_size=len(vocab), **dims)
        return cls(config, vocab, nncore.init_params(config, seed))

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def eos_id(self) -> int:
        return self.vocab.eos_id

    @property
    def bos_id(self) -> int:
        return self.vocab.bos_id

    # forward pieces -----------------------------------------------------

    def encode_image(self, features: np.ndarray) -> LstmState:
        p = self.store
        if features.shape[-1] != self.config.feature_dim:
            raise ValueError(f"features must have length {self.config.feature_dim}")
        h = np.tanh(nncore.linear(p["W_h0"], p["b_h0"], features))
        c = np.tanh(nncore.linear(p["W_c0"], p["b_c0"], features))
        return LstmState(h, c)

    def embed_input_lenemb(self, prev_token, T, t) -> np.ndarray:
        if np.min(T) < 1 or np.max(T) > self.config.max_length:
            raise ValueError("desired length out of range")
        return self.store["E_w"][prev_token] + \
            self.store["E_l"][remaining_index(T, t, self.config.max_length)]

    def embed(self, prev_token, length_ctx=None) -> np.ndarray:
        prev_token = np.asarray(prev_token)
        if prev_token.size and (prev_token.min() < 0 or prev_token.max() >= self.config.vocab_size):
            raise ValueError("token id out of range")
        if self.variant == "lenemb":
            if length_ctx is None:
                raise ValueError("lenemb step needs a (T, t) length context")
            return self.embed_input_lenemb(prev_token, *length_ctx)
        return self.store["E_w"][prev_token]

    def step(self, prev_token, state: LstmState, length_ctx=None):
        """One decoder step. Returns ``(logits, new_state)``.

        ``length_ctx`` is ``(T, t)`` and is required (only) by lenemb.
        """
        p = self.store
        x = self.embed(prev_token, length_ctx)
        state = nncore.lstm_step(p["lstm.W"], p["lstm.b"], x, state)
        return nncore.linear(p["W_out"], p["b_out"], state.h), state

    def length_logits(self, features: np.ndarray) -> np.ndarray:
        p = self.store
        z = np.tanh(nncore.linear(p["W_l1"], p["b_l1"], features))
        return nncore.linear(p["W_l2"], p["b_l2"], z)

    def predict_length(self, features: np.ndarray) -> np.ndarray:
        """Distribution over lengths; index ``k`` is length ``k + 1``."""
        return nncore.softmax(self.length_logits(features))

    # training sequences -------------------------------------------------

    def sequences(self, tokens: list[int]) -> tuple[list[int], list[int], list[int] | None]:
        """Teacher-forcing (inputs, targets, length-table rows) for one caption."""
        T = len(tokens)
        if not 1 <= T <= self.config.max_length:
            raise ValueError(f"caption length {T} outside 1..{self.config.max_length}")
        bos, eos = self.bos_id, self.eos_id
        if self.variant == "marker":
            target = marker_wrap_target(tokens, T, self.vocab)
            return [bos] + target[:-1], target, None
        inputs, target = [bos] + list(tokens), list(tokens) + [eos]
        if self.variant == "lenemb":
            rows = remaining_index(T, np.arange(T + 1), self.config.max_length).tolist()
            return inputs, target, rows
        return inputs, target, None

    def teacher_forced_loss(self, features: np.ndarray, tokens: list[int]) -> float:
        """Mean per-step cross-entropy of one caption, stepping the primitives."""
        inputs, target, _ = self.sequences(tokens)
        T = len(tokens)
        state = self.encode_image(features)
        total = 0.0
        for t, (w_in, w_out) in enumerate(zip(inputs, target)):
            ctx = (T, t) if self.variant == "lenemb" else None
            logits, state = self.step(w_in, state, ctx)
            total += nncore.softmax_xent(logits, w_out)[0]
        return total / len(target)


@dataclass
class Batch:
    features: np.ndarray        # (B, D)
    inputs: np.ndarray          # (B, S) int
    targets: np.ndarray         # (B, S) int
    weights: np.ndarray         # (B, S), 1/n_b on real steps, 0 on padding
    lengths: np.ndarray         # (B,) reference caption length
    rows: np.ndarray | None     # (B, S) length-table rows (lenemb)

    def __len__(self):
        return self.features.shape[0]


def make_batch(model: Captioner, items: list[tuple[np.ndarray, list[int]]]) -> Batch:
    seqs = [model.sequences(tokens) for _, tokens in items]
    S = max(len(s[0]) for s in seqs)
    B = len(items)
    inputs = np.full((B, S), model.vocab.pad_id, dtype=np.int64)
    targets = np.full((B, S), model.vocab.pad_id, dtype=np.int64)
    weights = np.zeros((B, S))
    rows = np.zeros((B, S), dtype=np.int64) if model.variant == "lenemb" else None
    for b, (inp, tgt, rw) in enumerate(seqs):
        n = len(inp)
        inputs[b, :n] = inp
        targets[b, :n] = tgt
        weights[b, :n] = 1.0 / n
        if rows is not None:
            rows[b, :n] = rw
    return Batch(
        features=np.stack([f for f, _ in items]),
        inputs=inputs, targets=targets, weights=weights,
        lengths=np.array([len(t) for _, t in items], dtype=np.int64),
        rows=rows,
    )


def batch_loss(model: Captioner, batch: Batch, backward: bool = True,
               length_weight: float = 1.0) -> tuple[float, float, float]:
    """Objective = mean caption loss + ``length_weight`` * mean length-head loss.

    Vectorized teacher forcing over the batch with full BPTT. When
    ``backward`` is set, gradients are *added* to ``model.store.grads``.
    Returns ``(objective, caption_loss, length_loss)``.
    """
    p, g = model.store.params, model.store.grads
    H = model.config.hidden_dim
    d = model.config.embed_dim
    B, S = batch.inputs.shape
    F = batch.features

    # encoder
    h0 = np.tanh(F @ p["W_h0"].T + p["b_h0"])
    c0 = np.tanh(F @ p["W_c0"].T + p["b_c0"])

    X = p["E_w"][batch.inputs]
    if batch.rows is not None:
        X = X + p["E_l"][batch.rows]

    W = p["lstm.W"]
    Wx, Wh = W[:, :d], W[:, d:]
    Gx = X @ Wx.T + p["lstm.b"]
    hs = np.empty((B, S + 1, H))
    hs[:, 0] = h0
    caches = []
    h, c = h0, c0
    for t in range(S):
        z = Gx[:, t] + h @ Wh.T
        sig = nncore.sigmoid(z[:, :3 * H])
        i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
        gg = np.tanh(z[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * gg
        tanh_c = np.tanh(c)
        h = o * tanh_c
        hs[:, t + 1] = h
        caches.append(nncore.LstmCache(None, c_prev, i, f, o, gg, tanh_c))

    Hs = hs[:, 1:]
    logits = Hs @ p["W_out"].T + p["b_out"]
    cap_loss, dlogits = nncore.softmax_xent_batch(logits, batch.targets, batch.weights / B)

    # length head
    z1 = np.tanh(F @ p["W_l1"].T + p["b_l1"])
    len_logits = z1 @ p["W_l2"].T + p["b_l2"]
    len_loss, dlen = nncore.softmax_xent_batch(len_logits, batch.lengths - 1, np.full(B, 1.0 / B))
    objective = cap_loss + length_weight * len_loss
    if not backward:
        return objective, cap_loss, len_loss
    dlen *= length_weight

    # length head backward
    dz1 = nncore.linear_backward(dlen, z1, p["W_l2"], g["W_l2"], g["b_l2"])
    nncore.linear_backward(dz1 * (1 - z1 * z1), F, p["W_l1"], g["W_l1"], g["b_l1"])

    # output projection backward
    dHs = nncore.linear_backward(dlogits, Hs, p["W_out"], g["W_out"], g["b_out"])

    # BPTT
    dZ = np.empty((B, S, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(S - 1, -1, -1):
        dz, dc_next = nncore.lstm_gate_backward(dHs[:, t] + dh_next, dc_next, caches[t])
        dZ[:, t] = dz
        dh_next = dz @ Wh
    dW = g["lstm.W"]
    dZ2 = dZ.reshape(B * S, 4 * H)
    dW[:, :d] += dZ2.T @ X.reshape(B * S, d)
    dW[:, d:] += dZ2.T @ hs[:, :-1].reshape(B * S, H)
    g["lstm.b"] += dZ2.sum(axis=0)
    dX = dZ @ Wx
    nncore.embedding_backward(g["E_w"], batch.inputs, dX)
    if batch.rows is not None:
        nncore.embedding_backward(g["E_l"], batch.rows, dX)

    # encoder backward
    nncore.linear_backward(dh_next * (1 - h0 * h0), F, p["W_h0"], g["W_h0"], g["b_h0"])
    nncore.linear_backward(dc_next * (1 - c0 * c0), F, p["W_c0"], g["W_c0"], g["b_c0"])
    return objective, cap_loss, len_loss


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float | None = 5.0
    lr_decay: float = 0.8           # lr multiplier applied every ``lr_decay_every`` epochs
    lr_decay_every: int = 3
    length_weight: float = 1.0
    seed: int = 0


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)   # epoch, train_loss, val_loss
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def examples_from(images: list[CaptionedImage], vocab: Vocab, max_length: int):
    """One (features, token ids) pair per reference caption."""
    out = []
    for im in images:
        for ref in im.refs:
            out.append((im.features, vocab.encode(ref[:max_length])))
    return out


def bucketed_batches(examples, batch_size: int, rng, pool: int = 50) -> list[np.ndarray]:
    """Shuffled batches of similar caption length.

    Examples are shuffled, cut into pools of ``pool`` batches, sorted by
    length inside each pool and split; the batch order is shuffled again.
    """
    order = rng.permutation(len(examples))
    lengths = np.array([len(examples[k][1]) for k in order])
    batches = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        block = order[start:start + span]
        block = block[np.argsort(lengths[start:start + span], kind="stable")]
        batches += [block[i:i + batch_size] for i in range(0, len(block), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def evaluate_loss(model: Captioner, examples, batch_size: int = 256,
                  length_weight: float = 1.0) -> float:
    total = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        obj, _, _ = batch_loss(model, make_batch(model, chunk), backward=False,
                               length_weight=length_weight)
        total += obj * len(chunk)
    return total / len(examples)


def train(corpus: Corpus, model: Captioner, cfg: TrainConfig,
          on_epoch=None) -> tuple[Captioner, TrainLog]:
    """Shuffled mini-batch Adam; keeps the parameters with the best val loss.

    Row 0 of the log holds the losses of the initial parameters.
    """
    L = model.config.max_length
    train_ex = examples_from(corpus.split("train"), model.vocab, L)
    val_ex = examples_from(corpus.split("val"), model.vocab, L) or train_ex
    if not train_ex:
        raise ValueError("training corpus is empty")
    rng = nncore.make_rng([cfg.seed, 7])
    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    model.store.zero_grad()

    result = TrainLog()
    val = evaluate_loss(model, val_ex, length_weight=cfg.length_weight)
    result.rows.append({"epoch": 0,
                        "train_loss": evaluate_loss(model, train_ex,
                                                    length_weight=cfg.length_weight),
                        "val_loss": val})
    result.best_val_loss = val
    best = model.store.copy()

    for epoch in range(1, cfg.epochs + 1):
        hyper.lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
        running, seen = 0.0, 0
        for idx in bucketed_batches(train_ex, cfg.batch_size, rng):
            chunk = [train_ex[k] for k in idx]
            obj, _, _ = batch_loss(model, make_batch(model, chunk),
                                   length_weight=cfg.length_weight)
            if cfg.clip_norm:
                nncore.clip_grad_norm(model.store, cfg.clip_norm)
            nncore.adam_step(model.store, hyper)
            running += obj * len(chunk)
            seen += len(chunk)
        val = evaluate_loss(model, val_ex, length_weight=cfg.length_weight)
        result.rows.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val})
        log.info("epoch %d train %.4f val %.4f", epoch, running / seen, val)
        if val < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val, epoch
            best = model.store.copy()
        if on_epoch is not None:
            on_epoch(result.rows[-1])

    model.store = best
    model.store.zero_grad()
    return model, result
