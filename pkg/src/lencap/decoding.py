"""Greedy / beam decoding, fixLen masking and length-conditioned generation.

Decoders talk to a small model protocol so they can run on the real
captioner as well as on hand-built toy models:

* ``model.bos_id``, ``model.eos_id``, ``model.vocab_size``
* ``model.start(features, batch)`` -> initial state (tuple of arrays, leading
  axis = hypotheses)
* ``model.advance(prev_tokens, state, t, length)`` -> ``(logits, state)``

:class:`CaptionerAdapter` provides it for :class:`~lencap.captioner.Captioner`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .captioner import Captioner
from .nncore import LstmState, log_softmax

NEG_INF = -np.inf


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    state: tuple | None = field(default=None, repr=False)
    finished: bool = False


@dataclass
class DecodeOpts:
    beam_size: int = 5
    max_steps: int | None = None    # None -> L_max + 1
    hard: bool = False              # apply fixLen masks on top of lenemb/marker

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")


@dataclass
class Caption:
    tokens: list[int]               # content tokens: no bos/eos/marker
    logprob: float
    desired_length: int | None = None
    chosen_length: int | None = None
    raw: list[int] = field(default_factory=list)


class CaptionerAdapter:
    def __init__(self, model: Captioner):
        self.model = model
        self.bos_id = model.bos_id
        self.eos_id = model.eos_id
        self.vocab_size = model.config.vocab_size

    def start(self, features, batch: int = 1) -> LstmState:
        st = self.model.encode_image(features)
        return LstmState(np.tile(st.h, (batch, 1)), np.tile(st.c, (batch, 1)))

    def advance(self, prev_tokens, state, t, length):
        ctx = None
        if self.model.variant == "lenemb":
            ctx = (length, t)
        return self.model.step(np.asarray(prev_tokens), state, ctx)


def _select(state, idx):
    picked = [a[idx] for a in state]
    return type(state)(*picked) if hasattr(state, "_fields") else tuple(picked)


def _as_decoder(model):
    return CaptionerAdapter(model) if isinstance(model, Captioner) else model


def banned_ids(model: Captioner) -> list[int]:
    v = model.vocab
    return [v.pad_id, v.bos_id] + sorted(v.marker_ids.values())


def fixlen_constrain(logits: np.ndarray, t: int, T: int, eos_id: int,
                     banned=()) -> np.ndarray:
    """Mask logits so exactly ``T`` content tokens are produced.

    Before step ``T`` eos is impossible; at (or after) step ``T`` only eos
    is allowed. ``banned`` ids are removed at every step.
    """
    out = np.array(logits, dtype=np.float64, copy=True)
    if t < T:
        out[..., eos_id] = NEG_INF
        if len(banned):
            out[..., list(banned)] = NEG_INF
    else:
        keep = out[..., eos_id].copy()
        out[...] = NEG_INF
        out[..., eos_id] = keep
    return out


def greedy(model, features, max_steps: int, length=None,
           mask: Callable | None = None) -> Hypothesis:
    """Argmax decoding until eos or ``max_steps`` tokens."""
    dec = _as_decoder(model)
    state = dec.start(features, 1)
    prev = [dec.bos_id]
    tokens: list[int] = []
    logprob = 0.0
    for t in range(max_steps):
        logits, state = dec.advance(prev, state, t, length)
        if mask is not None:
            logits = mask(logits, t)
        logp = log_softmax(logits)[0]
        w = int(np.argmax(logp))
        logprob += float(logp[w])
        tokens.append(w)
        if w == dec.eos_id:
            return Hypothesis(tokens, logprob, state, True)
        prev = [w]
    return Hypothesis(tokens, logprob, state, False)


def beam_search(model, features, beam_size: int, max_steps: int, length=None,
                mask: Callable | None = None) -> list[Hypothesis]:
    """Beam search without length normalization.

    Each step scores every (live hypothesis, token) pair. Eos candidates that
    rank in the overall top ``beam_size`` move to the finished pool; the live
    beam is refilled with the best ``beam_size`` non-eos candidates. Ties go to
    the lower token id, then the earlier hypothesis. Decoding stops when the
    pool holds ``beam_size`` entries or after ``max_steps`` steps, in which
    case the best unfinished hypotheses top the pool up.
    """
    dec = _as_decoder(model)
    eos = dec.eos_id
    state = dec.start(features, 1)
    live_tokens: list[list[int]] = [[]]
    live_scores = np.zeros(1)
    finished: list[Hypothesis] = []

    for t in range(max_steps):
        prev = [toks[-1] if toks else dec.bos_id for toks in live_tokens]
        logits, state = dec.advance(prev, state, t, length)
        if mask is not None:
            logits = mask(logits, t)
        cand = live_scores[:, None] + log_softmax(logits)
        K, V = cand.shape
        flat = cand.reshape(-1)
        beam_idx, tok_idx = np.divmod(np.arange(K * V), V)
        order = np.lexsort((beam_idx, tok_idx, -flat))

        keep_rows, keep_toks = [], []
        for rank, j in enumerate(order):
            score = flat[j]
            if not np.isfinite(score):
                break
            k, w = int(beam_idx[j]), int(tok_idx[j])
            if w == eos:
                if rank < beam_size and len(finished) < beam_size:
                    finished.append(Hypothesis(live_tokens[k] + [w], float(score),
                                               _select(state, [k]), True))
            elif len(keep_rows) < beam_size:
                keep_rows.append(k)
                keep_toks.append(w)
            if len(keep_rows) >= beam_size and rank >= beam_size - 1:
                break

        if len(finished) >= beam_size or not keep_rows:
            break
        rows = np.array(keep_rows)
        live_tokens = [live_tokens[k] + [w] for k, w in zip(keep_rows, keep_toks)]
        live_scores = flat[rows * V + np.array(keep_toks)]
        state = _select(state, rows)
    else:
        for k in range(len(live_tokens)):
            if len(finished) >= beam_size:
                break
            finished.append(Hypothesis(live_tokens[k], float(live_scores[k]),
                                       _select(state, [k]), False))

    finished.sort(key=lambda h: -h.logprob)
    return finished


def _decode(model, features, opts: DecodeOpts, length, mask) -> Hypothesis:
    max_steps = max_decode_steps(model, opts)
    if opts.beam_size == 1:
        return greedy(model, features, max_steps, length, mask)
    return beam_search(model, features, opts.beam_size, max_steps, length, mask)[0]


def _content(model: Captioner, raw: list[int]) -> list[int]:
    toks = [w for w in raw if w != model.eos_id]
    if model.variant == "marker" and toks and model.vocab.marker_length(toks[0]) is not None:
        toks = toks[1:]
    return toks


def _marker_mask(model: Captioner, T: int | None, fixlen: bool):
    """Step 0 restricted to one marker (or all markers).

    Later steps never see markers, bos or pad again; fixLen applies on top
    when requested.
    """
    marker_ids = sorted(model.vocab.marker_ids.values())
    banned = banned_ids(model)
    if T is not None:
        first = np.full(model.config.vocab_size, NEG_INF)
        first[model.vocab.marker_id(T)] = 0.0
    else:
        first = np.full(model.config.vocab_size, NEG_INF)
        first[marker_ids] = 0.0

    def mask(logits, t):
        if t == 0:
            return logits + first
        if fixlen and T is not None:
            return fixlen_constrain(logits, t - 1, T, model.eos_id, banned)
        out = np.array(logits, dtype=np.float64, copy=True)
        out[..., banned] = NEG_INF
        return out
    return mask


def length_mask(model: Captioner, T: int, fixlen: bool):
    """The logit mask used when decoding at desired length ``T`` (or None)."""
    if model.variant == "marker":
        return _marker_mask(model, T, fixlen)
    if not fixlen:
        return None
    banned = banned_ids(model)

    def mask(logits, t):
        return fixlen_constrain(logits, t, T, model.eos_id, banned)
    return mask


def max_decode_steps(model: Captioner, opts: DecodeOpts) -> int:
    steps = opts.max_steps or model.config.max_length + 1
    return steps + 1 if model.variant == "marker" else steps   # the marker takes a step


def generate_free(model: Captioner, features, opts: DecodeOpts) -> Caption:
    """Unconditioned decode; marker models pick their own marker."""
    if model.variant == "lenemb":
        raise ValueError("lenemb has no unconditioned mode; use the predicted-length pipeline")
    mask = _marker_mask(model, None, False) if model.variant == "marker" else None
    hyp = _decode(model, features, opts, None, mask)
    chosen = model.vocab.marker_length(hyp.tokens[0]) if model.variant == "marker" else None
    return Caption(_content(model, hyp.tokens), hyp.logprob, None, chosen, hyp.tokens)


def generate_with_length(model: Captioner, features, T: int, opts: DecodeOpts,
                         fixlen: bool | None = None) -> Caption:
    """Decode a caption of desired length ``T``.

    lenemb conditions on (T, t) and marker forces ``<len_T>`` as the first
    token; both are unmasked unless ``opts.hard``. The base model can only
    follow a length via fixLen masking.
    """
    L = model.config.max_length
    if not 1 <= T <= L:
        raise ValueError(f"desired length {T} outside 1..{L}")
    if fixlen is None:
        fixlen = opts.hard or model.variant == "base"
    if model.variant == "base" and not fixlen:
        raise ValueError("the base model cannot condition on length without fixLen")
    hyp = _decode(model, features, opts, T, length_mask(model, T, fixlen))
    return Caption(_content(model, hyp.tokens), hyp.logprob, T, None, hyp.tokens)


def generate_with_predicted_length(model: Captioner, features, opts: DecodeOpts) -> Caption:
    """Length chosen by the model, then a caption conditioned on it.

    lenemb takes the argmax of its length head. marker lets the beam choose
    among length markers at step 0 and reads the length back from the top
    hypothesis.
    """
    if model.variant == "lenemb":
        T = int(np.argmax(model.predict_length(features))) + 1
        cap = generate_with_length(model, features, T, opts)
        cap.desired_length, cap.chosen_length = None, T
        return cap
    if model.variant == "marker":
        return generate_free(model, features, opts)
    raise ValueError("predicted-length generation needs a lenemb or marker model")
