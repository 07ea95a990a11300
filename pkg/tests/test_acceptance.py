"""Acceptance suite: one test per criterion, each at its stated tolerance.

The trained-model criteria (4-8, 11) share three models trained with the
default configuration on the default corpus. Checkpoints are cached under
pytest's cache directory, keyed on the training code and configuration, so
only the first run pays for training (several minutes per model on one CPU).
"""

import csv
import hashlib
import json
import time
from collections import Counter
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

import lencap
from lencap import checkpoint, decoding, metrics, nncore
from lencap.captioner import Captioner, TrainConfig, train
from lencap.cli import main
from lencap.data import TARGET_LENGTHS, build_vocab, gen_corpus, write_corpus
from lencap.decoding import DecodeOpts, beam_search, greedy

from acceptance_log import note
from oracles import BigramToy, cider_d_oracle, enumerate_best, mcider_oracle
from tiny import loss_closure, tiny_batch, tiny_model

VARIANTS = ("base", "lenemb", "marker")
BEAM = 5


# shared trained models ----------------------------------------------------

def _training_key() -> str:
    src = Path(lencap.__file__).parent
    h = hashlib.sha256()
    for name in ("nncore.py", "captioner.py", "data.py", "checkpoint.py"):
        h.update((src / name).read_bytes())
    h.update(json.dumps(asdict(TrainConfig()), sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(seed=0)


@pytest.fixture(scope="session")
def models(request, corpus):
    cache = Path(request.config.cache.mkdir("lencap-models")) / _training_key()
    cache.mkdir(exist_ok=True)
    out = {}
    for variant in VARIANTS:
        path = cache / f"{variant}.json"
        if path.exists():
            out[variant], _ = checkpoint.load(path)
            continue
        t0 = time.time()
        model = Captioner.create(variant, build_vocab(corpus, variant), seed=0)
        model, log = train(corpus, model, TrainConfig())
        checkpoint.save(model, path, {"best_epoch": log.best_epoch,
                                      "best_val_loss": log.best_val_loss,
                                      "train_seconds": time.time() - t0})
        out[variant] = model
    return out


@pytest.fixture(scope="session")
def decode(models, corpus):
    """Cached test-split captions per (variant, desired length or 'pred')."""
    test = corpus.split("test")

    @lru_cache(maxsize=None)
    def run(variant, T):
        model = models[variant]
        caps = []
        for im in test:
            if T == "pred":
                caps.append(decoding.generate_with_predicted_length(model, im.features,
                                                                    DecodeOpts(beam_size=BEAM)))
            else:
                caps.append(decoding.generate_with_length(model, im.features, T,
                                                          DecodeOpts(beam_size=BEAM)))
        return caps
    return run


def lenmse_at(caps, T):
    return metrics.len_mse([T] * len(caps), [len(c.tokens) for c in caps])


def words(model, caps):
    return [model.vocab.decode(c.tokens) for c in caps]


# 1 ------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    t0 = time.time()
    errors = {}
    for variant in VARIANTS:
        model = tiny_model(variant, seed=0)
        batch = tiny_batch(model, n=2, seed=0)
        errors[variant] = nncore.grad_check(loss_closure(model, batch), model.store, eps=1e-5)
    elapsed = time.time() - t0
    note(1, ", ".join(f"{v} {e:.1e}" for v, e in errors.items()) + f"; {elapsed:.1f}s")
    assert max(errors.values()) < 1e-4
    assert elapsed < 60


# 2 ------------------------------------------------------------------------

def test_criterion_02_metric_oracle_equivalence():
    t0 = time.time()
    worst = 0.0
    for seed in range(60):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 6))
        cands = [list(rng.integers(0, 8, size=int(rng.integers(1, 7)))) for _ in range(n)]
        refs = [[list(rng.integers(0, 8, size=int(rng.integers(1, 7))))
                 for _ in range(int(rng.integers(1, 4)))] for _ in range(n)]
        worst = max(worst, abs(metrics.cider_d(cands, refs) - cider_d_oracle(cands, refs)),
                    abs(metrics.mcider(cands, refs) - mcider_oracle(cands, refs)))
    same = ["a dog runs on the grass".split(), "two cats sleep near a window".split()]
    identical = metrics.cider_d(same, [[c] for c in same])
    elapsed = time.time() - t0
    note(2, f"max |diff| {worst:.1e} over 60 corpora; identical {identical!r}; {elapsed:.1f}s")
    assert worst < 1e-9
    assert identical == pytest.approx(100.0, abs=1e-12)
    assert elapsed < 60


# 3 ------------------------------------------------------------------------

def test_criterion_03_mcider_degeneracy():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        n = int(rng.integers(2, 6))
        cands, refs = [], []
        for _ in range(n):
            L = int(rng.integers(1, 7))
            cands.append(list(rng.integers(0, 6, size=L)))
            refs.append([list(rng.integers(0, 6, size=L))])
        worst = max(worst, abs(metrics.mcider(cands, refs) - metrics.cider_d(cands, refs)))
    note(3, f"max |mcider - cider_d| {worst:.1e} over 20 cases")
    assert worst <= 1e-12


# 4 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_fixlen_hard_controllability(decode):
    exact = {T: np.mean([len(c.tokens) == T for c in decode("base", T)]) for T in TARGET_LENGTHS}
    mse = {T: lenmse_at(decode("base", T), T) for T in TARGET_LENGTHS}
    note(4, "exact-length fraction " + ", ".join(f"{T}:{v:.2f}" for T, v in exact.items()))
    assert all(v == 1.0 for v in exact.values())
    assert all(v == 0.0 for v in mse.values())


# 5 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_lenemb_controllability(decode):
    mse = {T: lenmse_at(decode("lenemb", T), T) for T in TARGET_LENGTHS}
    note(5, "LenMSE " + ", ".join(f"{T}:{v:.3f}" for T, v in mse.items()))
    assert all(v <= 0.5 for v in mse.values())


# 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_marker_degradation_pattern(decode):
    mse = {T: lenmse_at(decode("marker", T), T) for T in TARGET_LENGTHS}
    lenemb_28 = lenmse_at(decode("lenemb", 28), 28)
    note(6, "marker LenMSE " + ", ".join(f"{T}:{v:.3f}" for T, v in mse.items())
         + f"; lenemb@28 {lenemb_28:.3f}")
    assert all(v <= 1.0 for T, v in mse.items() if T <= 16)
    assert mse[28] >= lenemb_28


# 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_predicted_length_pipeline(decode):
    result = {}
    for variant in ("lenemb", "marker"):
        caps = decode(variant, "pred")
        assert all(c.chosen_length is not None for c in caps)
        result[variant] = metrics.len_mse([c.chosen_length for c in caps],
                                          [len(c.tokens) for c in caps])
    chosen = Counter(c.chosen_length for c in decode("lenemb", "pred"))
    note(7, ", ".join(f"{v} LenMSE {m}" for v, m in result.items())
         + f"; lenemb chosen lengths {dict(sorted(chosen.items()))}")
    assert result == {"lenemb": 0.0, "marker": 0.0}


# 8 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_fluency_ordering(models, decode):
    ber = {}
    for variant in ("base", "lenemb"):
        ber[variant] = {T: metrics.bad_ending_rate(words(models[variant], decode(variant, T)))
                        for T in TARGET_LENGTHS}
    note(8, f"BER@28 base+fixlen {ber['base'][28]:.1f}, lenemb {ber['lenemb'][28]:.1f}; "
         f"lenemb max {max(ber['lenemb'].values()):.1f}")
    assert ber["base"][28] >= ber["lenemb"][28]
    assert all(v <= 5.0 for v in ber["lenemb"].values())


# 9 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_decoding_invariants(models, corpus):
    mismatches = 0
    test = corpus.split("test")
    for variant, model in models.items():
        mask = decoding.length_mask(model, 16, fixlen=variant == "base")
        steps = decoding.max_decode_steps(model, DecodeOpts())
        for im in test:
            g = greedy(model, im.features, steps, length=16, mask=mask)
            b = beam_search(model, im.features, 1, steps, length=16, mask=mask)[0]
            mismatches += g.tokens != b.tokens
    toy_failures = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        toy = BigramToy(rng.dirichlet(np.ones(3), size=4), bos_id=3, eos_id=0)
        best, best_lp = enumerate_best(toy, 4)
        hyps = beam_search(toy, None, beam_size=3 ** 4, max_steps=4)
        top = max((h for h in hyps if h.finished), key=lambda h: h.logprob)
        toy_failures += top.tokens != best or abs(top.logprob - best_lp) > 1e-12
    note(9, f"beam1/greedy mismatches {mismatches} of {3 * len(test)}; "
         f"toy optimum misses {toy_failures} of 20")
    assert mismatches == 0 and toy_failures == 0


# 10 -----------------------------------------------------------------------

def _pipeline(root: Path) -> dict[str, bytes]:
    data, ckpt = root / "data", root / "lenemb.json"
    cands, report = root / "cands.jsonl", root / "report.json"
    assert main(["gen-data", "--out", str(data), "--sizes", "200,40,40", "--seed", "11"]) == 0
    assert main(["train", "--data", str(data), "--model", "lenemb", "--seed", "11",
                 "--epochs", "2", "--out", str(ckpt)]) == 0
    assert main(["caption", "--ckpt", str(ckpt), "--data", str(data), "--length", "10",
                 "--out", str(cands)]) == 0
    assert main(["eval", "--cands", str(cands), "--data", str(data), "--out", str(report)]) == 0
    files = [data / "corpus.jsonl", data / "vocab.txt", ckpt, root / "lenemb.log.csv",
             cands, report, root / "report.hist.csv"]
    return {p.name: p.read_bytes() for p in files}


def test_criterion_10_determinism(tmp_path):
    a = _pipeline(tmp_path / "run1")
    b = _pipeline(tmp_path / "run2")
    differing = [name for name in a if a[name] != b[name]]
    note(10, f"{len(a)} files compared, {len(differing)} differ")
    assert not differing


# 11 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_length_distribution(models, corpus, decode, tmp_path):
    test = corpus.split("test")
    data = tmp_path / "corpus.jsonl"
    write_corpus(corpus, data)
    runs = {"lenemb": decode("lenemb", "pred"), "marker": decode("marker", "pred"),
            "base": decode("base", 10)}
    paths = []
    for variant, caps in runs.items():
        path = tmp_path / f"{variant}.jsonl"
        path.write_text("".join(json.dumps({"id": im.id, "caption": w}) + "\n"
                                for im, w in zip(test, words(models[variant], caps))))
        paths.append(str(path))
    out = tmp_path / "len_dist.csv"
    assert main(["len-dist", "--cands", *paths, "--data", str(data), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    sums = {h: sum(float(r[h]) for r in rows) for h in rows[0] if h != "length"}
    bands = Counter(min(TARGET_LENGTHS, key=lambda T: abs(T - len(r)))
                    for im in corpus.images for r in im.refs)
    total = sum(bands.values())
    mass = {T: bands[T] / total for T in TARGET_LENGTHS}
    note(11, "column sums " + ", ".join(f"{h}={s:g}" for h, s in sums.items())
         + "; band mass " + ", ".join(f"{T}:{m:.2f}" for T, m in mass.items()))
    assert all(s == pytest.approx(len(test), abs=1e-9) for s in sums.values())
    assert all(m >= 0.15 for m in mass.values())
    # the reference column is the corpus reference histogram, one unit per image
    direct = metrics.length_histogram([r for im in test for r in im.refs])
    got = {int(r["length"]): float(r["count_references"]) for r in rows}
    assert {k: v for k, v in got.items() if v} == {k: v / 5 for k, v in direct.items()}


# trained-model checks beyond the numbered criteria ---------------------------

@pytest.mark.slow
def test_length_head_beats_constant_mode_guess(models, corpus):
    # a hit is an argmax equal to any of the reference-length modes; the
    # features only partly reveal scene richness, so the bar is the best
    # constant guess plus a margin rather than a fixed accuracy
    test = corpus.split("test")
    modes = []
    for im in test:
        counts = Counter(len(r) for r in im.refs)
        top = max(counts.values())
        modes.append({T for T, k in counts.items() if k == top})
    constant = max(sum(T in m for m in modes) for T in TARGET_LENGTHS) / len(test)
    for variant, model in models.items():
        guess = [int(np.argmax(model.predict_length(im.features))) + 1 for im in test]
        rate = sum(g in m for g, m in zip(guess, modes)) / len(test)
        assert rate >= constant + 0.1, (variant, rate, constant)


@pytest.mark.slow
def test_greedy_val_bad_endings(models, corpus):
    val = corpus.split("val")
    for variant in ("lenemb", "marker"):
        model = models[variant]
        caps = [decoding.generate_with_predicted_length(model, im.features, DecodeOpts(beam_size=1))
                for im in val]
        assert metrics.bad_ending_rate(words(model, caps)) < 5.0, variant


@pytest.mark.slow
def test_trained_lenemb_logits_depend_on_length(models, corpus):
    model = models["lenemb"]
    f = corpus.split("test")[0].features
    state = model.encode_image(f)
    short, _ = model.step(model.bos_id, state, (7, 0))
    long_, _ = model.step(model.bos_id, state, (28, 0))
    assert np.max(np.abs(short - long_)) > 1e-3
