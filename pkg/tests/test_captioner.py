import numpy as np
import pytest

from lencap import nncore
from lencap.captioner import (Captioner, ModelConfig, TrainConfig, batch_loss,
                              bucketed_batches, make_batch, marker_wrap_target,
                              remaining_index, train)
from lencap.data import build_vocab, gen_corpus

from tiny import loss_closure, tiny_batch, tiny_model, tiny_vocab


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(60, 15, 15, seed=2)


@pytest.mark.parametrize("variant", ["base", "lenemb", "marker"])
def test_grad_check_every_variant(variant):
    model = tiny_model(variant, seed=1)
    batch = tiny_batch(model, n=2, seed=1)
    assert nncore.grad_check(loss_closure(model, batch), model.store, eps=1e-5) < 1e-4


@pytest.mark.parametrize("variant", ["base", "lenemb", "marker"])
def test_batch_loss_matches_primitive_steps(variant):
    model = tiny_model(variant, seed=2, scale=0.3)
    rng = np.random.default_rng(3)
    items = [(rng.normal(size=6), [int(w) for w in rng.integers(4, 20, size=T)])
             for T in (1, 3, 5, 2)]
    _, cap, _ = batch_loss(model, make_batch(model, items), backward=False)
    per_example = [model.teacher_forced_loss(f, t) for f, t in items]
    assert cap == pytest.approx(np.mean(per_example), abs=1e-12)


def test_batch_loss_adds_into_grads():
    model = tiny_model("lenemb", seed=3)
    batch = tiny_batch(model, n=3, seed=3)
    model.store.zero_grad()
    batch_loss(model, batch)
    once = {k: g.copy() for k, g in model.store.grads.items()}
    batch_loss(model, batch)
    for k, g in model.store.grads.items():
        np.testing.assert_allclose(g, 2 * once[k], rtol=1e-12, atol=1e-15)


def test_length_weight_zero_leaves_head_untouched():
    model = tiny_model("base", seed=4)
    model.store.zero_grad()
    obj, cap, length = batch_loss(model, tiny_batch(model), length_weight=0.0)
    assert obj == cap and length > 0
    assert not model.store.grads["W_l2"].any()


def test_remaining_index_clamps():
    assert remaining_index(7, 0, 30) == 7
    assert remaining_index(7, 7, 30) == 0
    assert remaining_index(7, 9, 30) == 0
    assert remaining_index(40, 0, 30) == 30


def test_lenemb_shift_invariance():
    # the same remaining length gives the same input embedding
    model = tiny_model("lenemb")
    a = model.embed_input_lenemb(5, 5, 2)
    b = model.embed_input_lenemb(5, 4, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, model.embed_input_lenemb(5, 5, 1))
    with pytest.raises(ValueError):
        model.embed_input_lenemb(5, 6, 0)
    with pytest.raises(ValueError):
        model.step(5, model.encode_image(np.zeros(6)))


def test_marker_wrap_target():
    vocab = tiny_vocab().with_markers(5)
    assert marker_wrap_target([4, 5, 6], 3, vocab) == [vocab.marker_id(3), 4, 5, 6, vocab.eos_id]
    with pytest.raises(ValueError):
        marker_wrap_target([], 0, vocab)
    with pytest.raises(ValueError):
        marker_wrap_target([4, 5], 3, vocab)
    with pytest.raises(ValueError):
        marker_wrap_target([4] * 6, 6, vocab)


def test_base_and_marker_share_logits_given_same_params():
    marker = tiny_model("marker", seed=5)
    base = tiny_model("base", seed=5)
    for name in base.store.names():
        if name in ("E_w", "W_out", "b_out"):
            V = base.store[name].shape[0]
            base.store[name][...] = marker.store[name][:V]
        else:
            base.store[name][...] = marker.store[name]
    f = np.random.default_rng(0).normal(size=6)
    la, sa = base.step(7, base.encode_image(f))
    lb, sb = marker.step(7, marker.encode_image(f))
    np.testing.assert_array_equal(la, lb[:len(la)])
    np.testing.assert_array_equal(sa.h, sb.h)


def test_step_is_pure_and_validates():
    model = tiny_model("base")
    s = model.encode_image(np.ones(6))
    a, _ = model.step(4, s)
    b, _ = model.step(4, s)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        model.step(99, s)
    with pytest.raises(ValueError):
        model.encode_image(np.ones(5))


def test_predict_length_is_a_distribution():
    model = tiny_model("lenemb")
    p = model.predict_length(np.random.default_rng(1).normal(size=6))
    assert p.shape == (5,)
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and np.all(p >= 0)


def test_config_and_vocab_checks():
    with pytest.raises(ValueError):
        ModelConfig(variant="att2in", vocab_size=10)
    with pytest.raises(ValueError):
        Captioner(ModelConfig("marker", 20), tiny_vocab(), nncore.ParamStore())
    with pytest.raises(ValueError):
        Captioner(ModelConfig("base", 21), tiny_vocab(), nncore.ParamStore())


def test_sequences_validate_length():
    model = tiny_model("base")
    with pytest.raises(ValueError):
        model.sequences([])
    with pytest.raises(ValueError):
        model.sequences([4] * 6)


def test_overfits_ten_examples():
    vocab = tiny_vocab()
    model = Captioner.create("lenemb", vocab, seed=0, embed_dim=16, hidden_dim=32,
                             feature_dim=6, max_length=5)
    rng = np.random.default_rng(0)
    items = [(rng.normal(size=6), [int(w) for w in rng.integers(4, 20, size=int(rng.integers(2, 6)))])
             for _ in range(10)]
    batch = make_batch(model, items)
    hyper = nncore.AdamHyper(lr=1e-2)
    for _ in range(200):
        model.store.zero_grad()
        obj, _, _ = batch_loss(model, batch)
        nncore.adam_step(model.store, hyper)
    assert batch_loss(model, batch, backward=False)[0] < 0.1


def test_smoke_500_steps_finite():
    model = Captioner.create("marker", tiny_vocab(), seed=1, **dict(
        embed_dim=8, hidden_dim=16, feature_dim=6, max_length=5))
    hyper = nncore.AdamHyper(lr=3e-3)
    for step in range(500):
        batch = tiny_batch(model, n=8, seed=step)
        model.store.zero_grad()
        obj, _, _ = batch_loss(model, batch)
        assert np.isfinite(obj)
        nncore.clip_grad_norm(model.store, 5.0)
        nncore.adam_step(model.store, hyper)
    assert model.store.all_finite()


def _train_small(corpus, variant, seed):
    vocab = build_vocab(corpus, variant)
    model = Captioner.create(variant, vocab, seed=seed, embed_dim=16, hidden_dim=24)
    return train(corpus, model, TrainConfig(epochs=2, batch_size=16, seed=seed))


def test_training_is_deterministic(corpus):
    (a, la), (b, lb) = _train_small(corpus, "lenemb", 3), _train_small(corpus, "lenemb", 3)
    for name in a.store.names():
        assert np.array_equal(a.store[name], b.store[name])
    assert la.rows == lb.rows


def test_training_reduces_loss_and_logs(corpus):
    model, log = _train_small(corpus, "base", 0)
    assert [r["epoch"] for r in log.rows] == [0, 1, 2]
    assert log.rows[-1]["val_loss"] < log.rows[0]["val_loss"]
    assert log.best_val_loss == min(r["val_loss"] for r in log.rows)


def test_bucketed_batches_cover_every_example():
    examples = [(None, [0] * (k % 7 + 1)) for k in range(103)]
    batches = bucketed_batches(examples, 10, np.random.default_rng(0), pool=3)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(103))
    assert all(len(b) <= 10 for b in batches)
