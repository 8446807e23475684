from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kalekit.checkpoint import dumps
from kalekit.config import DESK_TRAIN
from kalekit.data import SyntheticSpec, generate_synthetic, make_train_records
from kalekit.encoder import EncoderConfig, TransformerEncoder, Vocab
from kalekit.errors import ConfigurationError, InputError, TrainingDivergedError
from kalekit.tensor import Tensor
from kalekit.trainer import (BiEncoder, TrainConfig, TrainExample, cosine_loss, examples_from_records,
                             in_batch_accuracy, in_batch_contrastive_loss, train_retriever)

TINY_SPEC = SyntheticSpec(num_topics=8, docs_per_topic=4, queries_per_topic=4, shared_vocab=40, seed=1)
TINY = EncoderConfig(num_layers=2, hidden_dim=32, num_heads=2, ff_dim=64)


def _tiny_data():
    corpus = generate_synthetic(TINY_SPEC)
    vocab = Vocab.build(corpus.texts())
    examples = examples_from_records(make_train_records(corpus, "train", None, 1, 0), corpus.doc_text)
    return examples, vocab, TINY.replace(vocab_size=len(vocab))


# -- losses ------------------------------------------------------------------

@pytest.mark.parametrize("y,expected", [((1.0, 0.0), 0.0), ((0.0, 1.0), 1.0), ((-1.0, 0.0), 2.0)])
def test_cosine_loss_examples(y, expected):
    assert float(cosine_loss(np.array([1.0, 0.0]), np.array(y)).data) == pytest.approx(expected, abs=1e-12)


def test_cosine_loss_rejects_zero_vector():
    with pytest.raises(InputError):
        cosine_loss(np.zeros(3), np.ones(3))


nonzero = arrays(np.float64, 6, elements=st.floats(-3, 3)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(nonzero, nonzero, st.floats(1e-2, 1e2), st.floats(1e-2, 1e2))
def test_cosine_loss_scale_invariant_and_bounded(x, y, a, b):
    base = float(cosine_loss(x, y).data)
    assert -1e-12 <= base <= 2.0 + 1e-12
    assert float(cosine_loss(a * x, b * y).data) == pytest.approx(base, abs=1e-6)


def test_contrastive_closed_forms():
    q = np.array([[1.0, 0.0]])
    two = in_batch_contrastive_loss(q, np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert float(two.data) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    tie = in_batch_contrastive_loss(q, np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert float(tie.data) == pytest.approx(math.log(2), abs=1e-12)
    docs = np.array([[1.0, 1.0]] * 5)
    uniform = in_batch_contrastive_loss(np.array([[0.3, 0.3], [2.0, 2.0]]), docs)
    assert float(uniform.data) == pytest.approx(math.log(5), abs=1e-12)


def test_contrastive_needs_a_negative():
    with pytest.raises(ConfigurationError):
        in_batch_contrastive_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 10_000), st.floats(0.05, 5))
def test_contrastive_nonnegative(b, negs, seed, temperature):
    if b + negs < 2:
        negs = 1
    rng = np.random.default_rng(seed)
    loss = in_batch_contrastive_loss(rng.normal(size=(b, 4)), rng.normal(size=(b + negs, 4)), temperature)
    assert float(loss.data) >= 0.0


# -- configuration -----------------------------------------------------------

def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.objective, cfg.schedule, cfg.epochs, cfg.batch_size, cfg.learning_rate) == \
        ("in_batch_contrastive", "linear", 40, 128, 5e-5)
    for bad in (dict(objective="x"), dict(schedule="cosine"), dict(epochs=0), dict(learning_rate=0.0),
                dict(similarity="l2"), dict(negatives_per_example=-1)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    with pytest.raises(InputError):
        TrainExample("q", "")


def test_towers_must_share_width():
    examples, vocab, cfg = _tiny_data()
    with pytest.raises(ConfigurationError):
        train_retriever(examples, cfg, cfg.replace(hidden_dim=16, num_heads=2), TrainConfig(epochs=1), vocab)
    with pytest.raises(InputError):
        train_retriever([], cfg, cfg)


# -- training ------------------------------------------------------------------

def test_training_is_bitwise_deterministic():
    examples, vocab, cfg = _tiny_data()
    tcfg = TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3, seed=5)
    a = train_retriever(examples, cfg, cfg, tcfg, vocab)
    b = train_retriever(examples, cfg, cfg, tcfg, vocab)
    assert a.loss_curve == b.loss_curve and a.step_losses == b.step_losses
    assert dumps(a.model.query_encoder) == dumps(b.model.query_encoder)
    assert dumps(a.model.document_encoder) == dumps(b.model.document_encoder)
    c = train_retriever(examples, cfg, cfg, dataclasses.replace(tcfg, seed=6), vocab)
    assert c.loss_curve != a.loss_curve


def test_asymmetric_towers_train_to_compatible_dims():
    examples, vocab, cfg = _tiny_data()
    result = train_retriever(examples, cfg.replace(num_layers=1), cfg.replace(num_layers=3),
                             TrainConfig(epochs=1, batch_size=16), vocab)
    model = result.model
    assert model.query_encoder.config.num_layers == 1 and model.document_encoder.config.num_layers == 3
    q = model.query_encoder.encode_texts(["anything"], vocab)
    d = model.document_encoder.encode_texts(["anything"], vocab)
    assert q.shape == d.shape
    assert model.query_encoder.mode == "eval"
    with pytest.raises(ConfigurationError):
        BiEncoder(model.query_encoder, TransformerEncoder(cfg.replace(hidden_dim=16, num_heads=2)), vocab)


def test_cosine_objective_collapses_to_chance():
    examples, vocab, cfg = _tiny_data()
    tcfg = TrainConfig(objective="cosine_eq1", epochs=10, batch_size=16, learning_rate=1e-3, schedule="constant")
    result = train_retriever(examples, cfg, cfg, tcfg, vocab)
    assert result.loss_curve[-1] < 0.01
    assert in_batch_accuracy(result.model, examples, 16) <= 2 * (1 / 16)


def test_divergence_names_the_step(monkeypatch):
    examples, vocab, cfg = _tiny_data()
    import kalekit.trainer as trainer

    real = trainer.batch_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss = real(*args)
        return loss * Tensor(np.nan) if calls["n"] == 3 else loss

    monkeypatch.setattr(trainer, "batch_loss", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        train_retriever(examples, cfg, cfg, TrainConfig(epochs=1, batch_size=8), vocab)
    assert info.value.step == 2 and "step 2" in str(info.value)


@pytest.mark.slow
def test_epoch_loss_decreases_over_first_three_epochs():
    corpus = generate_synthetic()
    vocab = Vocab.build(corpus.texts())
    examples = examples_from_records(make_train_records(corpus), corpus.doc_text)
    cfg = EncoderConfig(vocab_size=len(vocab))
    curve = train_retriever(examples, cfg, cfg, dataclasses.replace(DESK_TRAIN, epochs=3), vocab).loss_curve
    assert curve[0] > curve[1] > curve[2]
