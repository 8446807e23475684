from __future__ import annotations

import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kalekit.data import (Corpus, SyntheticSpec, TrainRecord, generate_synthetic, lexical_rankings,
                          make_train_records, read_corpus, read_train_file, topic_token,
                          write_corpus, write_train_file)
from kalekit.errors import InputError, ParseError, SpecError
from kalekit.metrics import retrieval_accuracy

SMALL = SyntheticSpec(num_topics=6, docs_per_topic=5, queries_per_topic=4, shared_vocab=30, seed=3)


def test_default_spec_shape():
    corpus = generate_synthetic()
    assert len(corpus.docs) == 1000
    assert len(corpus.split_queries("train")) == 200 and len(corpus.split_queries("dev")) == 200
    assert all(len(rel) == 20 for rel in corpus.qrels.values())


def test_same_spec_gives_byte_identical_files(tmp_path):
    write_corpus(generate_synthetic(SMALL), tmp_path / "a")
    write_corpus(generate_synthetic(SMALL), tmp_path / "b")
    for name in ("docs.tsv", "queries.tsv", "qrels.tsv", "splits.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = dataclasses.replace(SMALL, seed=4)
    write_corpus(generate_synthetic(other), tmp_path / "c")
    assert (tmp_path / "a" / "docs.tsv").read_bytes() != (tmp_path / "c" / "docs.tsv").read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(3, 12), st.integers(0, 1000))
def test_noise_free_queries_are_topic_pure(topics, length, seed):
    spec = SyntheticSpec(num_topics=topics, vocab_per_topic=12, shared_vocab=10, docs_per_topic=3,
                         doc_len=length, queries_per_topic=2, query_len=length, noise_rate=0.0, seed=seed)
    corpus = generate_synthetic(spec)
    doc_topic = {d: i // 3 for i, (d, _) in enumerate(corpus.docs)}
    for qid, text in corpus.queries:
        topic = doc_topic[next(iter(corpus.qrels[qid]))]
        allowed = {topic_token(topic, j) for j in range(12)}
        assert set(text.split()) <= allowed
        assert {doc_topic[d] for d in corpus.qrels[qid]} == {topic}


def test_lexical_baseline_on_default_corpus():
    corpus = generate_synthetic()
    for split in ("train", "dev"):
        queries = corpus.split_queries(split)
        rankings = lexical_rankings(corpus, queries, 20)
        assert retrieval_accuracy(rankings, corpus.qrels, 20) >= 0.95


@pytest.mark.parametrize("bad", [dict(vocab_per_topic=4, doc_len=20), dict(noise_rate=1.0),
                                 dict(num_topics=0), dict(shared_vocab=0, noise_rate=0.5)])
def test_invalid_specs(bad):
    with pytest.raises(SpecError):
        generate_synthetic(dataclasses.replace(SMALL, **bad))


def test_corpus_and_train_file_round_trip(tmp_path):
    corpus = generate_synthetic(SMALL)
    write_corpus(corpus, tmp_path)
    again = read_corpus(tmp_path)
    assert again.docs == corpus.docs and again.queries == corpus.queries
    assert again.qrels == corpus.qrels and again.splits == corpus.splits
    records = make_train_records(corpus, "train", positives_per_query=2, negatives=3, seed=1)
    write_train_file(records, tmp_path / "train.tsv")
    assert read_train_file(tmp_path / "train.tsv") == records


def test_train_records_respect_relevance():
    corpus = generate_synthetic(SMALL)
    records = make_train_records(corpus, "train", None, 2, 0)
    by_text = dict((t, q) for q, t in corpus.queries)
    assert len(records) == len(corpus.split_queries("train")) * SMALL.docs_per_topic
    for r in records:
        rel = corpus.qrels[by_text[r.query]]
        assert r.positive_id in rel
        assert len(r.negative_ids) == 2 and not set(r.negative_ids) & rel
    assert make_train_records(corpus, "train", None, 2, 0) == records


def test_corpus_validation_and_parse_errors(tmp_path):
    with pytest.raises(InputError):
        Corpus([("a", "x"), ("a", "y")], [], {})
    with pytest.raises(InputError):
        Corpus([("a", "x")], [("q", "x")], {"q": {"zz"}})
    with pytest.raises(InputError):
        Corpus([("a", "x")], [("q", "x")], {"q": {"a"}}, {"train": {"q"}, "dev": {"q"}})
    (tmp_path / "train.tsv").write_text("query\td1\t\nbroken line\n")
    with pytest.raises(ParseError, match=":2:"):
        read_train_file(tmp_path / "train.tsv")
    write_train_file([TrainRecord("q", "d1")], tmp_path / "one.tsv")
    assert read_train_file(tmp_path / "one.tsv") == [TrainRecord("q", "d1")]
