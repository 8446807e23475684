"""Corpus files, synthetic topic-cluster datasets and the lexical baseline."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, ParseError, SpecError

Qrels = dict[str, set[str]]


@dataclass
class Corpus:
    docs: list[tuple[str, str]]
    queries: list[tuple[str, str]]
    qrels: Qrels
    splits: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [d for d, _ in self.docs]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate doc ids in corpus")
        qids = [q for q, _ in self.queries]
        if len(set(qids)) != len(qids):
            raise InputError("duplicate query ids in corpus")
        known = set(ids)
        for qid, rel in self.qrels.items():
            if not rel:
                raise InputError(f"query {qid} has an empty relevant set")
            missing = rel - known
            if missing:
                raise InputError(f"qrels for {qid} name unknown docs {sorted(missing)[:3]}")
        names = list(self.splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if self.splits[a] & self.splits[b]:
                    raise InputError(f"splits {a!r} and {b!r} overlap")

    @property
    def doc_text(self) -> dict[str, str]:
        return dict(self.docs)

    @property
    def query_text(self) -> dict[str, str]:
        return dict(self.queries)

    def split_queries(self, split: str) -> list[tuple[str, str]]:
        if split not in self.splits:
            raise InputError(f"corpus has no split {split!r}")
        members = self.splits[split]
        return [(q, t) for q, t in self.queries if q in members]

    def texts(self) -> list[str]:
        return [t for _, t in self.docs] + [t for _, t in self.queries]


# ---------------------------------------------------------------------------
# tab-separated line files
# ---------------------------------------------------------------------------

def _clean(field_: str, what: str) -> str:
    if "\t" in field_ or "\n" in field_:
        raise InputError(f"{what} {field_!r} contains a tab or newline")
    return field_


def _write_lines(path: Path, rows: Iterable[Sequence[str]]) -> None:
    path.write_text("".join("\t".join(row) + "\n" for row in rows), encoding="utf-8")


def _read_rows(path: Path, ncols: int) -> list[list[str]]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != ncols:
            raise ParseError(f"expected {ncols} tab-separated fields, got {len(cols)}", n, str(path))
        rows.append(cols)
    return rows


def write_corpus(corpus: Corpus, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_lines(d / "docs.tsv", ((_clean(i, "doc id"), _clean(t, "doc text")) for i, t in corpus.docs))
    _write_lines(d / "queries.tsv", ((_clean(i, "query id"), _clean(t, "query text")) for i, t in corpus.queries))
    order = {doc_id: n for n, (doc_id, _) in enumerate(corpus.docs)}
    qrel_rows = []
    for qid, _ in corpus.queries:
        for doc_id in sorted(corpus.qrels.get(qid, ()), key=order.__getitem__):
            qrel_rows.append((qid, doc_id))
    _write_lines(d / "qrels.tsv", qrel_rows)
    split_of = {q: name for name, members in corpus.splits.items() for q in members}
    _write_lines(d / "splits.tsv", ((q, split_of[q]) for q, _ in corpus.queries if q in split_of))


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    for qid, doc_id in _read_rows(path, 2):
        qrels.setdefault(qid, set()).add(doc_id)
    return qrels


def read_corpus(directory) -> Corpus:
    d = Path(directory)
    docs = [(a, b) for a, b in _read_rows(d / "docs.tsv", 2)]
    queries = [(a, b) for a, b in _read_rows(d / "queries.tsv", 2)]
    qrels = read_qrels(d / "qrels.tsv")
    splits: dict[str, set[str]] = {}
    if (d / "splits.tsv").exists():
        for qid, name in _read_rows(d / "splits.tsv", 2):
            splits.setdefault(name, set()).add(qid)
    return Corpus(docs, queries, qrels, splits)


# ---------------------------------------------------------------------------
# synthetic topic clusters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_topics: int = 50
    vocab_per_topic: int = 16
    shared_vocab: int = 200
    docs_per_topic: int = 20
    doc_len: int = 20
    queries_per_topic: int = 8
    query_len: int = 12
    noise_rate: float = 0.25
    dev_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_topics", "vocab_per_topic", "docs_per_topic", "doc_len",
                     "queries_per_topic", "query_len"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.shared_vocab < 0:
            raise SpecError("shared_vocab must be >= 0")
        if not 0.0 <= self.noise_rate < 1.0:
            raise SpecError("noise_rate must lie in [0, 1)")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise SpecError("dev_fraction must lie in [0, 1)")
        for name in ("doc_len", "query_len"):
            length = getattr(self, name)
            noise = noise_count(length, self.noise_rate)
            if length - noise > self.vocab_per_topic:
                raise SpecError(
                    f"vocabulary exhausted: {name}={length} needs {length - noise} distinct topic "
                    f"tokens but vocab_per_topic={self.vocab_per_topic}")
            if noise > self.shared_vocab:
                raise SpecError(
                    f"vocabulary exhausted: {name}={length} needs {noise} distinct shared tokens "
                    f"but shared_vocab={self.shared_vocab}")


def noise_count(length: int, rate: float) -> int:
    return int(math.floor(length * rate + 0.5))


def topic_token(topic: int, j: int) -> str:
    return f"t{topic:03d}w{j:03d}"


def shared_token(j: int) -> str:
    return f"s{j:04d}"


def _sample_text(rng: np.random.Generator, topic: int, length: int, spec: SyntheticSpec) -> str:
    noise = noise_count(length, spec.noise_rate)
    topical = rng.choice(spec.vocab_per_topic, size=length - noise, replace=False)
    words = [topic_token(topic, int(j)) for j in topical]
    if noise:
        words += [shared_token(int(j)) for j in rng.choice(spec.shared_vocab, size=noise, replace=False)]
    order = rng.permutation(len(words))
    return " ".join(words[i] for i in order)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Corpus:
    """Topic-cluster corpus: relevance is same-topic membership."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    docs: list[tuple[str, str]] = []
    topic_docs: list[list[str]] = []
    for t in range(spec.num_topics):
        ids = []
        for _ in range(spec.docs_per_topic):
            doc_id = f"d{len(docs):05d}"
            docs.append((doc_id, _sample_text(rng, t, spec.doc_len, spec)))
            ids.append(doc_id)
        topic_docs.append(ids)
    queries: list[tuple[str, str]] = []
    qrels: Qrels = {}
    train, dev = set(), set()
    n_dev = int(round(spec.queries_per_topic * spec.dev_fraction))
    for t in range(spec.num_topics):
        for j in range(spec.queries_per_topic):
            qid = f"q{len(queries):05d}"
            queries.append((qid, _sample_text(rng, t, spec.query_len, spec)))
            qrels[qid] = set(topic_docs[t])
            (dev if j >= spec.queries_per_topic - n_dev else train).add(qid)
    splits = {"train": train}
    if dev:
        splits["dev"] = dev
    return Corpus(docs, queries, qrels, splits)


# ---------------------------------------------------------------------------
# lexical baseline
# ---------------------------------------------------------------------------

def lexical_rankings(corpus: Corpus, queries: Sequence[tuple[str, str]], depth: int) -> dict[str, list[str]]:
    """TF-IDF cosine ranking of every doc for each query; ties by ascending doc id."""
    vocab: dict[str, int] = {}
    rows = []
    for _, text in corpus.docs:
        counts = Counter(text.lower().split())
        rows.append(counts)
        for tok in counts:
            vocab.setdefault(tok, len(vocab))
    n = len(corpus.docs)
    tf = np.zeros((n, len(vocab)))
    for i, counts in enumerate(rows):
        for tok, c in counts.items():
            tf[i, vocab[tok]] = c
    df = (tf > 0).sum(axis=0)
    idf = np.log(n / df)
    docs = tf * idf
    docs /= np.maximum(np.linalg.norm(docs, axis=1, keepdims=True), 1e-12)
    doc_ids = [d for d, _ in corpus.docs]
    id_rank = np.argsort(np.argsort(np.array(doc_ids)))
    out: dict[str, list[str]] = {}
    for qid, text in queries:
        q = np.zeros(len(vocab))
        for tok, c in Counter(text.lower().split()).items():
            if tok in vocab:
                q[vocab[tok]] = c
        q *= idf
        scores = docs @ q
        order = np.lexsort((id_rank, -scores))[:depth]
        out[qid] = [doc_ids[i] for i in order]
    return out


# ---------------------------------------------------------------------------
# training records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRecord:
    """One line of a training file: query text, positive doc id, negative doc ids."""

    query: str
    positive_id: str
    negative_ids: tuple[str, ...] = ()


def make_train_records(corpus: Corpus, split: str = "train", positives_per_query: int | None = None,
                       negatives: int = 1, seed: int = 0) -> list[TrainRecord]:
    """Pair each split query with its relevant docs and random non-relevant negatives."""
    rng = np.random.default_rng(seed)
    doc_ids = [d for d, _ in corpus.docs]
    order = {d: i for i, d in enumerate(doc_ids)}
    records = []
    for qid, text in corpus.split_queries(split):
        relevant = sorted(corpus.qrels[qid], key=order.__getitem__)
        if positives_per_query is not None and positives_per_query < len(relevant):
            picks = rng.choice(len(relevant), size=positives_per_query, replace=False)
            relevant = [relevant[i] for i in sorted(picks)]
        rel_set = corpus.qrels[qid]
        pool = [d for d in doc_ids if d not in rel_set]
        for pos in relevant:
            negs = tuple(pool[i] for i in rng.choice(len(pool), size=min(negatives, len(pool)), replace=False)) \
                if negatives else ()
            records.append(TrainRecord(text, pos, negs))
    return records


def write_train_file(records: Sequence[TrainRecord], path) -> None:
    _write_lines(Path(path), ((_clean(r.query, "query"), r.positive_id, ",".join(r.negative_ids))
                              for r in records))


def read_train_file(path) -> list[TrainRecord]:
    out = []
    for q, pos, negs in _read_rows(path, 3):
        out.append(TrainRecord(q, pos, tuple(n for n in negs.split(",") if n)))
    return out
