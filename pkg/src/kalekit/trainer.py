"""Bi-encoder retriever training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import TrainRecord
from .encoder import EncoderConfig, TransformerEncoder, Vocab, tokenize
from .errors import ConfigurationError, InputError, TrainingDivergedError
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

OBJECTIVES = ("cosine_eq1", "in_batch_contrastive")
SCHEDULES = ("linear", "constant")

# values from the published bi-encoder grids
EPOCH_GRID = (3, 40)
BATCH_GRID = (8, 128)
LR_GRID = (1e-5, 5e-5, 5e-6)
NEGATIVES_GRID = (1, 8)


@dataclass(frozen=True)
class TrainExample:
    query: str
    positive_doc: str
    negative_docs: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.positive_doc:
            raise InputError("positive_doc must be non-empty")
        if len(self.negative_docs) > 8:
            raise InputError("at most 8 negative docs per example")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "in_batch_contrastive"
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 5e-5
    schedule: str = "linear"
    negatives_per_example: int = 1
    seed: int = 0
    temperature: float = 1.0
    similarity: str = "cosine"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigurationError(f"similarity must be 'cosine' or 'dot', got {self.similarity!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0 or not self.temperature > 0:
            raise ConfigurationError("learning_rate and temperature must be > 0")
        if self.negatives_per_example < 0:
            raise ConfigurationError("negatives_per_example must be >= 0")


@dataclass
class BiEncoder:
    query_encoder: TransformerEncoder
    document_encoder: TransformerEncoder
    vocab: Vocab

    def __post_init__(self):
        qh = self.query_encoder.config.hidden_dim
        dh = self.document_encoder.config.hidden_dim
        if qh != dh:
            raise ConfigurationError(f"towers must share hidden_dim, got query {qh} vs document {dh}")

    def eval(self) -> "BiEncoder":
        self.query_encoder.eval()
        self.document_encoder.eval()
        return self


@dataclass
class TrainResult:
    model: BiEncoder
    loss_curve: list[float]
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return x.reshape(1, -1) if x.ndim == 1 else x


def _check_nonzero(x: Tensor, what: str) -> None:
    if np.any(np.linalg.norm(x.data, axis=-1) == 0):
        raise InputError(f"{what} contains a zero-norm vector; cosine is undefined")


def cosine_loss(x, y) -> Tensor:
    """1 - cos(x, y), averaged over rows when given batches."""
    x, y = _as_rows(x), _as_rows(y)
    if x.shape != y.shape:
        raise InputError(f"cosine_loss: shapes {x.shape} and {y.shape} differ")
    _check_nonzero(x, "x")
    _check_nonzero(y, "y")
    cos = (T.l2_normalize(x) * T.l2_normalize(y)).sum(axis=-1)
    return (1.0 - cos).mean()


def similarity_matrix(queries: Tensor, docs: Tensor, similarity: str = "cosine") -> Tensor:
    if similarity == "cosine":
        _check_nonzero(queries, "queries")
        _check_nonzero(docs, "docs")
        queries, docs = T.l2_normalize(queries), T.l2_normalize(docs)
    return T.matmul(queries, docs.transpose(1, 0))


def in_batch_contrastive_loss(queries, docs, temperature: float = 1.0, similarity: str = "cosine") -> Tensor:
    """Cross-entropy of each query against its positive among all candidate docs.

    ``docs`` holds the batch positives first (row i is the positive of query i)
    followed by any explicit negatives; every row is a candidate for every query.
    """
    queries, docs = _as_rows(queries), _as_rows(docs)
    b, m = queries.shape[0], docs.shape[0]
    if m < b:
        raise InputError(f"need at least one positive per query: {b} queries, {m} docs")
    if m < 2:
        raise ConfigurationError("a single query with no negatives has no contrast")
    logits = similarity_matrix(queries, docs, similarity)
    logp = T.log_softmax(logits, temperature)
    target = np.zeros((b, m), dtype=logp.dtype)
    target[np.arange(b), np.arange(b)] = 1.0
    return -(logp * Tensor(target)).sum() * (1.0 / b)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def examples_from_records(records: Sequence[TrainRecord], doc_text: Mapping[str, str]) -> list[TrainExample]:
    out = []
    for n, r in enumerate(records, start=1):
        try:
            out.append(TrainExample(r.query, doc_text[r.positive_id],
                                    tuple(doc_text[d] for d in r.negative_ids)))
        except KeyError as exc:
            raise InputError(f"training record {n} names unknown doc id {exc.args[0]!r}") from None
    return out


class _TokenCache:
    def __init__(self, vocab: Vocab, max_len: int):
        self.vocab, self.max_len = vocab, max_len
        self.cache: dict[str, tuple[list[int], list[int]]] = {}

    def batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        rows = []
        for t in texts:
            hit = self.cache.get(t)
            if hit is None:
                hit = self.cache[t] = tokenize(t, self.vocab, self.max_len)
            rows.append(hit)
        ids = np.array([r[0] for r in rows], dtype=np.int64)
        mask = np.array([r[1] for r in rows], dtype=np.int64)
        width = int(mask.sum(axis=1).max())
        return ids[:, :width], mask[:, :width]


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def batch_loss(model: BiEncoder, batch: Sequence[TrainExample], tcfg: TrainConfig,
               qtok: _TokenCache, dtok: _TokenCache) -> Tensor:
    queries = [ex.query for ex in batch]
    negs = [d for ex in batch for d in ex.negative_docs[: tcfg.negatives_per_example]]
    docs = [ex.positive_doc for ex in batch] + negs
    qv = model.query_encoder(*qtok.batch(queries))
    dv = model.document_encoder(*dtok.batch(docs))
    if tcfg.objective == "cosine_eq1":
        return cosine_loss(qv, dv[: len(batch)])
    return in_batch_contrastive_loss(qv, dv, tcfg.temperature, tcfg.similarity)


def train_retriever(data: Sequence[TrainExample], qcfg: EncoderConfig, dcfg: EncoderConfig,
                    tcfg: TrainConfig = TrainConfig(), vocab: Vocab | None = None) -> TrainResult:
    """Train query and document towers jointly; deterministic under ``tcfg.seed``."""
    if not data:
        raise InputError("training data is empty")
    if qcfg.hidden_dim != dcfg.hidden_dim:
        raise ConfigurationError(
            f"towers must share hidden_dim, got query {qcfg.hidden_dim} vs document {dcfg.hidden_dim}")
    if vocab is None:
        vocab = Vocab.build([t for ex in data for t in (ex.query, ex.positive_doc, *ex.negative_docs)])
    for cfg in (qcfg, dcfg):
        if cfg.vocab_size < len(vocab):
            raise ConfigurationError(f"vocab_size {cfg.vocab_size} smaller than vocabulary ({len(vocab)})")

    rng = np.random.default_rng(tcfg.seed)
    model = BiEncoder(TransformerEncoder(qcfg, seed=rng), TransformerEncoder(dcfg, seed=rng), vocab)
    model.query_encoder.train()
    model.document_encoder.train()
    params = {f"query.{n}": p for n, p in model.query_encoder.parameters.items()}
    params.update({f"document.{n}": p for n, p in model.document_encoder.parameters.items()})
    opt = Adam(params, learning_rate=tcfg.learning_rate)
    qtok = _TokenCache(vocab, qcfg.max_seq_len)
    dtok = _TokenCache(vocab, dcfg.max_seq_len)

    per_epoch = len(_batches(np.arange(len(data)), tcfg.batch_size))
    total = per_epoch * tcfg.epochs
    step = 0
    curve: list[float] = []
    step_losses: list[float] = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for idx in _batches(order, tcfg.batch_size):
            lr = tcfg.learning_rate * (1.0 - step / total) if tcfg.schedule == "linear" else tcfg.learning_rate
            opt.zero_grad()
            loss = batch_loss(model, [data[i] for i in idx], tcfg, qtok, dtok)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at step {step}", step)
            loss.backward()
            opt.step(lr)
            losses.append(value)
            step += 1
        curve.append(float(np.mean(losses)))
        step_losses.extend(losses)
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, tcfg.epochs, curve[-1])
    model.eval()
    return TrainResult(model, curve, step, step_losses)


def in_batch_accuracy(model: BiEncoder, data: Sequence[TrainExample], batch_size: int,
                      similarity: str = "cosine") -> float:
    """Fraction of queries whose own positive scores highest among the batch positives (eval mode)."""
    qtok = _TokenCache(model.vocab, model.query_encoder.config.max_seq_len)
    dtok = _TokenCache(model.vocab, model.document_encoder.config.max_seq_len)
    modes = model.query_encoder.mode, model.document_encoder.mode
    model.eval()
    hits = total = 0
    try:
        with no_grad():
            for idx in _batches(np.arange(len(data)), batch_size):
                batch = [data[i] for i in idx]
                qv = model.query_encoder(*qtok.batch([ex.query for ex in batch]))
                dv = model.document_encoder(*dtok.batch([ex.positive_doc for ex in batch]))
                sims = similarity_matrix(qv, dv, similarity).data
                hits += int(np.sum(np.argmax(sims, axis=1) == np.arange(len(batch))))
                total += len(batch)
    finally:
        model.query_encoder.mode, model.document_encoder.mode = modes
    return hits / total
