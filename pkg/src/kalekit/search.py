"""Exact top-k retrieval over a frozen document index.

Index file layout (little-endian)::

    b"KALEIDX1", u32 dim, u32 count, u8 similarity (0 cosine, 1 dot),
    count x (u16 id length + UTF-8 id), count*dim f32 row-major vectors
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import TransformerEncoder, Vocab
from .errors import DimensionError, FormatError, InputError, ParameterError, ParseError

MAGIC = b"KALEIDX1"
SIMILARITY_CODES = {"cosine": 0, "dot": 1}


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise InputError("cannot L2-normalise a zero vector")
    return (x / norms).astype(np.float32)


@dataclass
class RetrievalIndex:
    dim: int
    doc_ids: list[str]
    vectors: np.ndarray
    similarity: str = "cosine"
    _id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.similarity not in SIMILARITY_CODES:
            raise ParameterError(f"similarity must be 'cosine' or 'dot', got {self.similarity!r}")
        if self.vectors.ndim != 2 or self.vectors.shape != (len(self.doc_ids), self.dim):
            raise DimensionError(
                f"index matrix {self.vectors.shape} does not match {len(self.doc_ids)} ids x dim {self.dim}")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise InputError("duplicate doc ids in index")
        if not np.all(np.isfinite(self.vectors)):
            raise InputError("index contains non-finite values")
        # position of each id in ascending id order, the tie-break key
        self._id_rank = np.argsort(np.argsort(np.array(self.doc_ids, dtype=object), kind="stable"), kind="stable")

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __eq__(self, other) -> bool:
        return (isinstance(other, RetrievalIndex) and self.similarity == other.similarity
                and self.doc_ids == other.doc_ids and np.array_equal(self.vectors, other.vectors))

    def scores(self, query_vec) -> np.ndarray:
        q = np.asarray(query_vec, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionError(f"query dim {q.shape[0]} does not match index dim {self.dim}")
        if self.similarity == "cosine":
            q = normalize_rows(q[None, :])[0]
        # float64 accumulation of exact float32 products, rounded back to float32, so that
        # mathematically equal scores compare equal whatever row blocking BLAS uses
        return (self.vectors.astype(np.float64) @ q.astype(np.float64)).astype(np.float32)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IIB", self.dim, len(self.doc_ids), SIMILARITY_CODES[self.similarity]))
        for doc_id in self.doc_ids:
            raw = doc_id.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
        buf.write(self.vectors.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RetrievalIndex":
        if data[:8] != MAGIC:
            raise FormatError("not an index file: bad magic")
        try:
            dim, count, code = struct.unpack_from("<IIB", data, 8)
            pos = 17
            ids = []
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, pos)
                pos += 2
                ids.append(data[pos:pos + n].decode("utf-8"))
                pos += n
        except struct.error as exc:
            raise FormatError(f"truncated index file: {exc}") from None
        expected = pos + 4 * dim * count
        if len(data) != expected:
            raise FormatError(f"index file is {len(data)} bytes, expected {expected}")
        vectors = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float32).reshape(count, dim)
        similarity = {v: k for k, v in SIMILARITY_CODES.items()}.get(code)
        if similarity is None:
            raise FormatError(f"unknown similarity code {code}")
        return cls(dim, ids, vectors, similarity)

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_index(docs: Sequence[tuple[str, str]], encoder: TransformerEncoder, vocab: Vocab,
                similarity: str = "cosine", batch_size: int = 64) -> RetrievalIndex:
    """Encode ``docs`` (id, text) in input order with ``encoder`` in eval mode."""
    if not docs:
        raise InputError("cannot index an empty document list")
    ids = [d for d, _ in docs]
    seen = set()
    for d in ids:
        if d in seen:
            raise InputError(f"duplicate doc id {d!r}")
        seen.add(d)
    mode = encoder.mode
    encoder.eval()
    try:
        vectors = encoder.encode_texts([t for _, t in docs], vocab, batch_size)
    finally:
        encoder.mode = mode
    if similarity == "cosine":
        vectors = normalize_rows(vectors)
    return RetrievalIndex(encoder.config.hidden_dim, ids, vectors, similarity)


def search_topk(index: RetrievalIndex, query_vec, k: int) -> list[tuple[str, float]]:
    """Exact top-k by similarity, descending; ties by ascending doc id."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    scores = index.scores(query_vec)
    order = np.lexsort((index._id_rank, -scores))[:k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def search_batch(index: RetrievalIndex, query_vecs: np.ndarray, k: int) -> list[list[tuple[str, float]]]:
    return [search_topk(index, q, k) for q in np.asarray(query_vecs)]


def retrieve(index: RetrievalIndex, encoder: TransformerEncoder, vocab: Vocab,
             queries: Sequence[tuple[str, str]], k: int = 200, batch_size: int = 64) -> dict[str, list[tuple[str, float]]]:
    mode = encoder.mode
    encoder.eval()
    try:
        vecs = encoder.encode_texts([t for _, t in queries], vocab, batch_size)
    finally:
        encoder.mode = mode
    return {qid: search_topk(index, v, k) for (qid, _), v in zip(queries, vecs)}


# ---------------------------------------------------------------------------
# results file: query_id TAB doc_id TAB rank TAB score
# ---------------------------------------------------------------------------

def write_results(results: Mapping[str, Sequence[tuple[str, float]]], path) -> None:
    lines = []
    for qid, ranking in results.items():
        for rank, (doc_id, score) in enumerate(ranking, start=1):
            lines.append(f"{qid}\t{doc_id}\t{rank}\t{score:.6f}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_results(path) -> dict[str, list[tuple[str, float]]]:
    out: dict[str, list[tuple[str, float]]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(f"expected 4 fields, got {len(cols)}", n, str(path))
        qid, doc_id, rank, score = cols
        ranking = out.setdefault(qid, [])
        try:
            if int(rank) != len(ranking) + 1:
                raise ParseError(f"rank {rank} out of sequence for {qid}", n, str(path))
            ranking.append((doc_id, float(score)))
        except ValueError:
            raise ParseError(f"bad rank/score {rank!r}/{score!r}", n, str(path)) from None
    return out
