"""Retrieval-quality arithmetic: accuracy at depth, MRR@10, NDCG@10, impact and speedup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InputError, ParameterError, ParseError

DEPTHS = (20, 100, 200)

Ranking = Sequence  # list of doc ids, or of (doc_id, score) pairs


def _ids(ranking: Ranking) -> list[str]:
    return [r[0] if isinstance(r, tuple) else r for r in ranking]


def _relevant(qrels: Mapping[str, set], qid: str) -> set:
    try:
        rel = qrels[qid]
    except KeyError:
        raise InputError(f"query {qid!r} has no qrels entry") from None
    if not rel:
        raise InputError(f"query {qid!r} has an empty relevant set")
    return rel


def retrieval_accuracy(results: Mapping[str, Ranking], qrels: Mapping[str, set], depth: int) -> float:
    """Hit rate: fraction of queries with at least one relevant doc in the top ``depth``."""
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    if not results:
        return 0.0
    hits = 0
    for qid, ranking in results.items():
        rel = _relevant(qrels, qid)
        hits += any(d in rel for d in _ids(ranking)[:depth])
    return hits / len(results)


def recall_at_k(results: Mapping[str, Ranking], qrels: Mapping[str, set], depth: int) -> float:
    """Mean fraction of each query's relevant docs found in the top ``depth``."""
    if depth < 1:
        raise ParameterError(f"depth must be >= 1, got {depth}")
    if not results:
        return 0.0
    total = 0.0
    for qid, ranking in results.items():
        rel = _relevant(qrels, qid)
        total += len(rel.intersection(_ids(ranking)[:depth])) / len(rel)
    return total / len(results)


def ranking_metrics(results: Mapping[str, Ranking], qrels: Mapping[str, set], cutoff: int = 10) -> tuple[float, float]:
    """(MRR@cutoff, NDCG@cutoff) with binary gains and 1/log2(rank + 1) discount."""
    if not results:
        return 0.0, 0.0
    mrr = ndcg = 0.0
    for qid, ranking in results.items():
        rel = _relevant(qrels, qid)
        top = _ids(ranking)[:cutoff]
        for rank, d in enumerate(top, start=1):
            if d in rel:
                mrr += 1.0 / rank
                break
        dcg = sum(1.0 / math.log2(rank + 1) for rank, d in enumerate(top, start=1) if d in rel)
        idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(rel), cutoff) + 1))
        ndcg += dcg / idcg
    n = len(results)
    return mrr / n, ndcg / n


def relative_impact(value: float, baseline: float) -> float:
    """Percentage change of ``value`` against ``baseline``."""
    if baseline == 0:
        raise ParameterError("relative impact needs a non-zero baseline")
    if baseline < 0:
        raise ParameterError(f"baseline must be > 0, got {baseline}")
    return (value - baseline) / baseline * 100.0


def speedup(qps: float, baseline_qps: float) -> float:
    if not baseline_qps > 0:
        raise ParameterError(f"baseline QPS must be > 0, got {baseline_qps}")
    return qps / baseline_qps


def random_hit_rate(num_docs: int, num_relevant: int, depth: int) -> float:
    """Expected hit rate of a uniformly random ranking (hypergeometric P[at least one hit])."""
    depth = min(depth, num_docs)
    if num_docs - num_relevant < depth:
        return 1.0
    return 1.0 - math.comb(num_docs - num_relevant, depth) / math.comb(num_docs, depth)


def random_recall(num_docs: int, depth: int) -> float:
    """Expected fraction of relevant docs a random ranking places in the top ``depth``."""
    return min(depth, num_docs) / num_docs


@dataclass
class EvalReport:
    name: str
    accuracy: dict[int, float]
    mrr_at_10: float
    ndcg_at_10: float
    recall: dict[int, float] = field(default_factory=dict)
    num_queries: int = 0
    baseline: str | None = None
    impact: dict[int, float] = field(default_factory=dict)

    def with_baseline(self, baseline: "EvalReport") -> "EvalReport":
        impact = {d: relative_impact(self.accuracy[d], baseline.accuracy[d])
                  for d in self.accuracy if baseline.accuracy.get(d)}
        return EvalReport(self.name, dict(self.accuracy), self.mrr_at_10, self.ndcg_at_10,
                          dict(self.recall), self.num_queries, baseline.name, impact)

    def to_text(self) -> str:
        lines = [f"name={self.name}", f"num_queries={self.num_queries}"]
        lines += [f"accuracy@{d}={v!r}" for d, v in sorted(self.accuracy.items())]
        lines += [f"recall@{d}={v!r}" for d, v in sorted(self.recall.items())]
        lines += [f"mrr@10={self.mrr_at_10!r}", f"ndcg@10={self.ndcg_at_10!r}"]
        if self.baseline is not None:
            lines.append(f"baseline={self.baseline}")
            lines += [f"impact@{d}={v!r}" for d, v in sorted(self.impact.items())]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        values: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {line!r}", n)
            values[key] = value

        def by_depth(prefix: str) -> dict[int, float]:
            return {int(k[len(prefix):]): float(v) for k, v in values.items() if k.startswith(prefix)}

        try:
            return cls(values["name"], by_depth("accuracy@"), float(values["mrr@10"]),
                       float(values["ndcg@10"]), by_depth("recall@"), int(values.get("num_queries", 0)),
                       values.get("baseline"), by_depth("impact@"))
        except KeyError as exc:
            raise ParseError(f"eval report lacks key {exc.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def evaluate(results: Mapping[str, Ranking], qrels: Mapping[str, set], name: str = "run",
             depths: Sequence[int] = DEPTHS, baseline: EvalReport | None = None) -> EvalReport:
    accuracy = {d: retrieval_accuracy(results, qrels, d) for d in depths}
    recall = {d: recall_at_k(results, qrels, d) for d in depths}
    mrr, ndcg = ranking_metrics(results, qrels)
    report = EvalReport(name, accuracy, mrr, ndcg, recall, len(results))
    return report.with_baseline(baseline) if baseline is not None else report
