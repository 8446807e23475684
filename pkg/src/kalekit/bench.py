"""Query-encoder latency harness and summary statistics.

Each run encodes ``num_queries`` queries one at a time (batch size 1) and
records per-query wall-clock latency. Per-run columns follow the layout of
published inference tables; cross-run rows are average, sample stdev,
95% CI half-width (1.96 sigma / sqrt(runs)), and the CI band.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import TransformerEncoder, Vocab, tokenize
from .errors import HarnessError, InputError, ParameterError, ParseError
from .tensor import no_grad

COLUMNS = ("items/sec", "Full Time", "Mean Time", "95th", "50th", "5th", "99th")
KEYS = ("items_per_sec", "full_time_sec", "mean_latency", "p95", "p50", "p5", "p99")
AGGREGATE_ROWS = ("average", "stdev", "CI", "Lower", "High")
Z95 = 1.96


@dataclass(frozen=True)
class BenchConfig:
    num_queries: int = 6500
    runs: int = 5
    warmup_iterations: int = 10
    seed: int = 0
    batch_size: int = 1
    max_seq_len: int = 32

    def __post_init__(self):
        if self.runs < 2:
            raise ParameterError("runs must be >= 2 to estimate a confidence interval")
        if self.num_queries < 1:
            raise ParameterError("num_queries must be >= 1")
        if self.warmup_iterations < 0:
            raise ParameterError("warmup_iterations must be >= 0")
        if self.batch_size != 1:
            raise ParameterError("the harness measures batch size 1 only")


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not samples:
        raise InputError("percentile of an empty sample")
    if not 0 < p <= 100:
        raise ParameterError(f"percentile must lie in (0, 100], got {p}")
    ordered = sorted(samples)
    rank = max(1, math.ceil(round(p / 100.0 * len(ordered), 9)))
    return ordered[rank - 1]


def confidence_interval(stdev: float, runs: int) -> float:
    return Z95 * stdev / math.sqrt(runs)


@dataclass
class Aggregate:
    average: float
    stdev: float | None
    ci95: float | None

    @property
    def lower(self) -> float | None:
        return None if self.ci95 is None else self.average - self.ci95

    @property
    def high(self) -> float | None:
        return None if self.ci95 is None else self.average + self.ci95


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean, sample stdev (n - 1) and CI half-width; spread is absent for one run."""
    if not values:
        raise InputError("aggregate of no runs")
    avg = float(np.mean(values))
    if len(values) < 2:
        return Aggregate(avg, None, None)
    sd = float(np.std(values, ddof=1))
    return Aggregate(avg, sd, confidence_interval(sd, len(values)))


@dataclass
class RunStats:
    items_per_sec: float
    full_time_sec: float
    mean_latency: float
    p95: float
    p50: float
    p5: float
    p99: float

    def values(self) -> list[float]:
        return [getattr(self, k) for k in KEYS]


def summarize(samples: Sequence[float], full_time: float | None = None) -> RunStats:
    """Per-run statistics over latency ``samples`` (seconds)."""
    if not samples:
        raise InputError("no latency samples")
    total = float(full_time) if full_time is not None else float(sum(samples))
    p95, p50, p5, p99 = (float(percentile(samples, p)) for p in (95, 50, 5, 99))
    return RunStats(len(samples) / total if total > 0 else float("inf"), total, float(np.mean(samples)),
                    p95, p50, p5, p99)


@dataclass
class BenchReport:
    runs: list[RunStats]
    name: str = "bench"
    num_queries: int = 0
    aggregates: dict[str, Aggregate] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = {k: aggregate([getattr(r, k) for r in self.runs]) for k in KEYS}

    def to_table(self) -> str:
        """Tab-separated table: one row per run, then the five aggregate rows."""
        lines = ["\t".join(("",) + COLUMNS)]
        for i, run in enumerate(self.runs, start=1):
            lines.append("\t".join([f"Run {i}"] + [_fmt(k, v) for k, v in zip(KEYS, run.values())]))
        for row in AGGREGATE_ROWS:
            cells = [row]
            for k in KEYS:
                agg = self.aggregates[k]
                value = {"average": agg.average, "stdev": agg.stdev, "CI": agg.ci95,
                         "Lower": agg.lower, "High": agg.high}[row]
                cells.append("NA" if value is None else _fmt(k, value))
            lines.append("\t".join(cells))
        return "".join(line + "\n" for line in lines)

    def to_keyvalue(self) -> str:
        lines = [f"name={self.name}", f"num_queries={self.num_queries}", f"runs={len(self.runs)}"]
        for i, run in enumerate(self.runs, start=1):
            lines += [f"run{i}.{k}={float(v)!r}" for k, v in zip(KEYS, run.values())]
        for k in KEYS:
            agg = self.aggregates[k]
            for label, value in (("average", agg.average), ("stdev", agg.stdev), ("ci95", agg.ci95),
                                 ("lower", agg.lower), ("high", agg.high)):
                lines.append(f"{k}.{label}={'NA' if value is None else repr(float(value))}")
        return "".join(line + "\n" for line in lines)

    def to_text(self) -> str:
        return self.to_table() + "\n" + self.to_keyvalue()

    @property
    def qps(self) -> float:
        return self.aggregates["items_per_sec"].average

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "BenchReport":
        """Rebuild a report from the key=value block of :meth:`to_text` output."""
        values: dict[str, str] = {}
        block = text.split("\n\n", 1)[-1]
        for n, line in enumerate(block.splitlines(), start=1):
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {line!r}", n)
            values[key] = value
        try:
            runs = [RunStats(*[float(values[f"run{i}.{k}"]) for k in KEYS])
                    for i in range(1, int(values["runs"]) + 1)]

            def opt(key: str) -> float | None:
                return None if values[key] == "NA" else float(values[key])

            aggs = {k: Aggregate(float(values[f"{k}.average"]), opt(f"{k}.stdev"), opt(f"{k}.ci95"))
                    for k in KEYS}
            return cls(runs, values["name"], int(values["num_queries"]), aggs)
        except KeyError as exc:
            raise ParseError(f"bench report lacks key {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "BenchReport":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(key: str, value: float) -> str:
    return f"{value:.3f}" if key in ("items_per_sec", "full_time_sec") else f"{value:.2E}"


def _check_clock() -> None:
    resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 1e-6:
        raise HarnessError(
            f"perf_counter resolution is {resolution:g}s (coarser than 1us); "
            "time larger query batches instead of single queries")


def _pin_to_one_cpu() -> set[int] | None:
    if not hasattr(os, "sched_setaffinity"):
        return None
    try:
        before = os.sched_getaffinity(0)
        os.sched_setaffinity(0, {min(before)})
        return before
    except OSError:
        return None


def run_bench(encoder: TransformerEncoder, queries: Sequence[str], vocab: Vocab,
              cfg: BenchConfig = BenchConfig(), name: str = "bench") -> BenchReport:
    """Time single-query encoding of ``cfg.num_queries`` queries (cycled) over ``cfg.runs`` runs."""
    if not queries:
        raise InputError("benchmark needs at least one query")
    if encoder.mode != "eval":
        raise ParameterError("benchmark the encoder in eval mode")
    _check_clock()
    max_len = min(cfg.max_seq_len, encoder.config.max_seq_len)
    # tokenisation happens up front; only the encoder forward pass is timed
    tokenized = []
    for text in queries:
        ids, mask = tokenize(text, vocab, max_len)
        width = sum(mask)
        tokenized.append((np.array(ids[:width])[None, :], np.array(mask[:width])[None, :]))
    order = [tokenized[i % len(tokenized)] for i in range(cfg.num_queries)]

    runs = []
    previous_affinity = _pin_to_one_cpu()
    try:
        with threadpool_limits(limits=1), no_grad():
            for _ in range(cfg.runs):
                for i in range(cfg.warmup_iterations):
                    encoder.forward(*order[i % len(order)])
                latencies = [0.0] * cfg.num_queries
                clock = time.perf_counter
                start = clock()
                for i, (ids, mask) in enumerate(order):
                    t0 = clock()
                    encoder.forward(ids, mask)
                    latencies[i] = clock() - t0
                full = clock() - start
                runs.append(summarize(latencies, full))
    finally:
        if previous_affinity is not None:
            os.sched_setaffinity(0, previous_affinity)
    return BenchReport(runs, name, cfg.num_queries)
