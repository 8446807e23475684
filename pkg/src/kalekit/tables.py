"""Re-verification of published table arithmetic from bundled transcriptions.

Three table kinds are understood, recognised by their header line:

* throughput (``layers size compressed_size method qps speedup``): speedup is
  recomputed as qps over the 12-layer qps of the same method;
* impact (``layers top20 impact20 ...``): every impact column is recomputed
  against the first (uncompressed) row;
* bench (the per-run latency layout of :mod:`kalekit.bench`): every CI cell
  is recomputed as 1.96 * stdev / sqrt(runs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .bench import COLUMNS, Z95, confidence_interval
from .errors import ParseError
from .metrics import relative_impact, speedup

TOLERANCE = {"throughput": 0.01, "impact": 0.02, "bench": 0.002}
THROUGHPUT_HEADER = ["layers", "size", "compressed_size", "method", "qps", "speedup"]
BASELINE_LAYERS = "12"


@dataclass
class TableCheck:
    name: str
    kind: str
    max_deviation: float
    checked: int
    tolerance: float
    worst: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance + 1e-9

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        text = (f"{status}\t{self.kind}\t{self.name}\tmax_dev={self.max_deviation:.6g}"
                f"\ttol={self.tolerance:g}\tchecked={self.checked}")
        return text + (f"\tworst={self.worst}" if self.worst else "")


@dataclass
class VerificationReport:
    checks: list[TableCheck]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def max_deviation(self, kind: str) -> float:
        return max((c.max_deviation for c in self.checks if c.kind == kind), default=0.0)

    def to_text(self) -> str:
        return "".join(c.line() + "\n" for c in self.checks)


def _rows(text: str, path: str) -> list[tuple[int, list[str]]]:
    rows = []
    for n, line in enumerate(text.split("\n"), start=1):
        if line.strip():
            rows.append((n, line.rstrip("\r").split("\t")))
    if not rows:
        raise ParseError("empty table", None, path)
    return rows


def _num(cell: str, line: int, path: str) -> float:
    try:
        value = float(cell.strip().rstrip("%"))
    except ValueError:
        raise ParseError(f"expected a number, got {cell!r}", line, path) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {cell!r}", line, path)
    return value


def _width(rows, width: int, path: str) -> None:
    for n, cells in rows:
        if len(cells) != width:
            raise ParseError(f"expected {width} fields, got {len(cells)}", n, path)


def check_throughput(rows, name: str, path: str) -> TableCheck:
    body = rows[1:]
    _width(body, len(THROUGHPUT_HEADER), path)
    baselines: dict[str, float] = {}
    for n, cells in body:
        if cells[0] == BASELINE_LAYERS:
            baselines[cells[3]] = _num(cells[4], n, path)
    worst, where, checked = 0.0, "", 0
    for n, cells in body:
        method = cells[3]
        if method not in baselines:
            raise ParseError(f"no {BASELINE_LAYERS}-layer baseline for method {method!r}", n, path)
        printed = _num(cells[5], n, path)
        dev = abs(speedup(_num(cells[4], n, path), baselines[method]) - printed)
        checked += 1
        if dev > worst:
            worst, where = dev, f"line {n}"
    return TableCheck(name, "throughput", worst, checked, TOLERANCE["throughput"], where)


def check_impact(rows, name: str, path: str) -> TableCheck:
    header = rows[0][1]
    pairs = [(i, i + 1) for i, h in enumerate(header) if h.startswith("top")
             and i + 1 < len(header) and header[i + 1].startswith("impact")]
    if not pairs:
        raise ParseError("impact table has no topK/impactK column pairs", rows[0][0], path)
    body = rows[1:]
    _width(body, len(header), path)
    base_line, base = body[0]
    worst, where, checked = 0.0, "", 0
    accuracies = []
    for n, cells in body:
        accs = []
        for acc_col, imp_col in pairs:
            acc = _num(cells[acc_col], n, path)
            printed = _num(cells[imp_col], n, path)
            dev = abs(relative_impact(acc, _num(base[acc_col], base_line, path)) - printed)
            checked += 1
            accs.append(acc)
            if dev > worst:
                worst, where = dev, f"line {n} {header[imp_col]}"
        accuracies.append((n, accs))
    notes = [f"line {n}: accuracy decreases with depth" for n, accs in accuracies
             if any(a > b for a, b in zip(accs, accs[1:]))]
    return TableCheck(name, "impact", worst, checked, TOLERANCE["impact"], where, notes)


def check_bench(rows, name: str, path: str) -> TableCheck:
    header = rows[0][1]
    if tuple(header[1:]) != COLUMNS:
        raise ParseError("bench header does not match the latency table layout", rows[0][0], path)
    body = rows[1:]
    _width(body, len(header), path)
    labelled = {cells[0]: (n, cells) for n, cells in body}
    runs = sum(1 for n, cells in body if cells[0].startswith("Run "))
    for label in ("stdev", "CI"):
        if label not in labelled:
            raise ParseError(f"bench table lacks a {label!r} row", None, path)
    if runs < 2:
        raise ParseError("bench table needs at least two runs", None, path)
    sd_line, sd_row = labelled["stdev"]
    ci_line, ci_row = labelled["CI"]
    worst, where = 0.0, ""
    for col in range(1, len(header)):
        sd = _num(sd_row[col], sd_line, path)
        dev = abs(confidence_interval(sd, runs) - _num(ci_row[col], ci_line, path))
        if dev > worst:
            worst, where = dev, f"line {ci_line} {header[col]}"
    return TableCheck(name, "bench", worst, len(header) - 1, TOLERANCE["bench"], where)


def check_table(text: str, name: str = "table", path: str | None = None) -> TableCheck:
    path = path or name
    rows = _rows(text, path)
    header = rows[0][1]
    if header == THROUGHPUT_HEADER:
        return check_throughput(rows, name, path)
    if header and header[0] == "layers" and any(h.startswith("impact") for h in header):
        return check_impact(rows, name, path)
    if len(header) > 1 and header[0] == "" and header[1] == COLUMNS[0]:
        return check_bench(rows, name, path)
    raise ParseError(f"unrecognised table header {header!r}", rows[0][0], path)


def bundled_tables() -> list[Path]:
    root = resources.files("kalekit") / "tables"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".tsv"))


def verify_paper_tables(paths: Iterable | None = None) -> VerificationReport:
    """Check every table file (default: the bundled transcriptions)."""
    files = [Path(p) for p in paths] if paths is not None else bundled_tables()
    checks = [check_table(f.read_text(encoding="utf-8"), f.stem, str(f)) for f in files]
    return VerificationReport(checks)


__all__ = ["TableCheck", "VerificationReport", "verify_paper_tables", "check_table", "bundled_tables",
           "TOLERANCE", "Z95"]
