"""Stage runner: gen-data -> train -> index -> prune -> align -> search -> eval -> bench -> report.

Every stage declares the files it reads and writes inside the work
directory. A stage's fingerprint hashes its configuration sections and the
digests of its inputs; the manifest records the fingerprint and the output
digests of each completed stage. Re-running skips a stage whose fingerprint
and outputs still match. When recorded outputs exist but no longer match
(inputs or configuration changed, or a file was edited) the run stops with
a stale-artifact error unless forced.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock, Timeout

from . import config as C
from .align import kale_align
from .bench import BenchReport, run_bench
from .checkpoint import load_checkpoint, model_digest, save_checkpoint
from .config import PipelineConfig
from .data import (generate_synthetic, lexical_rankings, make_train_records, read_corpus,
                   read_train_file, write_corpus, write_train_file)
from .encoder import Vocab, prune_layers
from .errors import PipelineError, StaleArtifactError
from .metrics import EvalReport, evaluate, relative_impact, speedup
from .search import RetrievalIndex, build_index, read_results, retrieve, write_results
from .tables import bundled_tables, verify_paper_tables
from .trainer import examples_from_records, train_retriever

log = logging.getLogger(__name__)

CORPUS_FILES = ("corpus/docs.tsv", "corpus/queries.tsv", "corpus/qrels.tsv", "corpus/splits.tsv")
VARIANTS = ("full", "pruned", "aligned")
MANIFEST = "manifest.txt"


@dataclass
class Stage:
    name: str
    sections: tuple[str, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    run: Callable[["Context"], None]


@dataclass
class Context:
    cfg: PipelineConfig
    root: Path

    def path(self, rel: str) -> Path:
        return self.root / rel

    def vocab(self) -> Vocab:
        return Vocab.load(self.path("vocab.txt"))

    def corpus(self):
        return read_corpus(self.path("corpus"))

    def query_model(self, variant: str):
        name = {"full": "query", "pruned": "pruned", "aligned": "aligned"}[variant]
        return load_checkpoint(self.path(f"models/{name}.ckpt"))[0]


@dataclass
class PipelineResult:
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    root: Path = Path(".")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _gen_data(ctx: Context) -> None:
    cfg = ctx.cfg
    corpus = read_corpus(cfg.corpus) if cfg.corpus is not None else generate_synthetic(cfg.data)
    write_corpus(corpus, ctx.path("corpus"))
    if not ctx.path("corpus/splits.tsv").exists():
        ctx.path("corpus/splits.tsv").write_text("", encoding="utf-8")
    Vocab.build(corpus.texts()).save(ctx.path("vocab.txt"))
    r = cfg.records
    records = make_train_records(corpus, r.split, r.positives_per_query, r.negatives, r.seed)
    write_train_file(records, ctx.path("train.tsv"))


def _train(ctx: Context) -> None:
    cfg = ctx.cfg
    corpus, vocab = ctx.corpus(), ctx.vocab()
    data = examples_from_records(read_train_file(ctx.path("train.tsv")), corpus.doc_text)
    qcfg = cfg.encoder_config("query", len(vocab))
    dcfg = cfg.encoder_config("document", len(vocab))
    result = train_retriever(data, qcfg, dcfg, cfg.train, vocab)
    meta = {f"train.{k}": v.split("=", 1)[1] for k, v in
            (line.split(".", 1) for line in cfg.section_text("train").splitlines())}
    ctx.path("models").mkdir(exist_ok=True)
    save_checkpoint(result.model.query_encoder, ctx.path("models/query.ckpt"), {**meta, "tower": "query"})
    save_checkpoint(result.model.document_encoder, ctx.path("models/document.ckpt"), {**meta, "tower": "document"})
    _write_atomic(ctx.path("train_loss.tsv"),
                  "epoch\tmean_loss\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(result.loss_curve, 1)))


def _index(ctx: Context) -> None:
    doc_model = load_checkpoint(ctx.path("models/document.ckpt"))[0]
    index = build_index(ctx.corpus().docs, doc_model, ctx.vocab(), ctx.cfg.train.similarity)
    index.save(ctx.path("index.bin"))


def _prune(ctx: Context) -> None:
    teacher, _ = load_checkpoint(ctx.path("models/query.ckpt"))
    k = ctx.cfg.kale
    pruned = prune_layers(teacher, k.keep_layers, k.strategy)
    save_checkpoint(pruned, ctx.path("models/pruned.ckpt"),
                    {"prune.keep_layers": str(k.keep_layers), "prune.strategy": k.strategy,
                     "prune.teacher_digest": sha256_file(ctx.path("models/query.ckpt"))})


def _align(ctx: Context) -> None:
    cfg = ctx.cfg
    teacher, _ = load_checkpoint(ctx.path("models/query.ckpt"))
    queries = [t for _, t in ctx.corpus().split_queries(cfg.records.split)]
    result = kale_align(teacher, queries, cfg.kale, ctx.vocab())
    meta = result.metadata()
    meta["kale.teacher_digest"] = sha256_file(ctx.path("models/query.ckpt"))
    save_checkpoint(result.student, ctx.path("models/aligned.ckpt"), meta)
    lines = [f"initial\t{result.initial_loss!r}", f"final\t{result.final_loss!r}"]
    lines += [f"{i}\t{v!r}" for i, v in enumerate(result.loss_curve, 1)]
    _write_atomic(ctx.path("kale_loss.tsv"), "epoch\tmean_loss\n" + "".join(x + "\n" for x in lines))


def _search(ctx: Context) -> None:
    index = RetrievalIndex.load(ctx.path("index.bin"))
    vocab = ctx.vocab()
    queries = ctx.corpus().split_queries(ctx.cfg.eval.split)
    for variant in VARIANTS:
        results = retrieve(index, ctx.query_model(variant), vocab, queries, ctx.cfg.eval.depth)
        ctx.path("results").mkdir(exist_ok=True)
        write_results(results, ctx.path(f"results/{variant}.tsv"))


def _eval(ctx: Context) -> None:
    corpus = ctx.corpus()
    baseline = None
    ctx.path("eval").mkdir(exist_ok=True)
    for variant in VARIANTS:
        report = evaluate(read_results(ctx.path(f"results/{variant}.tsv")), corpus.qrels, variant,
                          baseline=baseline)
        baseline = baseline or report
        report.save(ctx.path(f"eval/{variant}.txt"))
    lexical = lexical_rankings(corpus, corpus.split_queries(ctx.cfg.eval.split), ctx.cfg.eval.depth)
    evaluate(lexical, corpus.qrels, "lexical", baseline=baseline).save(ctx.path("eval/lexical.txt"))


def _bench(ctx: Context) -> None:
    vocab = ctx.vocab()
    queries = [t for _, t in ctx.corpus().split_queries(ctx.cfg.eval.split)]
    ctx.path("bench").mkdir(exist_ok=True)
    for variant in ("full", "aligned"):
        report = run_bench(ctx.query_model(variant), queries, vocab, ctx.cfg.bench, variant)
        report.save(ctx.path(f"bench/{variant}.txt"))


def _verify(ctx: Context) -> None:
    report = verify_paper_tables()
    if not report.ok:
        log.warning("published table arithmetic deviates beyond tolerance:\n%s", report.to_text())
    _write_atomic(ctx.path("tables.txt"), report.to_text())


def _report(ctx: Context) -> None:
    base_bench = BenchReport.load(ctx.path("bench/full.txt"))
    aligned_bench = BenchReport.load(ctx.path("bench/aligned.txt"))
    qps = {"full": base_bench.qps, "pruned": aligned_bench.qps, "aligned": aligned_bench.qps}
    full = EvalReport.load(ctx.path("eval/full.txt"))
    rows = ["variant\tquery_layers\tspeedup\tqps\t" + "\t".join(f"accuracy@{d}\timpact@{d}" for d in sorted(full.accuracy))]
    plot = ["speedup\timpact@100"]
    layers = {"full": ctx.query_model("full").config.num_layers, "pruned": ctx.cfg.kale.keep_layers,
              "aligned": ctx.cfg.kale.keep_layers}
    for variant in VARIANTS:
        rep = EvalReport.load(ctx.path(f"eval/{variant}.txt"))
        sp = speedup(qps[variant], base_bench.qps)
        cells = [variant, str(layers[variant]), f"{sp:.4f}", f"{qps[variant]:.3f}"]
        for d in sorted(full.accuracy):
            cells += [f"{rep.accuracy[d]:.4f}", f"{relative_impact(rep.accuracy[d], full.accuracy[d]):.2f}"
                      if full.accuracy[d] else "NA"]
        rows.append("\t".join(cells))
        if 100 in rep.accuracy and full.accuracy.get(100):
            plot.append(f"{sp:.4f}\t{relative_impact(rep.accuracy[100], full.accuracy[100]):.4f}")
    _write_atomic(ctx.path("report/summary.tsv"), "".join(r + "\n" for r in rows))
    _write_atomic(ctx.path("report/speedup_vs_impact.tsv"), "".join(r + "\n" for r in plot))


MODELS = tuple(f"models/{n}.ckpt" for n in ("query", "pruned", "aligned"))

STAGES: tuple[Stage, ...] = (
    Stage("gen-data", ("data", "records"), (), CORPUS_FILES + ("vocab.txt", "train.tsv"), _gen_data),
    Stage("train", ("query", "document", "train"), CORPUS_FILES + ("vocab.txt", "train.tsv"),
          ("models/query.ckpt", "models/document.ckpt", "train_loss.tsv"), _train),
    Stage("index", ("train",), ("models/document.ckpt", "corpus/docs.tsv", "vocab.txt"), ("index.bin",), _index),
    Stage("prune", ("kale",), ("models/query.ckpt",), ("models/pruned.ckpt",), _prune),
    Stage("align", ("kale", "records"), ("models/query.ckpt", "corpus/queries.tsv", "corpus/splits.tsv", "vocab.txt"),
          ("models/aligned.ckpt", "kale_loss.tsv"), _align),
    Stage("search", ("eval",), ("index.bin", "corpus/queries.tsv", "corpus/splits.tsv", "vocab.txt") + MODELS,
          tuple(f"results/{v}.tsv" for v in VARIANTS), _search),
    Stage("eval", ("eval",), tuple(f"results/{v}.tsv" for v in VARIANTS) + CORPUS_FILES,
          tuple(f"eval/{v}.txt" for v in VARIANTS + ("lexical",)), _eval),
    Stage("bench", ("bench", "eval"), ("models/query.ckpt", "models/aligned.ckpt", "corpus/queries.tsv",
                                       "corpus/splits.tsv", "vocab.txt"),
          ("bench/full.txt", "bench/aligned.txt"), _bench),
    Stage("verify-tables", (), (), ("tables.txt",), _verify),
    Stage("report", ("kale",), ("eval/full.txt", "eval/pruned.txt", "eval/aligned.txt", "bench/full.txt",
                                "bench/aligned.txt", "models/query.ckpt"),
          ("report/summary.tsv", "report/speedup_vs_impact.tsv"), _report),
)
STAGE_NAMES = tuple(s.name for s in STAGES)
PRODUCER = {out: s.name for s in STAGES for out in s.outputs}


# ---------------------------------------------------------------------------
# manifest and scheduling
# ---------------------------------------------------------------------------

def read_manifest(root: Path) -> dict[str, dict[str, str]]:
    path = root / MANIFEST
    out: dict[str, dict[str, str]] = {}
    if not path.exists():
        return out
    for key, value in C.read_keyvalue(path).items():
        stage, _, item = key.partition(":")
        out.setdefault(stage, {})[item] = value
    return out


def write_manifest(root: Path, manifest: dict[str, dict[str, str]]) -> None:
    lines = [f"{stage}:{item}={value}" for stage in STAGE_NAMES if stage in manifest
             for item, value in sorted(manifest[stage].items())]
    _write_atomic(root / MANIFEST, "".join(line + "\n" for line in lines))


def fingerprint(stage: Stage, cfg: PipelineConfig, root: Path) -> str:
    h = hashlib.sha256(f"stage={stage.name}\n".encode())
    for section in stage.sections:
        h.update(cfg.section_text(section).encode())
    if stage.name == "gen-data" and cfg.corpus is not None:
        for name in ("docs.tsv", "queries.tsv", "qrels.tsv", "splits.tsv"):
            p = cfg.corpus / name
            h.update(f"source:{name}={sha256_file(p) if p.exists() else '-'}\n".encode())
    if stage.name == "verify-tables":
        for p in bundled_tables():
            h.update(f"table:{p.name}={sha256_file(p)}\n".encode())
    for rel in stage.inputs:
        p = root / rel
        if not p.exists():
            producer = PRODUCER.get(rel, "an earlier stage")
            raise PipelineError(f"missing input {rel} (produced by stage {producer!r})", stage.name)
        h.update(f"input:{rel}={sha256_file(p)}\n".encode())
    return h.hexdigest()


def order_stages(requested: Sequence[str] | str | None) -> list[Stage]:
    if requested in (None, "", "all") or requested == ["all"]:
        return list(STAGES)
    names = [n.strip() for n in requested.split(",")] if isinstance(requested, str) else list(requested)
    unknown = [n for n in names if n not in STAGE_NAMES]
    if unknown:
        raise PipelineError(f"unknown stage(s) {unknown}; choose from {list(STAGE_NAMES)}")
    return [s for s in STAGES if s.name in names]


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] | str | None = None, force: bool = False) -> PipelineResult:
    """Run the requested stages (default: all) in dependency order."""
    root = Path(cfg.workdir)
    root.mkdir(parents=True, exist_ok=True)
    if stages is None:
        stages = cfg.raw.get("stages")
    selected = order_stages(stages)
    lock = FileLock(str(root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise PipelineError(f"another pipeline holds the lock on {root}") from None
    try:
        return _run_locked(cfg, root, selected, force)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, root: Path, selected: list[Stage], force: bool) -> PipelineResult:
    manifest = read_manifest(root)
    result = PipelineResult(root=root)
    rebuilt: set[str] = set()
    ctx = Context(cfg, root)
    for stage in selected:
        fp = fingerprint(stage, cfg, root)
        record = manifest.get(stage.name)
        present = all((root / o).exists() for o in stage.outputs)
        if record is not None and present and not force:
            upstream_rebuilt = any(PRODUCER.get(i) in rebuilt for i in stage.inputs)
            outputs_match = all(record.get(f"output:{o}") == sha256_file(root / o) for o in stage.outputs)
            if record.get("fingerprint") == fp and outputs_match:
                log.info("stage %s up to date, skipped", stage.name)
                result.skipped.append(stage.name)
                continue
            if not upstream_rebuilt:
                changed = "outputs were modified" if record.get("fingerprint") == fp else "inputs or configuration changed"
                raise StaleArtifactError(f"{changed} since the last build; rerun with --force", stage.name)
        log.info("running stage %s", stage.name)
        try:
            stage.run(ctx)
        except PipelineError:
            raise
        except FileNotFoundError as exc:
            raise PipelineError(f"missing file {exc.filename}", stage.name) from None
        missing = [o for o in stage.outputs if not (root / o).exists()]
        if missing:
            raise PipelineError(f"stage did not produce {missing}", stage.name)
        manifest[stage.name] = {"fingerprint": fp, **{f"output:{o}": sha256_file(root / o) for o in stage.outputs}}
        write_manifest(root, manifest)
        rebuilt.add(stage.name)
        result.ran.append(stage.name)
    return result


def index_digest(root) -> str:
    return sha256_file(Path(root) / "index.bin")


__all__ = ["run_pipeline", "PipelineResult", "STAGES", "STAGE_NAMES", "read_manifest", "index_digest",
           "model_digest"]
