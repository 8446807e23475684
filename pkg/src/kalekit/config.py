"""Plain ``key=value`` configuration files.

Keys are ``section.field`` (``train.epochs=40``) or top-level (``seed=0``).
Blank lines and ``#`` comments are ignored. Values are coerced using the
annotated type of the target dataclass field.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .align import KaleConfig
from .bench import BenchConfig
from .data import SyntheticSpec
from .encoder import EncoderConfig
from .errors import ConfigurationError, ParseError
from .trainer import TrainConfig


def parse_keyvalue(text: str, path: str | None = None) -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(f"expected key=value, got {raw!r}", n, path)
        values[key.strip()] = value.strip()
    return values


def read_keyvalue(path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"), str(path))


def _coerce(raw: str, hint, key: str):
    optional = False
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional = len(args) < len(typing.get_args(hint))
        hint = args[0]
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {hint.__name__}") from None
    return raw


def build(cls, values: Mapping[str, str], prefix: str = "", base=None):
    """Instantiate dataclass ``cls`` from ``prefix``-ed keys over the fields of ``base``."""
    hints = typing.get_type_hints(cls)
    kwargs = dataclasses.asdict(base) if base is not None else {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        kwargs[name] = _coerce(raw, hints[name], key)
    return cls(**kwargs)


def section_keys(values: Mapping[str, str], prefix: str) -> dict[str, str]:
    return {k: v for k, v in sorted(values.items()) if k.startswith(prefix)}


@dataclass(frozen=True)
class RecordConfig:
    split: str = "train"
    positives_per_query: int | None = None
    negatives: int = 1
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    split: str = "dev"
    depth: int = 200


# Desk-scale settings for the default synthetic corpus. The published grids stay
# available through the dataclass defaults and the GRID constants.
DESK_TRAIN = TrainConfig(epochs=8, batch_size=32, learning_rate=1e-3, similarity="cosine", temperature=0.1)
DESK_KALE = KaleConfig(keep_layers=1, epochs=100, batch_size=64, learning_rate=5e-4)
DESK_BENCH = BenchConfig(num_queries=500, runs=5)

SECTIONS = {
    "data": SyntheticSpec,
    "records": RecordConfig,
    "query": EncoderConfig,
    "document": EncoderConfig,
    "train": TrainConfig,
    "kale": KaleConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}
TOP_LEVEL = {"workdir", "corpus", "stages", "seed"}


@dataclass
class PipelineConfig:
    workdir: Path = Path("kale-run")
    corpus: Path | None = None
    seed: int | None = None
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    records: RecordConfig = field(default_factory=RecordConfig)
    query: dict[str, str] = field(default_factory=dict)
    document: dict[str, str] = field(default_factory=dict)
    train: TrainConfig = DESK_TRAIN
    kale: KaleConfig = DESK_KALE
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = DESK_BENCH
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "PipelineConfig":
        for key in values:
            head = key.split(".", 1)[0]
            if "." in key and head in SECTIONS:
                continue
            if key not in TOP_LEVEL:
                raise ConfigurationError(f"unknown configuration key {key!r}")
        values = dict(values)
        seed = int(values["seed"]) if values.get("seed") else None
        if seed is not None:
            # one seed drives every stochastic stage unless a section overrides it
            for section in ("data", "records", "train", "kale", "bench"):
                values.setdefault(f"{section}.seed", str(seed))
        defaults = cls()
        cfg = cls(
            workdir=Path(values.get("workdir", defaults.workdir)),
            corpus=Path(values["corpus"]) if values.get("corpus") else None,
            seed=seed,
            data=build(SyntheticSpec, values, "data.", defaults.data),
            records=build(RecordConfig, values, "records.", defaults.records),
            query=section_keys(values, "query."),
            document=section_keys(values, "document."),
            train=build(TrainConfig, values, "train.", defaults.train),
            kale=build(KaleConfig, values, "kale.", defaults.kale),
            eval=build(EvalConfig, values, "eval.", defaults.eval),
            bench=build(BenchConfig, values, "bench.", defaults.bench),
            raw=dict(values),
        )
        # validate encoder keys early, before any stage runs
        cfg.encoder_config("query", 1024)
        cfg.encoder_config("document", 1024)
        return cfg

    @classmethod
    def load(cls, path, overrides: Mapping[str, str] | None = None) -> "PipelineConfig":
        values = read_keyvalue(path) if path is not None else {}
        values.update(overrides or {})
        return cls.from_mapping(values)

    def encoder_config(self, tower: str, vocab_size: int) -> EncoderConfig:
        keys = self.query if tower == "query" else self.document
        values = {k[len(tower) + 1:]: v for k, v in keys.items()}
        values.setdefault("vocab_size", str(vocab_size))
        return build(EncoderConfig, values)

    def section_text(self, name: str) -> str:
        """Canonical text of one section, used in stage fingerprints."""
        value: Any = getattr(self, name)
        if isinstance(value, dict):
            items = sorted(value.items())
        else:
            items = [(k, repr(v)) for k, v in sorted(dataclasses.asdict(value).items())]
        return "".join(f"{name}.{k}={v}\n" for k, v in items)
