"""Miniature BERT-style encoder tower, toy tokenizer and structural layer pruning."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError, ParameterError
from .tensor import Tensor, no_grad

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)

# additive attention bias for padded keys; exp() underflows to exactly 0
MASK_BIAS = -1e9


class Vocab:
    """Token table; id is the position in ``tokens``."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Specials first, then every lowercase whitespace token in order of first appearance."""
        tokens = list(SPECIAL_TOKENS)
        seen = set(tokens)
        for text in texts:
            for tok in text.lower().split():
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return cls(tokens)

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def tokenize(text: str, vocab: Vocab, max_len: int = 32) -> tuple[list[int], list[int]]:
    """[CLS] + first ``max_len - 2`` tokens + [SEP], right-padded with [PAD] to ``max_len``."""
    if vocab is None or len(vocab) == 0:
        raise ConfigurationError("tokenize needs a non-empty vocabulary")
    missing = [tok for tok in SPECIAL_TOKENS if tok not in vocab]
    if missing:
        raise ConfigurationError(f"vocabulary lacks special tokens {missing}")
    if max_len < 2:
        raise ParameterError(f"max_len must be >= 2, got {max_len}")
    words = text.lower().split()[: max_len - 2]
    ids = [vocab.index[CLS]] + [vocab.id(w) for w in words] + [vocab.index[SEP]]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return ids + [vocab.index[PAD]] * pad, mask + [0] * pad


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int = 32,
                   trim: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack tokenized texts; with ``trim`` drop trailing columns that are padding everywhere."""
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    ids = np.array([p[0] for p in pairs], dtype=np.int64).reshape(len(pairs), max_len)
    mask = np.array([p[1] for p in pairs], dtype=np.int64).reshape(len(pairs), max_len)
    if trim and len(pairs):
        width = int(mask.sum(axis=1).max())
        ids, mask = ids[:, :width], mask[:, :width]
    return ids, mask


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 1024
    max_seq_len: int = 32
    dropout_rate: float = 0.1
    pooling: str = "cls"
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} must be divisible by num_heads {self.num_heads}")
        if self.ff_dim < 1:
            raise ConfigurationError("ff_dim must be >= 1")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must be >= 4")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.pooling not in ("cls", "mean"):
            raise ConfigurationError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")

    def replace(self, **changes) -> "EncoderConfig":
        values = asdict(self)
        values.update(changes)
        return EncoderConfig(**values)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)!r}" if isinstance(getattr(self, f.name), float)
                else f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "EncoderConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                raw = values[f.name]
                kwargs[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
        return cls(**kwargs)


def _block_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, f = cfg.hidden_dim, cfg.ff_dim
    return [
        ("attention.query.weight", (h, h)), ("attention.query.bias", (h,)),
        ("attention.key.weight", (h, h)), ("attention.key.bias", (h,)),
        ("attention.value.weight", (h, h)), ("attention.value.bias", (h,)),
        ("attention.output.weight", (h, h)), ("attention.output.bias", (h,)),
        ("attention_norm.weight", (h,)), ("attention_norm.bias", (h,)),
        ("ffn.intermediate.weight", (h, f)), ("ffn.intermediate.bias", (f,)),
        ("ffn.output.weight", (f, h)), ("ffn.output.bias", (h,)),
        ("ffn_norm.weight", (h,)), ("ffn_norm.bias", (h,)),
    ]


def _stem_shapes(cfg: EncoderConfig) -> tuple[list, list]:
    h = cfg.hidden_dim
    head = [
        ("embeddings.token.weight", (cfg.vocab_size, h)),
        ("embeddings.position.weight", (cfg.max_seq_len, h)),
        ("embeddings.norm.weight", (h,)), ("embeddings.norm.bias", (h,)),
    ]
    tail = [("pooler.weight", (h, h)), ("pooler.bias", (h,))]
    return head, tail


def parameter_shapes(cfg: EncoderConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Canonical parameter names and shapes implied by ``cfg``, in storage order."""
    head, tail = _stem_shapes(cfg)
    shapes = OrderedDict(head)
    for i in range(cfg.num_layers):
        for name, shape in _block_shapes(cfg):
            shapes[f"block.{i}.{name}"] = shape
    shapes.update(tail)
    return shapes


def _init_value(name: str, shape, cfg: EncoderConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("norm.weight"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith("bias"):
        return np.zeros(shape, dtype=np.float32)
    return (rng.standard_normal(shape) * cfg.init_std).astype(np.float32)


class TransformerEncoder:
    """Post-norm transformer encoder pooled to one vector per input sequence."""

    def __init__(self, config: EncoderConfig, parameters=None, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        shapes = parameter_shapes(config)
        if parameters is None:
            parameters = OrderedDict(
                (name, Tensor(_init_value(name, shape, config, rng), requires_grad=True))
                for name, shape in shapes.items())
        else:
            parameters = OrderedDict(
                (name, p if isinstance(p, Tensor) else Tensor(np.asarray(p), requires_grad=True))
                for name, p in parameters.items())
            if set(parameters) != set(shapes):
                orphans = sorted(set(parameters) - set(shapes))
                gaps = sorted(set(shapes) - set(parameters))
                raise ConfigurationError(f"parameter set does not match config: orphans={orphans} gaps={gaps}")
            for name, shape in shapes.items():
                if parameters[name].shape != shape:
                    raise DimensionError(f"{name}: expected shape {shape}, got {parameters[name].shape}")
            parameters = OrderedDict((name, parameters[name]) for name in shapes)
        self.parameters: OrderedDict[str, Tensor] = parameters
        self.mode = "train"
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))

    # -- mode handling ----------------------------------------------------
    def train(self) -> "TransformerEncoder":
        self.mode = "train"
        return self

    def eval(self) -> "TransformerEncoder":
        self.mode = "eval"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def reseed_dropout(self, seed) -> None:
        self.dropout_rng = np.random.default_rng(seed)

    def freeze(self) -> None:
        for p in self.parameters.values():
            p.requires_grad = False

    def astype(self, dtype) -> "TransformerEncoder":
        """Copy with every parameter cast to ``dtype`` (float64 for gradient checks)."""
        params = OrderedDict((n, Tensor(p.data.astype(dtype), requires_grad=True))
                             for n, p in self.parameters.items())
        out = TransformerEncoder(self.config, params)
        out.mode = self.mode
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self.parameters[name]

    # -- forward ------------------------------------------------------------
    def forward(self, ids, mask) -> Tensor:
        """Pooled embeddings, shape (batch, hidden_dim), for token ids/mask of shape (batch, seq)."""
        cfg = self.config
        ids = np.asarray(ids)
        mask = np.asarray(mask)
        if ids.ndim == 1:
            ids, mask = ids[None, :], mask[None, :]
        if ids.shape != mask.shape:
            raise DimensionError(f"ids {ids.shape} and mask {mask.shape} differ in shape")
        batch, seq = ids.shape
        if seq > cfg.max_seq_len:
            raise InputError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise InputError(f"token id {int(ids.max())} outside vocabulary of size {cfg.vocab_size}")
        p = self.parameters
        train = self.training
        rate = cfg.dropout_rate
        rng = self.dropout_rng

        x = T.embedding(p["embeddings.token.weight"], ids) + \
            T.embedding(p["embeddings.position.weight"], np.arange(seq))
        x = T.layer_norm(x, p["embeddings.norm.weight"], p["embeddings.norm.bias"], cfg.layer_norm_eps)
        x = T.dropout(x, rate, rng, train)

        dtype = x.dtype
        bias = Tensor(((1 - mask) * MASK_BIAS).astype(dtype)[:, None, None, :])
        heads, hd = cfg.num_heads, cfg.hidden_dim // cfg.num_heads
        scale = 1.0 / np.sqrt(hd)

        def split(t: Tensor) -> Tensor:
            return t.reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3)

        for i in range(cfg.num_layers):
            pre = f"block.{i}."
            q = split(T.linear(x, p[pre + "attention.query.weight"], p[pre + "attention.query.bias"]))
            k = split(T.linear(x, p[pre + "attention.key.weight"], p[pre + "attention.key.bias"]))
            v = split(T.linear(x, p[pre + "attention.value.weight"], p[pre + "attention.value.bias"]))
            scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale + bias
            probs = T.dropout(T.softmax(scores), rate, rng, train)
            ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(batch, seq, cfg.hidden_dim)
            attn = T.linear(ctx, p[pre + "attention.output.weight"], p[pre + "attention.output.bias"])
            x = T.layer_norm(x + T.dropout(attn, rate, rng, train),
                             p[pre + "attention_norm.weight"], p[pre + "attention_norm.bias"],
                             cfg.layer_norm_eps)
            hidden = T.gelu(T.linear(x, p[pre + "ffn.intermediate.weight"], p[pre + "ffn.intermediate.bias"]))
            ff = T.linear(hidden, p[pre + "ffn.output.weight"], p[pre + "ffn.output.bias"])
            x = T.layer_norm(x + T.dropout(ff, rate, rng, train),
                             p[pre + "ffn_norm.weight"], p[pre + "ffn_norm.bias"], cfg.layer_norm_eps)

        if cfg.pooling == "cls":
            pooled = x[:, 0, :]
        else:
            weights = Tensor((mask / mask.sum(axis=1, keepdims=True)).astype(dtype)[:, :, None])
            pooled = (x * weights).sum(axis=1)
        return T.linear(pooled, p["pooler.weight"], p["pooler.bias"])

    __call__ = forward

    def encode(self, ids, mask) -> np.ndarray:
        """One embedding vector for a single tokenized input, without graph recording."""
        with no_grad():
            return self.forward(np.asarray(ids)[None, :], np.asarray(mask)[None, :]).data[0]

    def encode_texts(self, texts: Sequence[str], vocab: Vocab, batch_size: int = 64) -> np.ndarray:
        """Embeddings for ``texts`` as a (len(texts), hidden_dim) float array, in input order."""
        out = np.zeros((len(texts), self.config.hidden_dim), dtype=np.float32)
        with no_grad():
            for start in range(0, len(texts), batch_size):
                chunk = texts[start:start + batch_size]
                ids, mask = tokenize_batch(chunk, vocab, self.config.max_seq_len)
                out[start:start + len(chunk)] = self.forward(ids, mask).data
        return out


def param_count(model: TransformerEncoder | EncoderConfig) -> int:
    cfg = model if isinstance(model, EncoderConfig) else model.config
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def per_block_param_count(cfg: EncoderConfig) -> int:
    return int(sum(np.prod(s) for _, s in _block_shapes(cfg)))


def stem_param_count(cfg: EncoderConfig) -> int:
    head, tail = _stem_shapes(cfg)
    return int(sum(np.prod(s) for _, s in head + tail))


def kept_blocks(num_layers: int, keep: int, strategy: str = "bottom") -> list[int]:
    """Indices of the original blocks that survive pruning to ``keep`` layers."""
    if not 1 <= keep <= num_layers:
        raise ParameterError(f"keep must lie in [1, {num_layers}], got {keep}")
    if strategy == "bottom":
        return list(range(keep))
    if strategy == "bottom_plus_top":
        return list(range(keep - 1)) + [num_layers - 1]
    raise ParameterError(f"unknown pruning strategy {strategy!r}")


def prune_layers(model: TransformerEncoder, keep: int, strategy: str = "bottom") -> TransformerEncoder:
    """Value-copy of ``model`` keeping ``keep`` blocks, renumbered consecutively."""
    cfg = model.config
    survivors = kept_blocks(cfg.num_layers, keep, strategy)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, p in model.parameters.items():
        if not name.startswith("block."):
            params[name] = Tensor(p.data.copy(), requires_grad=True)
    for new, old in enumerate(survivors):
        prefix = f"block.{old}."
        for name, p in model.parameters.items():
            if name.startswith(prefix):
                params[f"block.{new}." + name[len(prefix):]] = Tensor(p.data.copy(), requires_grad=True)
    pruned = TransformerEncoder(cfg.replace(num_layers=keep), params)
    pruned.mode = model.mode
    pruned.dropout_rng = copy.deepcopy(model.dropout_rng)
    return pruned
