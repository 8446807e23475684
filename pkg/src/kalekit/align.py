"""KL alignment of a layer-pruned query encoder to its trained original.

The document tower and any index built from it stay untouched: the pruned
student only has to reproduce the teacher's query embeddings, so the
existing index keeps working.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import model_digest
from .encoder import TransformerEncoder, Vocab, prune_layers, tokenize_batch
from .errors import ConfigurationError, DimensionError, InputError, TrainingDivergedError
from .optim import Adam
from .tensor import Tensor, no_grad
from .trainer import BiEncoder

log = logging.getLogger(__name__)

DIRECTIONS = ("student_teacher", "teacher_student")
DISTANCES = ("kl", "cosine", "manhattan")

EPOCH_GRID = (1, 10, 100)
BATCH_GRID = (4, 64, 256)
LR_GRID = (5e-5, 5e-4, 5e-6)
TEMPERATURE_GRID = (1, 10)


@dataclass(frozen=True)
class KaleConfig:
    keep_layers: int = 1
    temperature: float = 1.0
    loss_scale: float = 10.0
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 5e-5
    schedule: str = "constant"
    strategy: str = "bottom"
    student_dropout: bool = True
    seed: int = 0
    direction: str = "student_teacher"
    distance: str = "kl"
    sample_size: int | None = None

    def __post_init__(self):
        if not self.temperature > 0 or not self.loss_scale > 0:
            raise ConfigurationError("temperature and loss_scale must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.keep_layers < 1:
            raise ConfigurationError("epochs, batch_size and keep_layers must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.schedule not in ("constant", "linear"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"distance must be one of {DISTANCES}")

    def provenance(self) -> dict[str, str]:
        return {f"kale.{k}": str(v) for k, v in asdict(self).items()}


def kale_loss(student_vec, teacher_vec, cfg: KaleConfig = KaleConfig()) -> Tensor:
    """``loss_scale`` * KL(softmax(student/T) || softmax(teacher/T)), averaged over rows.

    The teacher side is a constant; gradients flow to the student only.
    """
    s = student_vec if isinstance(student_vec, Tensor) else Tensor(np.asarray(student_vec, dtype=np.float64))
    t = np.asarray(teacher_vec.data if isinstance(teacher_vec, Tensor) else teacher_vec, dtype=s.dtype)
    if s.shape != t.shape:
        raise DimensionError(f"kale_loss: student {s.shape} and teacher {t.shape} differ")
    if s.ndim == 1:
        s, t = s.reshape(1, -1), t.reshape(1, -1)
    rows = s.shape[0]
    if cfg.distance == "cosine":
        cos = (T.l2_normalize(s) * Tensor(t / np.linalg.norm(t, axis=-1, keepdims=True))).sum(axis=-1)
        per_row = 1.0 - cos
    elif cfg.distance == "manhattan":
        per_row = T.absolute(s - Tensor(t)).sum(axis=-1)
    else:
        log_s = T.log_softmax(s, cfg.temperature)
        log_t = T.log_softmax(Tensor(t), cfg.temperature).data
        if cfg.direction == "student_teacher":
            per_row = (T.exp(log_s) * (log_s - Tensor(log_t))).sum(axis=-1)
        else:
            p_t = np.exp(log_t)
            per_row = (Tensor(p_t) * (Tensor(log_t) - log_s)).sum(axis=-1)
    return per_row.sum() * (cfg.loss_scale / rows)


@dataclass
class AlignResult:
    student: TransformerEncoder
    loss_curve: list[float]
    initial_loss: float
    final_loss: float
    teacher_digest: str
    config: KaleConfig = field(default_factory=KaleConfig)

    def metadata(self) -> dict[str, str]:
        meta = self.config.provenance()
        meta["kale.teacher_digest"] = self.teacher_digest
        return meta


def _mean_loss(model: TransformerEncoder, batches, targets, cfg: KaleConfig) -> float:
    mode = model.mode
    model.eval()
    total = 0.0
    count = 0
    try:
        with no_grad():
            for (ids, mask), target in zip(batches, targets):
                total += float(kale_loss(model(ids, mask), target, cfg).data) * len(ids)
                count += len(ids)
    finally:
        model.mode = mode
    return total / count


def kale_align(trained, queries: Sequence[str], cfg: KaleConfig = KaleConfig(),
               vocab: Vocab | None = None) -> AlignResult:
    """Prune a copy of the trained query encoder to ``cfg.keep_layers`` blocks and align it.

    ``trained`` is a :class:`BiEncoder` or a bare query encoder (then
    ``vocab`` is required). The teacher only ever runs in eval mode and is
    never modified; the document tower is not touched. The reported
    initial/final losses are eval-mode means over the alignment queries;
    ``loss_curve`` holds per-epoch means of the training steps.
    """
    if isinstance(trained, BiEncoder):
        teacher, vocab = trained.query_encoder, vocab or trained.vocab
    else:
        teacher = trained
    if vocab is None:
        raise ConfigurationError("kale_align needs a vocabulary")
    if not queries:
        raise InputError("KALE needs a non-empty query sample")
    depth = teacher.config.num_layers
    if cfg.keep_layers > depth:
        raise ConfigurationError(f"keep_layers {cfg.keep_layers} exceeds teacher depth {depth}")
    queries = list(queries)
    rng = np.random.default_rng(cfg.seed)
    if cfg.sample_size is not None and cfg.sample_size < len(queries):
        picks = np.sort(rng.choice(len(queries), size=cfg.sample_size, replace=False))
        queries = [queries[i] for i in picks]

    digest = model_digest(teacher)
    teacher_mode = teacher.mode
    teacher.eval()
    try:
        targets = teacher.encode_texts(queries, vocab).astype(np.float64)
    finally:
        teacher.mode = teacher_mode

    student = prune_layers(teacher, cfg.keep_layers, cfg.strategy)
    student.reseed_dropout(rng.integers(2**63))
    student.mode = "train" if cfg.student_dropout else "eval"
    max_len = student.config.max_seq_len

    eval_batches, eval_targets = [], []
    for start in range(0, len(queries), 256):
        eval_batches.append(tokenize_batch(queries[start:start + 256], vocab, max_len))
        eval_targets.append(targets[start:start + 256])
    initial = _mean_loss(student, eval_batches, eval_targets, cfg)

    opt = Adam(student.parameters, learning_rate=cfg.learning_rate)
    steps_per_epoch = -(-len(queries) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(queries))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ids, mask = tokenize_batch([queries[i] for i in idx], vocab, max_len)
            lr = cfg.learning_rate * (1.0 - step / total) if cfg.schedule == "linear" else cfg.learning_rate
            opt.zero_grad()
            loss = kale_loss(student(ids, mask), targets[idx], cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite alignment loss {value} at step {step}", step)
            loss.backward()
            opt.step(lr)
            losses.append(value)
            step += 1
        curve.append(float(np.mean(losses)))
        log.info("kale epoch %d/%d mean loss %.6f", epoch + 1, cfg.epochs, curve[-1])

    final = _mean_loss(student, eval_batches, eval_targets, cfg)
    student.eval()
    if model_digest(teacher) != digest:
        raise RuntimeError("teacher parameters changed during alignment")
    return AlignResult(student, curve, initial, final, digest, cfg)
