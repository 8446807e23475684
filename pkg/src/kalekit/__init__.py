"""Desk-scale toolkit for compressing dense-retrieval query encoders.

Train a bi-encoder, prune its query tower, realign the pruned tower to the
original with a temperature-softmaxed KL loss against a frozen document
index, then evaluate retrieval quality and query-encoding latency.
"""

from .align import KaleConfig, kale_align, kale_loss
from .bench import BenchConfig, BenchReport, run_bench
from .data import Corpus, SyntheticSpec, generate_synthetic
from .encoder import EncoderConfig, TransformerEncoder, Vocab, prune_layers
from .metrics import EvalReport, evaluate
from .search import RetrievalIndex, build_index, search_topk
from .trainer import BiEncoder, TrainConfig, train_retriever

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "BenchReport", "BiEncoder", "Corpus", "EncoderConfig", "EvalReport", "KaleConfig",
    "RetrievalIndex", "SyntheticSpec", "TrainConfig", "TransformerEncoder", "Vocab", "build_index",
    "evaluate", "generate_synthetic", "kale_align", "kale_loss", "prune_layers", "run_bench",
    "search_topk", "train_retriever",
]
