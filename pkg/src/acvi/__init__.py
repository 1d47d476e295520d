"""Sequence-to-sequence attention with amortized inference over context vectors."""

from .config import TrainConfig
from .data import Vocabulary, build_vocab, encode_pair, synth_task
from .model import Seq2Seq
from .train import evaluate, train

__all__ = ["TrainConfig", "Vocabulary", "build_vocab", "encode_pair", "synth_task", "Seq2Seq",
           "evaluate", "train"]
__version__ = "0.1.0"
