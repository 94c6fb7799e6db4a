"""Multi-task semantic RNN transducer for end-to-end spoken language understanding.

The package is a small numpy implementation: reverse-mode autodiff
(:mod:`numerics`), synthetic data (:mod:`data`), the network (:mod:`model`),
transducer and multi-task losses (:mod:`losses`), greedy/beam/streaming
decoding (:mod:`decoding`), error-rate metrics (:mod:`metrics`) and training
(:mod:`trainer`).
"""

from .data import TOY_GRAMMAR, GrammarSpec, Utterance, Vocabulary, feature_pipeline, generate_corpus
from .decoding import BeamConfig, DecodeResult, StreamingSession, greedy_decode, semantic_beam_search
from .losses import LossWeights, rnnt_loss, total_loss
from .model import ModelConfig, ModelParams, encode, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "TOY_GRAMMAR", "GrammarSpec", "Utterance", "Vocabulary", "feature_pipeline", "generate_corpus",
    "BeamConfig", "DecodeResult", "StreamingSession", "greedy_decode", "semantic_beam_search",
    "LossWeights", "rnnt_loss", "total_loss",
    "ModelConfig", "ModelParams", "encode", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "evaluate", "train",
]
__version__ = "0.1.0"
