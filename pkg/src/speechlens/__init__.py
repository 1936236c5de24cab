"""speechlens: bi-modal speech classifier with attention-based interpretation."""

__version__ = "0.1.0"

from .data import CorpusConfig, EvidenceKey, generate_corpus, load_corpus, \
    save_corpus
from .model import (BaselineModel, ModelConfig, ProposedModel, SentencePair,
                    SpeechSample, load_checkpoint, majority_vote,
                    save_checkpoint)
from .numerics import GradientTape, Tensor
from .relevancy import (InterpretationResult, hierarchical_interpret,
                        rank_sentences)
from .training import Adam, EvalReport, TrainConfig, evaluate, train_baseline, \
    train_proposed

__all__ = [
    "__version__",
    "GradientTape", "Tensor",
    "ModelConfig", "SentencePair", "SpeechSample",
    "ProposedModel", "BaselineModel", "majority_vote",
    "save_checkpoint", "load_checkpoint",
    "CorpusConfig", "EvidenceKey", "generate_corpus", "save_corpus",
    "load_corpus",
    "TrainConfig", "Adam", "train_proposed", "train_baseline", "evaluate",
    "EvalReport",
    "InterpretationResult", "hierarchical_interpret", "rank_sentences",
]
