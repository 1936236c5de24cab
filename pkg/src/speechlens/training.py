"""Adam training loops with gradient accumulation, plus evaluation metrics.

Both trainers share the same accumulation scheme: backward passes add raw
gradient sums into parameter buffers across a window of samples, and the
optimizer applies the mean by scaling with 1/window at step time. The
sample order reshuffles every epoch from the run's seeded generator, so a
(model init, data, config) triple always trains to the same parameters.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .data import segment_labeled_view
from .model import SpeechSample, majority_vote, predict_from_logits
from .numerics import GradientTape, NumericError, Tensor

__all__ = [
    "TrainConfig", "Adam", "EvalReport",
    "cross_entropy_loss", "truncate_sample", "train_proposed",
    "train_baseline", "evaluate", "metrics_from_counts",
]


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 20
    accumulation_steps: int = 72
    batch_size: int = 128
    max_sentences: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.accumulation_steps < 1 or self.batch_size < 1:
            raise ValueError("epochs, accumulation_steps and batch_size "
                             "must be at least 1")
        if self.max_sentences < 1:
            raise ValueError("max_sentences must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam over a named parameter dict, with bias-corrected moments.

    step(scale) multiplies every accumulated gradient by scale first, so
    buffers can hold raw sums over an accumulation window and still yield
    a mean-gradient update. Parameters whose gradient is unset are skipped.
    """

    def __init__(self, params: dict, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of the labeled class, as a scalar tensor."""
    return nm.scale(nm.take_row(nm.log_softmax(logits), label), -1.0)


def truncate_sample(sample: SpeechSample, max_sentences: int) -> SpeechSample:
    """Clip overlong samples to their leading sentences."""
    if len(sample.sentences) <= max_sentences:
        return sample
    return SpeechSample(sentences=sample.sentences[:max_sentences],
                        label=sample.label,
                        participant_id=sample.participant_id)


def _check_finite_loss(loss: float, context: str) -> float:
    if not math.isfinite(loss):
        raise NumericError(f"training diverged: non-finite loss {loss} {context}")
    return loss


def train_proposed(model, samples, cfg: TrainConfig, log_sink=None):
    """Train the two-level classifier in place; returns the model.

    One sample per backward pass; gradients accumulate for
    cfg.accumulation_steps samples (trailing remainder included) before
    each optimizer step. log_sink, when given, receives one dict
    {"epoch", "step", "loss"} per sample, where step counts samples
    globally.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2,
               cfg.eps)
    clipped = [truncate_sample(s, cfg.max_sentences) for s in samples]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clipped))
        pending = 0
        for pos, idx in enumerate(order):
            s = clipped[idx]
            with GradientTape() as tape:
                logits = model.forward(s, training=True, rng=rng)
                loss = cross_entropy_loss(logits, s.label)
            value = _check_finite_loss(
                loss.item(), f"at epoch {epoch} sample {s.participant_id}")
            tape.backward(loss)
            pending += 1
            if log_sink is not None:
                log_sink({"epoch": epoch, "step": step, "loss": value})
            step += 1
            if pending == cfg.accumulation_steps or pos == len(order) - 1:
                opt.step(scale=1.0 / pending)
                opt.zero_grad()
                pending = 0
    return model


def train_baseline(model, samples, cfg: TrainConfig, log_sink=None):
    """Train the per-sentence classifier on speech-labeled segments.

    Segments inherit their sample's label; cfg.batch_size segments share
    one optimizer step. Logging mirrors train_proposed with step counting
    segments.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2,
               cfg.eps)
    clipped = [truncate_sample(s, cfg.max_sentences) for s in samples]
    segments = segment_labeled_view(clipped)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(segments))
        pending = 0
        for pos, idx in enumerate(order):
            pair, label = segments[idx]
            with GradientTape() as tape:
                logits = model.forward(pair, training=True, rng=rng)
                loss = cross_entropy_loss(logits, label)
            value = _check_finite_loss(
                loss.item(), f"at epoch {epoch} segment {pos}")
            tape.backward(loss)
            pending += 1
            if log_sink is not None:
                log_sink({"epoch": epoch, "step": step, "loss": value})
            step += 1
            if pending == cfg.batch_size or pos == len(order) - 1:
                opt.step(scale=1.0 / pending)
                opt.zero_grad()
                pending = 0
    return model


# ----- evaluation ----------------------------------------------------------------


def metrics_from_counts(tp: int, fp: int, fn: int) -> tuple:
    """(precision, recall, f1) for the positive class, zero-guarded."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    predictions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "accuracy": self.accuracy,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn,
                       "fn": self.fn},
            "predictions": [
                {"participant_id": pid, "label": label, "prediction": pred}
                for pid, label, pred in self.predictions
            ],
        }


def predict_sample(model, sample: SpeechSample, max_sentences: int) -> int:
    """Hard class decision for one sample under either architecture."""
    s = truncate_sample(sample, max_sentences)
    if model.arch == "proposed":
        return predict_from_logits(model.forward(s))
    votes = [predict_from_logits(model.forward(pair)) for pair in s.sentences]
    return majority_vote(votes)


def evaluate(model, samples, max_sentences: int | None = None) -> EvalReport:
    """Positive-class precision/recall/F1 plus per-sample predictions."""
    if max_sentences is None:
        max_sentences = model.cfg.max_sentences
    tp = fp = tn = fn = 0
    predictions = []
    for sample in samples:
        pred = predict_sample(model, sample, max_sentences)
        predictions.append((sample.participant_id, sample.label, pred))
        if sample.label == 1 and pred == 1:
            tp += 1
        elif sample.label == 0 and pred == 1:
            fp += 1
        elif sample.label == 0 and pred == 0:
            tn += 1
        else:
            fn += 1
    precision, recall, f1 = metrics_from_counts(tp, fp, fn)
    accuracy = (tp + tn) / len(samples) if samples else 0.0
    return EvalReport(precision=precision, recall=recall, f1=f1,
                      accuracy=accuracy, tp=tp, fp=fp, tn=tn, fn=fn,
                      predictions=predictions)
