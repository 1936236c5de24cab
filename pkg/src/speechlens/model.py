"""Two-level bi-modal classifier and its per-sentence baseline variant.

Sentence level: an audio encoder over projected spectrogram patches and a
text encoder over token embeddings (each with its own [cls] token and
learned positional table), fused by a stack of decoder-style blocks where
text queries attend over audio memory. The text [cls] row of the fused
output is the sentence embedding.

Speech level: sentence embeddings are stacked, a speech [cls] is prepended,
positional embeddings added, and an encoder stack plus a linear head maps
the final [cls] row to two class logits (index 1 = positive class).

The baseline shares the whole sentence level but puts a linear head
directly on each sentence embedding; speech predictions then come from
majority voting outside the model.
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention as att
from . import numerics as nm
from .numerics import ShapeError, Tensor

__all__ = [
    "CLASS_NORMAL", "CLASS_POSITIVE", "CHECKPOINT_MAGIC",
    "ModelConfig", "SentencePair", "SpeechSample", "TraceLog",
    "SentenceParams", "init_sentence_params",
    "encode_sentence", "fuse_cross_modal", "speech_forward",
    "ProposedModel", "BaselineModel",
    "predict_from_logits", "majority_vote",
    "save_checkpoint", "load_checkpoint",
]

CLASS_NORMAL = 0
CLASS_POSITIVE = 1  # the screened-for condition; interpretation targets this logit

CHECKPOINT_MAGIC = b"SLC1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; layer counts are config-overridable."""

    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    text_layers: int = 2
    audio_layers: int = 2
    fusion_layers: int = 8
    speech_layers: int = 6
    vocab_size: int = 64
    d_patch: int = 16
    max_tokens: int = 64
    max_patches: int = 64
    max_sentences: int = 42
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "d_patch",
                     "max_tokens", "max_patches", "max_sentences"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("text_layers", "audio_layers", "fusion_layers", "speech_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SentencePair:
    """One sentence's aligned modalities: patch rows plus token ids."""

    token_ids: list
    audio_patches: np.ndarray
    index: int = 0
    start_ms: int | None = None
    end_ms: int | None = None

    def __post_init__(self):
        self.audio_patches = np.asarray(self.audio_patches, dtype=np.float64)
        if self.audio_patches.ndim != 2 or self.audio_patches.shape[0] < 1:
            raise ShapeError(
                f"audio_patches must be (patches, d_patch) with at least one row, "
                f"got shape {self.audio_patches.shape}")
        self.token_ids = [int(t) for t in self.token_ids]
        if len(self.token_ids) < 1:
            raise ShapeError("a sentence needs at least one token")
        if any(t < 0 for t in self.token_ids):
            raise ShapeError("token ids must be non-negative")


@dataclass
class SpeechSample:
    """One participant's ordered sentences plus the binary label."""

    sentences: list
    label: int
    participant_id: str

    def __post_init__(self):
        if len(self.sentences) < 1:
            raise ShapeError("a speech sample needs at least one sentence")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class TraceLog:
    """Attention traces from one forward pass, grouped by hierarchy level."""

    sentence: list = field(default_factory=list)  # one trace list per sentence
    speech: list = field(default_factory=list)

    def all_traces(self):
        for group in self.sentence:
            yield from group
        yield from self.speech


# ----- parameters -----------------------------------------------------------


@dataclass
class SentenceParams:
    """Everything below the speech level, shared by both architectures."""

    patch_w: Tensor
    patch_b: Tensor
    audio_cls: Tensor
    audio_pos: Tensor
    token_table: Tensor
    text_cls: Tensor
    text_pos: Tensor
    audio_blocks: list
    text_blocks: list
    fusion_blocks: list

    def named(self, prefix: str = "sentence"):
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.patch_b", self.patch_b
        yield f"{prefix}.audio_cls", self.audio_cls
        yield f"{prefix}.audio_pos", self.audio_pos
        yield f"{prefix}.token_table", self.token_table
        yield f"{prefix}.text_cls", self.text_cls
        yield f"{prefix}.text_pos", self.text_pos
        for i, b in enumerate(self.audio_blocks):
            yield from b.named(f"{prefix}.audio_block{i}")
        for i, b in enumerate(self.text_blocks):
            yield from b.named(f"{prefix}.text_block{i}")
        for i, b in enumerate(self.fusion_blocks):
            yield from b.named(f"{prefix}.fusion_block{i}")


def init_sentence_params(cfg: ModelConfig, rng: np.random.Generator) -> SentenceParams:
    d = cfg.d_model
    return SentenceParams(
        patch_w=Tensor(att.glorot(rng, cfg.d_patch, d)),
        patch_b=Tensor(np.zeros(d)),
        audio_cls=Tensor(rng.normal(0.0, 0.5, size=d)),
        audio_pos=Tensor(rng.normal(0.0, 0.1, size=(cfg.max_patches + 1, d))),
        token_table=Tensor(rng.normal(0.0, 0.5, size=(cfg.vocab_size, d))),
        text_cls=Tensor(rng.normal(0.0, 0.5, size=d)),
        text_pos=Tensor(rng.normal(0.0, 0.1, size=(cfg.max_tokens + 1, d))),
        audio_blocks=[att.init_encoder_block(d, cfg.n_heads, cfg.d_ff, rng)
                      for _ in range(cfg.audio_layers)],
        text_blocks=[att.init_encoder_block(d, cfg.n_heads, cfg.d_ff, rng)
                     for _ in range(cfg.text_layers)],
        fusion_blocks=[att.init_fusion_block(d, cfg.n_heads, cfg.d_ff, rng)
                       for _ in range(cfg.fusion_layers)],
    )


# ----- sentence level ---------------------------------------------------------


def encode_sentence(pair: SentencePair, sp: SentenceParams, cfg: ModelConfig,
                    trace_sink: list | None = None, score_probe=None,
                    drop: att.Dropper | None = None):
    """Run both modality encoders; returns (H_a, H_t) with [cls] at row 0.

    Audio traces come first (kind audio-self, depth per layer), then text
    traces (kind text-self).
    """
    patches = pair.audio_patches
    if patches.shape[1] != cfg.d_patch:
        raise ShapeError(
            f"patch width {patches.shape[1]} != configured d_patch {cfg.d_patch}")
    x_a = nm.add(nm.matmul(Tensor(patches), sp.patch_w), sp.patch_b)
    x_a = nm.concat_rows([sp.audio_cls, x_a])
    x_a = att.add_positional_embeddings(x_a, sp.audio_pos)
    for i, block in enumerate(sp.audio_blocks):
        x_a = att.encoder_block_forward(x_a, block, "audio-self", i,
                                        trace_sink, score_probe, drop)

    emb = nm.embedding_lookup(sp.token_table, pair.token_ids)
    x_t = nm.concat_rows([sp.text_cls, emb])
    x_t = att.add_positional_embeddings(x_t, sp.text_pos)
    for i, block in enumerate(sp.text_blocks):
        x_t = att.encoder_block_forward(x_t, block, "text-self", i,
                                        trace_sink, score_probe, drop)
    return x_a, x_t


def fuse_cross_modal(h_t: Tensor, h_a: Tensor, sp: SentenceParams,
                     trace_sink: list | None = None, score_probe=None,
                     drop: att.Dropper | None = None) -> Tensor:
    """Fusion stack: text stream attends over fixed audio memory; returns
    the text [cls] row (the sentence embedding)."""
    n_text_enc = len(sp.text_blocks)
    x = h_t
    for j, block in enumerate(sp.fusion_blocks):
        x = att.decoder_fusion_block_forward(
            x, h_a, block, self_depth=n_text_enc + j, cross_depth=j,
            trace_sink=trace_sink, score_probe=score_probe, drop=drop)
    return nm.take_row(x, 0)


# ----- speech level -----------------------------------------------------------


def _head_logits(vec: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nm.add(nm.vecmat(vec, w), b)


def speech_forward(embeddings: list, model: "ProposedModel",
                   trace_sink: list | None = None, score_probe=None,
                   drop: att.Dropper | None = None) -> Tensor:
    """Aggregate sentence embeddings into two class logits.

    With speech_layers == 0 the block degenerates to mean-pooling the
    embeddings straight into the head (no [cls], no positions) — a test
    configuration that reduces the model to its head.
    """
    if not embeddings:
        raise ShapeError("speech_forward needs at least one sentence embedding")
    cfg = model.cfg
    if len(embeddings) > cfg.max_sentences:
        raise att.CapacityError(
            f"{len(embeddings)} sentences exceed max_sentences {cfg.max_sentences}")
    if not model.speech_blocks:
        pooled = embeddings[0]
        for e in embeddings[1:]:
            pooled = nm.add(pooled, e)
        pooled = nm.scale(pooled, 1.0 / len(embeddings))
        return _head_logits(pooled, model.head_w, model.head_b)
    x = nm.stack_rows(embeddings)
    x = nm.concat_rows([model.speech_cls, x])
    x = att.add_positional_embeddings(x, model.speech_pos)
    for i, block in enumerate(model.speech_blocks):
        x = att.encoder_block_forward(x, block, "speech-self", i,
                                      trace_sink, score_probe, drop)
    return _head_logits(nm.take_row(x, 0), model.head_w, model.head_b)


# ----- models -----------------------------------------------------------------


class ProposedModel:
    """Full two-level classifier."""

    arch = "proposed"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.sentence = init_sentence_params(cfg, rng)
        self.speech_cls = Tensor(rng.normal(0.0, 0.5, size=d))
        self.speech_pos = Tensor(rng.normal(0.0, 0.1, size=(cfg.max_sentences + 1, d)))
        self.speech_blocks = [att.init_encoder_block(d, cfg.n_heads, cfg.d_ff, rng)
                              for _ in range(cfg.speech_layers)]
        self.head_w = Tensor(att.glorot(rng, d, 2))
        self.head_b = Tensor(np.zeros(2))

    def parameters(self) -> dict:
        out = dict(self.sentence.named("sentence"))
        out["speech.cls"] = self.speech_cls
        out["speech.pos"] = self.speech_pos
        for i, b in enumerate(self.speech_blocks):
            out.update(b.named(f"speech.block{i}"))
        out["speech.head_w"] = self.head_w
        out["speech.head_b"] = self.head_b
        return out

    def forward(self, sample: SpeechSample, trace_log: TraceLog | None = None,
                score_probe=None, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits for one speech sample. With a TraceLog given, attention
        traces are grouped per sentence plus a speech-level list, all on
        the active tape so one backward pass covers both levels."""
        drop = None
        if training and self.cfg.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training with dropout needs an rng")
            drop = att.Dropper(self.cfg.dropout_rate, rng)
        embeddings = []
        for pair in sample.sentences:
            sink = [] if trace_log is not None else None
            h_a, h_t = encode_sentence(pair, self.sentence, self.cfg,
                                       sink, score_probe, drop)
            emb = fuse_cross_modal(h_t, h_a, self.sentence, sink, score_probe, drop)
            if trace_log is not None:
                trace_log.sentence.append(sink)
            embeddings.append(emb)
        speech_sink = trace_log.speech if trace_log is not None else None
        return speech_forward(embeddings, self, speech_sink, score_probe, drop)


class BaselineModel:
    """Sentence-level architecture with a direct per-sentence head."""

    arch = "baseline"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.sentence = init_sentence_params(cfg, rng)
        self.head_w = Tensor(att.glorot(rng, cfg.d_model, 2))
        self.head_b = Tensor(np.zeros(2))

    def parameters(self) -> dict:
        out = dict(self.sentence.named("sentence"))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def forward(self, pair: SentencePair, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        drop = None
        if training and self.cfg.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training with dropout needs an rng")
            drop = att.Dropper(self.cfg.dropout_rate, rng)
        h_a, h_t = encode_sentence(pair, self.sentence, self.cfg, None, None, drop)
        emb = fuse_cross_modal(h_t, h_a, self.sentence, None, None, drop)
        return _head_logits(emb, self.head_w, self.head_b)


# ----- prediction helpers ------------------------------------------------------


def predict_from_logits(logits) -> int:
    """Argmax over the two logits; exact ties resolve to class 0."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return int(np.argmax(arr))


def majority_vote(sentence_preds, threshold_count: int | None = None) -> int:
    """Speech-level decision: positive iff strictly more than
    threshold_count sentence predictions are positive. Default threshold
    is floor(n/2), i.e. strictly more than half."""
    preds = list(sentence_preds)
    if not preds:
        raise ValueError("majority_vote needs at least one prediction")
    if threshold_count is None:
        threshold_count = len(preds) // 2
    return 1 if sum(1 for p in preds if p == 1) > threshold_count else 0


# ----- checkpoints --------------------------------------------------------------

_ARCHS = {"proposed": ProposedModel, "baseline": BaselineModel}


def save_checkpoint(path, model) -> None:
    """Single-file checkpoint: magic, u32 manifest length, JSON manifest
    (arch, config, parameter names/shapes/offsets), then each tensor in
    the shared serialization format."""
    params = model.parameters()
    payload = io.BytesIO()
    entries = []
    for name, t in params.items():
        entries.append({"name": name, "shape": list(t.shape),
                        "offset": payload.tell()})
        payload.write(nm.pack_tensor(t))
    manifest = {
        "format": 1,
        "arch": model.arch,
        "config": model.cfg.to_dict(),
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, manifest)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise nm.TensorFormatError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if 8 + mlen > len(raw):
        raise nm.TensorFormatError(f"{path}: truncated manifest")
    manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    base = 8 + mlen
    arch = manifest.get("arch")
    if arch not in _ARCHS:
        raise ValueError(f"{path}: unknown architecture {arch!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = _ARCHS[arch](cfg, np.random.default_rng(0))
    params = model.parameters()
    names = set(params)
    listed = {e["name"] for e in manifest["tensors"]}
    if names != listed:
        missing = sorted(names - listed) + sorted(listed - names)
        raise ValueError(f"{path}: parameter set mismatch near {missing[:3]}")
    for entry in manifest["tensors"]:
        arr, _ = nm.unpack_tensor(raw, base + entry["offset"])
        target = params[entry["name"]]
        if arr.shape != target.shape:
            raise ShapeError(
                f"{path}: {entry['name']} has shape {arr.shape}, "
                f"expected {target.shape}")
        target.data = arr
    return model, manifest
