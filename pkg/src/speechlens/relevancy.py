"""Hierarchical relevancy interpretation over recorded attention traces.

The engine is pure post-hoc data analysis: it consumes each layer's
post-softmax attention probabilities together with their gradients with
respect to the positive-class logit, both recorded during one forward +
backward pass, and accumulates relevancy maps.

Per layer it forms the head-averaged, zero-clamped gradient-weighted
attention map, then applies one additive update per map:

- self-attention layers: R ← R + W·R on their modality's square map
  (sentence scores come from the speech-level map, token scores from the
  text map, audio self-interactions accumulate in the audio map);
- text-source self-attention layers additionally apply the same additive
  rule to the rectangular text→audio map (a no-op until cross-attention
  has injected mass);
- cross-attention layers first normalize the audio map — split off the
  identity, scale each nonzero row of the remainder to sum 1, re-add the
  identity — then add (weighted cross map)·(normalized audio map) to the
  text→audio map. This is the only rule that creates cross-modal mass.

Scores are the [cls] row (row 0) of the relevant map with the [cls]
column dropped; the audio [cls] column of the text→audio map is reported
separately rather than as a patch score.
"""

import json
from dataclasses import dataclass

import jsonschema
import numpy as np

from . import numerics as nm
from .model import CLASS_POSITIVE, SpeechSample, TraceLog
from .numerics import GradientTape

__all__ = [
    "TraceContractError", "TraceOrderError",
    "WeightedAttentionMap", "RelevancyMap", "SentenceInterpretation",
    "InterpretationResult", "INTERPRETATION_SCHEMA",
    "weighted_attention", "init_relevancy", "update_self",
    "update_cross_via_self", "normalize_aa", "update_cross",
    "speech_level_interpret", "sentence_level_interpret", "rank_sentences",
    "hierarchical_interpret", "dump_interpretation",
]


class TraceContractError(ValueError):
    """A trace is missing data the engine requires (e.g. gradients)."""


class TraceOrderError(ValueError):
    """Trace kinds/depths are inconsistent with forward execution order."""


@dataclass
class WeightedAttentionMap:
    """Head-averaged, zero-clamped product of attention probabilities and
    their recorded gradients, for one layer."""

    matrix: np.ndarray
    kind: str
    depth: int


@dataclass
class RelevancyMap:
    """Accumulated influence between positions. kind: ss | tt | aa | ta.
    Square maps start at identity (self-relevance); the rectangular
    text→audio map starts at zeros (no interaction before fusion)."""

    kind: str
    matrix: np.ndarray
    updates: int = 0


def weighted_attention(trace) -> WeightedAttentionMap:
    """Clamp the per-head elementwise product of probabilities and their
    gradients at zero, then average over heads."""
    if trace.probs_grad is None:
        raise TraceContractError(
            f"trace ({trace.kind}, depth {trace.depth}) has no recorded "
            "gradients; run backward before interpreting")
    prod = np.maximum(trace.probs_grad * trace.probs_value, 0.0)
    return WeightedAttentionMap(matrix=prod.mean(axis=0),
                                kind=trace.kind, depth=trace.depth)


def init_relevancy(kind: str, dims) -> RelevancyMap:
    if kind in ("ss", "tt", "aa"):
        n = int(dims)
        if n < 1:
            raise ValueError(f"relevancy map needs positive size, got {n}")
        return RelevancyMap(kind=kind, matrix=np.eye(n))
    if kind == "ta":
        t, a = dims
        if t < 1 or a < 1:
            raise ValueError(f"relevancy map needs positive dims, got {dims}")
        return RelevancyMap(kind=kind, matrix=np.zeros((t, a)))
    raise ValueError(f"unknown relevancy kind {kind!r}")


def _check_square_match(rmap: RelevancyMap, w: WeightedAttentionMap) -> None:
    n = rmap.matrix.shape[0]
    if w.matrix.shape != (n, n):
        raise nm.ShapeError(
            f"update needs a {n}x{n} weighted map for kind {rmap.kind}, "
            f"got {w.matrix.shape}")


def update_self(rmap: RelevancyMap, w: WeightedAttentionMap) -> RelevancyMap:
    """R ← R + W·R for a square within-modality map."""
    _check_square_match(rmap, w)
    rmap.matrix = rmap.matrix + w.matrix @ rmap.matrix
    rmap.updates += 1
    return rmap


def update_cross_via_self(r_ta: RelevancyMap, w_text_self: WeightedAttentionMap
                          ) -> RelevancyMap:
    """R ← R + W·R with the text-self weighted map as the square left
    factor over the rectangular text→audio map."""
    t = r_ta.matrix.shape[0]
    if w_text_self.matrix.shape != (t, t):
        raise nm.ShapeError(
            f"text-self update needs a {t}x{t} weighted map, "
            f"got {w_text_self.matrix.shape}")
    r_ta.matrix = r_ta.matrix + w_text_self.matrix @ r_ta.matrix
    r_ta.updates += 1
    return r_ta


def normalize_aa(r_aa: RelevancyMap) -> np.ndarray:
    """Split the audio map into identity plus remainder, scale each nonzero
    remainder row to sum 1 (zero rows stay zero), re-add the identity."""
    m = r_aa.matrix
    n = m.shape[0]
    eye = np.eye(n)
    remainder = m - eye
    sums = remainder.sum(axis=1, keepdims=True)
    scaled = np.divide(remainder, sums, out=np.zeros_like(remainder),
                       where=sums > 0)
    return scaled + eye


def update_cross(r_ta: RelevancyMap, w_cross: WeightedAttentionMap,
                 rbar_aa: np.ndarray) -> RelevancyMap:
    """R_ta ← R_ta + W·R̄ with the normalized audio map as right factor."""
    t, a = r_ta.matrix.shape
    if w_cross.matrix.shape != (t, a):
        raise nm.ShapeError(
            f"cross update needs a {t}x{a} weighted map, got {w_cross.matrix.shape}")
    if rbar_aa.shape != (a, a):
        raise nm.ShapeError(
            f"cross update needs a {a}x{a} normalized audio map, "
            f"got {rbar_aa.shape}")
    r_ta.matrix = r_ta.matrix + w_cross.matrix @ rbar_aa
    r_ta.updates += 1
    return r_ta


# ----- trace validation -------------------------------------------------------


def _require_grads(traces) -> None:
    for t in traces:
        if t.probs_grad is None:
            raise TraceContractError(
                f"trace ({t.kind}, depth {t.depth}) has no recorded gradients")


def _require_consecutive_depths(traces, kind: str) -> None:
    depths = [t.depth for t in traces if t.kind == kind]
    if depths != list(range(len(depths))):
        raise TraceOrderError(
            f"{kind} traces must arrive in forward order with depths "
            f"0..{len(depths) - 1}, got {depths}")


def speech_level_interpret(traces, n_sentences: int) -> np.ndarray:
    """Sentence relevancy scores from the speech-level self-attention
    traces: accumulate the additive self-update in forward order, then
    read row 0 minus the [cls] column."""
    _require_grads(traces)
    size = n_sentences + 1
    for t in traces:
        if t.kind != "speech-self":
            raise TraceOrderError(
                f"speech-level interpretation got a {t.kind!r} trace")
        if t.probs_value.shape[1:] != (size, size):
            raise TraceContractError(
                f"speech trace has shape {t.probs_value.shape[1:]}, "
                f"expected ({size}, {size}) for {n_sentences} sentences")
    _require_consecutive_depths(traces, "speech-self")
    rmap = init_relevancy("ss", size)
    for t in traces:
        update_self(rmap, weighted_attention(t))
    return rmap.matrix[0, 1:].copy()


def _sentence_trace_shapes(traces, n_text, n_audio):
    for t in traces:
        if t.kind == "text-self":
            n_text = n_text or t.probs_value.shape[1]
        elif t.kind == "audio-self":
            n_audio = n_audio or t.probs_value.shape[1]
        elif t.kind == "cross":
            n_text = n_text or t.probs_value.shape[1]
            n_audio = n_audio or t.probs_value.shape[2]
        else:
            raise TraceOrderError(
                f"sentence-level interpretation got a {t.kind!r} trace")
    if n_text is None or n_audio is None:
        raise TraceContractError(
            "cannot infer sequence lengths; pass n_text/n_audio explicitly")
    return n_text, n_audio


def sentence_level_interpret(traces, n_text: int | None = None,
                             n_audio: int | None = None):
    """Token and patch relevancy for one sentence.

    traces must be that sentence's own, in forward order: audio encoder
    layers, text encoder layers, then alternating fusion self/cross
    layers. Returns (token_scores, patch_scores, audio_cls_score) where
    lengths exclude the respective [cls] positions.
    """
    _require_grads(traces)
    n_text, n_audio = _sentence_trace_shapes(traces, n_text, n_audio)
    kinds = [t.kind for t in traces]
    first_cross = kinds.index("cross") if "cross" in kinds else len(kinds)
    for pos, t in enumerate(traces):
        if t.kind == "audio-self" and pos > first_cross:
            raise TraceOrderError(
                "audio-self trace after a cross trace: not forward order")
        if t.kind == "cross" and (pos == 0 or traces[pos - 1].kind != "text-self"):
            raise TraceOrderError(
                "each cross trace must directly follow its block's text-self trace")
    for kind in ("audio-self", "text-self", "cross"):
        _require_consecutive_depths(traces, kind)

    r_tt = init_relevancy("tt", n_text)
    r_aa = init_relevancy("aa", n_audio)
    r_ta = init_relevancy("ta", (n_text, n_audio))
    for t in traces:
        w = weighted_attention(t)
        if t.kind == "audio-self":
            update_self(r_aa, w)
        elif t.kind == "text-self":
            update_self(r_tt, w)
            update_cross_via_self(r_ta, w)
        else:
            update_cross(r_ta, w, normalize_aa(r_aa))
    token_scores = r_tt.matrix[0, 1:].copy()
    patch_scores = r_ta.matrix[0, 1:].copy()
    audio_cls_score = float(r_ta.matrix[0, 0])
    return token_scores, patch_scores, audio_cls_score


def rank_sentences(scores) -> list:
    """Indices by descending score, ties broken toward the lower index."""
    scores = np.asarray(scores)
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


# ----- assembled results --------------------------------------------------------


@dataclass
class SentenceInterpretation:
    index: int
    token_scores: np.ndarray
    patch_scores: np.ndarray
    audio_cls_score: float
    patch_grid: tuple


@dataclass
class InterpretationResult:
    sample_id: str
    sentence_scores: np.ndarray
    selected: list
    class_probs: np.ndarray
    checkpoint_id: str = ""

    def selection_indices(self) -> list:
        return [s.index for s in self.selected]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "sentence_scores": [float(v) for v in self.sentence_scores],
            "selected": [
                {
                    "index": int(s.index),
                    "token_scores": [float(v) for v in s.token_scores],
                    "patch_scores": [float(v) for v in s.patch_scores],
                    "audio_cls_score": float(s.audio_cls_score),
                    "patch_grid": {"rows": int(s.patch_grid[0]),
                                   "cols": int(s.patch_grid[1])},
                }
                for s in self.selected
            ],
            "class_probs": [float(v) for v in self.class_probs],
        }


INTERPRETATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["sample_id", "sentence_scores", "selected", "class_probs"],
    "additionalProperties": False,
    "properties": {
        "sample_id": {"type": "string"},
        "sentence_scores": {
            "type": "array",
            "items": {"type": "number", "minimum": 0},
        },
        "class_probs": {
            "type": "array",
            "minItems": 2,
            "maxItems": 2,
            "items": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "selected": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["index", "token_scores", "patch_scores",
                             "audio_cls_score", "patch_grid"],
                "additionalProperties": False,
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "token_scores": {
                        "type": "array",
                        "items": {"type": "number", "minimum": 0},
                    },
                    "patch_scores": {
                        "type": "array",
                        "items": {"type": "number", "minimum": 0},
                    },
                    "audio_cls_score": {"type": "number", "minimum": 0},
                    "patch_grid": {
                        "type": "object",
                        "required": ["rows", "cols"],
                        "additionalProperties": False,
                        "properties": {
                            "rows": {"type": "integer", "minimum": 1},
                            "cols": {"type": "integer", "minimum": 1},
                        },
                    },
                },
            },
        },
    },
}


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def hierarchical_interpret(model, sample: SpeechSample, top_k: int = 2,
                           patch_grid: tuple | None = None,
                           checkpoint_id: str = "") -> InterpretationResult:
    """Two-stage interpretation of one sample.

    Runs a single deterministic forward pass (dropout off) recording all
    traces, one backward pass from the positive-class logit, then ranks
    sentences by speech-level relevancy and interprets the top_k
    sentences' own traces at token/patch granularity.
    """
    n = len(sample.sentences)
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must be in 1..{n}, got {top_k}")
    log = TraceLog()
    with GradientTape() as tape:
        logits = model.forward(sample, log)
        target = nm.take_row(logits, CLASS_POSITIVE)
    tape.backward(target)
    class_probs = _softmax_np(logits.data)
    # Attention layers whose output provably cannot reach the target logit
    # (e.g. the audio encoder when there are no cross layers) receive no
    # gradient from backward; their true gradient is exactly zero.
    for trace in log.all_traces():
        if trace.probs.grad is None:
            trace.probs.grad = np.zeros_like(trace.probs.data)

    sentence_scores = speech_level_interpret(log.speech, n)
    order = rank_sentences(sentence_scores)
    selected = []
    for idx in order[:top_k]:
        pair = sample.sentences[idx]
        n_text = len(pair.token_ids) + 1
        n_audio = pair.audio_patches.shape[0] + 1
        token_scores, patch_scores, audio_cls = sentence_level_interpret(
            log.sentence[idx], n_text=n_text, n_audio=n_audio)
        grid = patch_grid or (1, pair.audio_patches.shape[0])
        if grid[0] * grid[1] != pair.audio_patches.shape[0]:
            raise ValueError(
                f"patch grid {grid} does not cover {pair.audio_patches.shape[0]} patches")
        selected.append(SentenceInterpretation(
            index=idx, token_scores=token_scores, patch_scores=patch_scores,
            audio_cls_score=audio_cls, patch_grid=tuple(grid)))
    return InterpretationResult(
        sample_id=sample.participant_id,
        sentence_scores=sentence_scores,
        selected=selected,
        class_probs=class_probs,
        checkpoint_id=checkpoint_id,
    )


def dump_interpretation(result: InterpretationResult, path) -> dict:
    """Validate against the documented schema and write JSON; returns the dict."""
    doc = result.to_dict()
    jsonschema.validate(doc, INTERPRETATION_SCHEMA)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc
