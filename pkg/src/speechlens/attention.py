"""Multi-head attention and transformer blocks with probability tracing.

Every attention layer records its post-softmax probabilities (one rank-3
tensor per layer, heads stacked on the leading axis) into a caller-supplied
trace list. After a backward pass the recorded tensors carry gradients,
which is what the interpretation engine consumes.

Attention projections are bias-free matrix maps; feed-forward sublayers and
layer norms keep their usual affine parameters. Blocks are post-norm: each
residual sum is normalized after the addition.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor

__all__ = [
    "TRACE_KINDS", "CapacityError", "AttentionTrace", "Dropper",
    "AttentionParams", "EncoderBlockParams", "FusionBlockParams",
    "glorot", "init_attention_params", "init_encoder_block", "init_fusion_block",
    "multi_head_attention", "encoder_block_forward",
    "decoder_fusion_block_forward", "add_positional_embeddings",
]

TRACE_KINDS = ("text-self", "audio-self", "cross", "speech-self")


class CapacityError(ValueError):
    """Sequence is longer than a learned positional table allows."""


@dataclass
class AttentionTrace:
    """One attention layer's recorded probabilities.

    ``probs`` is the live (heads, queries, keys) tensor node from the
    forward pass; after backward its ``grad`` holds d(root)/d(probs).
    ``scores`` is the pre-softmax logits node, kept for gradient
    diagnostics.
    """

    kind: str
    depth: int
    probs: Tensor
    scores: Tensor

    @property
    def probs_value(self) -> np.ndarray:
        return self.probs.data

    @property
    def probs_grad(self) -> np.ndarray | None:
        return self.probs.grad

    @property
    def n_heads(self) -> int:
        return self.probs.shape[0]


class Dropper:
    """Bound dropout rate + random stream, applied as a callable."""

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return nm.dropout(x, self.rate, self.rng)


# ----- parameters -----------------------------------------------------------


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class EncoderBlockParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        for field in ("ln1_g", "ln1_b", "ffn_w1", "ffn_b1",
                      "ffn_w2", "ffn_b2", "ln2_g", "ln2_b"):
            yield f"{prefix}.{field}", getattr(self, field)


@dataclass
class FusionBlockParams:
    self_attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    cross_attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln3_g: Tensor
    ln3_b: Tensor

    def named(self, prefix: str):
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.cross_attn.named(f"{prefix}.cross_attn")
        for field in ("ln1_g", "ln1_b", "ln2_g", "ln2_b",
                      "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln3_g", "ln3_b"):
            yield f"{prefix}.{field}", getattr(self, field)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Scaled normal init: std = sqrt(2 / (fan_in + fan_out))."""
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_attention_params(d_model: int, n_heads: int,
                          rng: np.random.Generator) -> AttentionParams:
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    return AttentionParams(
        w_q=Tensor(glorot(rng, d_model, d_model)),
        w_k=Tensor(glorot(rng, d_model, d_model)),
        w_v=Tensor(glorot(rng, d_model, d_model)),
        w_o=Tensor(glorot(rng, d_model, d_model)),
        n_heads=n_heads,
    )


def _init_ffn(d_model: int, d_ff: int, rng: np.random.Generator):
    return (Tensor(glorot(rng, d_model, d_ff)), Tensor(np.zeros(d_ff)),
            Tensor(glorot(rng, d_ff, d_model)), Tensor(np.zeros(d_model)))


def _init_ln(d_model: int):
    return Tensor(np.ones(d_model)), Tensor(np.zeros(d_model))


def init_encoder_block(d_model: int, n_heads: int, d_ff: int,
                       rng: np.random.Generator) -> EncoderBlockParams:
    w1, b1, w2, b2 = _init_ffn(d_model, d_ff, rng)
    g1, c1 = _init_ln(d_model)
    g2, c2 = _init_ln(d_model)
    return EncoderBlockParams(
        attn=init_attention_params(d_model, n_heads, rng),
        ln1_g=g1, ln1_b=c1,
        ffn_w1=w1, ffn_b1=b1, ffn_w2=w2, ffn_b2=b2,
        ln2_g=g2, ln2_b=c2,
    )


def init_fusion_block(d_model: int, n_heads: int, d_ff: int,
                      rng: np.random.Generator) -> FusionBlockParams:
    self_attn = init_attention_params(d_model, n_heads, rng)
    cross_attn = init_attention_params(d_model, n_heads, rng)
    w1, b1, w2, b2 = _init_ffn(d_model, d_ff, rng)
    g1, c1 = _init_ln(d_model)
    g2, c2 = _init_ln(d_model)
    g3, c3 = _init_ln(d_model)
    return FusionBlockParams(
        self_attn=self_attn, ln1_g=g1, ln1_b=c1,
        cross_attn=cross_attn, ln2_g=g2, ln2_b=c2,
        ffn_w1=w1, ffn_b1=b1, ffn_w2=w2, ffn_b2=b2,
        ln3_g=g3, ln3_b=c3,
    )


# ----- forward passes --------------------------------------------------------


def multi_head_attention(queries: Tensor, keys_values: Tensor,
                         params: AttentionParams, kind: str, depth: int,
                         trace_sink: list | None = None,
                         score_probe=None) -> Tensor:
    """Scaled dot-product attention over stacked heads.

    queries: (q, d); keys_values: (k, d); returns (q, d). Records one
    AttentionTrace into trace_sink when given. ``score_probe(kind, depth,
    shape)`` may return an additive offset for the pre-softmax logits;
    it exists for gradient diagnostics and is normally None.
    """
    if kind not in TRACE_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    if queries.ndim != 2 or keys_values.ndim != 2:
        raise ShapeError(
            f"attention needs matrices, got {queries.shape} and {keys_values.shape}")
    if queries.shape[0] == 0 or keys_values.shape[0] == 0:
        raise ShapeError("attention over an empty sequence")
    d = params.w_q.shape[0]
    if queries.shape[1] != d or keys_values.shape[1] != d:
        raise ShapeError(
            f"attention feature size mismatch: inputs {queries.shape} and "
            f"{keys_values.shape}, parameters expect width {d}")
    h = params.n_heads
    dh = d // h

    q = nm.split_heads(nm.matmul(queries, params.w_q), h)
    k = nm.split_heads(nm.matmul(keys_values, params.w_k), h)
    v = nm.split_heads(nm.matmul(keys_values, params.w_v), h)

    scores = nm.scale(nm.bmm(q, nm.swap_last2(k)), 1.0 / math.sqrt(dh))
    if score_probe is not None:
        offset = score_probe(kind, depth, scores.shape)
        if offset is not None:
            scores = nm.add(scores, Tensor(offset))
    probs = nm.softmax_rows(scores)
    if trace_sink is not None:
        trace_sink.append(AttentionTrace(kind=kind, depth=depth,
                                         probs=probs, scores=scores))
    ctx = nm.merge_heads(nm.bmm(probs, v))
    return nm.matmul(ctx, params.w_o)


def _ffn_forward(x: Tensor, w1, b1, w2, b2) -> Tensor:
    hidden = nm.relu(nm.add(nm.matmul(x, w1), b1))
    return nm.add(nm.matmul(hidden, w2), b2)


def encoder_block_forward(x: Tensor, params: EncoderBlockParams,
                          kind: str, depth: int,
                          trace_sink: list | None = None,
                          score_probe=None, drop: Dropper | None = None) -> Tensor:
    """Post-norm encoder block: self-attention, then feed-forward."""
    attn = multi_head_attention(x, x, params.attn, kind, depth,
                                trace_sink, score_probe)
    if drop is not None:
        attn = drop(attn)
    x = nm.layer_norm_rows(nm.add(x, attn), params.ln1_g, params.ln1_b)
    ff = _ffn_forward(x, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2)
    if drop is not None:
        ff = drop(ff)
    return nm.layer_norm_rows(nm.add(x, ff), params.ln2_g, params.ln2_b)


def decoder_fusion_block_forward(text_x: Tensor, audio_mem: Tensor,
                                 params: FusionBlockParams,
                                 self_depth: int, cross_depth: int,
                                 trace_sink: list | None = None,
                                 score_probe=None,
                                 drop: Dropper | None = None) -> Tensor:
    """Decoder-style fusion: text self-attention, then unmasked
    cross-attention with text queries over fixed audio memory, then
    feed-forward. Post-norm throughout."""
    a = multi_head_attention(text_x, text_x, params.self_attn,
                             "text-self", self_depth, trace_sink, score_probe)
    if drop is not None:
        a = drop(a)
    x = nm.layer_norm_rows(nm.add(text_x, a), params.ln1_g, params.ln1_b)

    c = multi_head_attention(x, audio_mem, params.cross_attn,
                             "cross", cross_depth, trace_sink, score_probe)
    if drop is not None:
        c = drop(c)
    x = nm.layer_norm_rows(nm.add(x, c), params.ln2_g, params.ln2_b)

    ff = _ffn_forward(x, params.ffn_w1, params.ffn_b1,
                      params.ffn_w2, params.ffn_b2)
    if drop is not None:
        ff = drop(ff)
    return nm.layer_norm_rows(nm.add(x, ff), params.ln3_g, params.ln3_b)


def add_positional_embeddings(x: Tensor, table: Tensor) -> Tensor:
    """Add the first n rows of a learned positional table to an (n, d) input."""
    n = x.shape[0]
    if n > table.shape[0]:
        raise CapacityError(
            f"sequence length {n} exceeds positional capacity {table.shape[0]}")
    return nm.add(x, nm.slice_rows(table, n))
