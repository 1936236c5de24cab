"""Hierarchical model, baseline variant, voting, and checkpoints."""

import numpy as np
import pytest

from helpers import fusion_block_oracle, rel_err
from speechlens import attention as att
from speechlens import model as mdl
from speechlens import numerics as nm
from speechlens.model import (BaselineModel, ModelConfig, ProposedModel,
                              SentencePair, SpeechSample, TraceLog,
                              majority_vote, predict_from_logits)
from speechlens.numerics import GradientTape, Tensor


def toy_config(**overrides) -> ModelConfig:
    base = dict(d_model=8, n_heads=2, d_ff=16, text_layers=1, audio_layers=1,
                fusion_layers=1, speech_layers=2, vocab_size=12, d_patch=4,
                max_tokens=10, max_patches=8, max_sentences=6)
    base.update(overrides)
    return ModelConfig(**base)


def toy_sentence(rng, cfg, n_tokens=4, n_patches=4, index=0) -> SentencePair:
    return SentencePair(
        token_ids=rng.integers(0, cfg.vocab_size, size=n_tokens).tolist(),
        audio_patches=rng.normal(size=(n_patches, cfg.d_patch)),
        index=index,
    )


def toy_sample(rng, cfg, n_sentences, label=1) -> SpeechSample:
    sentences = [toy_sentence(rng, cfg, index=i) for i in range(n_sentences)]
    return SpeechSample(sentences=sentences, label=label, participant_id="p0")


class TestSentenceLevel:
    def test_encode_output_lengths(self):
        rng = np.random.default_rng(50)
        cfg = toy_config()
        sp = mdl.init_sentence_params(cfg, rng)
        pair = toy_sentence(rng, cfg, n_tokens=5, n_patches=6)
        h_a, h_t = mdl.encode_sentence(pair, sp, cfg)
        assert h_a.shape == (7, cfg.d_model)
        assert h_t.shape == (6, cfg.d_model)

    def test_encode_deterministic(self):
        rng = np.random.default_rng(51)
        cfg = toy_config()
        sp = mdl.init_sentence_params(cfg, rng)
        pair = toy_sentence(rng, cfg)
        a1, t1 = mdl.encode_sentence(pair, sp, cfg)
        a2, t2 = mdl.encode_sentence(pair, sp, cfg)
        assert np.array_equal(a1.data, a2.data)
        assert np.array_equal(t1.data, t2.data)

    def test_depth_zero_text_is_embeddings_plus_positions(self):
        rng = np.random.default_rng(52)
        cfg = toy_config(text_layers=0, audio_layers=0)
        sp = mdl.init_sentence_params(cfg, rng)
        pair = toy_sentence(rng, cfg, n_tokens=3)
        _, h_t = mdl.encode_sentence(pair, sp, cfg)
        expect = np.vstack([sp.text_cls.data.reshape(1, -1),
                            sp.token_table.data[pair.token_ids]])
        expect = expect + sp.text_pos.data[:4]
        assert np.array_equal(h_t.data, expect)

    def test_fusion_trace_census(self):
        rng = np.random.default_rng(53)
        cfg = toy_config(fusion_layers=8)
        sp = mdl.init_sentence_params(cfg, rng)
        pair = toy_sentence(rng, cfg, n_tokens=3, n_patches=5)
        sink = []
        h_a, h_t = mdl.encode_sentence(pair, sp, cfg, sink)
        mdl.fuse_cross_modal(h_t, h_a, sp, sink)
        cross = [t for t in sink if t.kind == "cross"]
        assert len(cross) == 8
        assert all(t.probs_value.shape[2] == 6 for t in cross)  # a0+1 keys
        assert [t.depth for t in cross] == list(range(8))

    def test_fusion_depth_one_matches_single_block_oracle(self):
        rng = np.random.default_rng(54)
        cfg = toy_config(fusion_layers=1)
        sp = mdl.init_sentence_params(cfg, rng)
        pair = toy_sentence(rng, cfg)
        h_a, h_t = mdl.encode_sentence(pair, sp, cfg)
        emb = mdl.fuse_cross_modal(h_t, h_a, sp)
        expect = fusion_block_oracle(h_t.data, h_a.data, sp.fusion_blocks[0])[0]
        assert np.max(np.abs(emb.data - expect)) < 1e-12

    def test_bad_patch_width_rejected(self):
        rng = np.random.default_rng(55)
        cfg = toy_config()
        sp = mdl.init_sentence_params(cfg, rng)
        pair = SentencePair(token_ids=[1], audio_patches=rng.normal(size=(2, 7)))
        with pytest.raises(nm.ShapeError, match="d_patch"):
            mdl.encode_sentence(pair, sp, cfg)

    def test_token_out_of_vocab_rejected(self):
        rng = np.random.default_rng(56)
        cfg = toy_config()
        sp = mdl.init_sentence_params(cfg, rng)
        pair = SentencePair(token_ids=[cfg.vocab_size],
                            audio_patches=rng.normal(size=(2, cfg.d_patch)))
        with pytest.raises(nm.ShapeError, match="outside"):
            mdl.encode_sentence(pair, sp, cfg)


class TestSpeechLevel:
    def test_trace_count_and_shape(self):
        rng = np.random.default_rng(57)
        cfg = toy_config(speech_layers=2)
        model = ProposedModel(cfg, rng)
        embs = [Tensor(rng.normal(size=cfg.d_model))]
        sink = []
        logits = mdl.speech_forward(embs, model, sink)
        assert logits.shape == (2,)
        assert [t.kind for t in sink] == ["speech-self", "speech-self"]
        assert sink[0].probs_value.shape == (cfg.n_heads, 2, 2)
        assert np.allclose(sink[0].probs_value.sum(axis=-1), 1.0, atol=1e-9)

    def test_order_sensitivity(self):
        rng = np.random.default_rng(58)
        cfg = toy_config()
        model = ProposedModel(cfg, rng)
        e1 = Tensor(rng.normal(size=cfg.d_model))
        e2 = Tensor(rng.normal(size=cfg.d_model))
        a = mdl.speech_forward([e1, e2], model)
        b = mdl.speech_forward([e2, e1], model)
        assert not np.allclose(a.data, b.data)

    def test_empty_embeddings_rejected(self):
        rng = np.random.default_rng(59)
        model = ProposedModel(toy_config(), rng)
        with pytest.raises(nm.ShapeError, match="at least one"):
            mdl.speech_forward([], model)

    def test_too_many_sentences_rejected(self):
        rng = np.random.default_rng(60)
        cfg = toy_config(max_sentences=2)
        model = ProposedModel(cfg, rng)
        embs = [Tensor(rng.normal(size=cfg.d_model)) for _ in range(3)]
        with pytest.raises(att.CapacityError, match="max_sentences"):
            mdl.speech_forward(embs, model)


class TestProposedForward:
    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_trace_census(self, n):
        rng = np.random.default_rng(61)
        cfg = toy_config(text_layers=1, audio_layers=2, fusion_layers=3,
                         speech_layers=2)
        model = ProposedModel(cfg, rng)
        sample = toy_sample(rng, cfg, n)
        log = TraceLog()
        model.forward(sample, log)
        assert len(log.sentence) == n
        for group in log.sentence:
            kinds = [t.kind for t in group]
            assert kinds.count("audio-self") == cfg.audio_layers
            assert kinds.count("text-self") == cfg.text_layers + cfg.fusion_layers
            assert kinds.count("cross") == cfg.fusion_layers
        assert len(log.speech) == cfg.speech_layers
        total = sum(len(g) for g in log.sentence) + len(log.speech)
        assert total == n * (1 + 2 + 3 + 3) + 2

    def test_backward_populates_every_trace(self):
        rng = np.random.default_rng(62)
        cfg = toy_config()
        model = ProposedModel(cfg, rng)
        sample = toy_sample(rng, cfg, 2)
        log = TraceLog()
        with GradientTape() as tape:
            logits = model.forward(sample, log)
            target = nm.take_row(logits, mdl.CLASS_POSITIVE)
        tape.backward(target)
        for trace in log.all_traces():
            assert trace.probs_grad is not None
            assert trace.probs_grad.shape == trace.probs_value.shape

    def test_logits_finite_smoke(self):
        rng = np.random.default_rng(63)
        cfg = toy_config()
        model = ProposedModel(cfg, rng)
        sample = toy_sample(rng, cfg, 5)
        logits = model.forward(sample)
        assert np.isfinite(logits.data).all()

    def test_attention_gradient_vs_probed_finite_difference(self):
        """d(target)/d(pre-softmax scores) from the tape must match a central
        difference that injects score offsets through the probe hook."""
        rng = np.random.default_rng(64)
        cfg = toy_config()
        model = ProposedModel(cfg, rng)
        sample = toy_sample(rng, cfg, 2)

        log = TraceLog()
        with GradientTape() as tape:
            logits = model.forward(sample, log)
            target = nm.take_row(logits, mdl.CLASS_POSITIVE)
        tape.backward(target)

        # probe occurrence k of (kind, depth) across the whole forward pass
        cases = [
            ("cross", 0, 0, (0, 0, 1)),       # sentence 0's cross layer
            ("cross", 0, 1, (1, 0, 2)),       # sentence 1's cross layer
            ("speech-self", 1, 0, (0, 0, 1)),
        ]
        h = 1e-5
        for kind, depth, occurrence, entry in cases:
            if kind == "speech-self":
                trace = log.speech[depth]
            else:
                trace = [t for t in log.sentence[occurrence] if t.kind == kind
                         and t.depth == depth][0]
            analytic = trace.scores.grad[entry]

            def run(offset_sign):
                calls = {"n": 0}

                def probe(k_, d_, shape):
                    if (k_, d_) != (kind, depth):
                        return None
                    my_turn = calls["n"] == occurrence
                    calls["n"] += 1
                    if not my_turn:
                        return None
                    off = np.zeros(shape)
                    off[entry] = offset_sign * h
                    return off

                out = model.forward(sample, score_probe=probe)
                return float(out.data[mdl.CLASS_POSITIVE])

            fd = (run(+1.0) - run(-1.0)) / (2 * h)
            assert rel_err(analytic, fd) < 1e-3


class TestBaseline:
    def test_one_logit_pair_per_sentence(self):
        rng = np.random.default_rng(65)
        cfg = toy_config(max_sentences=42)
        model = BaselineModel(cfg, rng)
        sentences = [toy_sentence(rng, cfg, index=i) for i in range(42)]
        outs = [model.forward(s) for s in sentences]
        assert len(outs) == 42
        assert all(o.shape == (2,) for o in outs)

    def test_deterministic(self):
        rng = np.random.default_rng(66)
        cfg = toy_config()
        model = BaselineModel(cfg, rng)
        pair = toy_sentence(rng, cfg)
        a = model.forward(pair)
        b = model.forward(pair)
        assert np.array_equal(a.data, b.data)

    def test_head_on_zero_embedding_returns_bias(self):
        rng = np.random.default_rng(67)
        cfg = toy_config()
        model = BaselineModel(cfg, rng)
        model.head_b.data = np.array([0.3, -0.7])
        zero = Tensor(np.zeros(cfg.d_model))
        out = mdl._head_logits(zero, model.head_w, model.head_b)
        assert np.array_equal(out.data, [0.3, -0.7])

    def test_depth_zero_speech_equals_baseline_head(self):
        rng = np.random.default_rng(68)
        cfg = toy_config(speech_layers=0)
        proposed = ProposedModel(cfg, rng)
        baseline = BaselineModel(toy_config(speech_layers=2),
                                 np.random.default_rng(99))
        base_params = baseline.parameters()
        prop_params = proposed.parameters()
        for name, t in base_params.items():
            target = {"head_w": "speech.head_w", "head_b": "speech.head_b"}.get(name, name)
            prop_params[target].data = t.data.copy()
        pair = toy_sentence(np.random.default_rng(7), cfg)
        sample = SpeechSample(sentences=[pair], label=0, participant_id="x")
        lp = proposed.forward(sample)
        lb = baseline.forward(pair)
        assert np.max(np.abs(lp.data - lb.data)) < 1e-12


class TestPredictionRules:
    def test_argmax_tie_breaks_to_normal(self):
        assert predict_from_logits(np.array([0.5, 0.5])) == 0
        assert predict_from_logits(np.array([0.4, 0.5])) == 1

    def test_vote_strict_majority_boundary(self):
        assert majority_vote([1] * 22 + [0] * 20) == 1
        assert majority_vote([1] * 21 + [0] * 21) == 0

    def test_vote_all_zero(self):
        assert majority_vote([0] * 5) == 0

    def test_vote_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([])

    def test_vote_custom_threshold(self):
        assert majority_vote([1, 1, 0, 0], threshold_count=1) == 1
        assert majority_vote([1, 0, 0, 0], threshold_count=1) == 0


class TestSampleValidation:
    def test_empty_sentence_list_rejected(self):
        with pytest.raises(nm.ShapeError):
            SpeechSample(sentences=[], label=0, participant_id="p")

    def test_bad_label_rejected(self):
        pair = SentencePair(token_ids=[0], audio_patches=np.zeros((1, 4)))
        with pytest.raises(ValueError):
            SpeechSample(sentences=[pair], label=2, participant_id="p")

    def test_empty_tokens_rejected(self):
        with pytest.raises(nm.ShapeError):
            SentencePair(token_ids=[], audio_patches=np.zeros((1, 4)))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(69)
        cfg = toy_config()
        model = ProposedModel(cfg, rng)
        path = tmp_path / "model.ckpt"
        mdl.save_checkpoint(path, model)
        loaded, manifest = mdl.load_checkpoint(path)
        assert manifest["arch"] == "proposed"
        orig = model.parameters()
        got = loaded.parameters()
        assert set(orig) == set(got)
        for name in orig:
            assert orig[name].data.tobytes() == got[name].data.tobytes(), name

    def test_round_trip_baseline(self, tmp_path):
        rng = np.random.default_rng(70)
        model = BaselineModel(toy_config(), rng)
        path = tmp_path / "b.ckpt"
        mdl.save_checkpoint(path, model)
        loaded, manifest = mdl.load_checkpoint(path)
        assert manifest["arch"] == "baseline"
        pair = toy_sentence(np.random.default_rng(1), toy_config())
        assert np.array_equal(model.forward(pair).data, loaded.forward(pair).data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"nope" + b"\x00" * 32)
        with pytest.raises(nm.TensorFormatError, match="magic"):
            mdl.load_checkpoint(path)

    def test_manifest_lists_shapes_and_offsets(self, tmp_path):
        rng = np.random.default_rng(71)
        model = BaselineModel(toy_config(), rng)
        path = tmp_path / "b.ckpt"
        mdl.save_checkpoint(path, model)
        _, manifest = mdl.load_checkpoint(path)
        entries = manifest["tensors"]
        assert all(set(e) == {"name", "shape", "offset"} for e in entries)
        offsets = [e["offset"] for e in entries]
        assert offsets == sorted(offsets) and offsets[0] == 0
