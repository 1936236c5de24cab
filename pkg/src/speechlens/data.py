"""Synthetic bi-modal corpus with planted evidence, plus portable sample files.

Every speech sample is a sequence of (token ids, audio patch matrix)
sentence pairs. Positive samples carry planted evidence in a known subset
of sentences: rare tokens drawn from a reserved slice at the top of the
vocabulary, and/or a constant energy bump added to a few patch rows. The
generator is a single sequential RNG stream, so a config (seed included)
maps to one corpus, byte for byte. The ground-truth placement is returned
as an EvidenceKey so interpretation quality can be scored exactly.

Sample file format (``.smp``, mixed text/binary):

- line 1: JSON header ``{"participant_id", "label", "n_sentences",
  "patch_grid": [rows, cols], "vocab_size"}``
- per sentence: one JSON line ``{"tokens": [...], "start_ms", "end_ms"}``
  followed immediately by the patch matrix in the package's binary tensor
  encoding (u32 rank, u32 dims, little-endian f8 data).

A corpus directory holds ``meta.json``, ``evidence_key.json``, and
``train/NNNN.smp`` / ``test/NNNN.smp``.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import SentencePair, SpeechSample
from .numerics import TensorFormatError, read_tensor, write_tensor

__all__ = [
    "CorpusConfig", "EvidenceKey", "CorpusFormatError",
    "generate_corpus", "segment_labeled_view",
    "save_sample", "load_sample", "save_corpus", "load_corpus",
]

CORPUS_FORMAT = "speechlens-corpus-v1"

_SENTENCE_GAP_MS = 4900
_SENTENCE_SPAN_MS = 4800


class CorpusFormatError(ValueError):
    """A sample or corpus file does not match the documented layout."""


@dataclass
class CorpusConfig:
    """Knobs for the planted-evidence generator."""

    n_train: int = 200
    n_test: int = 60
    sentences_per_speech: tuple = (5, 12)
    tokens_per_sentence: tuple = (6, 12)
    vocab_size: int = 64
    patch_grid: tuple = (8, 4)
    d_patch: int = 16
    signal_fraction: float = 0.2
    signal_strength: float = 2.0
    evidence_vocab: int = 6
    evidence_token_count: int = 3
    evidence_patch_count: int = 4
    evidence_modality: str = "both"
    seed: int = 0

    def __post_init__(self):
        self.sentences_per_speech = tuple(self.sentences_per_speech)
        self.tokens_per_sentence = tuple(self.tokens_per_sentence)
        self.patch_grid = tuple(self.patch_grid)
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("need at least 2 samples per split for balance")
        for name in ("sentences_per_speech", "tokens_per_sentence"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a 1 <= lo <= hi range")
        if self.evidence_modality not in ("both", "text", "audio"):
            raise ValueError(
                f"evidence_modality must be both|text|audio, "
                f"got {self.evidence_modality!r}")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ValueError("signal_fraction must be in (0, 1]")
        if self.signal_strength <= 0.0:
            raise ValueError("signal_strength must be positive")
        if self.evidence_vocab < 1 or self.vocab_size - self.evidence_vocab < 2:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves fewer than 2 background "
                f"tokens beside {self.evidence_vocab} reserved evidence tokens")
        if self.evidence_token_count > self.tokens_per_sentence[0]:
            raise ValueError(
                f"evidence_token_count {self.evidence_token_count} exceeds the "
                f"shortest sentence length {self.tokens_per_sentence[0]}")
        rows, cols = self.patch_grid
        if rows < 1 or cols < 1:
            raise ValueError(f"patch_grid must be positive, got {self.patch_grid}")
        if self.evidence_patch_count > rows * cols:
            raise ValueError(
                f"evidence_patch_count {self.evidence_patch_count} exceeds "
                f"{rows * cols} patches per sentence")
        if self.d_patch < 1:
            raise ValueError("d_patch must be positive")

    @property
    def background_vocab(self) -> int:
        """Ids below this value are background; at or above are evidence."""
        return self.vocab_size - self.evidence_vocab

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d)


@dataclass
class EvidenceKey:
    """Ground truth for where evidence was planted.

    samples maps participant_id to {sentence_index: {"token_positions":
    [...], "patch_indices": [...]}}; sentence indices are ints in memory
    and strings in JSON.
    """

    token_ids: list
    modality: str
    samples: dict = field(default_factory=dict)

    def evidence_sentences(self, participant_id: str) -> list:
        return sorted(self.samples.get(participant_id, {}))

    def token_positions(self, participant_id: str, index: int) -> list:
        return list(self.samples[participant_id][index]["token_positions"])

    def patch_indices(self, participant_id: str, index: int) -> list:
        return list(self.samples[participant_id][index]["patch_indices"])

    def to_dict(self) -> dict:
        return {
            "token_ids": [int(t) for t in self.token_ids],
            "modality": self.modality,
            "samples": {
                pid: {str(idx): {
                    "token_positions": [int(p) for p in entry["token_positions"]],
                    "patch_indices": [int(p) for p in entry["patch_indices"]],
                } for idx, entry in sentences.items()}
                for pid, sentences in self.samples.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceKey":
        samples = {
            pid: {int(idx): {
                "token_positions": list(entry["token_positions"]),
                "patch_indices": list(entry["patch_indices"]),
            } for idx, entry in sentences.items()}
            for pid, sentences in d["samples"].items()
        }
        return cls(token_ids=list(d["token_ids"]), modality=d["modality"],
                   samples=samples)


# ----- generation ---------------------------------------------------------------


def _plant_evidence(tokens, patches, cfg: CorpusConfig,
                    rng: np.random.Generator) -> dict:
    """Mutate one sentence in place; returns its key entry."""
    token_positions, patch_indices = [], []
    if cfg.evidence_modality in ("both", "text"):
        token_positions = sorted(
            rng.choice(len(tokens), size=cfg.evidence_token_count,
                       replace=False).tolist())
        for pos in token_positions:
            tokens[pos] = int(rng.integers(cfg.background_vocab, cfg.vocab_size))
    if cfg.evidence_modality in ("both", "audio"):
        patch_indices = sorted(
            rng.choice(patches.shape[0], size=cfg.evidence_patch_count,
                       replace=False).tolist())
        patches[patch_indices] += cfg.signal_strength
    return {"token_positions": token_positions, "patch_indices": patch_indices}


def _generate_sample(participant_id: str, label: int, cfg: CorpusConfig,
                     rng: np.random.Generator, key: EvidenceKey) -> SpeechSample:
    lo_s, hi_s = cfg.sentences_per_speech
    lo_t, hi_t = cfg.tokens_per_sentence
    n_patches = cfg.patch_grid[0] * cfg.patch_grid[1]
    n_sent = int(rng.integers(lo_s, hi_s + 1))
    sentences = []
    for j in range(n_sent):
        n_tok = int(rng.integers(lo_t, hi_t + 1))
        tokens = rng.integers(0, cfg.background_vocab, size=n_tok).tolist()
        patches = rng.normal(size=(n_patches, cfg.d_patch))
        sentences.append(SentencePair(
            token_ids=tokens, audio_patches=patches, index=j,
            start_ms=j * _SENTENCE_GAP_MS,
            end_ms=j * _SENTENCE_GAP_MS + _SENTENCE_SPAN_MS))
    if label == 1:
        n_evidence = max(1, round(cfg.signal_fraction * n_sent))
        chosen = sorted(rng.choice(n_sent, size=n_evidence, replace=False).tolist())
        entries = {}
        for j in chosen:
            pair = sentences[j]
            entries[j] = _plant_evidence(pair.token_ids, pair.audio_patches,
                                         cfg, rng)
        key.samples[participant_id] = entries
    return SpeechSample(sentences=sentences, label=label,
                        participant_id=participant_id)


def generate_corpus(cfg: CorpusConfig):
    """Returns (train, test, key); deterministic in cfg including cfg.seed.

    Labels alternate within each split, so class counts differ by at most
    one. All randomness comes from one sequential generator.
    """
    rng = np.random.default_rng(cfg.seed)
    key = EvidenceKey(
        token_ids=list(range(cfg.background_vocab, cfg.vocab_size)),
        modality=cfg.evidence_modality)
    train = [_generate_sample(f"train-{i:04d}", (i + 1) % 2, cfg, rng, key)
             for i in range(cfg.n_train)]
    test = [_generate_sample(f"test-{i:04d}", (i + 1) % 2, cfg, rng, key)
            for i in range(cfg.n_test)]
    return train, test, key


def segment_labeled_view(samples) -> list:
    """Flatten samples to (sentence pair, inherited speech label) segments."""
    return [(pair, s.label) for s in samples for pair in s.sentences]


# ----- sample files -------------------------------------------------------------


def save_sample(path, sample: SpeechSample, vocab_size: int,
                patch_grid: tuple) -> None:
    rows, cols = patch_grid
    header = {
        "participant_id": sample.participant_id,
        "label": sample.label,
        "n_sentences": len(sample.sentences),
        "patch_grid": [int(rows), int(cols)],
        "vocab_size": int(vocab_size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for pair in sample.sentences:
            line = {"tokens": [int(t) for t in pair.token_ids],
                    "start_ms": pair.start_ms, "end_ms": pair.end_ms}
            fh.write(json.dumps(line, sort_keys=True).encode() + b"\n")
            write_tensor(fh, pair.audio_patches)


def _json_line(fh, path, what: str) -> dict:
    pos = fh.tell()
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise CorpusFormatError(
            f"{path}: truncated {what} at byte {pos}")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(
            f"{path}: bad {what} JSON at byte {pos}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CorpusFormatError(f"{path}: {what} must be a JSON object")
    return doc


def load_sample(path):
    """Read one .smp file; returns (SpeechSample, header dict).

    Accepts externally produced files as long as they follow the layout;
    start/end times are optional in sentence lines.
    """
    with open(path, "rb") as fh:
        header = _json_line(fh, path, "header")
        for fld in ("participant_id", "label", "n_sentences", "patch_grid",
                    "vocab_size"):
            if fld not in header:
                raise CorpusFormatError(f"{path}: header is missing {fld!r}")
        rows, cols = header["patch_grid"]
        n_patches = rows * cols
        sentences = []
        for j in range(header["n_sentences"]):
            line = _json_line(fh, path, f"sentence {j}")
            if "tokens" not in line:
                raise CorpusFormatError(
                    f"{path}: sentence {j} line is missing 'tokens'")
            tokens = line["tokens"]
            if any(not 0 <= t < header["vocab_size"] for t in tokens):
                raise CorpusFormatError(
                    f"{path}: sentence {j} has token ids outside "
                    f"[0, {header['vocab_size']})")
            try:
                patches = read_tensor(fh)
            except TensorFormatError as exc:
                raise CorpusFormatError(
                    f"{path}: sentence {j} patches: {exc}") from exc
            if patches.ndim != 2 or patches.shape[0] != n_patches:
                raise CorpusFormatError(
                    f"{path}: sentence {j} has patch shape {patches.shape}, "
                    f"expected ({n_patches}, d) for grid {rows}x{cols}")
            sentences.append(SentencePair(
                token_ids=[int(t) for t in tokens], audio_patches=patches,
                index=j, start_ms=line.get("start_ms"),
                end_ms=line.get("end_ms")))
        trailing = fh.read(1)
        if trailing:
            raise CorpusFormatError(
                f"{path}: trailing bytes after sentence {header['n_sentences'] - 1}")
    sample = SpeechSample(sentences=sentences, label=int(header["label"]),
                          participant_id=str(header["participant_id"]))
    return sample, header


# ----- corpus directories --------------------------------------------------------


def save_corpus(directory, train, test, key: EvidenceKey,
                cfg: CorpusConfig) -> None:
    directory = os.fspath(directory)
    for split in ("train", "test"):
        os.makedirs(os.path.join(directory, split), exist_ok=True)
    meta = {"format": CORPUS_FORMAT, "config": cfg.to_dict(),
            "n_train": len(train), "n_test": len(test)}
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "evidence_key.json"), "w",
              encoding="utf-8") as fh:
        json.dump(key.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split, samples in (("train", train), ("test", test)):
        for i, sample in enumerate(samples):
            save_sample(os.path.join(directory, split, f"{i:04d}.smp"),
                        sample, cfg.vocab_size, cfg.patch_grid)


def load_corpus(directory):
    """Returns (train, test, key, cfg) from a corpus directory."""
    directory = os.fspath(directory)
    meta_path = os.path.join(directory, "meta.json")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(
            f"{meta_path}: unknown corpus format {meta.get('format')!r}")
    cfg = CorpusConfig.from_dict(meta["config"])
    with open(os.path.join(directory, "evidence_key.json"), "r",
              encoding="utf-8") as fh:
        key = EvidenceKey.from_dict(json.load(fh))
    splits = {}
    for split, count in (("train", meta["n_train"]), ("test", meta["n_test"])):
        samples = []
        for i in range(count):
            sample, _ = load_sample(os.path.join(directory, split, f"{i:04d}.smp"))
            samples.append(sample)
        splits[split] = samples
    return splits["train"], splits["test"], key, cfg
