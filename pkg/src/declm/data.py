"""Corpus ingestion, character tokenization, batching, synthetic task generator.

On-disk formats:
  manifest   TSV, one utterance per line: utt_id <TAB> feature_path <TAB> transcript
  features   binary "FEA1": magic, u32 T, u32 d, then T*d little-endian f32 row-major
  text       UTF-8, one sentence per line
  vocabulary one token per line (line number = id), reserved tokens first
"""

from __future__ import annotations

import os
import string
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, ContractError, DataError, FeatureFormatError,
                     ManifestError)
from .rng import Rng

SOS, EOS, UNK = "<sos>", "<eos>", "<unk>"
SOS_ID, EOS_ID, UNK_ID = 0, 1, 2
RESERVED = (SOS, EOS, UNK)

FEATURE_MAGIC = b"FEA1"


class Vocabulary:
    """Ordered token list with the three reserved ids first."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ConfigError("vocabulary must start with <sos>, <eos>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_characters(cls, chars) -> "Vocabulary":
        return cls(list(RESERVED) + sorted(set(chars)))

    def encode(self, text: str) -> list[int]:
        """Character ids; unknown characters map to <unk>. No <eos> here."""
        return [self._index.get(ch, UNK_ID) for ch in text]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i in (SOS_ID, EOS_ID):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        return "".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line[:-1] if line.endswith("\n") else line for line in fh]
        return cls(tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocabulary) -> str:
    return vocab.decode(ids)


@dataclass
class UtteranceDesc:
    utt_id: str
    feature_path: str
    transcript: str


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # [T, d] float32, T >= 4
    tokens: list[int]     # ends with <eos>

    def __post_init__(self):
        if self.features.shape[0] < 4:
            raise DataError(f"{self.utt_id}: {self.features.shape[0]} frames, need >= 4")
        if len(self.tokens) < 2 or self.tokens[-1] != EOS_ID:
            raise DataError(f"{self.utt_id}: tokens must be content plus <eos>")


def load_manifest(path) -> list[UtteranceDesc]:
    base = os.path.dirname(os.path.abspath(path))
    descs: list[UtteranceDesc] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            utt_id, feat_path, transcript = fields
            if utt_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            descs.append(UtteranceDesc(utt_id, os.path.join(base, feat_path), transcript))
    return descs


def write_features(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"features must be [T, d], got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FeatureFormatError(f"{path}: truncated header")
        t, d = struct.unpack("<II", header)
        if t < 1 or d < 1:
            raise FeatureFormatError(f"{path}: bad dimensions {t}x{d}")
        payload = fh.read()
    if len(payload) != 4 * t * d:
        raise FeatureFormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {4 * t * d}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)


def load_corpus(manifest_path, vocab: Vocabulary) -> list[Utterance]:
    utts = []
    for desc in load_manifest(manifest_path):
        feats = read_features(desc.feature_path)
        utts.append(Utterance(desc.utt_id, feats, vocab.encode(desc.transcript) + [EOS_ID]))
    return utts


def load_text_corpus(path, vocab: Vocabulary) -> list[list[int]]:
    seqs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                seqs.append(vocab.encode(line) + [EOS_ID])
    return seqs


# -------------------------------------------------------------------- batching

def make_batches(items: list, batch_size: int, seed: int, window: int,
                 length_key) -> list[list]:
    """Deterministic length-bucketed batches: shuffle, sort within windows
    of `window` items, cut into batches, shuffle batch order."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if window < 1:
        raise ConfigError(f"sort window must be >= 1, got {window}")
    rng = Rng(seed)
    order = rng.permutation(len(items))
    bucketed: list[int] = []
    for lo in range(0, len(order), window):
        chunk = order[lo:lo + window]
        chunk.sort(key=lambda i: (length_key(items[i]), i))
        bucketed.extend(chunk)
    batches = [[items[i] for i in bucketed[lo:lo + batch_size]]
               for lo in range(0, len(bucketed), batch_size)]
    rng.shuffle(batches)
    return batches


class CyclingBatches:
    """Endless batch stream that reshuffles each time the corpus wraps."""

    def __init__(self, items: list, batch_size: int, seed: int, window: int,
                 length_key):
        if not items:
            raise ConfigError("empty loader")
        self.items = items
        self.batch_size = batch_size
        self.seed = seed
        self.window = window
        self.length_key = length_key
        self.passes = 0
        self._queue: list[list] = []
        self.batches_per_pass = (len(items) + batch_size - 1) // batch_size

    def next(self) -> list:
        if not self._queue:
            pass_seed = Rng(self.seed).spawn(self.passes).next_u64()
            self._queue = make_batches(self.items, self.batch_size, pass_seed,
                                       self.window, self.length_key)
            self.passes += 1
        return self._queue.pop(0)


# ------------------------------------------------------------ synthetic corpus

@dataclass
class SyntheticTaskSpec:
    """Desk-scale word-sequence task: sentences from a seeded n-gram word
    source; features are per-character template vectors plus noise. A
    held-out subset of words appears only in the external text and the
    test split, which is what makes external text informative."""

    alphabet_size: int = 10
    feature_dim: int = 8
    frames_per_token: int = 4
    noise: float = 0.3
    ngram_order: int = 2
    lexicon_size: int = 24
    word_len_min: int = 2
    word_len_max: int = 4
    sent_len_min: int = 2
    sent_len_max: int = 4
    holdout_fraction: float = 0.25
    branching: int = 4
    template_scale: float = 0.5

    def validate(self) -> None:
        checks = [
            ("alphabet_size", self.alphabet_size >= 2),
            ("feature_dim", self.feature_dim >= 1),
            ("frames_per_token", self.frames_per_token >= 2),
            ("noise", self.noise >= 0.0),
            ("ngram_order", self.ngram_order in (1, 2)),
            ("lexicon_size", self.lexicon_size >= 4),
            ("word_len_min", 1 <= self.word_len_min <= self.word_len_max),
            ("sent_len_min", 1 <= self.sent_len_min <= self.sent_len_max),
            ("holdout_fraction", 0.0 < self.holdout_fraction < 1.0),
            ("branching", self.branching >= 1),
            ("template_scale", self.template_scale > 0.0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid synthetic task field: {name}")
        if self.alphabet_size > 26:
            raise ConfigError("invalid synthetic task field: alphabet_size")


@dataclass
class SplitSizes:
    p: int = 1500
    t: int = 15000
    val: int = 300
    test: int = 300

    def validate(self) -> None:
        for name in ("p", "t", "val", "test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"invalid split size: {name}")


class _WordSource:
    """Seeded bigram word generator with a maskable lexicon subset."""

    def __init__(self, spec: SyntheticTaskSpec, rng: Rng):
        self.spec = spec
        n = spec.lexicon_size
        words: list[str] = []
        seen = set()
        alphabet = string.ascii_lowercase[:spec.alphabet_size]
        while len(words) < n:
            length = spec.word_len_min + rng.randint(
                spec.word_len_max - spec.word_len_min + 1)
            w = "".join(alphabet[rng.randint(len(alphabet))] for _ in range(length))
            if w not in seen:
                seen.add(w)
                words.append(w)
        self.words = words
        k = max(1, round(n * spec.holdout_fraction))
        self.heldout = set(rng.permutation(n)[:k])
        self.start_w = np.array(rng.uniform(0.5, 1.5, n))
        self.trans = np.zeros((n, n))
        for i in range(n):
            succ = rng.permutation(n)[:spec.branching]
            for j in succ:
                self.trans[i, j] = rng.uniform(0.5, 1.5)

    def _draw(self, weights: np.ndarray, rng: Rng, allow_heldout: bool) -> int:
        w = weights.copy()
        if not allow_heldout:
            for i in self.heldout:
                w[i] = 0.0
        if w.sum() <= 0.0:
            w = np.ones(len(self.words))
            if not allow_heldout:
                for i in self.heldout:
                    w[i] = 0.0
        return rng.choice_weighted(w)

    def sentence(self, rng: Rng, allow_heldout: bool) -> str:
        spec = self.spec
        n_words = spec.sent_len_min + rng.randint(
            spec.sent_len_max - spec.sent_len_min + 1)
        idx = self._draw(self.start_w, rng, allow_heldout)
        picked = [idx]
        for _ in range(n_words - 1):
            weights = (self.trans[picked[-1]] if spec.ngram_order == 2
                       else self.start_w)
            idx = self._draw(weights, rng, allow_heldout)
            picked.append(idx)
        return " ".join(self.words[i] for i in picked)

    def force_word(self, sentence: str, word: str, rng: Rng) -> str:
        parts = sentence.split(" ")
        parts[rng.randint(len(parts))] = word
        return " ".join(parts)


def _ensure_heldout_coverage(sentences: list[str], source: _WordSource,
                             rng: Rng) -> None:
    """Replace a random word so every held-out word occurs at least once."""
    for i in sorted(source.heldout):
        word = source.words[i]
        if not any(word in s.split(" ") for s in sentences):
            pos = rng.randint(len(sentences))
            sentences[pos] = source.force_word(sentences[pos], word, rng)


def gen_synthetic(spec: SyntheticTaskSpec, sizes: SplitSizes, seed: int,
                  out_dir) -> dict:
    """Emit a complete corpus; a pure function of (spec, sizes, seed)."""
    spec.validate()
    sizes.validate()
    rng = Rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "feats")
    os.makedirs(feat_dir, exist_ok=True)

    source = _WordSource(spec, rng.spawn(1))
    alphabet = string.ascii_lowercase[:spec.alphabet_size]
    vocab = Vocabulary.from_characters(list(alphabet) + [" "])
    vocab.save(os.path.join(out_dir, "vocab.txt"))

    templates = rng.spawn(2).uniform(-spec.template_scale, spec.template_scale,
                                     (len(vocab), spec.feature_dim))

    sent_rng = rng.spawn(3)
    p_sents = [source.sentence(sent_rng, False) for _ in range(sizes.p)]
    t_sents = [source.sentence(sent_rng, True) for _ in range(sizes.t)]
    val_sents = [source.sentence(sent_rng, False) for _ in range(sizes.val)]
    test_sents = [source.sentence(sent_rng, True) for _ in range(sizes.test)]
    _ensure_heldout_coverage(t_sents, source, sent_rng)
    _ensure_heldout_coverage(test_sents, source, sent_rng)

    noise_rng = rng.spawn(4)

    def emit_split(name: str, prefix: str, sentences: list[str]) -> None:
        lines = []
        for i, sent in enumerate(sentences):
            utt_id = f"{prefix}{i:05d}"
            ids = vocab.encode(sent)
            base = np.repeat(templates[ids], spec.frames_per_token, axis=0)
            feats = base + noise_rng.normal(0.0, spec.noise, base.shape)
            rel = os.path.join("feats", utt_id + ".fea")
            write_features(os.path.join(out_dir, rel), feats.astype(np.float32))
            lines.append(f"{utt_id}\t{rel}\t{sent}")
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    emit_split("train.tsv", "trn", p_sents)
    emit_split("val.tsv", "val", val_sents)
    emit_split("test.tsv", "tst", test_sents)
    with open(os.path.join(out_dir, "text.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(t_sents) + "\n")

    heldout_words = sorted(source.words[i] for i in source.heldout)

    def count_heldout(sentences: list[str]) -> int:
        held = set(heldout_words)
        return sum(1 for s in sentences for w in s.split(" ") if w in held)

    report = {
        "P": (len(p_sents), sum(len(s) for s in p_sents), count_heldout(p_sents)),
        "T": (len(t_sents), sum(len(s) for s in t_sents), count_heldout(t_sents)),
        "val": (len(val_sents), sum(len(s) for s in val_sents), count_heldout(val_sents)),
        "test": (len(test_sents), sum(len(s) for s in test_sents), count_heldout(test_sents)),
    }
    with open(os.path.join(out_dir, "split_report.txt"), "w", encoding="utf-8") as fh:
        for split, (utts, chars, held) in report.items():
            fh.write(f"split={split} utterances={utts} characters={chars} "
                     f"heldout_occurrences={held}\n")
        fh.write(f"heldout_words={','.join(heldout_words)}\n")

    if report["P"][2] or report["val"][2]:
        raise ContractError("held-out words leaked into labelled splits")
    if not report["T"][2] or not report["test"][2]:
        raise ContractError("held-out words missing from text/test splits")
    return {"heldout_words": heldout_words, "report": report}
