"""Data model: feature matrices, manifests, BPE segmentation and vocabulary."""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

END_OF_WORD = "</w>"
FEATURE_MAGIC = b"FBNK"
DEFAULT_N_FEATURES = 40
DEFAULT_N_MERGES = 8000
DEFAULT_MAX_FRAMES = 2000


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid corpus inputs."""


class Domain(enum.Enum):
    """Data type of a sample; each value owns a learned tag embedding."""

    GROUND_TRUTH = "ground_truth"
    SYNTH_CASED = "synth_cased"
    SYNTH_LOWER = "synth_lower"

    @property
    def index(self) -> int:
        return _DOMAIN_ORDER.index(self)

    @classmethod
    def parse(cls, tag: str) -> "Domain":
        try:
            return cls(tag)
        except ValueError:
            raise CorpusError(f"unknown domain tag {tag!r}") from None


_DOMAIN_ORDER = (Domain.GROUND_TRUTH, Domain.SYNTH_CASED, Domain.SYNTH_LOWER)
DOMAINS = _DOMAIN_ORDER


# ---------------------------------------------------------------------------
# Feature matrices
# ---------------------------------------------------------------------------


def check_features(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise CorpusError(f"feature matrix must be T x F with T, F >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise CorpusError("feature matrix contains non-finite values")
    return x


def write_features(path: str | Path, x: np.ndarray) -> None:
    """Write a T x F matrix as ``FBNK``, u32 T, u32 F, then little-endian f32 rows."""
    x = check_features(x)
    t, f = x.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, f))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_feature_shape(path: str | Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not a feature file")
    return struct.unpack("<II", head[4:])


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not a feature file")
    t, f = struct.unpack("<II", data[4:12])
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != t * f:
        raise CorpusError(f"{path}: expected {t * f} values, found {body.size}")
    return body.reshape(t, f).astype(np.float32)


@lru_cache(maxsize=65536)
def _cached_features(path: str) -> np.ndarray:
    x = read_features(path)
    x.setflags(write=False)
    return x


# ---------------------------------------------------------------------------
# Samples and manifests
# ---------------------------------------------------------------------------

Alignment = tuple[int, int, int]


@dataclass(frozen=True)
class Sample:
    """One training example.

    ``transcript`` and ``target`` are whitespace-tokenized text; ids are produced
    on demand by a :class:`Tokenizer`. Alignments are ``(word_index, start_frame,
    end_frame)`` with ``end_frame`` exclusive.
    """

    id: str
    feature_path: str
    transcript: str = ""
    target: str = ""
    domain: Domain = Domain.GROUND_TRUTH
    alignments: tuple[Alignment, ...] | None = None

    def validate(self, n_frames: int | None = None) -> None:
        if not self.id or "\t" in self.id:
            raise CorpusError(f"invalid sample id {self.id!r}")
        if self.alignments is None:
            return
        prev_start = 0
        for word, start, end in self.alignments:
            if start < prev_start or end < start:
                raise CorpusError(f"{self.id}: alignment frames must be nondecreasing")
            if start < 0 or (n_frames is not None and end > n_frames):
                raise CorpusError(f"{self.id}: alignment ({word}, {start}, {end}) outside [0, {n_frames}]")
            prev_start = start


@dataclass
class Manifest:
    samples: list[Sample] = field(default_factory=list)
    n_features: int = DEFAULT_N_FEATURES
    vocab_hash: str = ""
    bpe_hash: str = ""
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise CorpusError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.feature_path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def features(self, sample: Sample) -> np.ndarray:
        return _cached_features(str(self.resolve(sample)))

    def n_frames(self, sample: Sample) -> int:
        return read_feature_shape(self.resolve(sample))[0]

    def by_domain(self) -> dict[Domain, list[Sample]]:
        out: dict[Domain, list[Sample]] = {}
        for s in self.samples:
            out.setdefault(s.domain, []).append(s)
        return out

    def subset(self, samples: Iterable[Sample]) -> "Manifest":
        return replace(self, samples=list(samples))


def filter_long(manifest: Manifest, max_frames: int = DEFAULT_MAX_FRAMES) -> tuple[Manifest, int]:
    """Drop samples with more than ``max_frames`` frames; returns (manifest, n_removed)."""
    kept = [s for s in manifest.samples if manifest.n_frames(s) <= max_frames]
    removed = len(manifest.samples) - len(kept)
    if removed:
        logger.info("filter_long: removed %d samples longer than %d frames", removed, max_frames)
    return manifest.subset(kept), removed


def _format_alignments(al: Sequence[Alignment] | None) -> str:
    if al is None:
        return ""
    return ",".join(f"{w}:{s}:{e}" for w, s, e in al)


def _parse_alignments(text: str, lineno: int) -> tuple[Alignment, ...]:
    out = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 3:
            raise CorpusError(f"line {lineno}: malformed alignment {item!r}")
        try:
            out.append(tuple(int(p) for p in parts))
        except ValueError:
            raise CorpusError(f"line {lineno}: malformed alignment {item!r}") from None
    return tuple(out)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [f"# n_features={manifest.n_features} vocab={manifest.vocab_hash} bpe={manifest.bpe_hash}"]
    for s in manifest.samples:
        for name in ("transcript", "target", "feature_path"):
            if "\t" in getattr(s, name) or "\n" in getattr(s, name):
                raise CorpusError(f"{s.id}: {name} contains a tab or newline")
        fields = [s.id, s.feature_path, s.transcript, s.target, s.domain.value]
        if s.alignments is not None:
            fields.append(_format_alignments(s.alignments))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    meta = {"n_features": DEFAULT_N_FEATURES, "vocab": "", "bpe": ""}
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for kv in line[1:].split():
                if "=" in kv:
                    k, v = kv.split("=", 1)
                    meta[k] = v
            continue
        fields = line.split("\t")
        if len(fields) not in (5, 6):
            raise CorpusError(f"line {lineno}: expected 5 or 6 tab-separated fields, got {len(fields)}")
        try:
            domain = Domain.parse(fields[4])
        except CorpusError as e:
            raise CorpusError(f"line {lineno}: {e}") from None
        alignments = _parse_alignments(fields[5], lineno) if len(fields) == 6 and fields[5] else None
        sample = Sample(fields[0], fields[1], fields[2], fields[3], domain, alignments)
        try:
            sample.validate()
        except CorpusError as e:
            raise CorpusError(f"line {lineno}: {e}") from None
        samples.append(sample)
    try:
        n_features = int(meta["n_features"])
    except ValueError:
        raise CorpusError(f"{path}: bad n_features header") from None
    return Manifest(samples, n_features, meta["vocab"], meta["bpe"], base_dir=path.parent)


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.merges)) != len(self.merges):
            raise CorpusError("duplicate merge rule")

    @property
    def n_merges(self) -> int:
        return len(self.merges)

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        return _ranks(self.merges)

    def digest(self) -> str:
        h = hashlib.sha1("\n".join(f"{a} {b}" for a, b in self.merges).encode())
        return h.hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        merges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise CorpusError(f"line {lineno}: merge rule must have two symbols")
            merges.append((parts[0], parts[1]))
        return cls(tuple(merges))


@lru_cache(maxsize=32)
def _ranks(merges: tuple[tuple[str, str], ...]) -> dict[tuple[str, str], int]:
    return {pair: i for i, pair in enumerate(merges)}


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (END_OF_WORD,)


def _merge_pair(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Sequence[str], n_merges: int = DEFAULT_N_MERGES, min_frequency: int = 2) -> BpeModel:
    """Learn merge rules over whitespace-separated words of ``corpus``.

    Text from both languages should simply be concatenated into ``corpus``.
    Words are split into characters followed by a separate end-of-word symbol.
    Learning stops after ``n_merges`` rules or when the most frequent pair occurs
    fewer than ``min_frequency`` times. Ties go to the lexicographically smallest pair.
    """
    if n_merges < 0:
        raise CorpusError("n_merges must be >= 0")
    words = Counter(w for line in corpus for w in line.split())
    if not words:
        raise CorpusError("empty corpus")
    vocab = {_word_symbols(w): c for w, c in words.items()}
    merges: list[tuple[str, str]] = []
    while len(merges) < n_merges:
        pairs: Counter = Counter()
        for symbols, count in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < min_frequency:
            break
        pair = best[0]
        merges.append(pair)
        vocab = {_merge_pair(s, pair): c for s, c in vocab.items()}
    return BpeModel(tuple(merges))


def apply_bpe_symbols(symbols: Sequence[str], model: BpeModel) -> tuple[str, ...]:
    """Greedily apply the lowest-rank applicable merge until none applies."""
    ranks = model.ranks
    symbols = tuple(symbols)
    while len(symbols) > 1:
        candidates = [ranks[p] for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        symbols = _merge_pair(symbols, model.merges[min(candidates)])
    return symbols


def _attach_marker(symbols: tuple[str, ...]) -> list[str]:
    if len(symbols) >= 2 and symbols[-1] == END_OF_WORD:
        return list(symbols[:-2]) + [symbols[-2] + END_OF_WORD]
    return list(symbols)


def _detach_marker(token: str) -> tuple[str, ...]:
    if token.endswith(END_OF_WORD) and token != END_OF_WORD:
        return (token[: -len(END_OF_WORD)], END_OF_WORD)
    return (token,)


@lru_cache(maxsize=1 << 16)
def _segment_word(word: str, merges: tuple[tuple[str, str], ...]) -> tuple[str, ...]:
    return tuple(_attach_marker(apply_bpe_symbols(_word_symbols(word), BpeModel(merges))))


def apply_bpe(sentence: str | Sequence[str], model: BpeModel) -> list[str]:
    """Segment a sentence into subwords; the last subword of each word ends in ``</w>``."""
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    out: list[str] = []
    for w in words:
        out.extend(_segment_word(w, model.merges))
    return out


def reapply_bpe(tokens: Sequence[str], model: BpeModel) -> list[str]:
    """Apply merges again to already segmented output, treating each subword as a symbol."""
    out: list[str] = []
    word: list[str] = []
    for tok in tokens:
        word.extend(_detach_marker(tok))
        if word[-1] == END_OF_WORD:
            out.extend(_attach_marker(apply_bpe_symbols(word, model)))
            word = []
    out.extend(_attach_marker(apply_bpe_symbols(word, model)) if word else [])
    return out


def join_bpe(tokens: Sequence[str]) -> str:
    return "".join(tokens).replace(END_OF_WORD, " ").strip()


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

PAD, BOS, EOS, UNK, BLANK = "<pad>", "<s>", "</s>", "<unk>", "<blank>"
TAG_TOKENS = tuple(f"<{d.value}>" for d in DOMAINS)
RESERVED = (PAD, BOS, EOS, UNK, BLANK) + TAG_TOKENS


class Vocabulary:
    """Token/id bijection with reserved ids 0..7 (pad, bos, eos, unk, blank, 3 domain tags)."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            self.add(t)

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3
    blank_id = 4

    def add(self, token: str) -> int:
        if token in self._stoi:
            return self._stoi[token]
        if not token or any(c.isspace() for c in token):
            raise CorpusError(f"invalid token {token!r}")
        self._stoi[token] = len(self._itos)
        self._itos.append(token)
        return self._stoi[token]

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    @property
    def n_reserved(self) -> int:
        return len(RESERVED)

    def tag_id(self, domain: Domain) -> int:
        return self._stoi[TAG_TOKENS[domain.index]]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha1("\n".join(self._itos).encode()).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text(encoding="utf-8").splitlines() if line)

    @classmethod
    def build(cls, corpus: Iterable[str], bpe: BpeModel) -> "Vocabulary":
        counts: Counter = Counter()
        for line in corpus:
            counts.update(apply_bpe(line, bpe))
        return cls(t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


class Tokenizer:
    """BPE + vocabulary: text <-> id sequences (no bos/eos added)."""

    def __init__(self, bpe: BpeModel, vocab: Vocabulary):
        self.bpe = bpe
        self.vocab = vocab
        self._cache: dict[str, tuple[int, ...]] = {}

    def encode(self, text: str) -> list[int]:
        ids = self._cache.get(text)
        if ids is None:
            ids = tuple(self.vocab.encode(apply_bpe(text, self.bpe)))
            self._cache[text] = ids
        return list(ids)

    def decode(self, ids: Sequence[int]) -> str:
        keep = [i for i in ids if i >= self.vocab.n_reserved or i == self.vocab.unk_id]
        return join_bpe(self.vocab.decode(keep))
