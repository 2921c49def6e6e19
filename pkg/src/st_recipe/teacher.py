"""Precomputed top-K teacher distributions for word-level distillation."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import Manifest, Tokenizer
from .model import _Seq2Seq

logger = logging.getLogger(__name__)

STORE_MAGIC = b"KDST"
STORE_VERSION = 1


class KdStoreError(ValueError):
    pass


@dataclass
class TeacherRows:
    """Top-K rows for one target sequence: ``ids`` and ``probs`` are n_rows x K."""

    ids: np.ndarray
    probs: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TeacherRows)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.probs, other.probs)
        )


def _softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def extract_topk_rows(logits: np.ndarray, k: int) -> TeacherRows:
    """Softmax each row, keep the k most probable tokens (lower id wins ties), renormalize."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds vocabulary size {logits.shape[1]}")
    p = _softmax(logits)
    ids = np.argsort(-p, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(p, ids, axis=1)
    return TeacherRows(ids.astype(np.int64), top / top.sum(axis=1, keepdims=True))


def extract_topk(logits_row: Sequence[float], k: int) -> tuple[np.ndarray, np.ndarray]:
    rows = extract_topk_rows(np.asarray(logits_row)[None, :], k)
    return rows.ids[0], rows.probs[0]


class KdStore:
    """Sample id -> :class:`TeacherRows`, one row per target token (eos included)."""

    def __init__(self, k: int, rows: dict[str, TeacherRows] | None = None):
        self.k = k
        self.rows: dict[str, TeacherRows] = dict(rows or {})

    def __getitem__(self, sample_id: str) -> TeacherRows:
        try:
            return self.rows[sample_id]
        except KeyError:
            raise KdStoreError(f"no teacher rows for sample {sample_id!r}") from None

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.rows

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KdStore) and self.k == other.k and self.rows == other.rows

    def check_covers(self, sample_ids: Iterable[str]) -> None:
        for sid in sample_ids:
            if sid not in self.rows:
                raise KdStoreError(f"no teacher rows for sample {sid!r}")


@torch.no_grad()
def distill_corpus(
    teacher: _Seq2Seq, manifest: Manifest, tokenizer: Tokenizer, k: int = 8, batch_size: int = 32
) -> KdStore:
    """Force-decode the teacher over (transcript -> target) for every sample."""
    teacher.eval()
    vocab = tokenizer.vocab
    store = KdStore(k)
    todo = []
    skipped = 0
    for s in manifest.samples:
        if not s.transcript.strip() or not s.target.strip():
            skipped += 1
            continue
        todo.append(s)
    if skipped:
        logger.warning("distill_corpus: skipped %d samples without transcript or target", skipped)
    for i in range(0, len(todo), batch_size):
        chunk = todo[i : i + batch_size]
        srcs = [tokenizer.encode(s.transcript) + [vocab.eos_id] for s in chunk]
        tgts = [tokenizer.encode(s.target) + [vocab.eos_id] for s in chunk]
        src = _pad(srcs, vocab.pad_id)
        prev = _pad([[vocab.bos_id] + t[:-1] for t in tgts], vocab.pad_id)
        enc = teacher.encode(src)
        logits = teacher.decode(prev, enc).to(torch.float64).numpy()
        for b, (s, t) in enumerate(zip(chunk, tgts)):
            store.rows[s.id] = extract_topk_rows(logits[b, : len(t)], k)
    return store


def _pad(seqs: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def save_store(store: KdStore, path: str | Path) -> Path:
    """Write the binary store to ``path`` and a text index to ``path + '.idx'``.

    Binary: ``KDST``, u32 version, u32 K, then per sample u32 n_rows followed
    by n_rows * K (u32 id, f32 prob) pairs. Index lines: ``id<TAB>offset<TAB>n_rows``.
    """
    path = Path(path)
    index_lines = []
    pair = np.dtype([("id", "<u4"), ("p", "<f4")])
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC + struct.pack("<II", STORE_VERSION, store.k))
        for sid, rows in store.rows.items():
            index_lines.append(f"{sid}\t{fh.tell()}\t{len(rows)}")
            fh.write(struct.pack("<I", len(rows)))
            rec = np.empty(rows.ids.shape, dtype=pair)
            rec["id"] = rows.ids
            rec["p"] = rows.probs
            fh.write(rec.tobytes())
    idx = path.with_name(path.name + ".idx")
    idx.write_text("".join(line + "\n" for line in index_lines), encoding="utf-8")
    return idx


def load_store(path: str | Path, manifest: Manifest | None = None) -> KdStore:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != STORE_MAGIC:
        raise KdStoreError(f"{path}: not a KD store")
    version, k = struct.unpack_from("<II", data, 4)
    if version != STORE_VERSION:
        raise KdStoreError(f"{path}: store version {version}, expected {STORE_VERSION}")
    pair = np.dtype([("id", "<u4"), ("p", "<f4")])
    store = KdStore(k)
    idx = path.with_name(path.name + ".idx")
    for lineno, line in enumerate(idx.read_text(encoding="utf-8").splitlines(), 1):
        try:
            sid, offset, n_rows = line.split("\t")
            offset, n_rows = int(offset), int(n_rows)
        except ValueError:
            raise KdStoreError(f"{idx}: malformed index line {lineno}") from None
        (stored,) = struct.unpack_from("<I", data, offset)
        if stored != n_rows:
            raise KdStoreError(f"{idx}: row count mismatch for {sid!r}")
        rec = np.frombuffer(data, dtype=pair, count=n_rows * k, offset=offset + 4).reshape(n_rows, k)
        probs = rec["p"].astype(np.float64)
        # f32 storage error can exceed the 1e-6 row-sum tolerance for large K
        store.rows[sid] = TeacherRows(rec["id"].astype(np.int64), probs / probs.sum(axis=1, keepdims=True))
    if manifest is not None:
        store.check_covers(s.id for s in manifest.samples)
    return store
