"""In-process workflow steps: teacher training, ASR pretraining, distillation,
ST training under a scheme, fine-tuning, synthetic data and evaluation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import SubsequenceError, subsequence_sample
from .corpus import Domain, Manifest, Sample, Tokenizer, Vocabulary, learn_bpe, write_features
from .decode import DecodeConfig, generate, greedy_batch
from .model import Checkpoint, ModelConfig, SpeechTransformer, _Seq2Seq, build_model, init_from_asr
from .teacher import KdStore, distill_corpus
from .train import (
    TASK_ASR,
    TASK_MT,
    TASK_ST,
    BatchBuilder,
    PhaseConfig,
    PhaseResult,
    TrainHooks,
    TrainScheme,
    scheme_phases,
    train_phase,
)

logger = logging.getLogger(__name__)

_PUNCT_RE = re.compile(r"[^\w\s]", re.UNICODE)


def lowercase_no_punct(text: str) -> str:
    return " ".join(_PUNCT_RE.sub(" ", text.lower()).split())


def build_tokenizer(texts: Sequence[str], n_merges: int) -> Tokenizer:
    """Joint BPE over both languages, then a vocabulary over the segmented text."""
    bpe = learn_bpe(list(texts), n_merges)
    return Tokenizer(bpe, Vocabulary.build(texts, bpe))


def manifest_texts(*manifests: Manifest) -> list[str]:
    out = []
    for m in manifests:
        for s in m.samples:
            out.extend(t for t in (s.transcript, s.target) if t)
    return out


@dataclass
class StageResult:
    model: _Seq2Seq
    phases: list[PhaseResult]

    @property
    def last(self) -> PhaseResult:
        return self.phases[-1]


def load_best(model: _Seq2Seq, result: PhaseResult) -> _Seq2Seq:
    best = result.best
    if best is not None and best.checkpoint is not None:
        model.load_state_dict(best.checkpoint.params)
    return model


def train_mt(
    mt: Manifest,
    tokenizer: Tokenizer,
    cfg: ModelConfig,
    phase: PhaseConfig,
    valid: Manifest | None = None,
    seed: int = 0,
    ckpt_dir: str | Path | None = None,
) -> StageResult:
    model = build_model(replace(cfg, vocab_size=len(tokenizer.vocab)), seed)
    phase = replace(phase, task=TASK_MT, multi_domain=False, ctc_weight=0.0, augment=False)
    result = train_phase(model, phase, mt, tokenizer, valid, seed=seed, ckpt_dir=ckpt_dir)
    return StageResult(load_best(model, result), [result])


def train_asr(
    train: Manifest,
    tokenizer: Tokenizer,
    cfg: ModelConfig,
    phase: PhaseConfig,
    valid: Manifest | None = None,
    seed: int = 0,
    ckpt_dir: str | Path | None = None,
) -> StageResult:
    """Speech -> transcript with CTC on the last encoder layer."""
    cfg = replace(cfg, vocab_size=len(tokenizer.vocab), ctc_layer=cfg.n_enc_layers)
    model = build_model(cfg, seed)
    phase = replace(phase, task=TASK_ASR, multi_domain=False)
    result = train_phase(model, phase, train, tokenizer, valid, seed=seed, ckpt_dir=ckpt_dir)
    return StageResult(load_best(model, result), [result])


def train_st(
    train: Manifest,
    tokenizer: Tokenizer,
    cfg: ModelConfig,
    scheme: TrainScheme,
    st_phase: PhaseConfig,
    kd_store: KdStore,
    asr_model: SpeechTransformer | None = None,
    valid: Manifest | None = None,
    seed: int = 0,
    hooks: TrainHooks | None = None,
    ckpt_dir: str | Path | None = None,
) -> StageResult:
    """Word-KD training under ``scheme``, starting from the ASR encoder when given."""
    cfg = replace(cfg, vocab_size=len(tokenizer.vocab))
    model = build_model(cfg, seed)
    if asr_model is not None:
        init_from_asr(model, asr_model, seed)
    results = []
    for i, phase in enumerate(scheme_phases(scheme, replace(st_phase, task=TASK_ST))):
        sub = None if ckpt_dir is None else Path(ckpt_dir) / phase.name
        r = train_phase(model, phase, train, tokenizer, valid, kd_store, hooks, seed + i, sub)
        results.append(r)
        load_best(model, r)
    return StageResult(model, results)


def finetune(
    model: _Seq2Seq,
    train: Manifest,
    tokenizer: Tokenizer,
    phase: PhaseConfig,
    valid: Manifest | None = None,
    seed: int = 0,
    hooks: TrainHooks | None = None,
    ckpt_dir: str | Path | None = None,
) -> StageResult:
    """Label-smoothed CE on all data, no augmentation and no CTC."""
    phase = replace(phase, task=TASK_ST, loss="label_smoothed_ce", augment=False, ctc_weight=0.0)
    r = train_phase(model, phase, train, tokenizer, valid, None, hooks, seed, ckpt_dir)
    return StageResult(load_best(model, r), [r])


def distill(teacher: _Seq2Seq, manifests: Sequence[Manifest], tokenizer: Tokenizer, k: int) -> KdStore:
    store = KdStore(k)
    for m in manifests:
        store.rows.update(distill_corpus(teacher, m, tokenizer, k).rows)
    return store


def synth_data(
    mt_model: _Seq2Seq,
    manifest: Manifest,
    tokenizer: Tokenizer,
    casing: str,
    decode_cfg: DecodeConfig = DecodeConfig(beam_size=5, max_len=200),
    only: Sequence[Domain] | None = None,
) -> tuple[Manifest, int]:
    """Fill targets by translating transcripts with the MT model.

    ``casing`` is ``"cased"`` (transcript used as is, domain SYNTH_CASED) or
    ``"lower"`` (lowercased, punctuation removed, domain SYNTH_LOWER). When
    ``only`` is given, samples from other domains pass through untouched.
    Returns the new manifest and the number of samples skipped for lack of a
    transcript or because the translation came out empty.
    """
    if casing not in ("cased", "lower"):
        raise ValueError("casing must be 'cased' or 'lower'")
    domain = Domain.SYNTH_CASED if casing == "cased" else Domain.SYNTH_LOWER
    vocab = tokenizer.vocab
    out: list[Sample] = []
    skipped = empty = 0
    for s in manifest.samples:
        if only is not None and s.domain not in only:
            out.append(s)
            continue
        source = s.transcript if casing == "cased" else lowercase_no_punct(s.transcript)
        if not source.strip():
            skipped += 1
            continue
        ids = tokenizer.encode(source) + [vocab.eos_id]
        target = tokenizer.decode(generate([mt_model], ids, None, decode_cfg, vocab))
        if not target.strip():
            empty += 1
            continue
        out.append(replace(s, transcript=source, target=target, domain=domain))
    if skipped:
        logger.warning("synth_data: skipped %d samples without transcript", skipped)
    if empty:
        logger.warning("synth_data: dropped %d samples whose translation came out empty", empty)
    skipped += empty
    return manifest.subset(out), skipped


def subsequence_corpus(
    manifest: Manifest, out_dir: str | Path, seed: int = 0, domain: Domain = Domain.SYNTH_CASED
) -> tuple[Manifest, int]:
    """Append three sub-sequence samples per eligible sample.

    Cropped features are written under ``out_dir``; derived samples carry an
    empty target (fill it with :func:`synth_data`) and ``domain``. Samples
    that are too short or lack alignments are kept but produce nothing.
    Returns the extended manifest and the number of parents skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    derived: list[Sample] = []
    skipped = 0
    for s in manifest.samples:
        try:
            parts = subsequence_sample(s, manifest.features(s), rng)
        except SubsequenceError:
            skipped += 1
            continue
        for sub, crop in parts:
            path = (out_dir / f"{sub.id}.fbnk").resolve()
            write_features(path, crop)
            derived.append(replace(sub, feature_path=str(path), domain=domain))
    return manifest.subset(list(manifest.samples) + derived), skipped


@torch.no_grad()
def teacher_forced_accuracy(model: _Seq2Seq, manifest: Manifest, tokenizer: Tokenizer, task: str) -> float:
    """Fraction of target tokens (eos included) predicted by argmax under teacher forcing."""
    model.eval()
    dtype = next(model.parameters()).dtype
    builder = BatchBuilder(task, manifest, tokenizer, dtype)
    correct = total = 0
    samples = manifest.samples
    for i in range(0, len(samples), 64):
        batch = builder.build(samples[i : i + 64])
        tags = batch.tags if model.cfg.tag_mode != "none" else None
        logits, _ = model(batch.inputs, batch.input_lengths, batch.prev_tokens, tags)
        mask = batch.targets != tokenizer.vocab.pad_id
        correct += int(((logits.argmax(-1) == batch.targets) & mask).sum())
        total += int(mask.sum())
    return correct / max(total, 1)


@torch.no_grad()
def greedy_outputs(
    model: _Seq2Seq,
    manifest: Manifest,
    tokenizer: Tokenizer,
    task: str,
    max_len: int = 100,
    temperature: float = 1.0,
    tag: Domain | None = Domain.GROUND_TRUTH,
) -> list[str]:
    dtype = next(model.parameters()).dtype
    builder = BatchBuilder(task, manifest, tokenizer, dtype)
    out = []
    samples = manifest.samples
    for i in range(0, len(samples), 64):
        batch = builder.build(samples[i : i + 64])
        tags = None if tag is None else torch.full((len(batch.samples),), tag.index)
        for ids in greedy_batch(model, batch.inputs, batch.input_lengths, tags, max_len, temperature, tokenizer.vocab):
            out.append(tokenizer.decode(ids))
    return out


def sequence_accuracy(hyps: Sequence[str], refs: Sequence[str]) -> float:
    return float(np.mean([h.split() == r.split() for h, r in zip(hyps, refs)])) if refs else 0.0


def translate(
    models: Sequence[_Seq2Seq],
    manifest: Manifest,
    tokenizer: Tokenizer,
    cfg: DecodeConfig,
    tag: Domain | None = Domain.GROUND_TRUTH,
) -> list[str]:
    """Beam search over every sample, input order preserved."""
    out = []
    kind = models[0].cfg.kind
    for s in manifest.samples:
        if kind == "speech":
            source = manifest.features(s)
        else:
            source = tokenizer.encode(s.transcript) + [tokenizer.vocab.eos_id]
        out.append(tokenizer.decode(generate(models, source, tag, cfg, tokenizer.vocab)))
    return out


def checkpoint_temperature(ckpt: Checkpoint, default: float = 1.0) -> float:
    return float(ckpt.metadata.get("temperature", default))
