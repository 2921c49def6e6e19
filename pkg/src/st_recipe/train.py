"""Optimizer, learning-rate schedules, multi-domain batching and the training loop."""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import zip_longest
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import SpecAugmentConfig, TimeStretchConfig, spec_augment, time_stretch
from .corpus import DOMAINS, Domain, Manifest, Sample, Tokenizer
from .losses import (
    MultitaskWeights,
    ctc_batch_loss,
    ctc_min_frames,
    label_smoothed_ce,
    torch_loss,
    word_kd_loss,
)
from .model import Checkpoint, _Seq2Seq, save_checkpoint
from .teacher import KdStore

logger = logging.getLogger(__name__)

WORD_KD, LABEL_SMOOTHED_CE = "word_kd", "label_smoothed_ce"
TASK_MT, TASK_ASR, TASK_ST = "mt", "asr", "st"
KD_TEMPERATURE, CE_TEMPERATURE = 1.3, 1.0


class TrainError(RuntimeError):
    pass


class NonFiniteError(TrainError):
    pass


# ---------------------------------------------------------------------------
# Learning rate and optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "warmup_inv_sqrt"  # or "fixed"
    lr_start: float = 3e-4
    lr_peak: float = 5e-4
    warmup_steps: int = 5000
    fixed_lr: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("warmup_inv_sqrt", "fixed"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if min(self.lr_start, self.lr_peak, self.fixed_lr) <= 0 or self.warmup_steps < 1:
            raise ValueError("learning rates must be > 0 and warmup_steps >= 1")

    def with_peak(self, lr_peak: float) -> "LrSchedule":
        """Scale the warmup start by the same factor as the peak."""
        return replace(self, lr_peak=lr_peak, lr_start=self.lr_start * lr_peak / self.lr_peak)


def lr_at_step(sched: LrSchedule, t: int) -> float:
    if sched.kind == "fixed":
        return sched.fixed_lr
    if t <= sched.warmup_steps:
        return sched.lr_start + (sched.lr_peak - sched.lr_start) * t / sched.warmup_steps
    return sched.lr_peak * math.sqrt(sched.warmup_steps / t)


@dataclass
class OptimState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], opt: OptimState, lr: float
) -> OptimState:
    """Bias-corrected Adam, updating ``params`` in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    opt.t += 1
    b1, b2 = opt.betas
    c1 = 1 - b1**opt.t
    c2 = 1 - b2**opt.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = torch.zeros_like(p)
            opt.v[name] = torch.zeros_like(p)
        v = opt.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + opt.eps))
    return opt


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    max_tokens: int = 12000
    max_samples: int = 8
    accumulation: int = 8

    def __post_init__(self):
        if min(self.max_tokens, self.max_samples, self.accumulation) < 1:
            raise ValueError("batch limits must be positive")


def make_batches(samples: Sequence[Sample], plan: BatchPlan, size_fn: Callable[[Sample], int]) -> list[list[Sample]]:
    """Pack samples in order, closing a batch before it exceeds either cap."""
    batches: list[list[Sample]] = []
    cur: list[Sample] = []
    cur_tokens = 0
    for s in samples:
        n = size_fn(s)
        if cur and (len(cur) >= plan.max_samples or cur_tokens + n > plan.max_tokens):
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(s)
        cur_tokens += n
    if cur:
        batches.append(cur)
    return batches


def oversample(samples: Sequence[Sample], target: int, rng: np.random.Generator) -> list[Sample]:
    """Every sample ``target // n`` times plus a random ``target % n`` once more, shuffled."""
    n = len(samples)
    reps, extra = divmod(target, n)
    idx = np.concatenate([np.tile(np.arange(n), reps), rng.choice(n, size=extra, replace=False)])
    return [samples[i] for i in rng.permutation(idx)]


Round = list[tuple[Domain, list[Sample]]]


def multi_domain_batches(
    by_domain: dict[Domain, Sequence[Sample]],
    plan: BatchPlan,
    rng: np.random.Generator,
    size_fn: Callable[[Sample], int],
    domains: Sequence[Domain] | None = None,
) -> list[Round]:
    """One epoch of rounds, each holding at most one batch per domain in fixed order.

    Every domain is resampled to the size of the largest one. When token caps
    give domains different batch counts, trailing rounds omit exhausted domains.
    """
    domains = [d for d in DOMAINS if d in by_domain] if domains is None else list(domains)
    for d in domains:
        if not by_domain.get(d):
            raise TrainError(f"domain {d.value} has no samples")
    largest = max(len(by_domain[d]) for d in domains)
    per_domain = [make_batches(oversample(by_domain[d], largest, rng), plan, size_fn) for d in domains]
    rounds = []
    for group in zip_longest(*per_domain):
        rounds.append([(d, b) for d, b in zip(domains, group) if b is not None])
    return rounds


# ---------------------------------------------------------------------------
# Phases and schemes
# ---------------------------------------------------------------------------


class TrainScheme(enum.Enum):
    SEQ_KD_FINETUNE = "seq_kd_finetune"
    MULTI_DOMAIN = "multi_domain"


@dataclass(frozen=True)
class PhaseConfig:
    name: str = "train"
    task: str = TASK_ST
    loss: str = LABEL_SMOOTHED_CE
    label_smoothing: float = 0.1
    ctc_weight: float = 0.0
    epochs: int = 10
    schedule: LrSchedule = LrSchedule()
    plan: BatchPlan = BatchPlan()
    augment: bool = False
    spec_augment: SpecAugmentConfig = SpecAugmentConfig()
    time_stretch: TimeStretchConfig | None = TimeStretchConfig()
    domains: tuple[Domain, ...] = DOMAINS
    multi_domain: bool = False

    def __post_init__(self):
        if self.task not in (TASK_MT, TASK_ASR, TASK_ST):
            raise ValueError(f"unknown task {self.task!r}")
        if self.loss not in (WORD_KD, LABEL_SMOOTHED_CE):
            raise ValueError(f"unknown loss {self.loss!r}")
        MultitaskWeights(self.ctc_weight)


def scheme_phases(scheme: TrainScheme, st: PhaseConfig, finetune: PhaseConfig | None = None) -> list[PhaseConfig]:
    """Expand a training scheme into ordered phases.

    ``st`` supplies the word-KD phase settings; ``finetune`` (label-smoothed CE
    on all data, no augmentation, no CTC) is appended when given.
    """
    synthetic = (Domain.SYNTH_CASED, Domain.SYNTH_LOWER)
    if scheme is TrainScheme.SEQ_KD_FINETUNE:
        phases = [
            replace(st, name="seq_kd", loss=WORD_KD, domains=synthetic, multi_domain=False),
            replace(st, name="gt_finetune", loss=WORD_KD, domains=(Domain.GROUND_TRUTH,), multi_domain=False),
        ]
    else:
        phases = [replace(st, name="multi_domain", loss=WORD_KD, multi_domain=True)]
    if finetune is not None:
        phases.append(replace(finetune, loss=LABEL_SMOOTHED_CE, augment=False, ctc_weight=0.0))
    return phases


class TrainHooks:
    """Instrumentation counters; subclass and override to observe training."""

    def __init__(self):
        self.batches = 0
        self.steps = 0
        self.samples_by_domain: Counter = Counter()
        self.augmentations: Counter = Counter()
        self.batches_since_step: list[Domain | None] = []
        self.step_groups: list[list[Domain | None]] = []
        self.batch_sizes: list[tuple[int, int]] = []
        self.seen_ids: Counter = Counter()

    def on_batch(self, domain: Domain | None, samples: Sequence[Sample], n_tokens: int) -> None:
        self.batches += 1
        self.batches_since_step.append(domain)
        self.batch_sizes.append((len(samples), n_tokens))
        for s in samples:
            self.samples_by_domain[s.domain] += 1
            self.seen_ids[s.id] += 1

    def on_augment(self, kind: str) -> None:
        self.augmentations[kind] += 1

    def on_step(self, step: int, lr: float, loss: float) -> None:
        self.steps += 1
        self.step_groups.append(self.batches_since_step)
        self.batches_since_step = []

    def on_epoch(self, epoch: int, train_loss: float, valid_ppl: float | None) -> None:
        pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_ppl: float | None
    checkpoint: Checkpoint | None = None
    path: Path | None = None


@dataclass
class PhaseResult:
    records: list[EpochRecord]
    best_epoch: int | None
    steps: int
    optim: OptimState

    @property
    def best(self) -> EpochRecord | None:
        for r in self.records:
            if r.epoch == self.best_epoch:
                return r
        return None


# ---------------------------------------------------------------------------
# Batch tensors
# ---------------------------------------------------------------------------


def _pad(seqs: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


@dataclass
class Batch:
    samples: list[Sample]
    inputs: torch.Tensor  # B x T x F features or B x S source tokens
    input_lengths: torch.Tensor
    prev_tokens: torch.Tensor
    targets: torch.Tensor
    tags: torch.Tensor
    ctc_targets: list[list[int]]

    @property
    def n_tokens(self) -> int:
        return int((self.targets != 0).sum())


class BatchBuilder:
    """Turns samples into padded tensors for one task, applying augmentation when enabled."""

    def __init__(self, task: str, manifest: Manifest, tokenizer: Tokenizer, dtype=torch.float32):
        self.task = task
        self.manifest = manifest
        self.tok = tokenizer
        self.vocab = tokenizer.vocab
        self.dtype = dtype

    def target_text(self, s: Sample) -> str:
        return s.transcript if self.task == TASK_ASR else s.target

    def target_ids(self, s: Sample) -> list[int]:
        return self.tok.encode(self.target_text(s)) + [self.vocab.eos_id]

    def size(self, s: Sample) -> int:
        if self.task == TASK_MT:
            return len(self.target_ids(s))
        return self.manifest.n_frames(s)

    def build(
        self,
        samples: Sequence[Sample],
        augment: tuple[SpecAugmentConfig, TimeStretchConfig | None] | None = None,
        rng: np.random.Generator | None = None,
        hooks: TrainHooks | None = None,
    ) -> Batch:
        v = self.vocab
        tgts = [self.target_ids(s) for s in samples]
        prev = _pad([[v.bos_id] + t[:-1] for t in tgts], v.pad_id)
        targets = _pad(tgts, v.pad_id)
        tags = torch.tensor([s.domain.index for s in samples])
        ctc_targets = [self.tok.encode(s.transcript) for s in samples]
        if self.task == TASK_MT:
            srcs = [self.tok.encode(s.transcript) + [v.eos_id] for s in samples]
            inputs = _pad(srcs, v.pad_id)
            lengths = torch.tensor([len(x) for x in srcs])
        else:
            mats = []
            for s in samples:
                x = self.manifest.features(s)
                if augment is not None:
                    sa_cfg, ts_cfg = augment
                    if ts_cfg is not None:
                        x, applied = time_stretch(x, ts_cfg, rng)
                        if applied and hooks:
                            hooks.on_augment("time_stretch")
                    x, applied = spec_augment(x, sa_cfg, rng)
                    if applied and hooks:
                        hooks.on_augment("spec_augment")
                mats.append(x)
            lengths = torch.tensor([m.shape[0] for m in mats])
            inputs = torch.zeros(len(mats), int(lengths.max()), mats[0].shape[1], dtype=self.dtype)
            for i, m in enumerate(mats):
                inputs[i, : m.shape[0]] = torch.tensor(np.asarray(m), dtype=self.dtype)
        return Batch(list(samples), inputs, lengths, prev, targets, tags, ctc_targets)


def batch_loss(
    model: _Seq2Seq,
    batch: Batch,
    phase: PhaseConfig,
    blank_id: int,
    pad_id: int,
    kd_store: KdStore | None = None,
) -> torch.Tensor:
    """Phase objective for one batch: (1 - w) * primary + w * CTC."""
    tags = batch.tags if model.cfg.tag_mode != "none" else None
    logits, enc = model(batch.inputs, batch.input_lengths, batch.prev_tokens, tags)
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    targets = batch.targets.reshape(-1).numpy()
    if phase.loss == LABEL_SMOOTHED_CE:
        eps = phase.label_smoothing
        primary = torch_loss(flat, lambda z: label_smoothed_ce(z, targets, pad_id, eps))
    else:
        if kd_store is None:
            raise TrainError("word-KD phase needs a KD store")
        ids, probs = teacher_arrays(kd_store, batch, pad_id)
        mask = targets != pad_id
        primary = torch_loss(flat, lambda z: word_kd_loss(z, ids, probs, mask))
    w = MultitaskWeights(phase.ctc_weight)
    if w.lambda_ctc == 0.0:
        return primary
    lp = model.ctc_log_probs(enc)
    lengths = [int(n) for n in enc.lengths]
    keep = [b for b, (n, t) in enumerate(zip(lengths, batch.ctc_targets)) if ctc_min_frames(t) <= n]
    if len(keep) < len(lengths):
        logger.debug("CTC: %d unalignable samples skipped", len(lengths) - len(keep))
    if not keep:
        return primary
    sub = lp[keep]
    ctc = torch_loss(
        sub, lambda x: ctc_batch_loss(x, [lengths[b] for b in keep], [batch.ctc_targets[b] for b in keep], blank_id)
    )
    return (1.0 - w.lambda_ctc) * primary + w.lambda_ctc * ctc


def teacher_arrays(store: KdStore, batch: Batch, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    b, n = batch.targets.shape
    k = store.k
    ids = np.zeros((b, n, k), dtype=np.int64)
    probs = np.full((b, n, k), 1.0 / k)
    for i, s in enumerate(batch.samples):
        rows = store[s.id]
        length = int((batch.targets[i] != pad_id).sum())
        if len(rows) != length:
            raise TrainError(f"KD rows for {s.id!r}: {len(rows)} rows, target has {length} tokens")
        ids[i, :length] = rows.ids
        probs[i, :length] = rows.probs
    return ids.reshape(b * n, k), probs.reshape(b * n, k)


@torch.no_grad()
def validation_perplexity(
    model: _Seq2Seq,
    builder: BatchBuilder,
    samples: Sequence[Sample],
    phase: PhaseConfig,
    kd_store: KdStore | None = None,
    batch_size: int = 32,
) -> float:
    """exp of the phase's primary loss averaged over target tokens."""
    model.eval()
    total = 0.0
    n_tok = 0
    pad = builder.vocab.pad_id
    for i in range(0, len(samples), batch_size):
        batch = builder.build(samples[i : i + batch_size])
        tags = batch.tags if model.cfg.tag_mode != "none" else None
        logits, _ = model(batch.inputs, batch.input_lengths, batch.prev_tokens, tags)
        flat = logits.reshape(-1, logits.shape[-1]).double().numpy()
        targets = batch.targets.reshape(-1).numpy()
        if phase.loss == WORD_KD and kd_store is not None:
            ids, probs = teacher_arrays(kd_store, batch, pad)
            out = word_kd_loss(flat, ids, probs, targets != pad)
        else:
            out = label_smoothed_ce(flat, targets, pad, phase.label_smoothing)
        total += out.value * out.n_tokens
        n_tok += out.n_tokens
    return math.exp(total / max(n_tok, 1))


def train_phase(
    model: _Seq2Seq,
    phase: PhaseConfig,
    manifest: Manifest,
    tokenizer: Tokenizer,
    valid: Manifest | None = None,
    kd_store: KdStore | None = None,
    hooks: TrainHooks | None = None,
    seed: int = 0,
    ckpt_dir: str | Path | None = None,
    keep_checkpoints: bool = True,
    optim: OptimState | None = None,
) -> PhaseResult:
    """Run ``phase.epochs`` epochs; one optimizer update per ``plan.accumulation`` rounds.

    A round is one mini-batch, or one mini-batch per domain when
    ``phase.multi_domain`` is set. Checkpoints are taken after every epoch and
    the best is chosen by validation perplexity.
    """
    hooks = hooks or TrainHooks()
    optim = optim or OptimState()
    samples = [s for s in manifest.samples if s.domain in phase.domains]
    if not samples:
        raise TrainError(f"phase {phase.name}: no samples in domains {[d.value for d in phase.domains]}")
    if phase.loss == WORD_KD:
        if kd_store is None:
            raise TrainError(f"phase {phase.name}: word-KD phase needs a KD store")
        kd_store.check_covers(s.id for s in samples)
    dtype = next(model.parameters()).dtype
    builder = BatchBuilder(phase.task, manifest, tokenizer, dtype)
    valid_builder = BatchBuilder(phase.task, valid, tokenizer, dtype) if valid is not None and len(valid) else None
    valid_kd = kd_store if valid_builder and kd_store and all(s.id in kd_store for s in valid.samples) else None
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    params = dict(model.named_parameters())
    augment = (phase.spec_augment, phase.time_stretch) if phase.augment else None
    vocab = tokenizer.vocab
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    records: list[EpochRecord] = []
    for epoch in range(1, phase.epochs + 1):
        model.train()
        if phase.multi_domain:
            by_domain: dict[Domain, list[Sample]] = {}
            for s in samples:
                by_domain.setdefault(s.domain, []).append(s)
            rounds = multi_domain_batches(by_domain, phase.plan, rng, builder.size, phase.domains)
        else:
            order = [samples[i] for i in rng.permutation(len(samples))]
            rounds = [[(None, b)] for b in make_batches(order, phase.plan, builder.size)]

        epoch_loss = 0.0
        n_batches = 0
        pending = 0
        model.zero_grad(set_to_none=True)
        for r, rnd in enumerate(rounds):
            for domain, group in rnd:
                batch = builder.build(group, augment, rng, hooks)
                hooks.on_batch(domain, group, batch.n_tokens)
                loss = batch_loss(model, batch, phase, vocab.blank_id, vocab.pad_id, kd_store)
                if not torch.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss in phase {phase.name}, epoch {epoch}")
                loss.backward()
                epoch_loss += loss.item()
                n_batches += 1
                pending += 1
            if (r + 1) % phase.plan.accumulation == 0 or r == len(rounds) - 1:
                grads = {}
                for name, p in params.items():
                    if p.grad is not None:
                        grads[name] = p.grad / pending
                lr = lr_at_step(phase.schedule, optim.t)
                adam_step(params, grads, optim, lr)
                hooks.on_step(optim.t, lr, epoch_loss / n_batches)
                model.zero_grad(set_to_none=True)
                pending = 0

        train_loss = epoch_loss / max(n_batches, 1)
        valid_ppl = None
        if valid_builder is not None:
            vphase = phase if valid_kd is not None else replace(phase, loss=LABEL_SMOOTHED_CE)
            valid_ppl = validation_perplexity(model, valid_builder, valid.samples, vphase, valid_kd)
        ckpt = Checkpoint.from_model(
            model,
            step=optim.t,
            seed=seed,
            phase=phase.name,
            epoch=epoch,
            train_loss=train_loss,
            valid_ppl=valid_ppl,
            final_loss=phase.loss,
            temperature=KD_TEMPERATURE if phase.loss == WORD_KD else CE_TEMPERATURE,
        )
        path = None
        if ckpt_dir is not None:
            path = ckpt_dir / f"ckpt_epoch{epoch}.bin"
            save_checkpoint(ckpt, path)
        records.append(EpochRecord(epoch, train_loss, valid_ppl, ckpt if keep_checkpoints else None, path))
        hooks.on_epoch(epoch, train_loss, valid_ppl)
        logger.info("%s epoch %d: loss %.4f valid ppl %s", phase.name, epoch, train_loss, valid_ppl)

    scored = [r for r in records if r.valid_ppl is not None]
    best = min(scored, key=lambda r: r.valid_ppl).epoch if scored else (records[-1].epoch if records else None)
    if ckpt_dir is not None and best is not None:
        (ckpt_dir / "best").write_text(f"ckpt_epoch{best}.bin\n")
    return PhaseResult(records, best, optim.t, optim)


# ---------------------------------------------------------------------------
# Checkpoint averaging
# ---------------------------------------------------------------------------


def average_checkpoints(ckpts: Sequence[Checkpoint], sources: Sequence[str] | None = None) -> Checkpoint:
    """Element-wise mean of every parameter tensor (accumulated in float64)."""
    if not ckpts:
        raise ValueError("no checkpoints to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.config != first.config or c.params.keys() != first.params.keys():
            raise ValueError("cannot average checkpoints with different configs")
    avg = {}
    for name, t in first.params.items():
        acc = torch.zeros_like(t, dtype=torch.float64)
        for c in ckpts:
            acc += c.params[name].to(torch.float64)
        avg[name] = (acc / len(ckpts)).to(t.dtype)
    meta = dict(first.metadata)
    meta["averaged_from"] = list(sources) if sources is not None else [c.step for c in ckpts]
    return Checkpoint(first.config, avg, max(c.step for c in ckpts), meta)


def select_around_best(records: Sequence[EpochRecord], best_epoch: int, n: int = 5) -> list[EpochRecord]:
    """``n`` consecutive epoch records centred on the best, shifted inward at the ends."""
    records = sorted(records, key=lambda r: r.epoch)
    pos = next(i for i, r in enumerate(records) if r.epoch == best_epoch)
    n = min(n, len(records))
    start = min(max(pos - n // 2, 0), len(records) - n)
    return records[start : start + n]
