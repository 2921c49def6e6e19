"""Synthetic reverse-the-sequence corpus for desk-scale runs of the full recipe.

Each word of a random sentence becomes a fixed number of noisy frames drawn
around a per-word embedding; the translation is the sentence reversed.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Domain, Manifest, Sample, save_manifest, write_features


@dataclass(frozen=True)
class ToyTask:
    n_words: int = 20
    n_train: int = 200
    # transcribed speech without translations; it becomes the synthetic domains
    n_asr: int = 800
    n_valid: int = 50
    n_mt: int = 1000
    min_len: int = 3
    max_len: int = 6
    frames_per_word: int = 8
    n_features: int = 40
    noise: float = 0.3
    # words within a sentence are distinct unless this is set; repeated words
    # make attention ambiguous at this data scale and adjacent repeats need a
    # separating blank under CTC (two encoder states per word)
    repeats: bool = False
    # share of the transcribed-only speech tagged synth cased; the rest is synth lower
    cased_fraction: float = 0.6
    seed: int = 0

    @property
    def words(self) -> list[str]:
        return list(string.ascii_lowercase[: self.n_words])


def _sentence(task: ToyTask, rng: np.random.Generator) -> list[str]:
    n = int(rng.integers(task.min_len, task.max_len + 1))
    if task.repeats:
        ids = rng.integers(0, task.n_words, size=n)
    else:
        ids = rng.choice(task.n_words, size=n, replace=False)
    return [task.words[i] for i in ids]


def make_toy_corpus(out_dir: str | Path, task: ToyTask = ToyTask()) -> dict[str, Path]:
    """Write features and manifests; returns paths of ``train``, ``valid`` and ``mt`` manifests.

    ``train`` holds ``n_train`` translated samples (ground truth) followed by
    ``n_asr`` transcribed-only samples in the synthetic domains, whose empty
    targets are to be produced by the MT teacher.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(task.seed)
    emb = rng.normal(size=(task.n_words, task.n_features)).astype(np.float32)
    index = {w: i for i, w in enumerate(task.words)}

    def speech_sample(sid: str, domain: Domain, with_target: bool) -> Sample:
        words = _sentence(task, rng)
        frames = np.repeat(emb[[index[w] for w in words]], task.frames_per_word, axis=0)
        frames = frames + task.noise * rng.normal(size=frames.shape).astype(np.float32)
        rel = f"feats/{sid}.fbnk"
        write_features(out_dir / rel, frames)
        f = task.frames_per_word
        align = tuple((i, i * f, (i + 1) * f) for i in range(len(words)))
        target = " ".join(reversed(words)) if with_target else ""
        return Sample(sid, rel, " ".join(words), target, domain, align)

    n_cased = int(round(task.cased_fraction * task.n_asr))
    counts = (task.n_train, n_cased, task.n_asr - n_cased)
    train = []
    for domain, count in zip((Domain.GROUND_TRUTH, Domain.SYNTH_CASED, Domain.SYNTH_LOWER), counts):
        for _ in range(count):
            train.append(speech_sample(f"tr{len(train):04d}", domain, domain is Domain.GROUND_TRUTH))
    valid = [speech_sample(f"va{i:04d}", Domain.GROUND_TRUTH, True) for i in range(task.n_valid)]
    mt = []
    for i in range(task.n_mt):
        words = _sentence(task, rng)
        mt.append(Sample(f"mt{i:05d}", "-", " ".join(words), " ".join(reversed(words))))

    paths = {}
    for name, samples in (("train", train), ("valid", valid), ("mt", mt)):
        paths[name] = out_dir / f"{name}.tsv"
        save_manifest(Manifest(samples, task.n_features), paths[name])
    return paths


# ---------------------------------------------------------------------------
# Desk-scale run of the whole recipe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MicroRecipe:
    """Hyperparameters of the desk-scale run; model sizes are far below the real ones."""

    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    conv_channels: int = 16
    dropout: float = 0.0
    bpe_merges: int = 50
    lr_peak: float = 2e-3
    warmup_steps: int = 100
    mt_epochs: int = 40
    mt_batch: int = 32
    asr_epochs: int = 30
    st_epochs: int = 40
    ft_epochs: int = 10
    ft_lr: float = 2e-4
    ctc_weight: float = 0.5
    k: int = 4
    # time masks of 20 frames would erase whole words at 4 frames per word
    time_mask_par: int = 1
    synth_beam: int = 2
    seed: int = 0


@dataclass
class MicroResult:
    mt_token_accuracy: float
    synth_sequence_accuracy: float
    asr_wer: float
    st_accuracy: float
    ft_accuracy: float
    seconds: dict[str, float]
    st_model: object = None
    ft_model: object = None
    store: object = None


@dataclass
class MicroArtifacts:
    """Stages that the top-K sweep shares between runs."""

    task: ToyTask
    tokenizer: object
    train: Manifest
    valid: Manifest
    teacher: object
    asr: object
    mt_token_accuracy: float
    synth_sequence_accuracy: float
    asr_wer: float
    seconds: dict[str, float]


def _phase(recipe: MicroRecipe, epochs: int, max_samples: int, **kw):
    from .train import BatchPlan, LrSchedule, PhaseConfig

    sched = LrSchedule(lr_start=0.6 * recipe.lr_peak, lr_peak=recipe.lr_peak, warmup_steps=recipe.warmup_steps)
    return PhaseConfig(epochs=epochs, schedule=sched, plan=BatchPlan(12000, max_samples, 1), **kw)


def prepare_micro(out_dir: str | Path, recipe: MicroRecipe = MicroRecipe(), task: ToyTask | None = None) -> MicroArtifacts:
    """Toy corpus, MT teacher, synthetic targets and ASR pretraining."""
    import time

    from .augment import SpecAugmentConfig, TimeStretchConfig
    from .corpus import load_manifest
    from .decode import DecodeConfig
    from .evaluation import corpus_wer
    from .model import ModelConfig
    from .recipe import (
        build_tokenizer,
        greedy_outputs,
        manifest_texts,
        sequence_accuracy,
        synth_data,
        teacher_forced_accuracy,
        train_asr,
        train_mt,
    )

    task = task or ToyTask(frames_per_word=4, seed=recipe.seed)
    seconds: dict[str, float] = {}
    t = time.perf_counter()
    paths = make_toy_corpus(out_dir, task)
    train, valid, mt = (load_manifest(paths[k]) for k in ("train", "valid", "mt"))
    tok = build_tokenizer(manifest_texts(mt, train, valid), recipe.bpe_merges)

    mt_cfg = ModelConfig(
        kind="text",
        vocab_size=len(tok.vocab),
        n_enc_layers=2,
        n_dec_layers=2,
        d_model=recipe.d_model,
        n_heads=recipe.n_heads,
        d_ffn=recipe.d_ffn,
        dropout=recipe.dropout,
        ctc_layer=None,
    )
    teacher = train_mt(mt, tok, mt_cfg, _phase(recipe, recipe.mt_epochs, recipe.mt_batch), valid, recipe.seed).model
    mt_acc = teacher_forced_accuracy(teacher, valid, tok, "mt")
    seconds["train_mt"] = time.perf_counter() - t

    t = time.perf_counter()
    dc = DecodeConfig(beam_size=recipe.synth_beam, max_len=4 * task.max_len)
    train, _ = synth_data(teacher, train, tok, "cased", dc, only=[Domain.SYNTH_CASED])
    train, _ = synth_data(teacher, train, tok, "lower", dc, only=[Domain.SYNTH_LOWER])
    synth = [s for s in train.samples if s.domain is not Domain.GROUND_TRUTH]
    synth_acc = sequence_accuracy([s.target for s in synth], [" ".join(reversed(s.transcript.split())) for s in synth])
    seconds["synth_data"] = time.perf_counter() - t

    t = time.perf_counter()
    asr_cfg = ModelConfig(
        kind="speech",
        vocab_size=len(tok.vocab),
        n_enc_layers=2,
        n_dec_layers=1,
        d_model=recipe.d_model,
        n_heads=recipe.n_heads,
        d_ffn=recipe.d_ffn,
        conv_channels=recipe.conv_channels,
        n_features=task.n_features,
        dropout=recipe.dropout,
        ctc_layer=2,
    )
    phase = _phase(
        recipe,
        recipe.asr_epochs,
        8,
        augment=True,
        spec_augment=SpecAugmentConfig(time_mask_par=recipe.time_mask_par),
        time_stretch=TimeStretchConfig(),
        ctc_weight=recipe.ctc_weight,
    )
    asr = train_asr(train, tok, asr_cfg, phase, valid, recipe.seed).model
    hyps = greedy_outputs(asr, valid, tok, "asr", tag=None)
    asr_wer = corpus_wer(hyps, [s.transcript for s in valid.samples]).wer
    seconds["train_asr"] = time.perf_counter() - t
    return MicroArtifacts(task, tok, train, valid, teacher, asr, mt_acc, synth_acc, asr_wer, seconds)


def run_micro(art: MicroArtifacts, recipe: MicroRecipe = MicroRecipe(), k: int | None = None) -> MicroResult:
    """Distill with top-``k``, train ST (CTC + word KD, multi-domain), then fine-tune with CE."""
    import time
    from dataclasses import replace

    from .augment import SpecAugmentConfig, TimeStretchConfig
    from .recipe import distill, finetune, greedy_outputs, sequence_accuracy, train_st
    from .train import LrSchedule, TrainScheme

    k = recipe.k if k is None else k
    seconds = dict(art.seconds)
    tok, train, valid = art.tokenizer, art.train, art.valid
    refs = [s.target for s in valid.samples]

    t = time.perf_counter()
    store = distill(art.teacher, [train, valid], tok, k)
    seconds["distill"] = time.perf_counter() - t

    t = time.perf_counter()
    st_cfg = replace(art.asr.cfg, n_enc_layers=3, n_dec_layers=2, ctc_layer=2, tag_mode="encoder")
    phase = _phase(
        recipe,
        recipe.st_epochs,
        8,
        augment=True,
        spec_augment=SpecAugmentConfig(time_mask_par=recipe.time_mask_par),
        time_stretch=TimeStretchConfig(),
        ctc_weight=recipe.ctc_weight,
    )
    st = train_st(train, tok, st_cfg, TrainScheme.MULTI_DOMAIN, phase, store, art.asr, valid, recipe.seed).model
    st_acc = sequence_accuracy(greedy_outputs(st, valid, tok, "st"), refs)
    seconds["train_st"] = time.perf_counter() - t
    st_state = {name: p.detach().clone() for name, p in st.state_dict().items()}

    t = time.perf_counter()
    ft_phase = replace(phase, epochs=recipe.ft_epochs, schedule=LrSchedule(kind="fixed", fixed_lr=recipe.ft_lr))
    ft = finetune(st, train, tok, ft_phase, valid, recipe.seed).model
    ft_acc = sequence_accuracy(greedy_outputs(ft, valid, tok, "st"), refs)
    seconds["finetune"] = time.perf_counter() - t

    st_copy = type(st)(st.cfg)
    st_copy.load_state_dict(st_state)
    return MicroResult(art.mt_token_accuracy, art.synth_sequence_accuracy, art.asr_wer, st_acc, ft_acc, seconds, st_copy, ft, store)
