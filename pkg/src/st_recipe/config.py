"""Run configuration: one YAML file with a section per command.

Each section is a pydantic model that rejects unknown keys, so a typo in the
file or in a ``--set`` override fails with the offending field path. Every
field carries a description; :func:`describe_keys` renders them for ``--help``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augment import SpecAugmentConfig, TimeStretchConfig
from .decode import DecodeConfig
from .model import ModelConfig
from .train import BatchPlan, LrSchedule, PhaseConfig, TrainScheme


class ConfigError(ValueError):
    pass


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(Section):
    """Raw corpus manifests read by prepare; relative paths resolve against the current directory."""

    train: str = Field("data/train.tsv", description="speech training manifest (ground truth and synthetic domains)")
    valid: str = Field("data/valid.tsv", description="speech validation manifest")
    mt: str = Field("data/mt.tsv", description="parallel text manifest for the MT teacher")


class PrepareSection(Section):
    bpe_merges: int = Field(8000, ge=0, description="joint BPE merge operations over transcripts and targets")
    max_frames: int = Field(2000, ge=1, description="speech samples longer than this are dropped")
    toy: bool = Field(False, description="generate the synthetic reverse-the-sequence corpus instead of reading data.*")
    toy_frames_per_word: int = Field(4, ge=1, description="frames per word in the synthetic corpus")


class ModelSection(Section):
    n_enc_layers: int = Field(11, ge=1, description="encoder layers")
    n_dec_layers: int = Field(4, ge=1, description="decoder layers")
    d_model: int = Field(512, ge=1, description="model width")
    n_heads: int = Field(8, ge=1, description="attention heads")
    d_ffn: int = Field(2048, ge=1, description="feed-forward hidden width")
    dropout: float = Field(0.1, ge=0.0, lt=1.0, description="dropout rate")
    conv_channels: int = Field(64, ge=1, description="channels of the two stride-2 convolutions (speech only)")
    n_features: int = Field(40, ge=1, description="filterbank features per frame (speech only)")
    ctc_layer: int | None = Field(8, description="encoder layer (1-based) feeding the CTC head; null disables it")
    tag_mode: Literal["none", "encoder", "decoder"] = Field(
        "none", description="where the domain tag embedding is summed"
    )
    distance_penalty_scale: float = Field(1.0, ge=0.0, description="scale of the log-distance attention penalty")
    tag_before_positions: bool = Field(True, description="add the encoder tag before the positional encoding")

    def to_model_config(self, kind: str, vocab_size: int) -> ModelConfig:
        return ModelConfig(kind=kind, vocab_size=vocab_size, **self.model_dump())


class ModelsSection(Section):
    mt: ModelSection = Field(
        ModelSection(n_enc_layers=6, n_dec_layers=6, ctc_layer=None), description="MT teacher architecture"
    )
    asr: ModelSection = Field(ModelSection(n_dec_layers=4), description="ASR architecture (CTC uses the last layer)")
    st: ModelSection = Field(ModelSection(), description="ST architecture; encoder layers are copied from ASR")


class ScheduleSection(Section):
    kind: Literal["warmup_inv_sqrt", "fixed"] = Field("warmup_inv_sqrt", description="learning-rate schedule")
    lr_start: float = Field(3e-4, gt=0.0, description="learning rate at step 0")
    lr_peak: float = Field(5e-4, gt=0.0, description="learning rate at the end of warmup")
    warmup_steps: int = Field(5000, ge=1, description="linear warmup length in updates")
    fixed_lr: float = Field(1e-4, gt=0.0, description="learning rate when kind is fixed")

    def build(self) -> LrSchedule:
        return LrSchedule(**self.model_dump())


class BatchSection(Section):
    max_tokens: int = Field(12000, ge=1, description="cap on frames (speech) or tokens (text) per mini-batch")
    max_samples: int = Field(8, ge=1, description="cap on samples per mini-batch")
    accumulation: int = Field(8, ge=1, description="rounds of mini-batches per optimizer update")

    def build(self) -> BatchPlan:
        return BatchPlan(**self.model_dump())


class SpecAugmentSection(Section):
    p: float = Field(0.5, ge=0.0, le=1.0, description="probability of masking a sample")
    freq_mask_par: int = Field(13, ge=0, description="maximum frequency mask width")
    time_mask_par: int = Field(20, ge=0, description="maximum time mask width")
    freq_mask_num: int = Field(2, ge=0, description="frequency masks per sample")
    time_mask_num: int = Field(2, ge=0, description="time masks per sample")


class TimeStretchSection(Section):
    p: float = Field(0.3, ge=0.0, le=1.0, description="probability of stretching a sample")
    window_w: int = Field(10, ge=1, description="frames per independently stretched window")
    s_low: float = Field(0.8, gt=0.0, description="lower stretch factor (1.0 for short inputs)")
    s_high: float = Field(1.25, gt=0.0, description="upper stretch factor")
    short_input_threshold: int = Field(10, ge=1, description="inputs shorter than this are never shortened")
    invert: bool = Field(False, description="resample by 1/s, so s > 1 shortens")

    @model_validator(mode="after")
    def _order(self):
        if self.s_low > self.s_high:
            raise ValueError("s_low must not exceed s_high")
        return self


class AugmentSection(Section):
    enabled: bool = Field(True, description="apply SpecAugment and time stretch to training batches")
    spec_augment: SpecAugmentSection = Field(SpecAugmentSection(), description="SpecAugment settings")
    time_stretch: TimeStretchSection = Field(TimeStretchSection(), description="time stretch settings")


class PhaseSection(Section):
    epochs: int = Field(10, ge=1, description="training epochs")
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0, description="label smoothing for cross-entropy phases")
    schedule: ScheduleSection = Field(ScheduleSection(), description="learning-rate schedule")
    batch: BatchSection = Field(BatchSection(), description="batching and gradient accumulation")
    manifest: str = Field("prepared/train.tsv", description="training manifest")
    valid: str | None = Field("prepared/valid.tsv", description="validation manifest for checkpoint selection")

    def phase(self, **kw: Any) -> PhaseConfig:
        return PhaseConfig(
            epochs=self.epochs,
            label_smoothing=self.label_smoothing,
            schedule=self.schedule.build(),
            plan=self.batch.build(),
            **kw,
        )


def _augment_kw(aug: AugmentSection) -> dict[str, Any]:
    return dict(
        augment=aug.enabled,
        spec_augment=SpecAugmentConfig(**aug.spec_augment.model_dump()),
        time_stretch=TimeStretchConfig(**aug.time_stretch.model_dump()),
    )


class TrainMtSection(PhaseSection):
    manifest: str = Field("prepared/mt.tsv", description="parallel text manifest")
    out: str = Field("mt", description="checkpoint directory, relative to workdir")


class TrainAsrSection(PhaseSection):
    augment: AugmentSection = Field(AugmentSection(), description="augmentation during ASR pretraining")
    ctc_weight: float = Field(0.5, ge=0.0, le=1.0, description="weight of the CTC loss (lambda)")
    out: str = Field("asr", description="checkpoint directory, relative to workdir")


class DistillSection(Section):
    teacher: str = Field("mt", description="MT teacher checkpoint file or training directory")
    k: int = Field(8, ge=1, description="teacher tokens kept per target position")
    manifests: list[str] = Field(
        default_factory=lambda: ["prepared/train.tsv", "prepared/valid.tsv"], description="manifests to distill"
    )
    out: str = Field("kd/store.kd", description="KD store file, relative to workdir")
    batch_size: int = Field(32, ge=1, description="samples per teacher forward pass")


class TrainStSection(PhaseSection):
    scheme: Literal["seq_kd_finetune", "multi_domain"] = Field(
        "multi_domain", description="training scheme over the data domains"
    )
    augment: AugmentSection = Field(AugmentSection(), description="augmentation during ST training")
    ctc_weight: float = Field(0.5, ge=0.0, le=1.0, description="weight of the CTC loss (lambda)")
    asr_checkpoint: str | None = Field("asr", description="ASR checkpoint whose encoder initialises ST; null skips")
    kd_store: str = Field("kd/store.kd", description="KD store from distill")
    out: str = Field("st", description="checkpoint directory, relative to workdir")

    def scheme_enum(self) -> TrainScheme:
        return TrainScheme(self.scheme)


class FinetuneSection(PhaseSection):
    checkpoint: str = Field("st", description="ST checkpoint to fine-tune with label-smoothed cross-entropy")
    out: str = Field("finetune", description="checkpoint directory, relative to workdir")


class AverageSection(Section):
    checkpoints: list[str] = Field(default_factory=list, description="explicit checkpoint files to average")
    around_best: str | None = Field(
        "st/multi_domain", description="training directory; average n epochs centred on its best"
    )
    n: int = Field(5, ge=1, description="checkpoints averaged around the best epoch")
    out: str = Field("average.bin", description="output checkpoint, relative to workdir")

    @model_validator(mode="after")
    def _source(self):
        if not self.checkpoints and not self.around_best:
            raise ValueError("give checkpoints or around_best")
        return self


class DecodeSection(Section):
    beam_size: int = Field(5, ge=1, description="beam width")
    max_len: int = Field(200, ge=1, description="maximum output length; eos is forced there")
    temperature: float | None = Field(None, gt=0.0, description="output temperature; null reads it from the checkpoint")
    length_norm: bool = Field(True, description="rank finished hypotheses by per-token log-probability")
    log_space_ensemble: bool = Field(False, description="average log-probabilities instead of probabilities")

    def build(self, temperature: float) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.beam_size,
            max_len=self.max_len,
            temperature=temperature,
            length_norm=self.length_norm,
            log_space_ensemble=self.log_space_ensemble,
        )


class TranslateSection(DecodeSection):
    models: list[str] = Field(default_factory=lambda: ["finetune"], description="checkpoints to ensemble")
    manifest: str = Field("prepared/valid.tsv", description="manifest to translate")
    tag: Literal["ground_truth", "synth_cased", "synth_lower"] = Field(
        "ground_truth", description="domain tag used at inference"
    )
    out: str = Field("hyp.txt", description="one hypothesis per line, relative to workdir")


class ScoreSection(Section):
    hypotheses: str = Field("hyp.txt", description="hypothesis file, one line per manifest sample")
    manifest: str = Field("prepared/valid.tsv", description="manifest with the references")
    reference: Literal["target", "transcript"] = Field("target", description="manifest field used as reference")
    metric: Literal["bleu", "wer"] = Field("bleu", description="corpus BLEU or word error rate")


class SynthDataSection(Section):
    mt_checkpoint: str = Field("mt", description="MT checkpoint used to translate transcripts")
    manifest: str = Field("prepared/train.tsv", description="ASR manifest whose transcripts are translated")
    casing: Literal["cased", "lower"] = Field("cased", description="source casing; lower strips punctuation too")
    only_domain: Literal["ground_truth", "synth_cased", "synth_lower"] | None = Field(
        None, description="translate only samples of this domain, pass the rest through"
    )
    beam_size: int = Field(5, ge=1, description="beam width for the MT model")
    max_len: int = Field(200, ge=1, description="maximum translation length")
    out: str = Field("prepared/synth.tsv", description="output ST manifest, relative to workdir")


class RunConfig(Section):
    seed: int = Field(0, description="seed for every random stream")
    workdir: str = Field("run", description="directory holding all artifacts; relative paths resolve against it")
    data: DataSection = Field(DataSection(), description="corpus manifests")
    prepare: PrepareSection = Field(PrepareSection(), description="prepare command")
    models: ModelsSection = Field(ModelsSection(), description="architectures")
    train_mt: TrainMtSection = Field(TrainMtSection(), description="train_mt command")
    train_asr: TrainAsrSection = Field(TrainAsrSection(), description="train_asr command")
    distill: DistillSection = Field(DistillSection(), description="distill command")
    train_st: TrainStSection = Field(TrainStSection(), description="train_st command")
    finetune: FinetuneSection = Field(
        FinetuneSection(schedule=ScheduleSection(kind="fixed")), description="finetune command"
    )
    average: AverageSection = Field(AverageSection(), description="average command")
    translate: TranslateSection = Field(TranslateSection(), description="translate command")
    score: ScoreSection = Field(ScoreSection(), description="score command")
    synth_data: SynthDataSection = Field(SynthDataSection(), description="synth_data command")

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.workdir) / p

    def section_hash(self, name: str) -> str:
        """Digest of everything a command reads: its own section plus the shared ones."""
        shared = {"seed": self.seed, "data": self.data.model_dump(mode="json"), "models": self.models.model_dump()}
        payload = {"shared": shared, name: getattr(self, name).model_dump(mode="json")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r}: expected key=value")
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set dotted ``key=value`` pairs in a nested dict; values are parsed as YAML scalars."""
    for item in overrides:
        keys, value = _parse_override(item)
        node = raw
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {k} is not a section")
            node = child
        node[keys[-1]] = value
    return raw


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the YAML file, then ``--set`` overrides; sections merge key by key."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, list(overrides))
    try:
        return RunConfig.model_validate(_merge(RunConfig().model_dump(), raw))
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from e


def describe_keys(model: type[BaseModel] = RunConfig, prefix: str = "", defaults: BaseModel | None = None) -> list[str]:
    """``key  description [default]`` lines for every leaf field, depth first."""
    defaults = defaults if defaults is not None else model()
    out = []
    for name, f in model.model_fields.items():
        key = f"{prefix}{name}"
        value = getattr(defaults, name)
        if isinstance(value, BaseModel):
            out.extend(describe_keys(type(value), key + ".", value))
            continue
        out.append(f"{key}  {f.description} [default: {json.dumps(value)}]")
    return out
