"""Command-line entry points.

Every command reads one YAML config (``--config``), applies ``--set key=value``
overrides, validates the sections it needs, runs, and records a run manifest
(config hash, seed, input and output digests) under ``<workdir>/manifests``.

Exit status: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable

import click
import torch

from . import __version__
from .augment import SubsequenceError
from .config import ConfigError, RunConfig, _augment_kw, describe_keys, load_config
from .corpus import (
    BpeModel,
    CorpusError,
    Domain,
    Manifest,
    Tokenizer,
    Vocabulary,
    filter_long,
    load_manifest,
    save_manifest,
)
from .decode import DecodeConfig
from .evaluation import corpus_bleu, corpus_wer
from .model import Checkpoint, ModelError, load_checkpoint, save_checkpoint
from .recipe import (
    build_tokenizer,
    checkpoint_temperature,
    finetune,
    manifest_texts,
    synth_data,
    train_asr,
    train_mt,
    train_st,
    translate,
)
from .teacher import KdStore, KdStoreError, distill_corpus, load_store, save_store
from .train import TASK_ST, EpochRecord, NonFiniteError, TrainError, average_checkpoints, select_around_best

logger = logging.getLogger("st_recipe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
BEST_FILE = "checkpoint_best.bin"
TOKENIZER_DIR = "tokenizer"
PREPARED_DIR = "prepared"


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths: Iterable[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.exists():
                out[str(f)] = file_digest(f)
    return out


def write_run_manifest(cfg: RunConfig, command: str, inputs: Iterable[Path], outputs: Iterable[Path]) -> Path:
    record = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.section_hash(command),
        "config": getattr(cfg, command).model_dump(mode="json"),
        "inputs": _digests(inputs),
        "outputs": _digests(outputs),
    }
    path = Path(cfg.workdir) / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def load_tokenizer(cfg: RunConfig) -> Tokenizer:
    d = cfg.path(TOKENIZER_DIR)
    bpe = BpeModel.load(_need(d / "bpe.codes", "BPE codes (run prepare first)"))
    vocab = Vocabulary.load(_need(d / "vocab.txt", "vocabulary (run prepare first)"))
    return Tokenizer(bpe, vocab)


def read_manifest(cfg: RunConfig, rel: str) -> Manifest:
    return load_manifest(_need(cfg.path(rel), "manifest"))


def checkpoint_path(cfg: RunConfig, rel: str) -> Path:
    """A checkpoint file, or a training directory standing for its best checkpoint."""
    p = cfg.path(rel)
    if p.is_dir():
        p = p / BEST_FILE
    return _need(p, "checkpoint")


def _check_vocab(ckpt: Checkpoint, tok: Tokenizer, path: Path) -> None:
    if ckpt.config.vocab_size != len(tok.vocab):
        raise DataError(
            f"{path}: checkpoint vocabulary has {ckpt.config.vocab_size} entries, tokenizer has {len(tok.vocab)}"
        )


def _absolute(manifest: Manifest) -> Manifest:
    """Copy with feature paths made absolute so the manifest can be written anywhere."""
    samples = [
        s if s.feature_path == "-" else replace(s, feature_path=str(manifest.resolve(s).resolve()))
        for s in manifest.samples
    ]
    return replace(manifest.subset(samples), base_dir=None)


def _finish_training(out: Path, model, result) -> Path:
    """Copy the selected epoch to ``checkpoint_best.bin`` with the phase's metadata."""
    best = result.best
    meta = dict(best.checkpoint.metadata) if best and best.checkpoint else {}
    path = out / BEST_FILE
    save_checkpoint(Checkpoint.from_model(model, step=result.steps, **meta), path)
    return path


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

_KEYS_HELP = "\b\nConfig keys (section.key  description [default]):\n" + "\n".join(
    "  " + line for line in describe_keys()
)


class Context:
    def __init__(self, config: str | None, overrides: tuple[str, ...]):
        self.config_path = config
        self.overrides = list(overrides)
        self._cfg: RunConfig | None = None

    @property
    def cfg(self) -> RunConfig:
        if self._cfg is None:
            self._cfg = load_config(self.config_path, self.overrides)
            torch.manual_seed(self._cfg.seed)
        return self._cfg


pass_ctx = click.make_pass_decorator(Context)


@click.group(epilog=_KEYS_HELP, context_settings={"max_content_width": 120})
@click.option("-c", "--config", type=click.Path(dir_okay=False), help="YAML config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key (repeatable).")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.version_option(__version__)
@click.pass_context
def cli(ctx: click.Context, config: str | None, overrides: tuple[str, ...], verbose: bool) -> None:
    """End-to-end speech translation recipe: ASR pretraining, word-level knowledge
    distillation from an MT teacher, multi-domain ST training, fine-tuning,
    checkpoint averaging, ensemble decoding and scoring."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    ctx.obj = Context(config, overrides)


@cli.command("prepare")
@pass_ctx
def prepare_cmd(c: Context) -> None:
    """Filter long utterances, learn joint BPE and the vocabulary, and write
    self-contained manifests under <workdir>/prepared."""
    cfg = c.cfg
    sec = cfg.prepare
    work = Path(cfg.workdir)
    if sec.toy:
        from .toy import ToyTask, make_toy_corpus

        paths = make_toy_corpus(work / "toy", ToyTask(frames_per_word=sec.toy_frames_per_word, seed=cfg.seed))
    else:
        paths = {k: _need(Path(getattr(cfg.data, k)), f"data.{k}") for k in ("train", "valid", "mt")}
    manifests = {k: load_manifest(p) for k, p in paths.items()}
    for k in ("train", "valid"):
        manifests[k], removed = filter_long(manifests[k], sec.max_frames)
        if removed:
            logger.info("prepare: dropped %d %s samples over %d frames", removed, k, sec.max_frames)
    tok = build_tokenizer(manifest_texts(manifests["mt"], manifests["train"]), sec.bpe_merges)
    tok_dir = work / TOKENIZER_DIR
    tok_dir.mkdir(parents=True, exist_ok=True)
    tok.bpe.save(tok_dir / "bpe.codes")
    tok.vocab.save(tok_dir / "vocab.txt")
    out_dir = work / PREPARED_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [tok_dir]
    for k, m in manifests.items():
        m = replace(_absolute(m), vocab_hash=tok.vocab.digest(), bpe_hash=tok.bpe.digest())
        save_manifest(m, out_dir / f"{k}.tsv")
        outputs.append(out_dir / f"{k}.tsv")
    click.echo(f"vocabulary: {len(tok.vocab)} entries; manifests in {out_dir}")
    write_run_manifest(cfg, "prepare", paths.values(), outputs)


def _train_inputs(cfg: RunConfig, sec) -> tuple[Manifest, Manifest | None, list[Path]]:
    train = read_manifest(cfg, sec.manifest)
    valid = read_manifest(cfg, sec.valid) if sec.valid else None
    inputs = [cfg.path(sec.manifest), cfg.path(TOKENIZER_DIR)]
    if sec.valid:
        inputs.append(cfg.path(sec.valid))
    return train, valid, inputs


@cli.command("train_mt")
@pass_ctx
def train_mt_cmd(c: Context) -> None:
    """Train the text-to-text teacher with label-smoothed cross-entropy."""
    cfg = c.cfg
    sec = cfg.train_mt
    tok = load_tokenizer(cfg)
    train, valid, inputs = _train_inputs(cfg, sec)
    out = cfg.path(sec.out)
    model_cfg = cfg.models.mt.to_model_config("text", len(tok.vocab))
    res = train_mt(train, tok, model_cfg, sec.phase(), valid, cfg.seed, out)
    best = _finish_training(out, res.model, res.last)
    click.echo(f"best epoch {res.last.best_epoch}: {best}")
    write_run_manifest(cfg, "train_mt", inputs, [out])


@cli.command("train_asr")
@pass_ctx
def train_asr_cmd(c: Context) -> None:
    """Pretrain the speech encoder on transcripts, with CTC on the last encoder layer."""
    cfg = c.cfg
    sec = cfg.train_asr
    tok = load_tokenizer(cfg)
    train, valid, inputs = _train_inputs(cfg, sec)
    out = cfg.path(sec.out)
    model_cfg = cfg.models.asr.to_model_config("speech", len(tok.vocab))
    phase = sec.phase(ctc_weight=sec.ctc_weight, **_augment_kw(sec.augment))
    res = train_asr(train, tok, model_cfg, phase, valid, cfg.seed, out)
    best = _finish_training(out, res.model, res.last)
    click.echo(f"best epoch {res.last.best_epoch}: {best}")
    write_run_manifest(cfg, "train_asr", inputs, [out])


@cli.command("distill")
@pass_ctx
def distill_cmd(c: Context) -> None:
    """Store the teacher's top-K next-token distributions for every sample."""
    cfg = c.cfg
    sec = cfg.distill
    tok = load_tokenizer(cfg)
    teacher_path = checkpoint_path(cfg, sec.teacher)
    ckpt = load_checkpoint(teacher_path)
    _check_vocab(ckpt, tok, teacher_path)
    teacher = ckpt.build()
    store = KdStore(sec.k)
    for rel in sec.manifests:
        store.rows.update(distill_corpus(teacher, read_manifest(cfg, rel), tok, sec.k, sec.batch_size).rows)
    out = cfg.path(sec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    idx = save_store(store, out)
    click.echo(f"{len(store)} samples, K={sec.k}: {out}")
    write_run_manifest(cfg, "distill", [teacher_path, *(cfg.path(m) for m in sec.manifests)], [out, idx])


@cli.command("train_st")
@pass_ctx
def train_st_cmd(c: Context) -> None:
    """Train the speech translation model with word-level KD (plus CTC) under the chosen scheme."""
    cfg = c.cfg
    sec = cfg.train_st
    tok = load_tokenizer(cfg)
    train, valid, inputs = _train_inputs(cfg, sec)
    store_path = _need(cfg.path(sec.kd_store), "KD store")
    store = load_store(store_path)
    inputs.append(store_path)
    asr = None
    if sec.asr_checkpoint:
        asr_path = checkpoint_path(cfg, sec.asr_checkpoint)
        asr_ckpt = load_checkpoint(asr_path)
        _check_vocab(asr_ckpt, tok, asr_path)
        asr = asr_ckpt.build()
        inputs.append(asr_path)
    out = cfg.path(sec.out)
    model_cfg = cfg.models.st.to_model_config("speech", len(tok.vocab))
    phase = sec.phase(ctc_weight=sec.ctc_weight, **_augment_kw(sec.augment))
    res = train_st(train, tok, model_cfg, sec.scheme_enum(), phase, store, asr, valid, cfg.seed, None, out)
    best = _finish_training(out, res.model, res.last)
    click.echo(f"phases {[p.best_epoch for p in res.phases]} (best epochs): {best}")
    write_run_manifest(cfg, "train_st", inputs, [out])


@cli.command("finetune")
@pass_ctx
def finetune_cmd(c: Context) -> None:
    """Continue an ST model on all data with label-smoothed cross-entropy, without augmentation or CTC."""
    cfg = c.cfg
    sec = cfg.finetune
    tok = load_tokenizer(cfg)
    train, valid, inputs = _train_inputs(cfg, sec)
    src = checkpoint_path(cfg, sec.checkpoint)
    ckpt = load_checkpoint(src)
    _check_vocab(ckpt, tok, src)
    out = cfg.path(sec.out)
    res = finetune(ckpt.build().train(), train, tok, sec.phase(task=TASK_ST), valid, cfg.seed, None, out)
    best = _finish_training(out, res.model, res.last)
    click.echo(f"best epoch {res.last.best_epoch}: {best}")
    write_run_manifest(cfg, "finetune", [*inputs, src], [out])


def _epoch_files(directory: Path) -> list[EpochRecord]:
    records = []
    for p in directory.glob("ckpt_epoch*.bin"):
        try:
            epoch = int(p.stem.removeprefix("ckpt_epoch"))
        except ValueError:
            continue
        records.append(EpochRecord(epoch, 0.0, None, None, p))
    return sorted(records, key=lambda r: r.epoch)


@cli.command("average")
@pass_ctx
def average_cmd(c: Context) -> None:
    """Average checkpoints: an explicit list, or n epochs centred on a run's best epoch."""
    cfg = c.cfg
    sec = cfg.average
    if sec.checkpoints:
        paths = [checkpoint_path(cfg, p) for p in sec.checkpoints]
    else:
        d = _need(cfg.path(sec.around_best), "training directory")
        pointer = _need(d / "best", "best-epoch pointer")
        best_name = pointer.read_text().strip()
        records = _epoch_files(d)
        best = next((r for r in records if r.path.name == best_name), None)
        if best is None:
            raise DataError(f"{d}: best checkpoint {best_name} is missing")
        paths = [r.path for r in select_around_best(records, best.epoch, sec.n)]
    avg = average_checkpoints([load_checkpoint(p) for p in paths], [p.name for p in paths])
    out = cfg.path(sec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(avg, out)
    click.echo(f"averaged {len(paths)} checkpoints: {out}")
    write_run_manifest(cfg, "average", paths, [out])


@cli.command("translate")
@click.option("--models", "models_opt", metavar="A.bin,B.bin", help="Comma-separated checkpoints to ensemble (relative to workdir).")
@pass_ctx
def translate_cmd(c: Context, models_opt: str | None) -> None:
    """Beam-search every sample of a manifest with one model or an ensemble."""
    if models_opt:
        c.overrides.append("translate.models=" + json.dumps([m for m in models_opt.split(",") if m]))
    cfg = c.cfg
    sec = cfg.translate
    tok = load_tokenizer(cfg)
    paths = [checkpoint_path(cfg, m) for m in sec.models]
    ckpts = [load_checkpoint(p) for p in paths]
    for ck, p in zip(ckpts, paths):
        _check_vocab(ck, tok, p)
    kinds = {ck.config.kind for ck in ckpts}
    if len(kinds) != 1:
        raise ConfigError("translate.models mixes speech and text models")
    temperature = sec.temperature
    if temperature is None:
        temps = {checkpoint_temperature(ck) for ck in ckpts}
        if len(temps) > 1:
            logger.warning("ensemble members carry temperatures %s; using the first", sorted(temps))
        temperature = checkpoint_temperature(ckpts[0])
    manifest = read_manifest(cfg, sec.manifest)
    hyps = translate([ck.build() for ck in ckpts], manifest, tok, sec.build(temperature), Domain.parse(sec.tag))
    out = cfg.path(sec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    click.echo(f"{len(hyps)} hypotheses (T={temperature}): {out}")
    write_run_manifest(cfg, "translate", [*paths, cfg.path(sec.manifest)], [out])


@cli.command("score")
@pass_ctx
def score_cmd(c: Context) -> None:
    """Corpus BLEU or WER of a hypothesis file against a manifest field."""
    cfg = c.cfg
    sec = cfg.score
    hyp_path = _need(cfg.path(sec.hypotheses), "hypothesis file")
    hyps = hyp_path.read_text(encoding="utf-8").splitlines()
    manifest = read_manifest(cfg, sec.manifest)
    refs = [getattr(s, sec.reference) for s in manifest.samples]
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if sec.metric == "bleu":
        line = corpus_bleu(hyps, refs).line()
    else:
        rep = corpus_wer(hyps, refs)
        line = f"WER = {100 * rep.wer:.2f} (S={rep.substitutions} I={rep.insertions} D={rep.deletions} N={rep.n_ref_words})"
    click.echo(line)
    out = Path(cfg.workdir) / f"score_{sec.metric}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(line + "\n")
    write_run_manifest(cfg, "score", [hyp_path, cfg.path(sec.manifest)], [out])


@cli.command("synth_data")
@pass_ctx
def synth_data_cmd(c: Context) -> None:
    """Fill targets of an ASR manifest by translating its transcripts with the MT model."""
    cfg = c.cfg
    sec = cfg.synth_data
    tok = load_tokenizer(cfg)
    mt_path = checkpoint_path(cfg, sec.mt_checkpoint)
    ckpt = load_checkpoint(mt_path)
    _check_vocab(ckpt, tok, mt_path)
    if ckpt.config.kind != "text":
        raise ConfigError("synth_data.mt_checkpoint must be a text model")
    manifest = read_manifest(cfg, sec.manifest)
    only = [Domain.parse(sec.only_domain)] if sec.only_domain else None
    dc = DecodeConfig(beam_size=sec.beam_size, max_len=sec.max_len)
    out_manifest, skipped = synth_data(ckpt.build(), manifest, tok, sec.casing, dc, only)
    out = cfg.path(sec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(_absolute(out_manifest), out)
    click.echo(f"{len(out_manifest)} samples written, {skipped} skipped (no transcript or empty translation): {out}")
    write_run_manifest(cfg, "synth_data", [mt_path, cfg.path(sec.manifest)], [out])


# ---------------------------------------------------------------------------
# Exit-code mapping
# ---------------------------------------------------------------------------

_DATA_ERRORS = (DataError, CorpusError, KdStoreError, SubsequenceError, ModelError, TrainError, FileNotFoundError)


def run(args: list[str] | None = None, echo: Callable[[str], None] | None = None) -> int:
    """Run the CLI and return its exit status instead of exiting."""
    echo = echo or (lambda msg: click.echo(msg, err=True))
    try:
        cli.main(args=args, prog_name="st-recipe", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        echo("aborted")
        return EXIT_CONFIG
    except click.ClickException as e:
        echo(f"error: {e.format_message()}")
        return EXIT_CONFIG
    except ConfigError as e:
        echo(f"config error: {e}")
        return EXIT_CONFIG
    except NonFiniteError as e:
        echo(f"numerical failure: {e}")
        return EXIT_NUMERIC
    except _DATA_ERRORS as e:
        echo(f"data error: {e}")
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
