import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from st_recipe.corpus import Manifest, Sample, load_manifest  # noqa: E402
from st_recipe.model import ModelConfig  # noqa: E402
from st_recipe.recipe import build_tokenizer, manifest_texts, train_mt  # noqa: E402
from st_recipe.toy import ToyTask, make_toy_corpus  # noqa: E402
from st_recipe.train import BatchPlan, LrSchedule, PhaseConfig  # noqa: E402

SMALL_TASK = ToyTask(n_words=8, n_train=12, n_asr=12, n_valid=4, n_mt=40, frames_per_word=4, n_features=8)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """A tiny reverse-task corpus with its tokenizer."""
    root = tmp_path_factory.mktemp("toy")
    paths = make_toy_corpus(root, SMALL_TASK)
    manifests = {name: load_manifest(p) for name, p in paths.items()}
    tok = build_tokenizer(manifest_texts(*manifests.values()), n_merges=0)
    return {"root": root, "paths": paths, "tokenizer": tok, **manifests}


def copy_corpus(n=200, n_words=8, seed=0):
    rng = np.random.default_rng(seed)
    words = [chr(ord("a") + i) for i in range(n_words)]
    out = []
    for i in range(n):
        sent = " ".join(words[j] for j in rng.choice(n_words, size=int(rng.integers(2, 5)), replace=False))
        out.append(Sample(f"c{i:04d}", "-", sent, sent))
    return Manifest(out, n_features=8)


@pytest.fixture(scope="session")
def copy_teacher():
    """Small text model trained to copy its source; used as a deterministic MT teacher."""
    corpus = copy_corpus()
    tok = build_tokenizer(manifest_texts(corpus), n_merges=0)
    cfg = ModelConfig(kind="text", n_enc_layers=1, n_dec_layers=1, d_model=32, n_heads=4, d_ffn=64,
                      dropout=0.0, ctc_layer=None)
    phase = PhaseConfig(epochs=40, label_smoothing=0.0, plan=BatchPlan(12000, 16, 1),
                        schedule=LrSchedule(lr_start=1e-4, lr_peak=3e-3, warmup_steps=50))
    model = train_mt(corpus, tok, cfg, phase).model
    model.eval()
    return {"model": model, "tokenizer": tok, "corpus": corpus}


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> bool:
    """Record one acceptance verdict; all verdicts are printed in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
