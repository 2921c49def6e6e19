"""Acceptance suite: one verdict line per criterion, collected in the terminal summary.

Tolerances are fixed here rather than derived from the runs. The micro recipe
(criteria 6, 7, 8 and 10) shares one prepared corpus, MT teacher and ASR model.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
from conftest import report
from oracles import central_difference, ctc_brute_force_all, rel_error
from test_model import MICRO, micro_model_loss
from test_train import random_store, speech_manifest, tiny_speech

from st_recipe.augment import SpecAugmentConfig, TimeStretchConfig, spec_augment, time_stretch
from st_recipe.corpus import Domain
from st_recipe.decode import DecodeConfig, beam_search, generate
from st_recipe.evaluation import corpus_bleu, wer
from st_recipe.losses import UnalignableError, ctc_loss, label_smoothed_ce, log_softmax, word_kd_loss
from st_recipe.model import Checkpoint, ModelConfig, build_model
from st_recipe.recipe import build_tokenizer, greedy_outputs, manifest_texts
from st_recipe.toy import MicroRecipe, prepare_micro, run_micro
from st_recipe.train import BatchPlan, LrSchedule, PhaseConfig, TrainHooks, average_checkpoints, lr_at_step, train_phase

CTC_TOL = 1e-6
GRAD_TOL = 1e-4
MICRO_BUDGET_S = 15 * 60
MIN_MT_TOKEN_ACC = 0.99
MIN_ST_ACC = 0.95
MAX_K_SPREAD = 0.05


def test_criterion_1_ctc_matches_path_enumeration():
    start = time.perf_counter()
    worst = 0.0
    mismatched = 0
    cases = 0
    blank = 0
    for t_len, vocab in itertools.product(range(1, 6), range(1, 4)):
        lp = log_softmax(np.random.default_rng(100 * t_len + vocab).normal(size=(t_len, vocab + 1)))
        oracle = ctc_brute_force_all(lp, blank)
        for length in range(4):
            for target in itertools.product(range(1, vocab + 1), repeat=length):
                cases += 1
                expected = oracle.get(target, math.inf)
                try:
                    got = ctc_loss(lp, target, blank).value
                except UnalignableError:
                    got = math.inf
                if math.isinf(expected) or math.isinf(got):
                    mismatched += math.isinf(expected) != math.isinf(got)
                else:
                    worst = max(worst, abs(got - expected))
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and worst < CTC_TOL and elapsed < 10
    report(1, ok, f"{cases} (T', target) cases, max |diff| {worst:.2e} < {CTC_TOL}, "
                  f"{mismatched} alignability mismatches, {elapsed:.2f}s < 10s")
    assert ok


def test_criterion_2_gradient_audit():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    errors = {}

    z = rng.normal(size=(4, 6))
    targets = np.array([1, 5, 2, 0])
    errors["label_smoothed_ce"] = rel_error(
        label_smoothed_ce(z, targets, 0, 0.1).grad,
        central_difference(lambda x: label_smoothed_ce(x, targets, 0, 0.1).value, z),
    )

    ids = np.array([[0, 2, 5], [1, 3, 4], [5, 0, 1], [2, 3, 4]])
    q = rng.dirichlet(np.ones(3), size=4)
    errors["word_kd"] = rel_error(
        word_kd_loss(z, ids, q).grad, central_difference(lambda x: word_kd_loss(x, ids, q).value, z)
    )

    lp = log_softmax(rng.normal(size=(6, 4)))
    errors["ctc"] = rel_error(
        ctc_loss(lp, [1, 2, 2], 0).grad, central_difference(lambda x: ctc_loss(x, [1, 2, 2], 0).value, lp)
    )

    # every parameter entry of a d_model=8, 1+1 layer speech model, CE + CTC objective
    cfg = ModelConfig(kind="speech", **{**MICRO, "n_enc_layers": 1, "n_dec_layers": 1, "ctc_layer": 1})
    model = build_model(cfg, seed=0).double().eval()
    x = torch.tensor(rng.normal(size=(1, 8, 8)), dtype=torch.float64)
    prev, target = torch.tensor([[1, 5, 6]]), np.array([5, 6, 2])
    model.zero_grad()
    micro_model_loss(model, x, prev, target, [7]).backward()
    analytic, numeric = [], []
    h = 1e-6
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = micro_model_loss(model, x, prev, target, [7]).item()
                flat[i] = old - h
                down = micro_model_loss(model, x, prev, target, [7]).item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
            # parameters outside the graph (e.g. an unused tag table) have zero gradient
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            analytic.extend(grad.view(-1).tolist())
    errors["micro_model"] = rel_error(np.array(analytic), np.array(numeric))
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < GRAD_TOL and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(2, ok, f"relative errors {detail} (< {GRAD_TOL}) over {len(analytic)} model parameters, "
                  f"{elapsed:.1f}s < 60s")
    assert ok


def test_criterion_3_schedule_exact():
    s = LrSchedule()
    got = (lr_at_step(s, 0), lr_at_step(s, 5000), lr_at_step(s, 20000))
    ok = got == (3e-4, 5e-4, 2.5e-4)
    report(3, ok, f"lr(0), lr(5000), lr(20000) = {got}")
    assert ok


def test_criterion_4_augmentation_statistics():
    trials = 10_000
    x = np.random.default_rng(0).normal(size=(30, 40)) + 10.0  # no natural zeros
    cfg = SpecAugmentConfig(p=0.5)
    applied = 0
    values_ok = shapes_ok = True
    for seed in range(trials):
        out, hit = spec_augment(x, cfg, np.random.default_rng(seed))
        applied += hit
        shapes_ok &= out.shape == x.shape
        values_ok &= bool(np.all((out == 0) | (out == x)))
    rate = applied / trials
    shortest = min(
        time_stretch(np.zeros((t, 4)), TimeStretchConfig(p=1.0), np.random.default_rng(seed))[0].shape[0] - t
        for t in range(1, 10)
        for seed in range(trials // 9 + 1)
    )
    ok = 0.47 <= rate <= 0.53 and values_ok and shapes_ok and shortest >= 0
    report(4, ok, f"SpecAugment rate {rate:.4f} in [0.47, 0.53], masked entries exactly 0: {values_ok}, "
                  f"shapes kept: {shapes_ok}, min length change for T<10: {shortest}")
    assert ok


def test_criterion_5_multi_domain_scheduler(tmp_path):
    m = speech_manifest(tmp_path, (40, 20, 7))
    tok = build_tokenizer(manifest_texts(m), 0)
    model = build_model(tiny_speech(len(tok.vocab)), seed=0)
    phase = PhaseConfig(loss="word_kd", epochs=1, plan=BatchPlan(12000, 8, 1), multi_domain=True)
    hooks = TrainHooks()
    train_phase(model, phase, m, tok, kd_store=random_store(m, tok), hooks=hooks)
    per_epoch = {d.value: n for d, n in hooks.samples_by_domain.items()}
    order = [Domain.GROUND_TRUTH, Domain.SYNTH_CASED, Domain.SYNTH_LOWER]
    one_per_domain = all(g == order for g in hooks.step_groups)
    max_batch = max(n for n, _ in hooks.batch_sizes)
    ok = set(per_epoch.values()) == {40} and one_per_domain and max_batch <= 8
    report(5, ok, f"samples per domain per epoch {per_epoch}, {hooks.steps} updates each with one batch "
                  f"per domain: {one_per_domain}, largest batch {max_batch} <= 8")
    assert ok


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    recipe = MicroRecipe()
    start = time.perf_counter()
    art = prepare_micro(tmp_path_factory.mktemp("micro"), recipe)
    result = run_micro(art, recipe, k=4)
    return {"recipe": recipe, "art": art, "k4": result, "seconds": time.perf_counter() - start}


def test_criterion_6_micro_recipe(micro):
    r = micro["k4"]
    secs = micro["seconds"]
    ok = (
        r.mt_token_accuracy >= MIN_MT_TOKEN_ACC
        and r.ft_accuracy >= MIN_ST_ACC
        and r.ft_accuracy >= r.st_accuracy
        and secs < MICRO_BUDGET_S
    )
    stages = ", ".join(f"{k} {v:.0f}s" for k, v in r.seconds.items())
    report(6, ok, f"MT token acc {r.mt_token_accuracy:.3f} >= {MIN_MT_TOKEN_ACC}, ST seq acc {r.st_accuracy:.2f}, "
                  f"after finetune {r.ft_accuracy:.2f} >= {MIN_ST_ACC} and not lower; synthetic target acc "
                  f"{r.synth_sequence_accuracy:.3f}, ASR WER {r.asr_wer:.3f}; {secs:.0f}s < {MICRO_BUDGET_S}s "
                  f"({stages})")
    assert ok


def test_criterion_7_temperature(micro):
    model = micro["k4"].st_model
    art = micro["art"]
    greedy = {t: greedy_outputs(model, art.valid, art.tokenizer, "st", temperature=t) for t in (1.0, 1.3)}
    same = greedy[1.0] == greedy[1.3]
    sample = art.valid.samples[0]
    feats = art.valid.features(sample)
    vocab = art.tokenizer.vocab
    scores = {
        t: beam_search([model], feats, sample.domain, DecodeConfig(beam_size=4, max_len=30, temperature=t), vocab)[0].score
        for t in (1.0, 1.3)
    }
    differ = not math.isclose(scores[1.0], scores[1.3], rel_tol=1e-9)
    ok = same and differ
    report(7, ok, f"greedy outputs identical at T=1.0/1.3 over {len(greedy[1.0])} inputs: {same}; "
                  f"beam scores {scores[1.0]:.4f} vs {scores[1.3]:.4f} differ: {differ}")
    assert ok


def test_criterion_8_averaging_and_ensembling(micro):
    model = micro["k4"].ft_model
    art = micro["art"]
    ckpt = Checkpoint.from_model(model, step=1)
    avg = average_checkpoints([ckpt] * 5)
    avg_equal = all(torch.equal(avg.params[n], t) for n, t in ckpt.params.items())
    twin = ckpt.build()
    vocab = art.tokenizer.vocab
    cfg = DecodeConfig(beam_size=5, max_len=30)
    mismatches = 0
    for s in art.valid.samples:
        feats = art.valid.features(s)
        mismatches += generate([model], feats, s.domain, cfg, vocab) != generate([model, twin], feats, s.domain, cfg, vocab)
    ok = avg_equal and mismatches == 0
    report(8, ok, f"average of 5 identical checkpoints equals input: {avg_equal}; two-model ensemble differs "
                  f"from single model on {mismatches}/{len(art.valid)} inputs")
    assert ok


def test_criterion_9_bleu_wer_oracles():
    checks = {}
    checks["identical corpus BLEU 100"] = corpus_bleu(["a b c d e"], ["a b c d e"]).bleu == pytest.approx(100.0)
    rep = corpus_bleu(["a b c d"], ["a b c e"])
    checks["p_n (3/4, 2/3, 1/2, 0), BLEU 0"] = rep.precisions == pytest.approx((3 / 4, 2 / 3, 1 / 2, 0)) and rep.bleu == 0
    empty = corpus_bleu([""], ["a b c"])
    checks["empty hypothesis 0"] = empty.bleu == 0.0
    w = wer("a x c", "a b c")
    checks["one substitution WER 1/3"] = (w.substitutions, w.wer) == (1, pytest.approx(1 / 3))
    checks["identical WER 0"] = wer("a b c", "a b c").wer == 0.0
    d = wer("", "a b c d")
    checks["4 deletions WER 1"] = (d.deletions, d.wer) == (4, 1.0)
    rng = np.random.default_rng(0)
    iff = True
    for _ in range(300):
        ref = " ".join(rng.choice(list("abcdef"), size=int(rng.integers(1, 8))))
        hyp = ref if rng.random() < 0.5 else " ".join(rng.choice(list("abcdef"), size=int(rng.integers(1, 8))))
        iff &= (corpus_bleu([hyp], [ref]).bleu == pytest.approx(100.0)) == (hyp == ref)
    checks["BLEU 100 iff exact match (300 random pairs)"] = iff
    ok = all(checks.values())
    report(9, ok, "; ".join(f"{k}: {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


def test_criterion_10_topk_sweep(micro):
    art, recipe = micro["art"], micro["recipe"]
    full = len(art.tokenizer.vocab)
    results = {4: micro["k4"]}
    for k in (2, full):
        results[k] = run_micro(art, recipe, k=k)
    finals = {k: results[k].ft_accuracy for k in (2, 4, full)}
    spread = max(finals.values()) - min(finals.values())
    ok = spread < MAX_K_SPREAD
    detail = ", ".join(f"K={k}: ST {results[k].st_accuracy:.2f} / FT {finals[k]:.2f}" for k in (2, 4, full))
    report(10, ok, f"{detail} (K={full} is the full vocabulary); final spread {spread:.3f} < {MAX_K_SPREAD}")
    assert ok
