import numpy as np
import pytest
import torch

from st_recipe.decode import DecodeConfig, apply_temperature, beam_search, generate, next_token_log_probs
from st_recipe.model import ModelConfig, ModelError, build_model


def text_model(vocab_size=12, seed=0, **kw):
    cfg = ModelConfig(kind="text", vocab_size=vocab_size, n_enc_layers=1, n_dec_layers=1, d_model=16, n_heads=2,
                      d_ffn=32, dropout=0.0, ctc_layer=None, **kw)
    return build_model(cfg, seed=seed).eval()


SOURCE = [5, 6, 7, 2]


def test_temperature_hand_case():
    assert apply_temperature([2.0, 0.0], 2.0) == pytest.approx([0.7310586, 0.2689414])


def test_temperature_equal_logits_uniform():
    for t in (0.5, 1.0, 3.0):
        assert apply_temperature(np.full(5, 1.7), t) == pytest.approx(np.full(5, 0.2))


def test_temperature_argmax_invariance_and_entropy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(size=20) * 4
        ents = []
        for t in (0.8, 1.0, 1.3, 1.5, 3.0):
            p = apply_temperature(logits, t)
            assert p.argmax() == logits.argmax()
            ents.append(-(p * np.log(p)).sum())
        assert all(b >= a - 1e-12 for a, b in zip(ents, ents[1:]))


def test_temperature_validation():
    with pytest.raises(ValueError):
        apply_temperature([1.0], 0.0)
    with pytest.raises(ValueError):
        DecodeConfig(temperature=-1)
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=0)


def test_high_temperature_approaches_uniform():
    model = text_model(vocab_size=2)
    enc = model.encode(torch.tensor([[0, 1]]))
    lp = next_token_log_probs([model], [enc], torch.tensor([[1]]), None, DecodeConfig(temperature=1000.0))
    assert torch.exp(lp[0]).numpy() == pytest.approx([0.5, 0.5], abs=1e-3)


def test_identical_ensemble_matches_single_model():
    a = text_model(seed=3)
    b = text_model(seed=3)
    for cfg in (DecodeConfig(beam_size=1, max_len=8), DecodeConfig(beam_size=4, max_len=8)):
        assert generate([a, b], SOURCE, None, cfg) == generate([a], SOURCE, None, cfg)
    cfg = DecodeConfig(beam_size=4, max_len=8)
    single = beam_search([a], SOURCE, None, cfg)
    pair = beam_search([a, b], SOURCE, None, cfg)
    assert [h.tokens for h in single] == [h.tokens for h in pair]
    assert [h.score for h in single] == pytest.approx([h.score for h in pair])


def test_ensemble_vocab_mismatch():
    with pytest.raises(ModelError):
        generate([text_model(12), text_model(13)], SOURCE, None, DecodeConfig())


def _argmax_decode(model, source, max_len, temperature=1.0):
    enc = model.encode(torch.tensor([source]))
    prefix = [1]
    with torch.no_grad():
        for step in range(max_len):
            logits = model.decode(torch.tensor([prefix]), enc)[0, -1] / temperature
            tok = 2 if step == max_len - 1 else int(logits.argmax())
            prefix.append(tok)
            if tok == 2:
                break
    return prefix[1:]


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    model = text_model(seed=seed)
    hyp = beam_search([model], SOURCE, None, DecodeConfig(beam_size=1, max_len=10))[0]
    assert hyp.tokens == _argmax_decode(model, SOURCE, 10)


@pytest.mark.parametrize("seed", range(5))
def test_larger_beam_never_scores_worse(seed):
    model = text_model(seed=seed)
    scores = []
    for k in (1, 2, 4, 8):
        cfg = DecodeConfig(beam_size=k, max_len=6, length_norm=False)
        scores.append(beam_search([model], SOURCE, None, cfg)[0].score)
    assert all(b >= a - 1e-9 for a, b in zip(scores, scores[1:])), scores


@pytest.mark.parametrize("max_len", [1, 3, 7])
def test_generation_terminates(max_len):
    for seed in range(3):
        for hyp in beam_search([text_model(seed=seed)], SOURCE, None, DecodeConfig(beam_size=3, max_len=max_len)):
            assert len(hyp.tokens) <= max_len
            assert hyp.finished == (hyp.tokens[-1] == 2)


def test_temperature_changes_scores_not_greedy_output():
    model = text_model(seed=1)
    out = {t: beam_search([model], SOURCE, None, DecodeConfig(beam_size=1, max_len=8, temperature=t))[0]
           for t in (1.0, 1.3)}
    assert out[1.0].tokens == out[1.3].tokens
    assert out[1.0].score != pytest.approx(out[1.3].score)


def test_speech_model_generation():
    cfg = ModelConfig(kind="speech", vocab_size=12, n_enc_layers=1, n_dec_layers=1, d_model=8, n_heads=2,
                      d_ffn=16, conv_channels=2, n_features=8, dropout=0.0, ctc_layer=1)
    model = build_model(cfg, seed=0)
    feats = np.random.default_rng(0).normal(size=(16, 8)).astype(np.float32)
    out = generate([model], feats, None, DecodeConfig(beam_size=2, max_len=5))
    assert len(out) <= 5 and 2 not in out
