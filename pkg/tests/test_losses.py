import itertools
import math

import numpy as np
import pytest
import torch
from oracles import central_difference, ctc_brute_force, ctc_brute_force_all, rel_error

from st_recipe.losses import (
    LossOutput,
    MultitaskWeights,
    UnalignableError,
    ctc_batch_loss,
    ctc_loss,
    ctc_min_frames,
    label_smoothed_ce,
    log_softmax,
    multitask_loss,
    torch_loss,
    word_kd_loss,
)


def random_log_probs(t, c, seed=0):
    return log_softmax(np.random.default_rng(seed).normal(size=(t, c)))


def test_ctc_two_frame_hand_case():
    # frames favour the label; paths "aa", "a-", "-a" carry probability 0.75 in total
    lp = np.log(np.array([[0.5, 0.5], [0.5, 0.5]]))
    out = ctc_loss(lp, [1], blank_id=0)
    assert out.value == pytest.approx(-math.log(0.75), abs=1e-12)


def test_ctc_matches_enumeration_full_sweep():
    blank = 0
    for t_len, n_labels in itertools.product(range(1, 6), range(1, 4)):
        lp = random_log_probs(t_len, n_labels + 1, seed=t_len * 10 + n_labels)
        oracle = ctc_brute_force_all(lp, blank)
        for length in range(0, 4):
            for target in itertools.product(range(1, n_labels + 1), repeat=length):
                expected = oracle.get(target, math.inf)
                if math.isinf(expected):
                    with pytest.raises(UnalignableError):
                        ctc_loss(lp, target, blank)
                else:
                    assert ctc_loss(lp, target, blank).value == pytest.approx(expected, abs=1e-6)


def test_ctc_blank_not_zero():
    lp = random_log_probs(4, 3, seed=5)
    assert ctc_loss(lp, [0, 1], blank_id=2).value == pytest.approx(ctc_brute_force(lp, [0, 1], 2), abs=1e-9)


def test_ctc_unalignable_repeated_labels():
    assert ctc_min_frames([1, 1]) == 3
    with pytest.raises(UnalignableError) as err:
        ctc_loss(random_log_probs(2, 3), [1, 1], 0)
    assert err.value.loss == math.inf


def test_ctc_gradient_matches_finite_differences():
    lp = random_log_probs(5, 4, seed=3)
    target = [1, 2, 2]
    out = ctc_loss(lp, target, 0)
    fd = central_difference(lambda x: ctc_loss(x, target, 0).value, lp)
    assert rel_error(out.grad, fd) < 1e-4


def test_ctc_handles_impossible_emissions():
    lp = random_log_probs(4, 3, seed=1)
    lp[:, 2] = -np.inf
    out = ctc_loss(lp, [1], 0)
    assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))


def test_ctc_batch_ignores_padding_frames():
    lp = np.stack([random_log_probs(6, 4, 1), random_log_probs(6, 4, 2)])
    out = ctc_batch_loss(lp, [6, 4], [[1, 2], [3]], 0)
    expected = (ctc_loss(lp[0], [1, 2], 0).value + ctc_loss(lp[1, :4], [3], 0).value) / 3
    assert out.value == pytest.approx(expected)
    assert np.all(out.grad[1, 4:] == 0)


def test_label_smoothed_ce_hand_case():
    # p = (0.75, 0.25): loss = -(0.9 ln 0.75 + 0.1 ln 0.25)
    logits = np.array([[math.log(3.0), 0.0]])
    out = label_smoothed_ce(logits, np.array([0]), pad_id=-1, epsilon=0.1)
    assert out.value == pytest.approx(-(0.9 * math.log(0.75) + 0.1 * math.log(0.25)), abs=1e-12)
    assert out.value == pytest.approx(0.3975, abs=1e-4)


def test_label_smoothed_ce_reduces_to_ce_and_skips_pad():
    logits = np.random.default_rng(0).normal(size=(4, 6))
    targets = np.array([1, 2, 0, 3])
    out = label_smoothed_ce(logits, targets, pad_id=0, epsilon=0.0)
    lp = log_softmax(logits)
    expected = -(lp[0, 1] + lp[1, 2] + lp[3, 3]) / 3
    assert out.value == pytest.approx(expected)
    assert out.n_tokens == 3
    assert np.all(out.grad[2] == 0)


def test_label_smoothed_ce_gradient():
    logits = np.random.default_rng(1).normal(size=(3, 5))
    targets = np.array([1, 4, 2])
    out = label_smoothed_ce(logits, targets, 0, 0.1)
    fd = central_difference(lambda x: label_smoothed_ce(x, targets, 0, 0.1).value, logits)
    assert rel_error(out.grad, fd) < 1e-4


def test_word_kd_hand_case():
    # uniform student over V=4, teacher (4/7, 3/7) on tokens {0, 1}
    q = np.array([[4 / 7, 3 / 7]])
    out = word_kd_loss(np.zeros((1, 4)), np.array([[0, 1]]), q)
    expected = sum(v * math.log(v / 0.25) for v in q[0])
    assert out.value == pytest.approx(expected, abs=1e-12)
    assert out.value == pytest.approx(0.703, abs=1e-3)


def test_word_kd_zero_when_student_matches_full_teacher():
    z = np.random.default_rng(2).normal(size=(2, 4))
    p = np.exp(log_softmax(z))
    ids = np.tile(np.arange(4), (2, 1))
    out = word_kd_loss(z, ids, p)
    assert out.value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(out.grad, 0.0, atol=1e-12)


def test_word_kd_one_hot_teacher_equals_ce():
    z = np.random.default_rng(3).normal(size=(3, 5))
    targets = np.array([4, 0, 2])
    kd = word_kd_loss(z, targets[:, None], np.ones((3, 1)))
    ce = label_smoothed_ce(z, targets, pad_id=-1, epsilon=0.0)
    assert kd.value == pytest.approx(ce.value)
    np.testing.assert_allclose(kd.grad, ce.grad)


def test_word_kd_gradient_and_mask():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 6))
    ids = np.array([[0, 2, 5], [1, 3, 4], [0, 1, 2]])
    q = rng.dirichlet(np.ones(3), size=3)
    mask = np.array([True, True, False])
    out = word_kd_loss(z, ids, q, mask)
    fd = central_difference(lambda x: word_kd_loss(x, ids, q, mask).value, z)
    assert rel_error(out.grad, fd) < 1e-4
    assert np.all(out.grad[2] == 0)


def test_word_kd_rejects_unnormalized_rows():
    with pytest.raises(ValueError, match="sums to"):
        word_kd_loss(np.zeros((1, 3)), np.array([[0, 1]]), np.array([[0.5, 0.4]]))


def test_multitask_arithmetic():
    a = LossOutput(2.0, np.ones(2), 3)
    b = LossOutput(4.0, np.ones(2), 1)
    assert multitask_loss(a, b, MultitaskWeights(0.5)).value == 3.0
    assert multitask_loss(a, b, MultitaskWeights(0.0)).value == 2.0
    assert multitask_loss(a, b, MultitaskWeights(1.0)).value == 4.0
    with pytest.raises(ValueError):
        MultitaskWeights(1.5)


def test_torch_loss_bridges_gradient():
    logits = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    targets = np.array([1, 2, 3])
    loss = torch_loss(logits, lambda x: label_smoothed_ce(x, targets, 0, 0.1))
    loss.backward()
    ref = torch.nn.functional.cross_entropy(logits, torch.tensor(targets), label_smoothing=0.0)
    expected = label_smoothed_ce(logits.detach().numpy(), targets, 0, 0.1)
    assert loss.item() == pytest.approx(expected.value)
    np.testing.assert_allclose(logits.grad.numpy(), expected.grad)
    assert ref.item() > 0
