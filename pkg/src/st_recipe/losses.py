"""Training objectives with closed-form gradients.

Each loss is a numpy function returning a :class:`LossOutput` whose ``grad`` is
the derivative of ``value`` with respect to the loss input. :func:`torch_loss`
plugs any of them into autograd so model parameters receive these gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

NEG_INF = -np.inf


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray | tuple[np.ndarray, ...]
    n_tokens: int


@dataclass(frozen=True)
class MultitaskWeights:
    lambda_ctc: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError("lambda_ctc must be in [0, 1]")


class UnalignableError(ValueError):
    """The CTC target cannot be emitted in the available number of frames."""

    loss = math.inf

    def __init__(self, n_frames: int, needed: int):
        super().__init__(f"unalignable: target needs {needed} frames, got {n_frames}")
        self.n_frames = n_frames
        self.needed = needed


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def label_smoothed_ce(logits: np.ndarray, targets: np.ndarray, pad_id: int, epsilon: float = 0.1) -> LossOutput:
    """Cross entropy against (1 - eps) on the gold token and eps / (V - 1) elsewhere.

    Averaged over non-pad rows; pad rows get zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n, v = logits.shape
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must be in [0, 1)")
    if v < 2 and epsilon > 0:
        raise ValueError("label smoothing needs at least 2 classes")
    if np.any((targets < 0) | (targets >= v)):
        raise ValueError("target id out of range")
    mask = targets != pad_id
    n_tok = int(mask.sum())
    lp = log_softmax(logits)
    q = np.full((n, v), epsilon / (v - 1) if v > 1 else 0.0)
    q[np.arange(n), targets] = 1.0 - epsilon
    per_row = -(q * lp).sum(axis=1)
    denom = max(n_tok, 1)
    grad = (np.exp(lp) - q) * mask[:, None] / denom
    return LossOutput(float(per_row[mask].sum() / denom), grad, n_tok)


def word_kd_loss(
    student_logits: np.ndarray,
    teacher_ids: np.ndarray,
    teacher_probs: np.ndarray,
    mask: np.ndarray | None = None,
    atol: float = 1e-6,
) -> LossOutput:
    """KL(teacher || student) restricted to each row's top-K teacher support.

    ``teacher_ids``/``teacher_probs`` are N x K; each row must sum to 1. Rows with
    ``mask == False`` are ignored.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    ids = np.asarray(teacher_ids, dtype=np.int64)
    q = np.asarray(teacher_probs, dtype=np.float64)
    n, v = z.shape
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    sums = q.sum(axis=1)
    bad = mask & (np.abs(sums - 1.0) > atol)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"teacher row {row} sums to {sums[row]!r}, expected 1")
    n_tok = int(mask.sum())
    denom = max(n_tok, 1)
    lp = log_softmax(z)
    rows = np.arange(n)[:, None]
    lp_k = lp[rows, ids]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - lp_k), 0.0)
    per_row = terms.sum(axis=1)
    dense_q = np.zeros_like(z)
    np.add.at(dense_q, (np.broadcast_to(rows, ids.shape), ids), q)
    grad = (np.exp(lp) * sums[:, None] - dense_q) * mask[:, None] / denom
    return LossOutput(float(per_row[mask].sum() / denom), grad, n_tok)


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    stacked = np.stack(xs)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), safe + np.log(np.exp(stacked - safe).sum(axis=0)), NEG_INF)


def ctc_min_frames(target: Sequence[int]) -> int:
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank_id: int) -> LossOutput:
    """Negative log-likelihood of ``target`` under CTC, with gradient w.r.t. ``log_probs``.

    ``log_probs`` is T x C (C includes the blank). The value is the sequence
    NLL (not divided by the target length).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len = lp.shape[0]
    target = [int(c) for c in target]
    needed = ctc_min_frames(target)
    if t_len < needed:
        raise UnalignableError(t_len, needed)
    ext = np.full(2 * len(target) + 1, blank_id, dtype=np.int64)
    ext[1::2] = target
    s_len = len(ext)
    # s-2 -> s skip allowed for labels that differ from the label two back
    skip = np.zeros(s_len, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]  # T x S

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([NEG_INF], prev[:-1]))
        shift2 = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev))[:s_len], NEG_INF)
        alpha[t] = _logsumexp(prev, shift1, shift2) + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_back = np.concatenate((skip, [False, False]))[2:]  # s -> s+2 allowed
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate((nxt[1:], [NEG_INF]))
        shift2 = np.where(skip_back, np.concatenate((nxt, [NEG_INF, NEG_INF]))[2:], NEG_INF)
        beta[t] = _logsumexp(nxt, shift1, shift2) + emit[t]

    ends = [alpha[-1, -1]] + ([alpha[-1, -2]] if s_len > 1 else [])
    log_p = float(_logsumexp(*[np.asarray(e) for e in ends]))
    if not np.isfinite(log_p):
        raise UnalignableError(t_len, needed)

    # occupancy of extended state s at frame t, divided by its emission
    with np.errstate(invalid="ignore"):
        occ = np.where(np.isfinite(emit), alpha + beta - emit - log_p, NEG_INF)
    grad = np.zeros_like(lp)
    with np.errstate(under="ignore"):
        np.add.at(grad, (slice(None), ext), -np.exp(occ))
    return LossOutput(-log_p, grad, len(target))


def ctc_batch_loss(
    log_probs: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]], blank_id: int
) -> LossOutput:
    """Sum of per-sequence CTC NLLs divided by the total number of target tokens.

    ``log_probs`` is B x T x C; frames past ``lengths[b]`` get zero gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    grad = np.zeros_like(lp)
    total = 0.0
    n_tok = sum(len(t) for t in targets)
    denom = max(n_tok, 1)
    for b, (length, target) in enumerate(zip(lengths, targets)):
        out = ctc_loss(lp[b, :length], target, blank_id)
        total += out.value
        grad[b, :length] = out.grad
    return LossOutput(total / denom, grad / denom, n_tok)


def multitask_loss(primary: LossOutput, ctc: LossOutput, w: MultitaskWeights) -> LossOutput:
    lam = w.lambda_ctc
    value = (1.0 - lam) * primary.value + lam * ctc.value
    return LossOutput(value, ((1.0 - lam) * primary.grad, lam * ctc.grad), primary.n_tokens)


class _NumpyLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, inp: torch.Tensor, fn: Callable[[np.ndarray], LossOutput]):
        out = fn(inp.detach().cpu().numpy())
        ctx.save_for_backward(torch.as_tensor(out.grad, dtype=inp.dtype, device=inp.device))
        return inp.new_tensor(out.value)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad * grad_output, None


def torch_loss(inp: torch.Tensor, fn: Callable[[np.ndarray], LossOutput]) -> torch.Tensor:
    """Scalar tensor whose backward pass uses ``fn``'s analytic gradient."""
    return _NumpyLoss.apply(inp, fn)
