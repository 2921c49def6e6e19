"""Beam search with output temperature and multi-model ensembling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import Domain, Vocabulary
from .model import EncoderOut, ModelError, _Seq2Seq


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 200
    temperature: float = 1.0
    length_norm: bool = True
    # average log-probabilities instead of probabilities across ensemble members
    log_space_ensemble: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool

    def normalized(self, length_norm: bool) -> float:
        return self.score / max(len(self.tokens), 1) if length_norm else self.score


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T) along the last axis."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _encode(model: _Seq2Seq, source, tag: Domain | None) -> EncoderOut:
    dtype = next(model.parameters()).dtype
    tags = torch.tensor([tag.index]) if tag is not None and model.cfg.tag_mode != "none" else None
    if model.cfg.kind == "speech":
        x = torch.tensor(np.asarray(source), dtype=dtype)[None]
        return model.encode(x, [x.shape[1]], tags)
    src = torch.as_tensor(list(source), dtype=torch.long)[None]
    return model.encode(src, tags=tags)


def _expand(enc: EncoderOut, n: int) -> EncoderOut:
    ctc = None if enc.ctc_states is None else enc.ctc_states.expand(n, -1, -1)
    return EncoderOut(enc.memory.expand(n, -1, -1), enc.padding_mask.expand(n, -1), ctc, enc.lengths.expand(n))


def _banned(vocab_size: int, vocab: Vocabulary | None) -> torch.Tensor:
    """Reserved ids other than eos can never be generated."""
    mask = torch.zeros(vocab_size, dtype=torch.bool)
    if vocab is not None:
        mask[: vocab.n_reserved] = True
        mask[vocab.eos_id] = False
        mask[vocab.unk_id] = False
    return mask


@torch.no_grad()
def next_token_log_probs(
    models: Sequence[_Seq2Seq], encs: Sequence[EncoderOut], prefixes: torch.Tensor, tag: Domain | None, cfg: DecodeConfig
) -> torch.Tensor:
    """Combined log-probabilities (B x V) for the token after each prefix."""
    tags = None if tag is None else torch.full((prefixes.shape[0],), tag.index)
    per_model = []
    for m, enc in zip(models, encs):
        logits = m.decode(prefixes, _expand(enc, prefixes.shape[0]), tags)[:, -1].double()
        per_model.append(torch.log_softmax(logits / cfg.temperature, dim=-1))
    stacked = torch.stack(per_model)
    if cfg.log_space_ensemble:
        return stacked.mean(dim=0)
    return torch.logsumexp(stacked, dim=0) - np.log(len(per_model))


@torch.no_grad()
def beam_search(
    models: Sequence[_Seq2Seq],
    source,
    tag: Domain | None,
    cfg: DecodeConfig,
    vocab: Vocabulary | None = None,
    bos_id: int = 1,
    eos_id: int = 2,
) -> list[Hypothesis]:
    """All hypotheses kept at termination, best first."""
    if not models:
        raise ValueError("need at least one model")
    vocab_size = models[0].cfg.vocab_size
    for m in models[1:]:
        if m.cfg.vocab_size != vocab_size:
            raise ModelError("ensemble members have different vocabularies")
    if vocab is not None:
        bos_id, eos_id = vocab.bos_id, vocab.eos_id
    for m in models:
        m.eval()
    encs = [_encode(m, source, tag) for m in models]
    banned = _banned(vocab_size, vocab)
    k = cfg.beam_size

    alive = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for step in range(cfg.max_len):
        prefixes = torch.tensor([[bos_id] + h.tokens for h in alive], dtype=torch.long)
        lp = next_token_log_probs(models, encs, prefixes, tag, cfg)
        lp[:, banned] = float("-inf")
        if step == cfg.max_len - 1:
            # last step: only eos may follow
            keep = lp[:, eos_id].clone()
            lp.fill_(float("-inf"))
            lp[:, eos_id] = keep
        scores = torch.tensor([h.score for h in alive], dtype=torch.float64)[:, None] + lp
        flat = scores.reshape(-1)
        n_cand = min(2 * k, int(torch.isfinite(flat).sum()))
        top = torch.topk(flat, n_cand)
        new_alive = []
        for rank, (score, idx) in enumerate(zip(top.values.tolist(), top.indices.tolist())):
            b, tok = divmod(idx, vocab_size)
            hyp = Hypothesis(alive[b].tokens + [tok], score, tok == eos_id)
            if hyp.finished:
                # an eos candidate only counts when it ranks within the beam
                if rank < k:
                    finished.append(hyp)
            elif len(new_alive) < k:
                new_alive.append(hyp)
            if len(new_alive) >= k:
                break
        alive = new_alive
        if len(finished) >= k or not alive:
            break
        if not cfg.length_norm and finished:
            # scores only decrease, so no alive prefix can beat the best finished one
            if max(h.score for h in finished) >= max(h.score for h in alive):
                break
    pool = finished or alive
    return sorted(pool, key=lambda h: h.normalized(cfg.length_norm), reverse=True)


def generate(
    models: Sequence[_Seq2Seq],
    source,
    tag: Domain | None,
    cfg: DecodeConfig,
    vocab: Vocabulary | None = None,
) -> list[int]:
    """Best hypothesis without bos/eos."""
    best = beam_search(models, source, tag, cfg, vocab)[0]
    return [t for t in best.tokens if t != (vocab.eos_id if vocab else 2)]


@torch.no_grad()
def greedy_batch(
    model: _Seq2Seq,
    inputs: torch.Tensor,
    input_lengths: torch.Tensor,
    tags: torch.Tensor | None,
    max_len: int,
    temperature: float = 1.0,
    vocab: Vocabulary | None = None,
) -> list[list[int]]:
    """Batched argmax decoding; returns token ids without bos/eos."""
    model.eval()
    bos, eos = (vocab.bos_id, vocab.eos_id) if vocab else (1, 2)
    tags = tags if model.cfg.tag_mode != "none" else None
    enc = model.encode(inputs, input_lengths, tags)
    b = inputs.shape[0]
    banned = _banned(model.cfg.vocab_size, vocab)
    prev = torch.full((b, 1), bos, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    for step in range(max_len):
        logits = model.decode(prev, enc, tags)[:, -1] / temperature
        logits[:, banned] = float("-inf")
        if step == max_len - 1:
            nxt = torch.full((b,), eos, dtype=torch.long)
        else:
            nxt = logits.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, eos), nxt)
        prev = torch.cat([prev, nxt[:, None]], dim=1)
        done |= nxt == eos
        if bool(done.all()):
            break
    out = []
    for row in prev[:, 1:].tolist():
        out.append(row[: row.index(eos)] if eos in row else row)
    return out
