"""Case-sensitive corpus BLEU-4 and word error rate."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAX_ORDER = 4

# Punctuation split off from neighbouring characters before whitespace tokenization.
_PUNCT = re.compile(r"([.,!?;:\"()\[\]{}])")


def tokenize(line: str) -> list[str]:
    return _PUNCT.sub(r" \1 ", line).split()


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def line(self) -> str:
        p = "/".join(f"{x * 100:.1f}" for x in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f} {p} (BP = {self.brevity_penalty:.3f} "
            f"ratio = {self.hyp_len / max(self.ref_len, 1):.3f} hyp_len = {self.hyp_len} ref_len = {self.ref_len})"
        )


@dataclass(frozen=True)
class WerReport:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    n_ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str]) -> BleuReport:
    """Corpus BLEU over one reference per line, no smoothing.

    An n-gram order for which neither hypotheses nor references contain any
    n-gram is skipped, so identical corpora of very short lines still score 100.
    An empty hypothesis corpus scores 0 with brevity penalty 0.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"line count mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    ref_totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = tokenize(h), tokenize(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
            ref_totals[n - 1] += max(len(rt) - n + 1, 0)

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, 0, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    logs = []
    for m, t, rt in zip(matches, totals, ref_totals):
        if t == 0 and rt == 0:
            continue
        if m == 0:
            return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
        logs.append(math.log(m / t))
    bleu = 100.0 * bp * math.exp(sum(logs) / len(logs))
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def wer(hyp: Sequence[str] | str, ref: Sequence[str] | str) -> WerReport:
    """Word-level Levenshtein alignment with unit costs."""
    if isinstance(hyp, str):
        hyp = hyp.split()
    if isinstance(ref, str):
        ref = ref.split()
    if not ref:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    # dist[i][j]: (cost, subs, ins, dels) aligning ref[:i] with hyp[:j]
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (c, s, ins, d)
            else:
                best = (c + 1, s + 1, ins, d)
            c, s, ins, d = cur[j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, ins + 1, d)
            c, s, ins, d = prev[j]
            if c + 1 < best[0]:
                best = (c + 1, s, ins, d + 1)
            cur.append(best)
        prev = cur
    cost, subs, ins, dels = prev[m]
    return WerReport(cost / n, subs, ins, dels, n)


def corpus_wer(hyps: Sequence[str], refs: Sequence[str]) -> WerReport:
    if len(hyps) != len(refs):
        raise ValueError("line count mismatch")
    s = i = d = n = 0
    for h, r in zip(hyps, refs):
        rep = wer(h, r)
        s, i, d, n = s + rep.substitutions, i + rep.insertions, d + rep.deletions, n + rep.n_ref_words
    return WerReport((s + i + d) / n, s, i, d, n)
