"""Filterbank augmentation: SpecAugment masking, time stretch, sub-sequence sampling.

Every function takes an explicit ``numpy.random.Generator`` and is pure given
(input, config, generator state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Sample


@dataclass(frozen=True)
class SpecAugmentConfig:
    p: float = 0.5
    freq_mask_par: int = 13
    time_mask_par: int = 20
    freq_mask_num: int = 2
    time_mask_num: int = 2

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        if min(self.freq_mask_par, self.time_mask_par, self.freq_mask_num, self.time_mask_num) < 0:
            raise ValueError("mask pars and nums must be >= 0")


@dataclass(frozen=True)
class TimeStretchConfig:
    p: float = 0.3
    window_w: int = 10
    s_low: float = 0.8
    s_high: float = 1.25
    short_input_threshold: int = 10
    # s > 1 lengthens a window; set to resample by 1/s instead.
    invert: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        if not 0 < self.s_low <= self.s_high:
            raise ValueError("need 0 < s_low <= s_high")
        if self.window_w < 1:
            raise ValueError("window_w must be >= 1")


def _mask_axis(x: np.ndarray, axis: int, par: int, num: int, rng: np.random.Generator) -> None:
    size = x.shape[axis]
    for _ in range(num):
        width = min(int(rng.integers(0, par + 1)), size)
        start = int(rng.integers(0, size - width + 1))
        if axis == 0:
            x[start : start + width, :] = 0.0
        else:
            x[:, start : start + width] = 0.0


def spec_augment(x: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Return ``(output, applied)``.

    Draw order: one uniform for the application test, then for each frequency
    mask (width, start), then for each time mask (width, start). Widths are
    uniform in ``[0, par]`` and clamped to the axis length.
    """
    if rng.random() >= cfg.p:
        return x, False
    out = np.array(x, copy=True)
    _mask_axis(out, 1, cfg.freq_mask_par, cfg.freq_mask_num, rng)
    _mask_axis(out, 0, cfg.time_mask_par, cfg.time_mask_num, rng)
    return out, True


def stretch_window(window: np.ndarray, s: float) -> np.ndarray:
    """Nearest-index resample: output frame j copies input frame floor(j / s)."""
    w = window.shape[0]
    out_len = max(1, math.floor(w * s + 0.5))
    idx = np.minimum(np.floor(np.arange(out_len) / s).astype(int), w - 1)
    return window[idx]


def time_stretch(x: np.ndarray, cfg: TimeStretchConfig, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Return ``(output, applied)``; each window gets its own factor drawn in order."""
    if rng.random() >= cfg.p:
        return x, False
    t = x.shape[0]
    low = 1.0 if t < cfg.short_input_threshold else cfg.s_low
    pieces = []
    for start in range(0, t, cfg.window_w):
        s = float(rng.uniform(low, cfg.s_high))
        if cfg.invert:
            s = 1.0 / s
        pieces.append(stretch_window(x[start : start + cfg.window_w], s))
    return np.concatenate(pieces, axis=0), True


class SubsequenceError(ValueError):
    pass


def subsequence_spans(n_words: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Three inclusive word spans: prefix, suffix and an inner span.

    Second half is ``[n // 2, n - 1]``; first half ``[0, ceil(n / 2) - 1]``;
    quarters have ``ceil(n / 4)`` words.
    """
    if n_words < 4:
        raise SubsequenceError("too short for sub-sequence sampling")
    half_lo = n_words // 2
    half_hi = math.ceil(n_words / 2) - 1
    q = math.ceil(n_words / 4)
    return [
        (0, int(rng.integers(half_lo, n_words))),
        (int(rng.integers(0, half_hi + 1)), n_words - 1),
        (int(rng.integers(0, q)), int(rng.integers(n_words - q, n_words))),
    ]


def subsequence_sample(
    sample: Sample, features: np.ndarray, rng: np.random.Generator
) -> list[tuple[Sample, np.ndarray]]:
    """Cut three segments from a word-aligned sample.

    Returned samples carry the cropped transcript and an empty target, to be
    filled by translating the transcript. Their ``feature_path`` is left equal
    to the parent's; callers write the cropped matrix wherever they keep features.
    """
    if sample.alignments is None:
        raise SubsequenceError("alignments required")
    words = sample.transcript.split()
    spans = {w: (s, e) for w, s, e in sample.alignments}
    n = len(words)
    out = []
    for k, (first, last) in enumerate(subsequence_spans(n, rng)):
        start_frame, end_frame = spans[first][0], spans[last][1]
        crop = features[start_frame:end_frame]
        aligned = tuple(
            (w - first, s - start_frame, e - start_frame) for w, s, e in sample.alignments if first <= w <= last
        )
        derived = replace(
            sample,
            id=f"{sample.id}_sub{k}",
            transcript=" ".join(words[first : last + 1]),
            target="",
            alignments=aligned,
        )
        out.append((derived, crop))
    return out
