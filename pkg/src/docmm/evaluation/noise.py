"""Synthetic OCR character errors."""

from __future__ import annotations

import string
from typing import Sequence, TypeVar

import numpy as np

CONFUSIONS = {"o": "0", "0": "o", "l": "1", "1": "l", "s": "5", "5": "s", "a": "4", "4": "a", "e": "3", "3": "e"}
_LETTERS = string.ascii_lowercase

W = TypeVar("W", str, tuple)


def confuse_char(ch: str, rng: np.random.Generator) -> str:
    """A different character that OCR could plausibly have read instead of ``ch``."""
    sub = CONFUSIONS.get(ch.lower())
    if sub is not None:
        return sub.upper() if ch.isupper() else sub
    choices = [c for c in _LETTERS if c != ch.lower()]
    out = choices[int(rng.integers(len(choices)))]
    return out.upper() if ch.isupper() else out


def corrupt_word(word: str, p: float, rng: np.random.Generator) -> str:
    """Each character is replaced with probability ``p``; the first replacement ends the word's edits."""
    for i, ch in enumerate(word):
        if rng.random() < p:
            return word[:i] + confuse_char(ch, rng) + word[i + 1 :]
    return word


def inject_ocr_noise(words: Sequence[W], p: float, rng: np.random.Generator) -> list[W]:
    """Corrupt plain strings or ``(text, box)`` pairs; boxes and word count are untouched."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"noise probability must be in [0, 1], got {p}")
    out = []
    for w in words:
        if isinstance(w, str):
            out.append(corrupt_word(w, p, rng) if p > 0 else w)
        else:
            text, *rest = w
            out.append((corrupt_word(text, p, rng) if p > 0 else text, *rest))
    return out
