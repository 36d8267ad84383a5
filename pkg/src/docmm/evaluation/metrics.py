"""Answer and entity scoring."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

ANLS_THRESHOLD = 0.5


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return levenshtein(a, b) / longest if longest else 0.0


def anls(pred: str, golds: Sequence[str], tau: float = ANLS_THRESHOLD) -> float:
    """Best thresholded similarity of ``pred`` against any gold answer, case-insensitive."""
    if not golds:
        raise ValueError("anls needs at least one gold answer")
    p = pred.strip().lower()
    best = 0.0
    for g in golds:
        nl = normalized_levenshtein(p, g.strip().lower())
        best = max(best, 1.0 - nl if nl < tau else 0.0)
    return best


def dataset_anls(preds: Sequence[str], golds: Sequence[Sequence[str]], tau: float = ANLS_THRESHOLD) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} questions")
    if not preds:
        raise ValueError("dataset ANLS of an empty set is undefined")
    return sum(anls(p, g, tau) for p, g in zip(preds, golds)) / len(preds)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def _entity_key(item: tuple[str, str]) -> tuple[str, str]:
    cls, text = item
    return normalize_text(cls), normalize_text(text)


def entity_f1(pred: Iterable[tuple[str, str]], gold: Iterable[tuple[str, str]]) -> tuple[float, float, float]:
    """Multiset exact-match precision, recall and F1 over ``(class, text)`` pairs.

    Both sides empty scores ``(1, 1, 1)``; one side empty scores zeros.
    """
    p = Counter(_entity_key(x) for x in pred)
    g = Counter(_entity_key(x) for x in gold)
    n_pred, n_gold = sum(p.values()), sum(g.values())
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_gold == 0:
        return 0.0, 0.0, 0.0
    matches = sum((p & g).values())
    precision = matches / n_pred
    recall = matches / n_gold
    f1 = 2 * precision * recall / (precision + recall) if matches else 0.0
    return precision, recall, f1


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} golds")
    if not preds:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(normalize_text(p) == normalize_text(g) for p, g in zip(preds, golds)) / len(preds)
