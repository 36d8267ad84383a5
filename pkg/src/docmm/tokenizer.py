"""Byte-pair subword vocabulary with sentinels, and word-to-subword alignment.

Words are split on whitespace; each word is prefixed with ``▁`` so spacing
survives a decode round trip. Every subword inherits the box of its word.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import ZERO_BOX, Box

WORD_MARK = "▁"
PAD, EOS, UNK, SEP = "<pad>", "</s>", "<unk>", "<sep>"
N_SENTINELS = 100
_HEADER = "#docmm-bpe v1"


def sentinel_token(k: int) -> str:
    return f"<extra_{k}>"


class TokenizerError(ValueError):
    pass


@dataclass
class Vocab:
    merges: list[tuple[str, str]]
    alphabet: list[str]
    n_sentinels: int = N_SENTINELS
    lowercase: bool = True
    tokens: list[str] = field(init=False)
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.specials = [PAD, EOS, UNK, SEP] + [sentinel_token(k) for k in range(self.n_sentinels)]
        tokens = list(self.specials)
        seen = set(tokens)
        for sym in self.alphabet:
            if sym not in seen:
                tokens.append(sym)
                seen.add(sym)
        for a, b in self.merges:
            merged = a + b
            if merged not in seen:
                tokens.append(merged)
                seen.add(merged)
        self.tokens = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    def sentinel_id(self, k: int) -> int:
        if not 0 <= k < self.n_sentinels:
            raise IndexError(f"sentinel {k} out of range (have {self.n_sentinels})")
        return 4 + k

    def is_sentinel(self, token_id: int) -> bool:
        return 4 <= token_id < 4 + self.n_sentinels

    @property
    def n_specials(self) -> int:
        return len(self.specials)

    # -- encoding ------------------------------------------------------
    def encode_word(self, word: str) -> tuple[int, ...]:
        if self.lowercase:
            word = word.lower()
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = [WORD_MARK] + list(word)
        while len(symbols) > 1:
            best_rank, best_at = None, -1
            for i in range(len(symbols) - 1):
                r = self._ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_at = r, i
            if best_rank is None:
                break
            symbols[best_at : best_at + 2] = [symbols[best_at] + symbols[best_at + 1]]
        unk = self.unk_id
        ids = tuple(self.token_to_id.get(s, unk) for s in symbols)
        self._cache[word] = ids
        return ids

    def encode(self, text: str, allow_specials: bool = False) -> list[int]:
        """Encode whitespace-separated text. With ``allow_specials`` words like ``<sep>`` map to their ids."""
        ids: list[int] = []
        for word in text.split():
            if allow_specials and word in self.token_to_id and self.token_to_id[word] < self.n_specials:
                ids.append(self.token_to_id[word])
            else:
                ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids: Iterable[int], keep_markers: bool = True) -> str:
        """Inverse of :meth:`encode`. PAD and EOS vanish; other specials appear as markers."""
        words: list[str] = []
        current = ""
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise TokenizerError(f"invalid token id {i}")
            if i in (self.pad_id, self.eos_id):
                continue
            tok = self.tokens[i]
            if i < self.n_specials:
                if current:
                    words.append(current)
                    current = ""
                if keep_markers:
                    words.append(tok)
                continue
            if tok.startswith(WORD_MARK):
                if current:
                    words.append(current)
                current = tok[len(WORD_MARK):]
            else:
                current += tok
        if current:
            words.append(current)
        return " ".join(words)

    # -- persistence ---------------------------------------------------
    def save(self, path: str | Path) -> None:
        lines = [
            _HEADER,
            "#specials " + json.dumps({"n_sentinels": self.n_sentinels, "lowercase": self.lowercase}, sort_keys=True),
            "#alphabet " + json.dumps(self.alphabet, ensure_ascii=True),
        ]
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_bytes().decode("utf-8")
        rows = text.split("\n")
        if not rows or rows[0] != _HEADER:
            raise TokenizerError(f"{path}: not a vocab file")
        specials = json.loads(rows[1].removeprefix("#specials "))
        alphabet = json.loads(rows[2].removeprefix("#alphabet "))
        merges = []
        for row in rows[3:]:
            if row:
                a, b = row.split(" ")
                merges.append((a, b))
        return cls(merges=merges, alphabet=alphabet, n_sentinels=specials["n_sentinels"], lowercase=specials["lowercase"])


def train_bpe(texts: Iterable[str], vocab_size: int = 2000, lowercase: bool = True, n_sentinels: int = N_SENTINELS) -> Vocab:
    """Learn merges greedily by pair frequency; ties go to the lexicographically smallest pair."""
    n_specials = 4 + n_sentinels
    if vocab_size <= n_specials:
        raise TokenizerError(f"vocab_size {vocab_size} leaves no room beyond {n_specials} special tokens")
    word_freq: Counter[str] = Counter()
    for text in texts:
        if lowercase:
            text = text.lower()
        word_freq.update(text.split())
    if not word_freq:
        raise TokenizerError("cannot train a vocabulary on an empty corpus")

    words = sorted(word_freq)
    seqs = [[WORD_MARK] + list(w) for w in words]
    freqs = [word_freq[w] for w in words]
    alphabet = sorted({s for seq in seqs for s in seq})
    if vocab_size <= n_specials + len(alphabet):
        raise TokenizerError(
            f"vocab_size {vocab_size} must exceed specials ({n_specials}) + alphabet ({len(alphabet)})"
        )

    pair_count: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for wi, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_count[pair] += freqs[wi]
            where.setdefault(pair, set()).add(wi)
    heap = [(-c, p) for p, c in pair_count.items()]
    heapq.heapify(heap)

    known = set(alphabet)
    n_tokens = n_specials + len(alphabet)
    merges: list[tuple[str, str]] = []
    while n_tokens < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_count.get(pair, 0) != -neg or -neg <= 0:
            continue
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            n_tokens += 1
        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop(pair, ())):
            seq = seqs[wi]
            f = freqs[wi]
            for p in zip(seq, seq[1:]):
                pair_count[p] -= f
                touched.add(p)
            out: list[str] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[wi] = out
            for p in zip(out, out[1:]):
                pair_count[p] += f
                touched.add(p)
                where.setdefault(p, set()).add(wi)
        pair_count.pop(pair, None)
        for p in touched:
            c = pair_count.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_count.pop(p, None)
    return Vocab(merges=merges, alphabet=alphabet, n_sentinels=n_sentinels, lowercase=lowercase)


@dataclass
class TokenizedWord:
    word_index: int
    ids: tuple[int, ...]
    box: Box


@dataclass
class Encoding:
    """A subword stream cut and padded to exactly ``max_seq`` positions."""

    ids: np.ndarray
    boxes: list[Box]
    word_index: np.ndarray
    mask: np.ndarray
    words: list[TokenizedWord]

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def encode_words(words: Sequence[tuple[str, Box]], vocab: Vocab, max_seq: int) -> Encoding:
    """Tokenise boxed words, keep the first ``max_seq`` subwords (mid-word cuts allowed) and pad."""
    ids = np.full(max_seq, vocab.pad_id, dtype=np.int64)
    word_index = np.full(max_seq, -1, dtype=np.int64)
    boxes = [ZERO_BOX] * max_seq
    kept: list[TokenizedWord] = []
    pos = 0
    for wi, (text, box) in enumerate(words):
        if pos >= max_seq:
            break
        sub = vocab.encode_word(text) if text else ()
        sub = sub[: max_seq - pos]
        if not sub:
            continue
        kept.append(TokenizedWord(wi, sub, box))
        for tid in sub:
            ids[pos] = tid
            word_index[pos] = wi
            boxes[pos] = box
            pos += 1
    mask = np.zeros(max_seq, dtype=bool)
    mask[:pos] = True
    return Encoding(ids=ids, boxes=boxes, word_index=word_index, mask=mask, words=kept)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    return vocab.decode(ids)
