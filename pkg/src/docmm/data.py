"""Document schema, JSONL corpus I/O, synthetic layouts, pseudo-glyph rendering and corpus statistics."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import Box, normalize_box

logger = logging.getLogger(__name__)

MAX_SKIP_RATIO = 0.10


class CorpusError(ValueError):
    """Unreadable or too-malformed corpus."""


@dataclass
class QA:
    question: str
    answers: list[str]


@dataclass
class Document:
    id: str
    page_w: float
    page_h: float
    words: list[tuple[str, tuple[float, float, float, float]]]
    lines: list[int] | None = None
    qa: list[QA] = field(default_factory=list)
    entities: dict[str, list[str]] | None = None
    word_labels: list[str] | None = None

    def __post_init__(self):
        if self.page_w <= 0 or self.page_h <= 0:
            raise ValueError(f"document {self.id}: page must be positive, got {self.page_w}x{self.page_h}")
        if self.lines is not None and len(self.lines) != len(self.words):
            raise ValueError(f"document {self.id}: {len(self.lines)} line ids for {len(self.words)} words")
        if self.word_labels is not None and len(self.word_labels) != len(self.words):
            raise ValueError(f"document {self.id}: {len(self.word_labels)} labels for {len(self.words)} words")
        for qa in self.qa:
            if not qa.answers:
                raise ValueError(f"document {self.id}: question {qa.question!r} has no gold answers")

    @cached_property
    def boxes(self) -> list[Box]:
        clamps: Counter = Counter()
        boxes = [normalize_box(b, self.page_w, self.page_h, clamps) for _, b in self.words]
        if clamps["clamped"]:
            logger.warning("document %s: clamped %d boxes to the page", self.id, clamps["clamped"])
        return boxes

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.words]

    def boxed_words(self) -> list[tuple[str, Box]]:
        return list(zip(self.texts, self.boxes))

    def to_json(self) -> dict:
        obj: dict = {
            "id": self.id,
            "page": [self.page_w, self.page_h],
            "words": [{"t": t, "b": list(b)} for t, b in self.words],
        }
        if self.lines is not None:
            obj["lines"] = list(self.lines)
        if self.qa:
            obj["qa"] = [{"q": q.question, "a": list(q.answers)} for q in self.qa]
        if self.entities is not None:
            obj["entities"] = {k: list(v) for k, v in self.entities.items()}
        if self.word_labels is not None:
            obj["word_labels"] = list(self.word_labels)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Document":
        if not isinstance(obj, dict):
            raise ValueError("record is not a JSON object")
        for key in ("id", "page", "words"):
            if key not in obj:
                raise ValueError(f"missing field {key!r}")
        page = obj["page"]
        if not (isinstance(page, list) and len(page) == 2):
            raise ValueError("'page' must be [w, h]")
        words = []
        for i, w in enumerate(obj["words"]):
            box = w.get("b") if isinstance(w, dict) else None
            if not isinstance(w, dict) or not isinstance(w.get("t"), str) or not isinstance(box, list) or len(box) != 4:
                raise ValueError(f"word {i} needs 't' (str) and 'b' ([x1,y1,x3,y3])")
            words.append((w["t"], tuple(float(v) for v in box)))
        qa = [QA(str(q["q"]), [str(a) for a in q["a"]]) for q in obj.get("qa", [])]
        entities = obj.get("entities")
        if entities is not None:
            entities = {str(k): [str(v) for v in vals] for k, vals in entities.items()}
        lines = obj.get("lines")
        doc = cls(
            id=str(obj["id"]),
            page_w=float(page[0]),
            page_h=float(page[1]),
            words=words,
            lines=[int(v) for v in lines] if lines is not None else None,
            qa=qa,
            entities=entities,
            word_labels=[str(v) for v in obj["word_labels"]] if "word_labels" in obj else None,
        )
        doc.boxes  # normalise (and clamp) at load time
        return doc


def read_corpus(path: str | Path) -> tuple[list[Document], list[tuple[int, str]]]:
    """Parse a JSONL corpus, returning documents and ``(line number, reason)`` for skipped lines."""
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    docs: list[Document] = []
    skipped: list[tuple[int, str]] = []
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_json(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                skipped.append((lineno, str(exc)))
                logger.warning("%s:%d: skipped malformed record: %s", path, lineno, exc)
    return docs, skipped


def load_corpus(path: str | Path, max_skip_ratio: float = MAX_SKIP_RATIO) -> list[Document]:
    docs, skipped = read_corpus(path)
    total = len(docs) + len(skipped)
    if total and len(skipped) / total > max_skip_ratio:
        raise CorpusError(f"{path}: {len(skipped)} of {total} lines malformed (limit {max_skip_ratio:.0%})")
    return docs


def save_corpus(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for doc in docs:
            out.write(json.dumps(doc.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic layouts
# ---------------------------------------------------------------------------

TEMPLATES = ("form", "table", "receipt")

_FIELD_NAMES = [
    "name", "date", "address", "phone", "fax", "account", "invoice", "order", "amount", "total",
    "city", "state", "zip", "email", "company", "brand", "region", "contact", "title", "code",
    "period", "budget", "quantity", "reference", "department", "signature", "approved", "program",
]
_FIELD_QUALIFIERS = ["client", "ship", "bill", "due", "start", "end", "unit", "net", "sales", "project"]
_FIRST = ["john", "mary", "lee", "anna", "omar", "ravi", "kim", "paul", "lucy", "ivan", "sara", "tom"]
_LAST = ["smith", "jones", "brown", "garcia", "chen", "patel", "kumar", "davis", "wilson", "moore"]
_COMPANIES = ["acme", "globex", "initech", "umbrella", "hooli", "vandelay", "stark", "wayne", "tyrell"]
_SUFFIX = ["inc", "corp", "ltd", "co", "llc"]
_STREETS = ["main", "oak", "pine", "maple", "cedar", "elm", "lake", "hill", "park", "river"]
_MENU = [
    "tea", "coffee", "latte", "bread", "rice", "noodle", "soup", "salad", "chicken", "beef", "tofu",
    "cake", "juice", "water", "fries", "burger", "pasta", "pizza", "taco", "cap", "cay", "fish",
]
_FILLER = [
    "please", "return", "this", "form", "to", "the", "office", "by", "end", "of", "month", "all",
    "fields", "are", "required", "for", "processing", "see", "instructions", "on", "reverse", "side",
]
_TITLES = ["report", "summary", "request", "statement", "record", "schedule", "invoice", "memo"]


@dataclass
class SyntheticLayoutConfig:
    template: str = "form"
    rows: tuple[int, int] = (4, 40)
    cols: tuple[int, int] = (2, 6)
    words: tuple[int, int] = (20, 400)
    font_px: tuple[float, float] = (9.0, 14.0)
    noise: float = 0.0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; choose from {TEMPLATES}")
        lo, hi = self.words
        if not 1 <= lo <= hi:
            raise ValueError(f"bad word-count range {self.words}")
        if not (1 <= self.rows[0] <= self.rows[1] and 1 <= self.cols[0] <= self.cols[1]):
            raise ValueError("rows/cols ranges must be positive and ordered")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must be in [0, 0.5)")


@dataclass
class _Segment:
    words: list[str]
    label: str
    x: float | None = None  # fixed left edge as a page fraction (table columns, right-aligned prices)
    align_right: bool = False


def _pick(rng: np.random.Generator, items: Sequence[str]) -> str:
    return items[int(rng.integers(len(items)))]


def _price(rng: np.random.Generator) -> str:
    return f"{int(rng.integers(1, 100))}.{int(rng.integers(0, 100)):02d}"


def _value_words(rng: np.random.Generator, field_name: str) -> list[str]:
    kind = int(rng.integers(5))
    if field_name in ("date", "period", "due"):
        return [f"{int(rng.integers(1, 13)):02d}/{int(rng.integers(1, 29)):02d}/{int(rng.integers(1990, 2030))}"]
    if field_name in ("amount", "total", "budget"):
        return ["$" + _price(rng)]
    if kind == 0:
        return [_pick(rng, _FIRST), _pick(rng, _LAST)]
    if kind == 1:
        return [_pick(rng, _COMPANIES), _pick(rng, _SUFFIX)]
    if kind == 2:
        return [str(int(rng.integers(10, 9999))), _pick(rng, _STREETS), "st"]
    if kind == 3:
        return [str(int(rng.integers(1000, 999999)))]
    return [_pick(rng, _FIRST), _pick(rng, _LAST), str(int(rng.integers(1, 99)))]


def _field_key(rng: np.random.Generator, used: set[str]) -> list[str]:
    for _ in range(50):
        name = _pick(rng, _FIELD_NAMES)
        key = [name] if rng.random() < 0.5 else [_pick(rng, _FIELD_QUALIFIERS), name]
        key[-1] = key[-1] + ":"
        if " ".join(key) not in used:
            used.add(" ".join(key))
            return key
    key = [f"field{len(used)}:"]
    used.add(key[0])
    return key


def _count(lines: list[list[_Segment]]) -> int:
    return sum(len(seg.words) for line in lines for seg in line)


def _build_form(rng, cfg, target):
    hi = cfg.words[1]
    lines: list[list[_Segment]] = [[_Segment([_pick(rng, _COMPANIES), _pick(rng, _TITLES)], "header")]]
    used: set[str] = set()
    fields = []
    per_row = int(rng.integers(1, 3))
    count = 2
    while count < target:
        if rng.random() < 0.15:
            filler = [_pick(rng, _FILLER) for _ in range(int(rng.integers(3, 8)))]
            filler = filler[: max(hi - count, 0)]
            if filler:
                lines.append([_Segment(filler, "other")])
                count += len(filler)
            continue
        line = []
        for _ in range(per_row):
            key = _field_key(rng, used)
            value = _value_words(rng, key[-1].rstrip(":"))
            if count + len(key) + len(value) > hi:
                break
            line += [_Segment(key, "question"), _Segment(value, "answer")]
            fields.append((key, value))
            count += len(key) + len(value)
        if not line:
            break
        lines.append(line)
    return lines, fields


def _build_table(rng, cfg, target):
    lo_c, hi_c = cfg.cols
    cols = int(rng.integers(lo_c, hi_c + 1))
    title = [_pick(rng, _COMPANIES), _pick(rng, _TITLES)]
    # title + header row + rows*cols cells must land inside the word budget
    rows = max(cfg.rows[0], -(-(target - len(title) - cols) // cols))
    rows = min(rows, cfg.rows[1], max(1, (cfg.words[1] - len(title) - cols) // cols))
    headers = ["item"] + [f"{_pick(rng, _FIELD_NAMES)}{c}" for c in range(1, cols)]
    lines = [[_Segment(title, "header")]]
    lines.append([_Segment([h], "question", x=c / cols) for c, h in enumerate(headers)])
    cells = []
    for r in range(rows):
        row = [f"{_pick(rng, _MENU)}{r}"] + [str(int(rng.integers(0, 1000))) for _ in range(1, cols)]
        cells.append(row)
        lines.append([_Segment([w], "answer" if c else "other", x=c / cols) for c, w in enumerate(row)])
    return lines, (headers, cells)


def _build_receipt(rng, cfg, target):
    store = [_pick(rng, _COMPANIES), _pick(rng, ["mart", "cafe", "deli", "shop"])]
    lines = [[_Segment(store, "header")]]
    lines.append([_Segment([str(int(rng.integers(1, 999))), _pick(rng, _STREETS), "st"], "other")])
    items = []
    count = 5
    while True:
        remaining = target - count - 2  # keep room for the total line
        if remaining < 2:
            break
        name = [_pick(rng, _MENU) for _ in range(min(int(rng.integers(1, 3)), remaining - 1))]
        price = _price(rng)
        items.append((name, price))
        lines.append([_Segment(name, "question"), _Segment([price], "answer", x=0.95, align_right=True)])
        count += len(name) + 1
    if remaining == 1:
        lines.append([_Segment(["thanks"], "other")])
    total = f"{sum(float(p) for _, p in items):.2f}"
    lines.append([_Segment(["total"], "question"), _Segment([total], "answer", x=0.95, align_right=True)])
    return lines, (store, items, total)


def _layout(rng, cfg, lines, page_w, page_h):
    """Place segments on the page; returns words, raw boxes, line ids and word labels."""
    margin_x, margin_y = 0.05 * page_w, 0.05 * page_h
    avail_h = page_h - 2 * margin_y
    pitch = min(float(rng.uniform(*cfg.font_px)) * 1.6, avail_h / len(lines))
    font = pitch / 1.6
    char_w = 0.55 * font
    space = 1.0 * char_w

    def natural_width(line):
        return sum(len(" ".join(seg.words)) * char_w + 2 * space for seg in line)

    widest = max(natural_width(line) for line in lines)
    scale = min(1.0, (page_w - 2 * margin_x) / widest) if widest > 0 else 1.0
    cw, sp = char_w * scale, space * scale
    out_words, out_boxes, out_lines, out_labels = [], [], [], []
    for li, line in enumerate(lines):
        top = margin_y + li * pitch
        jitter = (float(rng.uniform(-1, 1)) * cfg.noise * font) if cfg.noise else 0.0
        y1, y3 = top + jitter, top + jitter + font
        x = margin_x
        for seg in line:
            seg_w = sum(len(w) * cw for w in seg.words) + sp * (len(seg.words) - 1)
            if seg.x is not None:
                anchor = margin_x + seg.x * (page_w - 2 * margin_x)
                start = anchor - seg_w if seg.align_right else anchor
                x = max(x, start)
            for w in seg.words:
                w_px = len(w) * cw
                out_words.append(w)
                out_boxes.append((round(x, 2), round(y1, 2), round(x + w_px, 2), round(y3, 2)))
                out_lines.append(li)
                out_labels.append(seg.label)
                x += w_px + sp
            x += sp
    return out_words, out_boxes, out_lines, out_labels


def generate_synthetic_doc(rng: np.random.Generator, cfg: SyntheticLayoutConfig | None = None, doc_id: str = "doc") -> Document:
    """One synthetic page (form, table or receipt) with line ids, QA pairs, entities and word labels."""
    cfg = cfg or SyntheticLayoutConfig()
    lo, hi = cfg.words
    target = int(rng.integers(lo, hi + 1))
    if cfg.template == "form":
        lines, fields = _build_form(rng, cfg, target)
        page_w, page_h = 850.0, 1100.0
    elif cfg.template == "table":
        lines, (headers, cells) = _build_table(rng, cfg, target)
        page_w, page_h = 1100.0, 850.0
    else:
        lines, (store, items, total) = _build_receipt(rng, cfg, target)
        page_w, page_h = 400.0, 1000.0

    words, boxes, line_ids, labels = _layout(rng, cfg, lines, page_w, page_h)
    qa: list[QA] = []
    entities: dict[str, list[str]] = {}
    if cfg.template == "form":
        for key, value in fields:
            qa.append(QA(f"what is the {' '.join(key).rstrip(':')}?", [" ".join(value)]))
        entities = {
            "HEADER": [" ".join(seg.words) for line in lines for seg in line if seg.label == "header"],
            "KEY": [" ".join(k) for k, _ in fields],
            "VALUE": [" ".join(v) for _, v in fields],
        }
    elif cfg.template == "table":
        for row in cells:
            c = int(rng.integers(1, len(headers))) if len(headers) > 1 else 0
            qa.append(QA(f"what is {headers[c]} for {row[0]}?", [row[c]]))
        entities = {"HEADER": list(headers), "ITEM": [row[0] for row in cells]}
    else:
        qa.append(QA("what is the total?", [total]))
        for name, price in items[:3]:
            qa.append(QA(f"what is the price of {' '.join(name)}?", [price]))
        entities = {
            "STORE": [" ".join(store)],
            "MENU": [" ".join(n) for n, _ in items],
            "PRICE": [p for _, p in items],
            "TOTAL": [total],
        }
    return Document(
        id=doc_id,
        page_w=page_w,
        page_h=page_h,
        words=list(zip(words, boxes)),
        lines=line_ids,
        qa=qa,
        entities=entities,
        word_labels=labels,
    )


def generate_corpus(n: int, seed: int = 0, template: str | None = None, words: tuple[int, int] = (20, 400)) -> list[Document]:
    """``n`` documents; templates cycle form/table/receipt unless one is fixed."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        tpl = template or TEMPLATES[i % len(TEMPLATES)]
        docs.append(generate_synthetic_doc(rng, SyntheticLayoutConfig(template=tpl, words=words), doc_id=f"syn-{seed}-{i:06d}"))
    return docs


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_image(doc: Document, out_h: int = 32, out_w: int = 16) -> np.ndarray:
    """Rasterise word boxes as dark blocks on white; pixel darkness is the box's area coverage."""
    if out_h % 2 or out_w % 2 or out_h <= 0 or out_w <= 0:
        raise ValueError(f"raster must have positive even dimensions, got {out_h}x{out_w}")
    ink = np.zeros((out_h, out_w), dtype=np.float64)
    edges_y = np.arange(out_h + 1) / out_h
    edges_x = np.arange(out_w + 1) / out_w
    for box in doc.boxes:
        cover_y = np.clip(np.minimum(edges_y[1:], box.y3) - np.maximum(edges_y[:-1], box.y1), 0, None) * out_h
        cover_x = np.clip(np.minimum(edges_x[1:], box.x3) - np.maximum(edges_x[:-1], box.x1), 0, None) * out_w
        ink = np.maximum(ink, np.outer(cover_y, cover_x))
    pixel = 1.0 - np.clip(ink, 0.0, 1.0)
    return np.repeat(pixel[None], 3, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class CorpusStats:
    buckets: list[tuple[int, int, int]]
    n_docs: int
    mean: float
    median: float
    p95: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as out:
            writer = csv.writer(out, lineterminator="\n")
            writer.writerow(["bucket_lo", "bucket_hi", "count"])
            writer.writerows(self.buckets)


def corpus_stats(docs: Iterable[Document], bucket_width: int = 20) -> CorpusStats:
    counts = np.array([len(d.words) for d in docs])
    if counts.size == 0:
        raise CorpusError("corpus_stats needs at least one document")
    lo = (counts.min() // bucket_width) * bucket_width
    hi = (counts.max() // bucket_width + 1) * bucket_width
    buckets = []
    for start in range(int(lo), int(hi), bucket_width):
        n = int(((counts >= start) & (counts < start + bucket_width)).sum())
        buckets.append((start, start + bucket_width, n))
    return CorpusStats(
        buckets=buckets,
        n_docs=int(counts.size),
        mean=float(counts.mean()),
        median=float(np.median(counts)),
        p95=float(np.percentile(counts, 95)),
    )


def iter_batches(items: Sequence, batch_size: int) -> Iterator[list]:
    for start in range(0, len(items), batch_size):
        yield list(items[start : start + batch_size])
