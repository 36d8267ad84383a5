"""Downstream task formatting: encoder prompts, decoder targets, and parsers for decoder output."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..data import Document
from ..geometry import ZERO_BOX, Box, assign_lines
from ..tokenizer import SEP

TASKS = ("vqa", "entity_extraction", "sequence_labeling")
TASK_ALIASES = {"vqa": "vqa", "entity": "entity_extraction", "label": "sequence_labeling"}
DEFAULT_LABELS = ("header", "question", "answer", "other")
_ESCAPED_SEP = "<\\sep>"
_UNESCAPE = re.compile(r"\\\\|<\\sep>")


@dataclass(frozen=True)
class TaskFormat:
    kind: str
    prompt: str
    separator: str = SEP
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "sequence_labeling" and not self.labels:
            raise ValueError("sequence labeling needs a non-empty label set")


VQA_FORMAT = TaskFormat("vqa", "question: {question} context:")
ENTITY_FORMAT = TaskFormat("entity_extraction", "what are entities of {cls}?")
LABEL_FORMAT = TaskFormat("sequence_labeling", "{entity}", labels=DEFAULT_LABELS)


@dataclass
class TaskExample:
    """Encoder words (prompt then context), decoder target text, and what scoring needs."""

    doc_id: str
    kind: str
    key: str  # question, entity class, or entity text
    words: list[tuple[str, Box]]
    target: str
    golds: list[str] = field(default_factory=list)
    label: str | None = None
    index: int = 0

    @property
    def example_id(self) -> str:
        return f"{self.doc_id}#{self.index}"


def _prompt(text: str) -> list[tuple[str, Box]]:
    return [(w, ZERO_BOX) for w in text.split()]


def format_vqa(doc: Document, question, index: int = 0) -> TaskExample:
    """``question`` is a :class:`~docmm.data.QA` or a question string present in ``doc.qa``."""
    if not doc.qa:
        raise ValueError(f"document {doc.id} has no qa annotations")
    if isinstance(question, str):
        matches = [qa for qa in doc.qa if qa.question == question]
        if not matches:
            raise ValueError(f"document {doc.id} has no question {question!r}")
        question = matches[0]
    words = _prompt(VQA_FORMAT.prompt.format(question=question.question)) + doc.boxed_words()
    return TaskExample(doc.id, "vqa", question.question, words, question.answers[0], list(question.answers), index=index)


def escape_entity(text: str) -> str:
    """Backslashes are doubled first so the escape stays reversible."""
    return text.replace("\\", "\\\\").replace(SEP, _ESCAPED_SEP)


def unescape_entity(text: str) -> str:
    return _UNESCAPE.sub(lambda m: "\\" if m.group() == "\\\\" else SEP, text)


def join_entities(entities: list[str]) -> str:
    return f" {SEP} ".join(escape_entity(e) for e in entities)


def parse_entities(output: str) -> list[str]:
    """Split decoder text on the separator; empty pieces are dropped."""
    pieces = (" ".join(p.split()) for p in output.split(SEP))
    return [unescape_entity(p) for p in pieces if p]


def format_entity_extraction(doc: Document, cls: str, index: int = 0) -> TaskExample:
    if doc.entities is None:
        raise ValueError(f"document {doc.id} has no entity annotations")
    entities = list(doc.entities.get(cls, []))
    words = _prompt(ENTITY_FORMAT.prompt.format(cls=cls)) + doc.boxed_words()
    return TaskExample(doc.id, "entity_extraction", cls, words, join_entities(entities), entities, index=index)


@dataclass(frozen=True)
class LabeledEntity:
    text: str
    label: str
    word_indices: tuple[int, ...]


def group_entities(doc: Document) -> list[LabeledEntity]:
    """Maximal runs of consecutive words sharing a label and a text line."""
    if doc.word_labels is None:
        raise ValueError(f"document {doc.id} has no word labels")
    if not doc.words:
        return []
    lines = doc.lines if doc.lines is not None else assign_lines(doc.boxes)
    groups: list[list[int]] = []
    for i, label in enumerate(doc.word_labels):
        prev = groups[-1][-1] if groups else None
        if prev is not None and doc.word_labels[prev] == label and lines[prev] == lines[i]:
            groups[-1].append(i)
        else:
            groups.append([i])
    return [
        LabeledEntity(" ".join(doc.words[i][0] for i in g), doc.word_labels[g[0]], tuple(g))
        for g in groups
    ]


def format_sequence_labeling(doc: Document, entity: LabeledEntity | str, index: int = 0) -> TaskExample:
    """Prompt with the entity's own words and boxes, then the full page; target names its label."""
    if isinstance(entity, str):
        matches = [e for e in group_entities(doc) if e.text == entity]
        if not matches:
            raise ValueError(f"document {doc.id} has no labeled entity {entity!r}")
        entity = matches[0]
    boxes = doc.boxes
    prompt = [(doc.words[i][0], boxes[i]) for i in entity.word_indices]
    target = f"{entity.text} {SEP} {entity.label}"
    return TaskExample(doc.id, "sequence_labeling", entity.text, prompt + doc.boxed_words(), target, [entity.label], entity.label, index)


def parse_label(output: str, labels=DEFAULT_LABELS) -> str | None:
    """Label after the last separator, or ``None`` when it is missing or not a known label."""
    if SEP not in output:
        return None
    tail = output.rsplit(SEP, 1)[1].strip().lower()
    return tail if tail in labels else None


def build_examples(doc: Document, task: str) -> list[TaskExample]:
    task = TASK_ALIASES.get(task, task)
    if task == "vqa":
        if not doc.qa:
            raise ValueError(f"document {doc.id} has no qa annotations (needed for vqa)")
        return [format_vqa(doc, qa, k) for k, qa in enumerate(doc.qa)]
    if task == "entity_extraction":
        if doc.entities is None:
            raise ValueError(f"document {doc.id} has no entities (needed for entity_extraction)")
        return [format_entity_extraction(doc, cls, k) for k, cls in enumerate(sorted(doc.entities))]
    if task == "sequence_labeling":
        if doc.word_labels is None:
            raise ValueError(f"document {doc.id} has no word_labels (needed for sequence_labeling)")
        return [format_sequence_labeling(doc, e, k) for k, e in enumerate(group_entities(doc))]
    raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
