"""Metrics, task formats, OCR noise, task evaluation and ablation sweeps."""

from .formats import (
    TASKS,
    LabeledEntity,
    TaskExample,
    TaskFormat,
    build_examples,
    format_entity_extraction,
    format_sequence_labeling,
    format_vqa,
    group_entities,
    join_entities,
    parse_entities,
    parse_label,
)
from .metrics import accuracy, anls, dataset_anls, entity_f1, levenshtein
from .noise import inject_ocr_noise

_LAZY = {
    "evaluate_task": "runner",
    "EvalResult": "runner",
    "run_ablation": "ablation",
    "AblationReport": "ablation",
    "AblationBudget": "ablation",
    "DEFAULT_SWEEPS": "ablation",
}


def __getattr__(name):
    # runner and ablation depend on training, which itself imports the formatters above
    if name in _LAZY:
        import importlib

        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(name)
