"""Fixed-budget sweeps over grid size, image-token count, pre-training task subset, OCR noise and data size."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..data import Document, generate_corpus
from ..model import ModelConfig
from ..tokenizer import train_bpe
from ..training import FinetuneConfig, LossWeights, PretrainConfig, evaluate_pretrain, finetune, pretrain
from .formats import TASK_ALIASES
from .runner import evaluate_task

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["axis", "setting", "metric_name", "metric_value", "seed", "steps"]

# subset name -> (visual backbone, line weight, grid weight); the LM objective is always on
TASK_SUBSETS = {
    "B": ("none", 0.0, 0.0),
    "B+V": ("conv2x2", 0.0, 0.0),
    "B+V+L": ("conv2x2", 1.0, 0.0),
    "B+V+G": ("conv2x2", 0.0, 1.0),
    "B+V+L+G": ("conv2x2", 1.0, 1.0),
}

DEFAULT_SWEEPS: dict[str, list] = {
    "grid": ["4x1", "2x2", "4x4", "8x8", "12x12"],
    "image-tokens": [32, 64, 128, 256],
    "tasks": list(TASK_SUBSETS),
    "noise": [0.0, 0.05, 0.1, 0.2],
    "data": [4, 8, 16],
}
AXES = tuple(DEFAULT_SWEEPS)


@dataclass(frozen=True)
class AblationBudget:
    """Everything held fixed across the settings of one sweep."""

    pretrain_steps: int = 30
    finetune_steps: int = 30
    batch_size: int = 4
    seed: int = 0
    n_train: int = 16
    n_eval: int = 4
    lr: float = 1e-3
    finetune_lr: float = 1e-3
    warmup: int = 10
    task: str = "vqa"
    vocab_size: int = 600
    decode_len: int = 16
    words: tuple[int, int] = (20, 80)


@dataclass
class AblationRow:
    axis: str
    setting: str
    metric_name: str
    metric_value: float
    seed: int
    steps: int


@dataclass
class AblationReport:
    axis: str
    rows: list[AblationRow]
    seed: int
    steps: int
    meta: dict = field(default_factory=dict)

    def settings(self) -> list[str]:
        return list(dict.fromkeys(r.setting for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(f"{r.axis},{r.setting},{r.metric_name},{r.metric_value!r},{r.seed},{r.steps}\n")
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.to_csv().encode("utf-8"))
        meta_path = path.with_suffix(".meta.json")
        meta_path.write_text(json.dumps(self.meta, sort_keys=True, indent=2) + "\n")


def _setting_config(axis: str, setting, cfg: ModelConfig, budget: AblationBudget) -> tuple[ModelConfig, LossWeights, int | None]:
    """Model config, loss weights and optional training-set size for one setting."""
    weights = LossWeights(1.0, 1.0, 1.0)
    if axis == "grid":
        m, n = (int(v) for v in str(setting).lower().split("x"))
        return dataclasses.replace(cfg, grid_m=m, grid_n=n), weights, None
    if axis == "image-tokens":
        return dataclasses.replace(cfg, image_tokens=int(setting)), weights, None
    if axis == "tasks":
        if setting not in TASK_SUBSETS:
            raise ValueError(f"unknown task subset {setting!r}; choose from {list(TASK_SUBSETS)}")
        visual, k, l = TASK_SUBSETS[setting]
        return dataclasses.replace(cfg, visual=visual), LossWeights(k, l, 1.0), None
    if axis == "noise":
        p = float(setting)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"noise level {p} outside [0, 1]")
        return cfg, weights, None
    if axis == "data":
        size = int(setting)
        if not 1 <= size <= budget.n_train:
            raise ValueError(f"data size {size} outside [1, {budget.n_train}]")
        return cfg, weights, size
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def run_ablation(
    axis: str,
    settings: Sequence | None = None,
    budget: AblationBudget | None = None,
    corpus: Sequence[Document] | None = None,
    base_cfg: ModelConfig | None = None,
) -> AblationReport:
    """Pre-train, fine-tune and score each setting under one budget, on a held-out split."""
    budget = budget or AblationBudget()
    if axis not in DEFAULT_SWEEPS:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    settings = list(DEFAULT_SWEEPS[axis] if settings is None else settings)
    if not settings:
        raise ValueError("an ablation needs at least one setting")
    task = TASK_ALIASES.get(budget.task, budget.task)
    if corpus is None:
        corpus = generate_corpus(budget.n_train + budget.n_eval, seed=budget.seed, words=budget.words)
    if len(corpus) <= budget.n_eval:
        raise ValueError(f"corpus of {len(corpus)} documents leaves nothing to train on after {budget.n_eval} held out")
    train_docs, eval_docs = list(corpus[: -budget.n_eval]), list(corpus[-budget.n_eval :])
    vocab = train_bpe((" ".join(d.texts) for d in train_docs), vocab_size=budget.vocab_size)
    cfg = dataclasses.replace(base_cfg or ModelConfig.preset("tiny"), vocab_size=vocab.size)
    # validate every setting before spending any compute
    plans = [(str(s), *_setting_config(axis, s, cfg, budget)) for s in settings]

    rows: list[AblationRow] = []

    def emit(setting: str, name: str, value: float) -> None:
        rows.append(AblationRow(axis, setting, name, float(value), budget.seed, budget.pretrain_steps))

    def train(cfg_s: ModelConfig, weights: LossWeights, docs: Sequence[Document]):
        hyper = PretrainConfig(
            steps=budget.pretrain_steps, batch_size=budget.batch_size, lr=budget.lr,
            warmup=budget.warmup, seed=budget.seed, weights=weights,
        )
        return pretrain(docs, vocab, cfg_s, hyper).model

    def downstream(model):
        ft = FinetuneConfig(steps=budget.finetune_steps, batch_size=budget.batch_size, lr=budget.finetune_lr, seed=budget.seed)
        model, _ = finetune(model, train_docs, vocab, task, ft)
        return model

    def score(model, noise_p: float = 0.0) -> tuple[str, float]:
        res = evaluate_task(model, eval_docs, vocab, task, noise_p=noise_p, seed=budget.seed,
                            batch_size=budget.batch_size, max_len=budget.decode_len)
        key = "anls" if task == "vqa" else "f1"
        return f"downstream_{key}", res.summary[key]

    if axis == "noise":
        model = downstream(train(cfg, LossWeights(), train_docs))
        for setting, _, _, _ in plans:
            logger.info("ablation %s=%s", axis, setting)
            emit(setting, *score(model, float(setting)))
    else:
        for setting, cfg_s, weights, size in plans:
            logger.info("ablation %s=%s", axis, setting)
            docs = train_docs[:size] if size is not None else train_docs
            model = train(cfg_s, weights, docs)
            held = evaluate_pretrain(model, eval_docs, vocab, cfg_s, seed=budget.seed, batch_size=budget.batch_size)
            emit(setting, "heldout_L_dlm", held["L_dlm"])
            emit(setting, "heldout_grid_acc", held["grid_acc"])
            emit(setting, "heldout_line_acc", held["line_acc"])
            emit(setting, *score(downstream(model)))

    meta = {
        "axis": axis,
        "settings": [p[0] for p in plans],
        "budget": dataclasses.asdict(budget),
        "base_cfg": cfg.to_dict(),
        "n_train": len(train_docs),
        "n_eval": len(eval_docs),
        "eval_ids": [d.id for d in eval_docs],
    }
    return AblationReport(axis, rows, budget.seed, budget.pretrain_steps, meta)
