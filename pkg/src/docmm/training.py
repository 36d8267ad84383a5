"""Span corruption with spatial masking, the three-part pre-training loss, and the training loops."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Document, render_image
from .evaluation.formats import TASKS, TaskExample, build_examples
from .geometry import IGNORED, Box, assign_lines, grid_label, quantize_spatial, sample_token_pairs
from .model import DocModel, ModelConfig, ModelInput, save_checkpoint
from .tokenizer import Vocab, encode_words

logger = logging.getLogger(__name__)

EVAL_EPOCH = 1 << 16  # corruption stream for held-out scoring, disjoint from training epochs
LOG_COLUMNS = ["step", "L_tol", "L_tog", "L_dlm", "L_final", "grid_acc", "line_acc", "lr"]


class NumericalError(RuntimeError):
    """Non-finite loss; the step was aborted and model/optimizer state left untouched."""


class TaskError(ValueError):
    """Documents lack the annotations a task needs."""


@dataclass(frozen=True)
class LossWeights:
    k: float = 1.0  # token-to-line
    l: float = 1.0  # token-to-grid  # noqa: E741
    m_coef: float = 1.0  # denoising LM

    def __post_init__(self):
        if min(self.k, self.l, self.m_coef) < 0 or max(self.k, self.l, self.m_coef) <= 0:
            raise ValueError(f"loss weights must be nonnegative with at least one positive: {self}")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"loss weights need three comma-separated values, got {text!r}")
        return cls(*parts)


# ---------------------------------------------------------------------------
# span corruption
# ---------------------------------------------------------------------------


def _random_segmentation(n_items: int, n_segments: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``n_items`` into ``n_segments`` positive lengths, uniformly over compositions."""
    if n_segments == 1:
        return np.array([n_items])
    cuts = np.sort(rng.choice(np.arange(1, n_items), size=n_segments - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [n_items]]))


def random_span_mask(length: int, noise_density: float, mean_span_len: float, rng: np.random.Generator, max_spans: int | None = None) -> np.ndarray:
    """Boolean noise mask of contiguous spans; spans alternate with kept runs, starting with a kept run."""
    if not 0.0 <= noise_density < 1.0:
        raise ValueError(f"noise_density must be in [0, 1), got {noise_density}")
    if mean_span_len < 1:
        raise ValueError(f"mean_span_len must be >= 1, got {mean_span_len}")
    mask = np.zeros(length, dtype=bool)
    if noise_density == 0.0 or length < 2:
        return mask
    n_noise = min(max(int(round(length * noise_density)), 1), length - 1)
    n_keep = length - n_noise
    n_spans = max(1, int(round(n_noise / mean_span_len)))
    n_spans = min(n_spans, n_noise, n_keep)
    if max_spans is not None:
        n_spans = min(n_spans, max_spans)
    noise_lens = _random_segmentation(n_noise, n_spans, rng)
    keep_lens = _random_segmentation(n_keep, n_spans, rng)
    pos = 0
    for keep, noise in zip(keep_lens, noise_lens):
        pos += keep
        mask[pos : pos + noise] = True
        pos += noise
    return mask


@dataclass
class SpanCorruption:
    input_ids: list[int]
    target_ids: list[int]
    noise_mask: np.ndarray  # over the original tokens
    source: list[int]  # original index behind each input position (a sentinel points at its span's first token)
    sentinel_positions: list[int]  # input positions holding sentinels

    @property
    def n_spans(self) -> int:
        return len(self.sentinel_positions)


def apply_span_mask(ids: Sequence[int], mask: np.ndarray, sentinel_ids: Sequence[int], eos_id: int) -> SpanCorruption:
    """Replace each masked span by one sentinel; the target lists sentinel-delimited spans then EOS."""
    inputs, targets, source, sentinels = [], [], [], []
    k = 0
    i = 0
    n = len(ids)
    while i < n:
        if mask[i]:
            if k >= len(sentinel_ids):
                raise ValueError(f"more than {len(sentinel_ids)} spans; not enough sentinel tokens")
            sentinels.append(len(inputs))
            inputs.append(sentinel_ids[k])
            source.append(i)
            targets.append(sentinel_ids[k])
            while i < n and mask[i]:
                targets.append(int(ids[i]))
                i += 1
            k += 1
        else:
            inputs.append(int(ids[i]))
            source.append(i)
            i += 1
    targets.append(eos_id)
    return SpanCorruption(inputs, targets, np.asarray(mask, dtype=bool), source, sentinels)


def corrupt_spans(
    ids: Sequence[int],
    noise_density: float,
    mean_span_len: float,
    rng: np.random.Generator,
    sentinel_ids: Sequence[int],
    eos_id: int,
) -> SpanCorruption:
    """T5-style span corruption of a (PAD-free) token stream."""
    mask = random_span_mask(len(ids), noise_density, mean_span_len, rng, max_spans=len(sentinel_ids))
    return apply_span_mask(ids, mask, sentinel_ids, eos_id)


def mask_spatial(spatial: np.ndarray, masked_positions, null_bin: int) -> np.ndarray:
    """Copy of ``spatial`` (``... x s x 6``) with the rows at ``masked_positions`` set to the null bin."""
    out = np.array(spatial, copy=True)
    idx = np.asarray(list(masked_positions), dtype=np.int64)
    if idx.size:
        out[..., idx, :] = null_bin
    return out


def spatial_bins(boxes: Sequence[Box], n_bins: int) -> np.ndarray:
    return np.array([quantize_spatial(b, n_bins).as_tuple() for b in boxes], dtype=np.int64).reshape(-1, 6)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class PreparedDoc:
    """Per-document tokenisation, geometry and raster, computed once and reused every epoch."""

    doc_id: str
    ids: np.ndarray  # unpadded subword ids
    boxes: list[Box]
    lines: np.ndarray
    spatial: np.ndarray
    grid: np.ndarray
    image: np.ndarray | None


def prepare_document(doc: Document, vocab: Vocab, cfg: ModelConfig, use_corpus_lines: bool = False) -> PreparedDoc:
    enc = encode_words(doc.boxed_words(), vocab, cfg.max_seq)
    n = enc.length
    if use_corpus_lines and doc.lines is not None:
        word_lines = list(doc.lines)
    else:
        word_lines = assign_lines(doc.boxes) if doc.words else []
    lines = np.array([word_lines[w] for w in enc.word_index[:n]], dtype=np.int64)
    boxes = enc.boxes[:n]
    grid = cfg.grid
    return PreparedDoc(
        doc_id=doc.id,
        ids=enc.ids[:n].copy(),
        boxes=boxes,
        lines=lines,
        spatial=spatial_bins(boxes, cfg.n_bins),
        grid=np.array([grid_label(b, grid) for b in boxes], dtype=np.int64),
        image=render_image(doc, *cfg.raster) if cfg.uses_visual else None,
    )


@dataclass
class PretrainBatch:
    inputs: ModelInput
    grid_targets: np.ndarray  # B x s, IGNORED for PAD / page-edge tokens
    pairs: np.ndarray  # P x 3 rows (batch, i, j)
    pair_labels: np.ndarray  # P
    dec_inputs: np.ndarray  # B x L
    dec_targets: np.ndarray  # B x L, IGNORED beyond each target
    sentinel_positions: list[list[int]] = field(default_factory=list)
    n_target_sentinels: list[int] = field(default_factory=list)


@dataclass
class PretrainOptions:
    noise_density: float = 0.15
    mean_span_len: float = 3.0
    pairs_per_doc: int = 32
    balanced_pairs: bool = True


def make_pretrain_batch(
    docs: Sequence[PreparedDoc],
    vocab: Vocab,
    cfg: ModelConfig,
    opts: PretrainOptions,
    rngs: Sequence[np.random.Generator],
) -> PretrainBatch:
    s = cfg.max_seq
    b = len(docs)
    sentinels = [vocab.sentinel_id(k) for k in range(vocab.n_sentinels)]
    ids = np.full((b, s), vocab.pad_id, dtype=np.int64)
    spatial = np.zeros((b, s, 6), dtype=np.int64)
    text_mask = np.zeros((b, s), dtype=bool)
    grid_t = np.full((b, s), IGNORED, dtype=np.int64)
    pairs, pair_labels, targets, sent_pos, n_tsent = [], [], [], [], []
    for bi, (doc, rng) in enumerate(zip(docs, rngs)):
        corr = corrupt_spans(doc.ids, opts.noise_density, opts.mean_span_len, rng, sentinels, vocab.eos_id)
        n = len(corr.input_ids)
        src = np.asarray(corr.source, dtype=np.int64)
        ids[bi, :n] = corr.input_ids
        text_mask[bi, :n] = True
        if n:
            spatial[bi, :n] = doc.spatial[src]
            grid_t[bi, :n] = doc.grid[src]
        spatial[bi] = mask_spatial(spatial[bi], corr.sentinel_positions, cfg.null_bin)
        for i, j, cls in sample_token_pairs(doc.lines[src] if n else [], opts.pairs_per_doc, rng, opts.balanced_pairs):
            pairs.append((bi, i, j))
            pair_labels.append(cls)
        tgt = corr.target_ids[: cfg.max_dec_len]
        targets.append(tgt)
        sent_pos.append(corr.sentinel_positions)
        n_tsent.append(sum(1 for t in tgt if vocab.is_sentinel(t)))
    images = np.stack([d.image for d in docs]) if cfg.uses_visual else None
    dec_in, dec_t = teacher_forcing(targets, vocab.pad_id)
    return PretrainBatch(
        inputs=ModelInput(ids=ids, spatial=spatial, text_mask=text_mask, images=images),
        grid_targets=grid_t,
        pairs=np.array(pairs, dtype=np.int64).reshape(-1, 3),
        pair_labels=np.array(pair_labels, dtype=np.int64),
        dec_inputs=dec_in,
        dec_targets=dec_t,
        sentinel_positions=sent_pos,
        n_target_sentinels=n_tsent,
    )


def teacher_forcing(targets: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs (PAD as start token, shifted right) and IGNORED-padded labels."""
    length = max(1, max((len(t) for t in targets), default=1))
    dec_in = np.full((len(targets), length), pad_id, dtype=np.int64)
    dec_t = np.full((len(targets), length), IGNORED, dtype=np.int64)
    for i, t in enumerate(targets):
        dec_t[i, : len(t)] = t
        dec_in[i, 1 : len(t)] = t[:-1]
    return dec_in, dec_t


# ---------------------------------------------------------------------------
# losses and steps
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    L_tol: float
    L_tog: float
    L_dlm: float
    L_final: float
    grid_acc: float
    line_acc: float
    lr: float = 0.0
    step: int = 0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in LOG_COLUMNS}


def _accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    valid = targets != IGNORED
    if not valid.any():
        return float("nan")
    return float((logits.argmax(axis=-1)[valid] == targets[valid]).mean())


def pretrain_losses(model: DocModel, batch: PretrainBatch, weights: LossWeights):
    """Forward pass; returns ``(L_tol, L_tog, L_dlm, L_final, grid_acc, line_acc)`` with tensor losses."""
    enc, enc_mask, assembled = model.encode_inputs(batch.inputs)
    s = assembled.text_len
    grid_logits = model.head_token_to_grid(enc, s)
    n_cells = grid_logits.shape[-1]
    l_tog = T.cross_entropy(grid_logits.reshape(-1, n_cells), batch.grid_targets.reshape(-1), IGNORED)
    line_logits = model.head_token_to_line(enc, batch.pairs, s)
    l_tol = T.cross_entropy(line_logits, batch.pair_labels, IGNORED)
    lm_logits = model.decode(enc, enc_mask, batch.dec_inputs)
    l_dlm = T.cross_entropy(lm_logits.reshape(-1, lm_logits.shape[-1]), batch.dec_targets.reshape(-1), IGNORED)
    l_final = l_tol * weights.k + l_tog * weights.l + l_dlm * weights.m_coef
    grid_acc = _accuracy(grid_logits.data, batch.grid_targets)
    line_acc = _accuracy(line_logits.data, batch.pair_labels)
    return l_tol, l_tog, l_dlm, l_final, grid_acc, line_acc


def pretrain_step(model: DocModel, batch: PretrainBatch, weights: LossWeights, opt: T.AdamW, lr: float | None = None) -> StepStats:
    """One joint forward/backward/update over the three pre-training objectives."""
    model.zero_grad()
    l_tol, l_tog, l_dlm, l_final, grid_acc, line_acc = pretrain_losses(model, batch, weights)
    if not np.isfinite(l_final.item()):
        model.zero_grad()
        raise NumericalError(
            f"non-finite pre-training loss (L_tol={l_tol.item()}, L_tog={l_tog.item()}, L_dlm={l_dlm.item()}); step aborted"
        )
    l_final.backward()
    if not opt.step(lr):
        logger.warning("optimizer refused a step with non-finite gradients (%d so far)", opt.refused)
    return StepStats(l_tol.item(), l_tog.item(), l_dlm.item(), l_final.item(), grid_acc, line_acc, lr=opt.lr if lr is None else lr)


def warmup_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warm-up over ``warmup`` updates, then constant. ``step`` counts updates from 1."""
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * step / warmup


def doc_rng(seed: int, doc_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(doc_id.encode("utf-8")), epoch])


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 5e-5
    warmup: int = 1000
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    options: PretrainOptions = field(default_factory=PretrainOptions)
    ckpt_every: int = 0
    use_corpus_lines: bool = False


@dataclass
class PretrainResult:
    model: DocModel
    history: list[StepStats]
    optimizer: T.AdamW


def write_log(history: Sequence[StepStats], path: str | Path) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.DictWriter(out, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for st in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in st.row().items()})


def pretrain(
    docs: Sequence[Document],
    vocab: Vocab,
    cfg: ModelConfig,
    hyper: PretrainConfig,
    out_dir: str | Path | None = None,
    model: DocModel | None = None,
    on_step: Callable[[StepStats], None] | None = None,
) -> PretrainResult:
    """Epochs over the seeded-shuffled corpus with warm-up, clipped AdamW and a CSV log.

    ``on_step`` sees every step's stats; returning ``True`` ends training after that step.
    """
    if not docs:
        raise ValueError("pre-training needs a non-empty corpus")
    if cfg.vocab_size != vocab.size:
        raise ValueError(f"config vocab_size {cfg.vocab_size} != tokenizer size {vocab.size}")
    if model is None:
        from .model import build_model

        model = build_model(cfg, np.random.default_rng(hyper.seed))
    prepared = [prepare_document(d, vocab, cfg, hyper.use_corpus_lines) for d in docs]
    opt = T.AdamW(
        model.parameters(), lr=hyper.lr, betas=hyper.betas, eps=hyper.eps,
        weight_decay=hyper.weight_decay, clip_norm=hyper.clip_norm,
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[StepStats] = []
    step = 0
    epoch = 0
    stop = False
    while step < hyper.steps and not stop:
        order = np.random.default_rng([hyper.seed, epoch]).permutation(len(prepared))
        for start in range(0, len(order), hyper.batch_size):
            if step >= hyper.steps:
                break
            chunk = [prepared[i] for i in order[start : start + hyper.batch_size]]
            rngs = [doc_rng(hyper.seed, d.doc_id, epoch) for d in chunk]
            batch = make_pretrain_batch(chunk, vocab, cfg, hyper.options, rngs)
            lr = warmup_lr(opt.step_count + 1, hyper.lr, hyper.warmup)
            stats = pretrain_step(model, batch, hyper.weights, opt, lr)
            step += 1
            stats.step = step
            history.append(stats)
            if out is not None and hyper.ckpt_every and step % hyper.ckpt_every == 0:
                save_checkpoint(model, out / f"ckpt-{step:06d}", step=step)
            if on_step is not None and on_step(stats) is True:
                stop = True
                break
        epoch += 1
    if out is not None:
        save_checkpoint(model, out / "checkpoint", step=step)
        vocab.save(out / "checkpoint" / "vocab.txt")
        write_log(history, out / "metrics.csv")
    return PretrainResult(model, history, opt)


def evaluate_pretrain(
    model: DocModel,
    docs: Sequence[Document],
    vocab: Vocab,
    cfg: ModelConfig,
    options: PretrainOptions | None = None,
    seed: int = 0,
    batch_size: int = 8,
) -> dict[str, float]:
    """Held-out pre-training metrics under a fixed corruption seed (no parameter updates)."""
    options = options or PretrainOptions()
    prepared = [prepare_document(d, vocab, cfg) for d in docs]
    sums = {"L_tol": 0.0, "L_tog": 0.0, "L_dlm": 0.0}
    grid_hits = grid_total = line_hits = line_total = 0
    n_batches = 0
    weights = LossWeights()
    with T.no_grad():
        for start in range(0, len(prepared), batch_size):
            chunk = prepared[start : start + batch_size]
            batch = make_pretrain_batch(chunk, vocab, cfg, options, [doc_rng(seed, d.doc_id, EVAL_EPOCH) for d in chunk])
            l_tol, l_tog, l_dlm, _, g_acc, l_acc = pretrain_losses(model, batch, weights)
            sums["L_tol"] += l_tol.item()
            sums["L_tog"] += l_tog.item()
            sums["L_dlm"] += l_dlm.item()
            n_batches += 1
            n_grid = int((batch.grid_targets != IGNORED).sum())
            if n_grid:
                grid_hits += round(g_acc * n_grid)
                grid_total += n_grid
            if len(batch.pairs):
                line_hits += round(l_acc * len(batch.pairs))
                line_total += len(batch.pairs)
    result = {k: v / max(n_batches, 1) for k, v in sums.items()}
    result["grid_acc"] = grid_hits / grid_total if grid_total else float("nan")
    result["line_acc"] = line_hits / line_total if line_total else float("nan")
    return result


# ---------------------------------------------------------------------------
# downstream fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-5
    warmup: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0


@dataclass
class EncodedExample:
    example: TaskExample
    ids: np.ndarray
    spatial: np.ndarray
    mask: np.ndarray
    image: np.ndarray | None
    target: list[int]


def encode_examples(examples: Sequence[TaskExample], docs_by_id: dict[str, Document], vocab: Vocab, cfg: ModelConfig) -> list[EncodedExample]:
    images: dict[str, np.ndarray] = {}
    out = []
    for ex in examples:
        enc = encode_words(ex.words, vocab, cfg.max_seq)
        spatial = spatial_bins(enc.boxes, cfg.n_bins)
        image = None
        if cfg.uses_visual:
            if ex.doc_id not in images:
                images[ex.doc_id] = render_image(docs_by_id[ex.doc_id], *cfg.raster)
            image = images[ex.doc_id]
        target = (vocab.encode(ex.target, allow_specials=True) + [vocab.eos_id])[: cfg.max_dec_len]
        out.append(EncodedExample(ex, enc.ids, spatial, enc.mask, image, target))
    return out


def collate_inputs(items: Sequence[EncodedExample]) -> ModelInput:
    images = None
    if items[0].image is not None:
        images = np.stack([it.image for it in items])
    return ModelInput(
        ids=np.stack([it.ids for it in items]),
        spatial=np.stack([it.spatial for it in items]),
        text_mask=np.stack([it.mask for it in items]),
        images=images,
    )


def task_examples(docs: Sequence[Document], task: str) -> list[TaskExample]:
    if task not in TASKS:
        raise TaskError(f"unknown task {task!r}; choose from {TASKS}")
    examples = []
    for doc in docs:
        try:
            examples.extend(build_examples(doc, task))
        except ValueError as exc:
            raise TaskError(str(exc)) from exc
    if not examples:
        raise TaskError(f"no {task} examples in the corpus")
    return examples


def finetune(
    model: DocModel,
    docs: Sequence[Document],
    vocab: Vocab,
    task: str,
    hyper: FinetuneConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[DocModel, list[float]]:
    """Seq2seq fine-tuning on formatter-built targets; pre-training heads are dropped first.

    ``on_step(step, loss)`` returning ``True`` ends training after that step.
    """
    if model.has_heads:
        model.strip_heads()
    cfg = model.cfg
    examples = task_examples(docs, task)
    encoded = encode_examples(examples, {d.id: d for d in docs}, vocab, cfg)
    opt = T.AdamW(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay, clip_norm=hyper.clip_norm)
    losses: list[float] = []
    epoch = 0
    stop = False
    while len(losses) < hyper.steps and not stop:
        order = np.random.default_rng([hyper.seed, epoch]).permutation(len(encoded))
        for start in range(0, len(order), hyper.batch_size):
            if len(losses) >= hyper.steps:
                break
            items = [encoded[i] for i in order[start : start + hyper.batch_size]]
            loss = finetune_step(model, items, opt, warmup_lr(opt.step_count + 1, hyper.lr, hyper.warmup), vocab.pad_id)
            losses.append(loss)
            if on_step is not None and on_step(len(losses), loss) is True:
                stop = True
                break
        epoch += 1
    return model, losses


def finetune_step(model: DocModel, items: Sequence[EncodedExample], opt: T.AdamW, lr: float, pad_id: int = 0) -> float:
    model.zero_grad()
    enc, enc_mask, _ = model.encode_inputs(collate_inputs(items))
    dec_in, dec_t = teacher_forcing([it.target for it in items], pad_id)
    logits = model.decode(enc, enc_mask, dec_in)
    loss = T.cross_entropy(logits.reshape(-1, logits.shape[-1]), dec_t.reshape(-1), IGNORED)
    if not math.isfinite(loss.item()):
        model.zero_grad()
        raise NumericalError("non-finite fine-tuning loss; step aborted")
    loss.backward()
    opt.step(lr)
    return loss.item()


def with_vocab_size(cfg: ModelConfig, vocab: Vocab) -> ModelConfig:
    return dataclasses.replace(cfg, vocab_size=vocab.size)
