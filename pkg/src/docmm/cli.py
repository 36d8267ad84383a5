"""Command line entry point: ``docmm <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from . import __version__
from .data import CorpusError, corpus_stats, generate_corpus, load_corpus, save_corpus
from .evaluation.formats import TASK_ALIASES
from .geometry import GridConfig
from .model import PRESETS, CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .tokenizer import TokenizerError, Vocab, train_bpe
from .training import (
    FinetuneConfig,
    LossWeights,
    NumericalError,
    PretrainConfig,
    TaskError,
    finetune,
    pretrain,
)

logger = logging.getLogger("docmm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DOCF_SEED"
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _grid(text: str) -> GridConfig:
    try:
        return GridConfig.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _weights(text: str) -> LossWeights:
    try:
        return LossWeights.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _budget(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"budget must be STEPS or PRETRAIN,FINETUNE, got {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"budget must be STEPS or PRETRAIN,FINETUNE, got {text!r}")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docmm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"docmm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON file of flag values; explicit flags take precedence")
        if seed:
            p.add_argument("--seed", type=int, default=0, help=f"random seed (overridden by ${SEED_ENV})")

    p = sub.add_parser("gen-data", help="write a synthetic JSONL corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--template", choices=["form", "table", "receipt", "mixed"], default="mixed")
    p.add_argument("--words-min", type=int, default=20)
    p.add_argument("--words-max", type=int, default=400)

    p = sub.add_parser("stats", help="word-count histogram of a corpus")
    common(p, seed=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bucket-width", type=int, default=20)

    p = sub.add_parser("pretrain", help="joint line / grid / denoising pre-training")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", choices=sorted(PRESETS), default="small")
    p.add_argument("--grid", type=_grid, default=GridConfig(4, 4))
    p.add_argument("--image-tokens", type=int, default=128)
    p.add_argument("--visual", default="conv2x2")
    p.add_argument("--loss-weights", type=_weights, default=LossWeights(1.0, 1.0, 1.0))
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--max-seq", type=int, default=None, help="subword budget (preset default when omitted)")
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="downstream fine-tuning from a checkpoint (pre-training heads dropped)")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="greedy-decode a downstream task and score it")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--noise-p", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out", required=True)

    from .evaluation.ablation import AXES

    p = sub.add_parser("ablate", help="fixed-budget ablation sweep")
    common(p)
    p.add_argument("--axis", choices=list(AXES), required=True)
    p.add_argument("--budget", type=_budget, default=(30, 30), help="STEPS or PRETRAIN,FINETUNE steps per setting")
    p.add_argument("--settings", default=None, help="comma-separated sweep (default: the standard sweep for the axis)")
    p.add_argument("--corpus", default=None, help="JSONL corpus (default: a generated synthetic corpus)")
    p.add_argument("--size", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--task", choices=sorted(TASK_ALIASES), default="vqa")
    p.add_argument("--n-train", type=int, default=16)
    p.add_argument("--n-eval", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def _git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() or "unknown"


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, GridConfig):
        return str(value)
    if isinstance(value, LossWeights):
        return f"{value.k},{value.l},{value.m_coef}"
    if isinstance(value, tuple):
        return list(value)
    return value


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("gen-data", "stats", "ablate"):
        return out.with_name(out.name + ".manifest.json")
    return out / MANIFEST_NAME


def write_manifest(args, argv, **updates) -> dict:
    flags = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "git_describe": _git_describe(),
        "corpus_sha256": None,
        "started_at": _now(),
    }
    corpus = getattr(args, "corpus", None)
    if corpus:
        try:
            manifest["corpus_sha256"] = file_digest(corpus)
        except OSError as exc:
            raise CorpusError(f"cannot read corpus {corpus}: {exc}") from exc
    manifest.update(updates)
    path = manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def finish_manifest(args, manifest: dict, status: str) -> None:
    manifest.update(finished_at=_now(), status=status)
    manifest_path(args).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    if not 1 <= args.words_min <= args.words_max:
        raise UsageError("need 1 <= --words-min <= --words-max")
    template = None if args.template == "mixed" else args.template
    docs = generate_corpus(args.n, seed=args.seed, template=template, words=(args.words_min, args.words_max))
    save_corpus(docs, args.out)
    logger.info("wrote %d documents to %s", len(docs), args.out)


def cmd_stats(args) -> None:
    docs = load_corpus(args.corpus)
    stats = corpus_stats(docs, bucket_width=args.bucket_width)
    stats.to_csv(args.out)
    logger.info("%d documents: mean %.1f, median %.1f, p95 %.1f words", stats.n_docs, stats.mean, stats.median, stats.p95)


def _load_vocab(ckpt: Path) -> Vocab:
    path = ckpt / "vocab.txt"
    if not path.exists():
        raise CheckpointError(f"{ckpt} has no vocab.txt")
    return Vocab.load(path)


def cmd_pretrain(args) -> None:
    docs = load_corpus(args.corpus)
    if not docs:
        raise CorpusError(f"{args.corpus} holds no documents")
    vocab = train_bpe((" ".join(d.texts) for d in docs), vocab_size=args.vocab_size)
    overrides = dict(
        grid_m=args.grid.m, grid_n=args.grid.n, image_tokens=args.image_tokens,
        visual=args.visual, vocab_size=vocab.size,
    )
    if args.max_seq is not None:
        overrides["max_seq"] = args.max_seq
    cfg = ModelConfig.preset(args.size, **overrides)
    hyper = PretrainConfig(
        steps=args.steps, batch_size=args.batch_size, lr=args.lr, warmup=args.warmup,
        weight_decay=args.weight_decay, clip_norm=args.clip, seed=args.seed,
        weights=args.loss_weights, ckpt_every=args.ckpt_every,
    )
    out = Path(args.out)

    def progress(st):
        if st.step % 50 == 0 or st.step == hyper.steps:
            logger.info("step %d L_final %.4f grid_acc %.3f line_acc %.3f", st.step, st.L_final, st.grid_acc, st.line_acc)

    pretrain(docs, vocab, cfg, hyper, out_dir=out, on_step=progress)
    logger.info("checkpoint written to %s", out / "checkpoint")


def cmd_finetune(args) -> None:
    ckpt = Path(args.ckpt)
    model, manifest = load_checkpoint(ckpt, strip_heads=True)
    vocab = _load_vocab(ckpt)
    docs = load_corpus(args.corpus)
    task = TASK_ALIASES[args.task]
    hyper = FinetuneConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, warmup=args.warmup, seed=args.seed)
    model, losses = finetune(model, docs, vocab, task, hyper)
    out = Path(args.out)
    save_checkpoint(model, out / "checkpoint", step=args.steps, extra={"task": task, "parent": manifest.get("sha256")})
    vocab.save(out / "checkpoint" / "vocab.txt")
    with open(out / "losses.csv", "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(losses, start=1):
            f.write(f"{i},{loss!r}\n")
    logger.info("final loss %.4f; checkpoint written to %s", losses[-1] if losses else float("nan"), out / "checkpoint")


def cmd_eval(args) -> None:
    from .evaluation.runner import evaluate_task

    if not 0.0 <= args.noise_p <= 1.0:
        raise UsageError("--noise-p must be in [0, 1]")
    ckpt = Path(args.ckpt)
    model, _ = load_checkpoint(ckpt, strip_heads=True)
    vocab = _load_vocab(ckpt)
    docs = load_corpus(args.corpus)
    result = evaluate_task(model, docs, vocab, args.task, noise_p=args.noise_p, seed=args.seed,
                           batch_size=args.batch_size, max_len=args.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_predictions(out / "predictions.jsonl")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    logger.info("%s", json.dumps(result.summary, sort_keys=True))


def cmd_ablate(args) -> None:
    from .evaluation.ablation import DEFAULT_SWEEPS, AblationBudget, run_ablation

    settings = DEFAULT_SWEEPS[args.axis]
    if args.settings:
        settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    corpus = load_corpus(args.corpus) if args.corpus else None
    pre, fine = args.budget
    budget = AblationBudget(
        pretrain_steps=pre, finetune_steps=fine, batch_size=args.batch_size, seed=args.seed,
        n_train=args.n_train, n_eval=args.n_eval, lr=args.lr, finetune_lr=args.lr, task=args.task,
    )
    report = run_ablation(args.axis, settings, budget, corpus, ModelConfig.preset(args.size))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.write(args.out)
    logger.info("wrote %d rows to %s", len(report.rows), args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Parse flags, merge an optional JSON config (explicit flags win) and apply the seed override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(values, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"--config has unknown keys: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env_seed)
        except ValueError:
            parser.error(f"${SEED_ENV} must be an integer, got {env_seed!r}")
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    manifest = None
    status, code = "error", EXIT_USAGE
    try:
        manifest = write_manifest(args, argv)
        COMMANDS[args.command](args)
        status, code = "ok", EXIT_OK
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        status, code = "numerical_error", EXIT_NUMERIC
    except (CorpusError, TaskError, TokenizerError, CheckpointError, OSError) as exc:
        logger.error("data error: %s", exc)
        status, code = "data_error", EXIT_DATA
    except (UsageError, ConfigError, ValueError) as exc:
        logger.error("usage error: %s", exc)
        status, code = "usage_error", EXIT_USAGE
    if manifest is not None:
        try:
            finish_manifest(args, manifest, status)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
