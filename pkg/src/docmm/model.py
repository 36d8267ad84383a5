"""Multi-modal encoder-decoder: input assembly, transformer stacks, pre-training heads, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import GridConfig
from .tensor import Tensor

CHECKPOINT_FORMAT = "docmm-checkpoint/1"
HEAD_PREFIX = "heads."

PRESETS: dict[str, dict] = {
    "tiny": dict(dim=64, ff=256, heads=4, enc_layers=2, dec_layers=2, max_seq=128, vocab_size=2000),
    "small": dict(dim=512, ff=2048, heads=8, enc_layers=6, dec_layers=6, max_seq=512),
    "base": dict(dim=768, ff=3072, heads=12, enc_layers=12, dec_layers=12, max_seq=512),
    "large": dict(dim=1024, ff=4096, heads=16, enc_layers=24, dec_layers=24, max_seq=512),
}


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class HeadsStrippedError(RuntimeError):
    """A pre-training head was called on a model loaded for downstream use."""


def raster_for_tokens(image_tokens: int) -> tuple[int, int]:
    """Even ``(h, w)`` raster whose 2x2 patch grid has exactly ``image_tokens`` cells.

    Portrait pages are preferred: the patch grid closest to 2 rows per column is
    chosen among factorisations with an aspect ratio between 1 and 4.
    """
    if image_tokens < 1:
        raise ConfigError(f"image_tokens must be positive, got {image_tokens}")
    best = None
    for cols in range(1, int(math.isqrt(image_tokens)) + 1):
        if image_tokens % cols:
            continue
        rows = image_tokens // cols
        ratio = rows / cols
        if 1 <= ratio <= 4:
            score = abs(ratio - 2)
            if best is None or score < best[0]:
                best = (score, rows, cols)
    if best is None:
        raise ConfigError(f"image_tokens={image_tokens} has no even raster with a page-like aspect ratio")
    return 2 * best[1], 2 * best[2]


@dataclass
class ModelConfig:
    dim: int = 512
    ff: int = 2048
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 6
    max_seq: int = 512
    image_tokens: int = 128
    grid_m: int = 4
    grid_n: int = 4
    vocab_size: int = 2000
    n_bins: int = 1000
    max_dec_len: int = 128
    visual: str = "conv2x2"

    def __post_init__(self):
        for name in ("dim", "ff", "heads", "enc_layers", "dec_layers", "max_seq", "vocab_size", "n_bins", "max_dec_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.grid_m < 1 or self.grid_n < 1 or self.grid_m * self.grid_n < 2:
            raise ConfigError(f"grid {self.grid_m}x{self.grid_n} needs at least 2 cells")
        if self.visual not in VISUAL_BACKBONES:
            raise ConfigError(f"unknown visual backbone {self.visual!r}; known: {sorted(VISUAL_BACKBONES)}")
        if self.uses_visual:
            raster_for_tokens(self.image_tokens)

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.grid_m, self.grid_n)

    @property
    def raster(self) -> tuple[int, int]:
        return raster_for_tokens(self.image_tokens)

    @property
    def uses_visual(self) -> bool:
        return self.visual != "none"

    @property
    def visual_tokens(self) -> int:
        return self.image_tokens if self.uses_visual else 0

    @property
    def null_bin(self) -> int:
        return self.n_bins

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown size {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# parameters and layers
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered name -> Tensor registry used while building a model."""

    def __init__(self, rng: np.random.Generator | None, dtype):
        self.rng = rng
        self.dtype = dtype
        self.tensors: dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(data, requires_grad=True, dtype=self.dtype, name=name)
        self.tensors[name] = t
        return t

    def normal(self, name: str, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
        if self.rng is None:
            return self._add(name, np.zeros(shape))
        z = self.rng.standard_normal(shape)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        return self._add(name, z * std)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.ones(shape))


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int):
        self.weight = store.normal(f"{name}.weight", (d_in, d_out))
        self.bias = store.zeros(f"{name}.bias", (d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.ones(f"{name}.gain", (dim,))
        self.bias = store.zeros(f"{name}.bias", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, dim: int, ff: int):
        self.up = Linear(store, f"{name}.up", dim, ff)
        self.down = Linear(store, f"{name}.down", ff, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


def canonical_key_order(ctx: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    """Per-batch key order determined by content alone (valid keys first, then lexicographic rows).

    Reducing over keys in this order makes unmasked attention exactly equivariant to
    permutations of its inputs: float sums no longer depend on where a key sat.
    """
    order = np.empty(key_mask.shape, dtype=np.int64)
    for b in range(ctx.shape[0]):
        keys = np.vstack([ctx[b].T[::-1], ~key_mask[b][None]])
        order[b] = np.lexsort(keys)
    return order


class Attention:
    def __init__(self, store: ParamStore, name: str, dim: int, heads: int):
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", dim, dim)
        self.v = Linear(store, f"{name}.v", dim, dim)
        self.o = Linear(store, f"{name}.o", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, ctx: Tensor, key_mask: np.ndarray, causal: bool = False) -> Tensor:
        """``key_mask`` is ``B x Tk`` bool (True = attend). Queries with no valid key get zeros."""
        b, tq, d = x.shape
        tk = ctx.shape[1]
        if not causal:
            order = canonical_key_order(ctx.data, key_mask)
            ctx = T.permute_rows(ctx, order)
            key_mask = np.take_along_axis(key_mask, order, axis=1)
        q = self._split(self.q(x) * (1.0 / math.sqrt(self.head_dim)))
        k = self._split(self.k(ctx))
        v = self._split(self.v(ctx))
        mask = key_mask[:, None, None, :]
        if causal:
            mask = mask & np.tril(np.ones((tq, tk), dtype=bool))[None, None]
        weights = T.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1, mask=mask)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.o(out)


class EncoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", cfg.dim)
        self.attn = Attention(store, f"{name}.attn", cfg.dim, cfg.heads)
        self.ln_ff = LayerNorm(store, f"{name}.ln_ff", cfg.dim)
        self.ff = FeedForward(store, f"{name}.ff", cfg.dim, cfg.ff)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln_ff(x))


class DecoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.ln_self = LayerNorm(store, f"{name}.ln_self", cfg.dim)
        self.self_attn = Attention(store, f"{name}.self_attn", cfg.dim, cfg.heads)
        self.ln_cross = LayerNorm(store, f"{name}.ln_cross", cfg.dim)
        self.cross_attn = Attention(store, f"{name}.cross_attn", cfg.dim, cfg.heads)
        self.ln_ff = LayerNorm(store, f"{name}.ln_ff", cfg.dim)
        self.ff = FeedForward(store, f"{name}.ff", cfg.dim, cfg.ff)

    def __call__(self, y: Tensor, prefix_mask: np.ndarray, enc: Tensor, enc_mask: np.ndarray) -> Tensor:
        h = self.ln_self(y)
        y = y + self.self_attn(h, h, prefix_mask, causal=True)
        y = y + self.cross_attn(self.ln_cross(y), enc, enc_mask)
        return y + self.ff(self.ln_ff(y))


class ConvPatchEmbed:
    """2x2/stride-2 convolution, a linear projection, and a learned per-patch position table."""

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.raster = cfg.raster
        self.tokens = cfg.image_tokens
        d = cfg.dim
        self.kernel = store.normal("visual.conv.kernel", (d, 3, 2, 2))
        self.conv_bias = store.zeros("visual.conv.bias", (d,))
        self.proj = Linear(store, "visual.proj", d, d)
        self.pos = store.normal("visual.pos", (self.tokens, d))

    def __call__(self, images: Tensor) -> Tensor:
        if tuple(images.shape[-2:]) != self.raster or images.ndim != 4 or images.shape[1] != 3:
            raise T.ShapeError(f"expected B x 3 x {self.raster[0]} x {self.raster[1]} images, got {images.shape}")
        b = images.shape[0]
        feat = T.conv2x2(images, self.kernel, self.conv_bias)
        d = feat.shape[1]
        seq = feat.reshape(b, d, self.tokens).transpose(0, 2, 1)
        return self.proj(seq) + self.pos


VISUAL_BACKBONES: dict[str, Callable[[ParamStore, ModelConfig], object] | None] = {
    "conv2x2": ConvPatchEmbed,
    "none": None,
}


def register_visual_backbone(name: str, factory: Callable[[ParamStore, ModelConfig], object]) -> None:
    """Plug in an alternative image encoder. ``factory(store, cfg)`` must return a callable
    mapping ``B x 3 x h x w`` images to ``B x cfg.image_tokens x cfg.dim`` features."""
    VISUAL_BACKBONES[name] = factory


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


@dataclass
class ModelInput:
    """Batched encoder inputs. ``spatial`` columns are bins for x1, x3, y1, y3, height, width."""

    ids: np.ndarray  # B x s int
    spatial: np.ndarray  # B x s x 6 int
    text_mask: np.ndarray  # B x s bool
    images: np.ndarray | None  # B x 3 x h x w


@dataclass
class AssembledInput:
    x: Tensor
    mask: np.ndarray
    text_len: int
    visual_len: int

    @property
    def text_span(self) -> slice:
        return slice(0, self.text_len)

    @property
    def visual_span(self) -> slice:
        return slice(self.text_len, self.text_len + self.visual_len)


class DocModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, with_heads: bool = True):
        self.cfg = cfg
        store = ParamStore(rng, T.get_default_dtype())
        d, nb = cfg.dim, cfg.n_bins + 1
        self.word = store.normal("embed.word", (cfg.vocab_size, d))
        self.x_table = store.normal("embed.x", (nb, d))
        self.y_table = store.normal("embed.y", (nb, d))
        self.h_table = store.normal("embed.h", (nb, d))
        self.w_table = store.normal("embed.w", (nb, d))
        self.text_pos = store.normal("embed.text_pos", (cfg.max_seq, d))
        self.modality = store.normal("embed.modality", (2, d))
        factory = VISUAL_BACKBONES[cfg.visual]
        self.visual = factory(store, cfg) if factory is not None else None
        self.encoder = [EncoderLayer(store, f"encoder.{i}", cfg) for i in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(store, "encoder.norm", d)
        self.dec_pos = store.normal("decoder.pos", (cfg.max_dec_len, d))
        self.decoder = [DecoderLayer(store, f"decoder.{i}", cfg) for i in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(store, "decoder.norm", d)
        self.line_head: Linear | None = None
        self.grid_head: Linear | None = None
        if with_heads:
            self.line_head = Linear(store, "heads.line", 2 * d, 3)
            self.grid_head = Linear(store, "heads.grid", d, cfg.grid_m * cfg.grid_n)
        self.params = store.tensors
        for tbl in (self.x_table, self.y_table, self.h_table, self.w_table):
            tbl.data[cfg.null_bin] = 0.0

    @property
    def dtype(self):
        return self.word.dtype

    @property
    def has_heads(self) -> bool:
        return self.line_head is not None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- embeddings ----------------------------------------------------
    def embed_text(self, ids: np.ndarray, spatial: np.ndarray) -> Tensor:
        """Word + spatial + 1D position embedding per text position (``B x s x dim``)."""
        ids = np.asarray(ids)
        spatial = np.asarray(spatial)
        s = ids.shape[1]
        null = self.cfg.null_bin
        look = lambda table, col: T.embedding_lookup(table, spatial[..., col], null_index=null)  # noqa: E731
        out = T.embedding_lookup(self.word, ids)
        out = out + look(self.x_table, 0) + look(self.x_table, 1)
        out = out + look(self.y_table, 2) + look(self.y_table, 3)
        out = out + look(self.h_table, 4) + look(self.w_table, 5)
        return out + self.text_pos[:s]

    def embed_visual(self, images) -> Tensor:
        if self.visual is None:
            raise RuntimeError("model was built without a visual branch")
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.dtype)
        return self.visual(images)

    def assemble(self, text: Tensor, visual: Tensor | None, text_mask: np.ndarray) -> AssembledInput:
        """Add modality offsets and concatenate text then visual rows."""
        b = text.shape[0]
        text_mask = np.asarray(text_mask, dtype=bool)
        parts = [text + self.modality[0]]
        masks = [text_mask]
        n_vis = 0
        if visual is not None:
            n_vis = visual.shape[1]
            parts.append(visual + self.modality[1])
            masks.append(np.ones((b, n_vis), dtype=bool))
        x = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return AssembledInput(x=x, mask=np.concatenate(masks, axis=1), text_len=text.shape[1], visual_len=n_vis)

    def assemble_inputs(self, inp: ModelInput) -> AssembledInput:
        text = self.embed_text(inp.ids, inp.spatial)
        visual = self.embed_visual(inp.images) if self.visual is not None else None
        return self.assemble(text, visual, inp.text_mask)

    # -- stacks --------------------------------------------------------
    def encode(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def encode_inputs(self, inp: ModelInput) -> tuple[Tensor, np.ndarray, AssembledInput]:
        assembled = self.assemble_inputs(inp)
        return self.encode(assembled.x, assembled.mask), assembled.mask, assembled

    def decode(self, enc: Tensor, enc_mask: np.ndarray, prefix: np.ndarray) -> Tensor:
        """Next-token logits ``B x L x vocab`` for every prefix position (causal)."""
        prefix = np.asarray(prefix)
        b, length = prefix.shape
        if length < 1:
            raise ValueError("decoder prefix must hold at least the start token")
        if length > self.cfg.max_dec_len:
            raise ValueError(f"decoder prefix length {length} exceeds max_dec_len {self.cfg.max_dec_len}")
        y = T.embedding_lookup(self.word, prefix) + self.dec_pos[:length]
        self_mask = np.ones((b, length), dtype=bool)
        for layer in self.decoder:
            y = layer(y, self_mask, enc, enc_mask)
        y = self.dec_norm(y)
        return (y @ self.word.transpose()) * (1.0 / math.sqrt(self.cfg.dim))

    # -- pre-training heads --------------------------------------------
    def head_token_to_grid(self, enc: Tensor, text_len: int) -> Tensor:
        if self.grid_head is None:
            raise HeadsStrippedError("token-to-grid head was stripped")
        return self.grid_head(enc[:, :text_len])

    def head_token_to_line(self, enc: Tensor, pairs: np.ndarray, text_len: int) -> Tensor:
        """3-way logits for ``pairs`` rows ``(batch, i, j)``; symmetric in ``i`` and ``j`` by construction."""
        if self.line_head is None:
            raise HeadsStrippedError("token-to-line head was stripped")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
        if pairs.size and (pairs[:, 1:].max() >= text_len or pairs[:, 1:].min() < 0):
            raise IndexError(f"token pair index outside the text block [0, {text_len})")
        hi = enc[pairs[:, 0], pairs[:, 1]]
        hj = enc[pairs[:, 0], pairs[:, 2]]
        return self.line_head(T.concat([hi + hj, hi * hj], axis=-1))

    def strip_heads(self) -> None:
        self.line_head = None
        self.grid_head = None
        for name in [n for n in self.params if n.startswith(HEAD_PREFIX)]:
            del self.params[name]


def build_model(cfg: ModelConfig, rng: np.random.Generator | int | None = 0) -> DocModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return DocModel(cfg, rng)


def count_params(cfg: ModelConfig, with_heads: bool = True) -> int:
    """Closed-form parameter count of :func:`build_model` for ``cfg``."""
    d, f = cfg.dim, cfg.ff
    linear = lambda i, o: i * o + o  # noqa: E731
    attn = 4 * linear(d, d)
    ffn = linear(d, f) + linear(f, d)
    total = cfg.vocab_size * d + 4 * (cfg.n_bins + 1) * d + cfg.max_seq * d + 2 * d
    if cfg.uses_visual:
        if cfg.visual != "conv2x2":
            raise ConfigError(f"no closed-form count for backbone {cfg.visual!r}")
        total += d * 3 * 4 + d + linear(d, d) + cfg.image_tokens * d
    total += cfg.enc_layers * (2 * 2 * d + attn + ffn) + 2 * d
    total += cfg.max_dec_len * d + cfg.dec_layers * (3 * 2 * d + 2 * attn + ffn) + 2 * d
    if with_heads:
        total += linear(2 * d, 3) + linear(d, cfg.grid_m * cfg.grid_n)
    return total


def greedy_decode(model: DocModel, enc: Tensor, enc_mask: np.ndarray, max_len: int, bos_id: int = 0, eos_id: int = 1) -> list[list[int]]:
    """Greedy generation by re-running the decoder on the growing prefix; EOS is not returned."""
    b = enc.shape[0]
    max_len = min(max_len, model.cfg.max_dec_len)
    prefix = np.full((b, 1), bos_id, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    with T.no_grad():
        for _ in range(max_len):
            logits = model.decode(enc, enc_mask, prefix).data[:, -1]
            nxt = logits.argmax(axis=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i] == eos_id:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all() or prefix.shape[1] >= max_len:
                break
            prefix = np.concatenate([prefix, nxt[:, None].astype(np.int64)], axis=1)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
BLOB = "weights.bin"


def save_checkpoint(model: DocModel, path: str | Path, step: int = 0, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian blob of all tensors to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.dtype).newbyteorder("<")
    entries = []
    offset = 0
    digest = hashlib.sha256()
    tmp_blob = path / (BLOB + ".tmp")
    with open(tmp_blob, "wb") as out:
        for name, t in model.params.items():
            raw = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
            out.write(raw)
            digest.update(raw)
            entries.append({"name": name, "shape": list(t.shape), "dtype": dtype.str, "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "has_heads": model.has_heads,
        "blob": BLOB,
        "blob_bytes": offset,
        "sha256": digest.hexdigest(),
        "tensors": entries,
        "extra": extra or {},
    }
    os.replace(tmp_blob, path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path: str | Path, strip_heads: bool = False) -> tuple[DocModel, dict]:
    """Rebuild a model from a checkpoint directory; returns ``(model, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read weights blob in {path}: {exc}") from exc
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"corrupt checkpoint {path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"corrupt checkpoint {path}: blob checksum mismatch")
    entries = {e["name"]: e for e in manifest["tensors"]}
    dtype = np.dtype(entries[next(iter(entries))]["dtype"]) if entries else np.dtype("<f4")
    with T.default_dtype(dtype.newbyteorder("=")):
        model = DocModel(cfg, rng=None, with_heads=manifest["has_heads"] and not strip_heads)
    expected = set(model.params)
    stored = set(entries)
    if strip_heads:
        stored = {n for n in stored if not n.startswith(HEAD_PREFIX)}
    if expected != stored:
        missing, unexpected = sorted(expected - stored), sorted(stored - expected)
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in model.params.items():
        e = entries[name]
        if tuple(e["shape"]) != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: stored {e['shape']} vs model {list(t.shape)}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=t.size, offset=e["offset"])
        t.data = arr.reshape(t.shape).astype(t.dtype)
    return model, manifest
