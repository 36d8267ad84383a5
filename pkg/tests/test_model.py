import dataclasses

import numpy as np
import pytest

from docmm import tensor as T
from docmm.model import (
    CheckpointError,
    ConfigError,
    DocModel,
    HeadsStrippedError,
    ModelConfig,
    ModelInput,
    build_model,
    count_params,
    greedy_decode,
    load_checkpoint,
    raster_for_tokens,
    read_manifest,
    save_checkpoint,
)

TINY = ModelConfig(dim=32, ff=64, heads=2, enc_layers=2, dec_layers=2, max_seq=8, image_tokens=4, vocab_size=150, max_dec_len=12)


def random_input(cfg, batch=2, seed=0, n_valid=None):
    r = np.random.default_rng(seed)
    ids = r.integers(4, cfg.vocab_size, size=(batch, cfg.max_seq))
    spatial = r.integers(0, cfg.n_bins, size=(batch, cfg.max_seq, 6))
    mask = np.ones((batch, cfg.max_seq), dtype=bool)
    if n_valid is not None:
        mask[:, n_valid:] = False
        ids[:, n_valid:] = 0
    h, w = cfg.raster
    images = r.random((batch, 3, h, w)).astype(np.float32) if cfg.uses_visual else None
    return ModelInput(ids, spatial, mask, images)


@pytest.fixture(scope="module")
def model():
    return build_model(TINY, 0)


def test_tiny_builds_and_runs_forward(model):
    inp = random_input(TINY, n_valid=6)
    enc, mask, asm = model.encode_inputs(inp)
    assert enc.shape == (2, TINY.max_seq + TINY.image_tokens, TINY.dim)
    assert asm.text_span == slice(0, 8) and asm.visual_span == slice(8, 12)
    logits = model.decode(enc, mask, np.zeros((2, 3), dtype=np.int64))
    assert logits.shape == (2, 3, TINY.vocab_size)
    assert np.all(np.isfinite(logits.data))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=8)
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")
    with pytest.raises(ConfigError):
        ModelConfig(grid_m=1, grid_n=1)
    with pytest.raises(ConfigError):
        ModelConfig(image_tokens=7)
    ModelConfig(image_tokens=7, visual="none")


def test_raster_for_tokens():
    assert raster_for_tokens(128) == (32, 16)
    for n in (4, 8, 32, 64, 128, 256, 512):
        h, w = raster_for_tokens(n)
        assert h % 2 == 0 and w % 2 == 0 and (h // 2) * (w // 2) == n


def test_presets_match_size_table():
    small, base, large = (ModelConfig.preset(n) for n in ("small", "base", "large"))
    assert (small.dim, small.ff, small.heads, small.enc_layers, small.dec_layers) == (512, 2048, 8, 6, 6)
    assert (base.dim, base.ff, base.heads, base.enc_layers, base.dec_layers) == (768, 3072, 12, 12, 12)
    assert (large.dim, large.ff, large.heads, large.enc_layers, large.dec_layers) == (1024, 4096, 16, 24, 24)
    assert small.grid_m == small.grid_n == 4 and small.image_tokens == 128


def test_count_params_matches_built_model():
    for cfg in (TINY, dataclasses.replace(TINY, visual="none"), ModelConfig.preset("tiny")):
        assert count_params(cfg) == build_model(cfg, 0).num_params()
        m = build_model(cfg, 0)
        m.strip_heads()
        assert count_params(cfg, with_heads=False) == m.num_params()


def test_small_param_count_near_reference():
    n = count_params(ModelConfig.preset("small", vocab_size=32128))
    assert abs(n - 66e6) / 66e6 <= 0.10


def test_doubling_dim_quadruples_layer_weights():
    def layer_share(dim):
        cfg = ModelConfig(dim=dim, ff=4 * dim, heads=4, enc_layers=2, dec_layers=1, vocab_size=10, n_bins=1, max_seq=1, max_dec_len=1, visual="none")
        return count_params(cfg, with_heads=False) - count_params(dataclasses.replace(cfg, enc_layers=1), with_heads=False)

    assert layer_share(256) / layer_share(128) == pytest.approx(4.0, rel=0.01)


def test_visual_embedding_examples(model):
    h, w = TINY.raster
    zero = model.embed_visual(np.zeros((1, 3, h, w), dtype=np.float32)).data[0]
    proj_bias = model.params["visual.proj.bias"].data
    np.testing.assert_allclose(zero, model.params["visual.pos"].data + proj_bias, rtol=0, atol=0)

    img = np.random.default_rng(0).random((1, 3, h, w)).astype(np.float32)
    other = img.copy()
    other[0, :, 2:4, 0:2] += 0.5  # patch row 1, col 0
    a, b = model.embed_visual(img).data[0], model.embed_visual(other).data[0]
    changed = np.nonzero(np.any(a != b, axis=1))[0]
    assert list(changed) == [1 * (w // 2) + 0]

    with pytest.raises(T.ShapeError):
        model.embed_visual(np.zeros((1, 3, h + 2, w), dtype=np.float32))
    default = build_model(ModelConfig.preset("tiny", vocab_size=150), 0)
    assert default.embed_visual(np.zeros((1, 3, 32, 16), dtype=np.float32)).shape == (1, 128, 64)


def test_text_embedding_examples(model):
    spatial = np.array([[[1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6]]])
    out = model.embed_text(np.array([[7, 7]]), spatial).data[0]
    pos = model.text_pos.data
    np.testing.assert_allclose(out[0] - pos[0], out[1] - pos[1], rtol=0, atol=1e-6)

    p = model.params
    zero_box = np.zeros((1, 1, 6), dtype=np.int64)
    got = model.embed_text(np.array([[9]]), zero_box).data[0, 0]
    want = p["embed.word"].data[9] + 2 * p["embed.x"].data[0] + 2 * p["embed.y"].data[0] + p["embed.h"].data[0] + p["embed.w"].data[0] + pos[0]
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-7)

    a = np.array([[[1, 2, 3, 4, 5, 6]]])
    b = np.array([[[1, 2, 3, 4, 5, 9]]])
    diff = model.embed_text(np.array([[9]]), a).data - model.embed_text(np.array([[9]]), b).data
    np.testing.assert_allclose(diff[0, 0], p["embed.w"].data[6] - p["embed.w"].data[9], rtol=1e-5, atol=1e-6)


def test_null_bin_contributes_nothing(model):
    null = np.full((1, 1, 6), TINY.null_bin)
    out = model.embed_text(np.array([[9]]), null).data[0, 0]
    np.testing.assert_allclose(out, model.params["embed.word"].data[9] + model.text_pos.data[0], rtol=0, atol=1e-7)


def test_spatial_tables_zero_makes_output_box_invariant():
    m = build_model(TINY, 1)
    for name in ("embed.x", "embed.y", "embed.h", "embed.w"):
        m.params[name].data[:] = 0.0
    inp = random_input(TINY, seed=3)
    other = dataclasses.replace(inp, spatial=np.random.default_rng(9).integers(0, 1000, size=inp.spatial.shape))
    np.testing.assert_array_equal(m.encode_inputs(inp)[0].data, m.encode_inputs(other)[0].data)


def test_assembly_examples(model):
    text = T.Tensor(np.ones((1, 8, TINY.dim), dtype=np.float32))
    vis = T.Tensor(np.full((1, 4, TINY.dim), 2.0, dtype=np.float32))
    saved = model.modality.data.copy()
    model.modality.data[:] = 0.0
    asm = model.assemble(text, vis, np.array([[True] * 5 + [False] * 3]))
    np.testing.assert_array_equal(asm.x.data, np.concatenate([text.data, vis.data], axis=1))
    assert asm.x.shape[1] == 12
    assert list(asm.mask[0]) == [True] * 5 + [False] * 3 + [True] * 4
    model.modality.data[:] = saved
    swapped = saved[::-1].copy()
    base = model.assemble(text, vis, np.ones((1, 8), bool)).x.data
    model.modality.data[:] = swapped
    flipped = model.assemble(text, vis, np.ones((1, 8), bool)).x.data
    model.modality.data[:] = saved
    np.testing.assert_allclose(flipped[0, :8] - base[0, :8], np.broadcast_to(swapped[0] - saved[0], (8, TINY.dim)), atol=1e-6)
    np.testing.assert_allclose(flipped[0, 8:] - base[0, 8:], np.broadcast_to(swapped[1] - saved[1], (4, TINY.dim)), atol=1e-6)


def test_encoder_permutation_equivariance_exact(model):
    r = np.random.default_rng(5)
    x = r.normal(size=(2, 12, TINY.dim)).astype(np.float32)
    mask = np.ones((2, 12), dtype=bool)
    mask[0, 3] = mask[1, 9:] = False
    perm = r.permutation(12)
    a = model.encode(T.Tensor(x), mask).data
    b = model.encode(T.Tensor(x[:, perm]), mask[:, perm]).data
    np.testing.assert_array_equal(a[:, perm], b)


def test_pad_rows_get_zero_attention(model):
    layer = model.encoder[0].attn
    r = np.random.default_rng(2)
    x = T.Tensor(r.normal(size=(1, 6, TINY.dim)).astype(np.float32))
    mask = np.array([[True, True, True, True, False, False]])
    base = layer(x, x, mask).data
    y = x.data.copy()
    y[0, 4:] += 100.0
    changed = layer(T.Tensor(y), T.Tensor(y), mask).data
    np.testing.assert_array_equal(base[0, :4], changed[0, :4])


def test_encoder_layer_with_silent_attention_is_residual_ffn():
    m = build_model(TINY, 4)
    layer = m.encoder[0]
    layer.attn.o.weight.data[:] = 0.0
    layer.attn.o.bias.data[:] = 0.0
    with T.default_dtype(np.float32):
        x = T.Tensor(np.random.default_rng(0).normal(size=(1, 5, TINY.dim)).astype(np.float32))
        want = x.data + layer.ff(layer.ln_ff(x)).data
        got = layer(x, np.ones((1, 5), bool)).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_decoder_causality_exact(model):
    enc, mask, _ = model.encode_inputs(random_input(TINY))
    prefix = np.random.default_rng(0).integers(0, TINY.vocab_size, size=(2, 7))
    base = model.decode(enc, mask, prefix).data
    for k in range(1, 7):
        other = prefix.copy()
        other[:, k] = (other[:, k] + 1) % TINY.vocab_size
        out = model.decode(enc, mask, other).data
        np.testing.assert_array_equal(out[:, :k], base[:, :k])
        assert not np.array_equal(out[:, k:], base[:, k:])


def test_decoder_errors_and_empty_encoder(model):
    enc, mask, _ = model.encode_inputs(random_input(TINY))
    with pytest.raises(ValueError):
        model.decode(enc, mask, np.zeros((2, 0), dtype=np.int64))
    with pytest.raises(ValueError):
        model.decode(enc, mask, np.zeros((2, TINY.max_dec_len + 1), dtype=np.int64))
    out = model.decode(enc, np.zeros_like(mask), np.zeros((2, 2), dtype=np.int64))
    assert np.all(np.isfinite(out.data))


def test_line_head_examples(model):
    enc, _, asm = model.encode_inputs(random_input(TINY))
    pairs = np.array([[0, 1, 5], [1, 2, 2], [0, 7, 0]])
    logits = model.head_token_to_line(enc, pairs, asm.text_len).data
    assert logits.shape == (3, 3) and np.all(np.isfinite(logits))
    swapped = model.head_token_to_line(enc, pairs[:, [0, 2, 1]], asm.text_len).data
    np.testing.assert_array_equal(logits, swapped)
    with pytest.raises(IndexError):
        model.head_token_to_line(enc, np.array([[0, 1, TINY.max_seq]]), asm.text_len)


def test_grid_head_examples(model):
    enc, _, asm = model.encode_inputs(random_input(TINY))
    logits = model.head_token_to_grid(enc, asm.text_len)
    assert logits.shape == (2, TINY.max_seq, 16)
    loss = T.cross_entropy(logits.reshape(-1, 16), np.full(2 * TINY.max_seq, -100))
    assert loss.item() == 0.0


def test_greedy_decode_stops_at_eos(model):
    enc, mask, _ = model.encode_inputs(random_input(TINY))
    out = greedy_decode(model, enc, mask, 5)
    assert len(out) == 2 and all(len(o) <= 5 and 1 not in o for o in out)


def test_checkpoint_round_trip_bit_exact(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck", step=7)
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 7
    for name, t in model.named_parameters().items():
        assert t.data.dtype == loaded.params[name].data.dtype
        np.testing.assert_array_equal(t.data, loaded.params[name].data)
    inp = random_input(TINY, seed=11)
    a, ma, _ = model.encode_inputs(inp)
    b, mb, _ = loaded.encode_inputs(inp)
    prefix = np.zeros((2, 4), dtype=np.int64)
    np.testing.assert_array_equal(model.decode(a, ma, prefix).data, loaded.decode(b, mb, prefix).data)
    save_checkpoint(loaded, tmp_path / "ck2", step=7)
    assert (tmp_path / "ck" / "weights.bin").read_bytes() == (tmp_path / "ck2" / "weights.bin").read_bytes()


def test_checkpoint_blob_is_little_endian_float32(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck")
    manifest = read_manifest(tmp_path / "ck")
    assert {e["dtype"] for e in manifest["tensors"]} == {"<f4"}
    first = manifest["tensors"][0]
    raw = (tmp_path / "ck" / "weights.bin").read_bytes()[first["offset"] : first["offset"] + first["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(first["shape"]), model.params[first["name"]].data)


def test_strip_heads_removes_exactly_two_heads(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck")
    full = set(model.params)
    stripped, _ = load_checkpoint(tmp_path / "ck", strip_heads=True)
    removed = full - set(stripped.params)
    assert removed == {"heads.line.weight", "heads.line.bias", "heads.grid.weight", "heads.grid.bias"}
    enc, mask, asm = stripped.encode_inputs(random_input(TINY))
    with pytest.raises(HeadsStrippedError):
        stripped.head_token_to_grid(enc, asm.text_len)
    with pytest.raises(HeadsStrippedError):
        stripped.head_token_to_line(enc, np.array([[0, 0, 1]]), asm.text_len)
    assert stripped.decode(enc, mask, np.zeros((2, 1), dtype=np.int64)).shape == (2, 1, TINY.vocab_size)
    save_checkpoint(stripped, tmp_path / "stripped")
    assert not any(e["name"].startswith("heads.") for e in read_manifest(tmp_path / "stripped")["tensors"])


def test_truncated_blob_is_reported_corrupt(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck")
    blob = tmp_path / "ck" / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "ck")


def test_flipped_byte_is_reported_corrupt(model, tmp_path):
    save_checkpoint(model, tmp_path / "ck")
    blob = tmp_path / "ck" / "weights.bin"
    data = bytearray(blob.read_bytes())
    data[100] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "ck")


def test_shape_mismatch_is_reported(model, tmp_path):
    import json

    save_checkpoint(model, tmp_path / "ck")
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["config"]["ff"] = 128
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_no_visual_branch():
    cfg = dataclasses.replace(TINY, visual="none")
    m = build_model(cfg, 0)
    enc, mask, asm = m.encode_inputs(random_input(cfg))
    assert asm.visual_len == 0 and enc.shape[1] == cfg.max_seq
    assert not any(n.startswith("visual.") for n in m.params)
