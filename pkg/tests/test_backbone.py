"""Backbone forward checks against a brute-force windowed-attention reference.

The reference enumerates true (clipped, no-wrap) windows with explicit
loops: no cyclic shifts, no masking, no batching.  The implementation's
roll-and-mask path must match it to 1e-10.
"""

import math

import numpy as np
import pytest

from skyloc import backbone as bb
from skyloc import tensor as T
from skyloc.errors import ConfigError, ShapeError


# -- independent reference -------------------------------------------------


def ref_layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def ref_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_windows(h, w, b, shift):
    """Coordinates of each clipped window of the true shifted partition."""
    ys = list(range(-shift, h, b))
    xs = list(range(-shift, w, b))
    wins = []
    for y0 in ys:
        for x0 in xs:
            coords = [
                (y, x)
                for y in range(max(0, y0), min(h, y0 + b))
                for x in range(max(0, x0), min(w, x0 + b))
            ]
            if coords:
                wins.append(coords)
    return wins


def ref_attention(tokens, weights, prefix, heads, b, shift):
    """Window attention by explicit enumeration of clipped windows."""
    h, w, c = tokens.shape
    d = c // heads
    wq, bq = weights[f"{prefix}.attn.wq"], weights[f"{prefix}.attn.bq"]
    wk, bk = weights[f"{prefix}.attn.wk"], weights[f"{prefix}.attn.bk"]
    wv, bv = weights[f"{prefix}.attn.wv"], weights[f"{prefix}.attn.bv"]
    wo, bo = weights[f"{prefix}.attn.wo"], weights[f"{prefix}.attn.bo"]
    table = weights[f"{prefix}.attn.bias"]
    out = np.zeros_like(tokens)
    for coords in ref_windows(h, w, b, shift):
        x = np.array([tokens[y, x_] for y, x_ in coords])
        q = (x @ wq + bq).reshape(len(coords), heads, d)
        k = (x @ wk + bk).reshape(len(coords), heads, d)
        v = (x @ wv + bv).reshape(len(coords), heads, d)
        merged = np.zeros((len(coords), c))
        for hd in range(heads):
            logits = q[:, hd, :] @ k[:, hd, :].T / math.sqrt(d)
            for p, (py, px) in enumerate(coords):
                for t, (ty, tx) in enumerate(coords):
                    logits[p, t] += table[hd, py - ty + b - 1, px - tx + b - 1]
            attn = ref_softmax(logits)
            merged[:, hd * d : (hd + 1) * d] = attn @ v[:, hd, :]
        y_out = merged @ wo + bo
        for idx, (py, px) in enumerate(coords):
            out[py, px] = y_out[idx]
    return out


def ref_block(tokens, weights, prefix, heads, b, shift):
    x = tokens + ref_attention(
        ref_layer_norm(tokens, weights[f"{prefix}.ln1.g"], weights[f"{prefix}.ln1.b"]),
        weights,
        prefix,
        heads,
        b,
        shift,
    )
    z = ref_layer_norm(x, weights[f"{prefix}.ln2.g"], weights[f"{prefix}.ln2.b"])
    z = ref_gelu(z @ weights[f"{prefix}.mlp.w1"] + weights[f"{prefix}.mlp.b1"])
    return x + z @ weights[f"{prefix}.mlp.w2"] + weights[f"{prefix}.mlp.b2"]


def ref_block_pair(tokens, weights, prefix, heads, b):
    x = ref_block(tokens, weights, f"{prefix}.blk0", heads, b, shift=0)
    return ref_block(x, weights, f"{prefix}.blk1", heads, b, shift=b // 2)


def make_block_weights(prefix, dim, heads, b, seed=0, zero=False):
    cfg = bb.ArchConfig(window=b, base_dim=dim, encoder_stages=1, heads=(heads, heads), in_channels=1)
    rng = np.random.default_rng(seed)
    out = {}
    for j in (0, 1):
        for name, shape in bb._block_spec(f"{prefix}.blk{j}", dim, heads, cfg).items():
            if name.endswith(".g"):
                out[name] = np.ones(shape)
            elif zero or name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".bias")):
                out[name] = np.zeros(shape)
            else:
                out[name] = rng.normal(scale=0.3, size=shape)
    return out


# -- window attention -------------------------------------------------------


class TestWindowAttention:
    def test_zero_keys_uniform_attention(self):
        rng = np.random.default_rng(0)
        b, c, heads = 2, 4, 2
        w = make_block_weights("t", c, heads, b, seed=1)
        w["t.blk0.attn.wk"] = np.zeros((c, c))
        w["t.blk0.attn.wo"] = np.eye(c)
        windows = rng.normal(size=(3, b * b, c))
        out = bb.window_attention(T.Tensor(windows), w, "t.blk0", heads, b)
        v = windows @ w["t.blk0.attn.wv"] + w["t.blk0.attn.bv"]
        expected = np.repeat(v.mean(axis=1, keepdims=True), b * b, axis=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_single_token_window_is_projected_value(self):
        rng = np.random.default_rng(1)
        c, heads = 6, 3
        w = make_block_weights("t", c, heads, 1, seed=2)
        windows = rng.normal(size=(5, 1, c))
        out = bb.window_attention(T.Tensor(windows), w, "t.blk0", heads, 1)
        expected = (windows @ w["t.blk0.attn.wv"] + w["t.blk0.attn.bv"]) @ w["t.blk0.attn.wo"] + w[
            "t.blk0.attn.bo"
        ]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_hand_computed_four_token_window(self):
        # B=2, one head, one channel, zero bias: direct evaluation of
        # softmax(q k^T / sqrt(d)) v for hand-set scalars
        b, c = 2, 1
        w = make_block_weights("t", c, 1, b, seed=3, zero=True)
        w["t.blk0.attn.wq"] = np.array([[2.0]])
        w["t.blk0.attn.wk"] = np.array([[1.0]])
        w["t.blk0.attn.wv"] = np.array([[3.0]])
        w["t.blk0.attn.wo"] = np.array([[1.0]])
        x = np.array([[0.5], [1.0], [-1.0], [0.0]])
        out = bb.window_attention(T.Tensor(x[None]), w, "t.blk0", 1, b)
        logits = (2.0 * x) @ (1.0 * x).T  # d = 1 so sqrt(d) = 1
        attn = ref_softmax(logits)
        expected = attn @ (3.0 * x)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_wrong_token_count_rejected(self):
        w = make_block_weights("t", 4, 2, 3, seed=4)
        with pytest.raises(ShapeError):
            bb.window_attention(T.Tensor(np.zeros((2, 4, 4))), w, "t.blk0", 2, 3)


class TestSwinBlockPair:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(5)
        w = make_block_weights("t", 4, 2, 2, zero=True)
        x = rng.normal(size=(6, 6, 4))
        out = bb.swin_block_pair(T.Tensor(x), w, "t", 2, 2)
        np.testing.assert_allclose(out.data, x, atol=1e-14)

    def test_constant_field_stays_constant(self):
        w = make_block_weights("t", 4, 2, 3, seed=6)
        x = np.full((8, 7, 4), 1.25)  # 7 forces padding on one axis
        out = bb.swin_block_pair(T.Tensor(x), w, "t", 2, 3).data
        np.testing.assert_allclose(out, out[0, 0], atol=1e-10)

    @pytest.mark.parametrize("b,heads,dim", [(2, 2, 4), (7, 2, 8)])
    def test_matches_bruteforce_on_14x14(self, b, heads, dim):
        rng = np.random.default_rng(7)
        w = make_block_weights("t", dim, heads, b, seed=b)
        x = rng.normal(size=(14, 14, dim))
        out = bb.swin_block_pair(T.Tensor(x), w, "t", heads, b)
        expected = ref_block_pair(x, w, "t", heads, b)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_nondivisible_grid_matches_bruteforce(self):
        rng = np.random.default_rng(8)
        w = make_block_weights("t", 4, 2, 3, seed=9)
        x = rng.normal(size=(7, 8, 4))
        out = bb.swin_block_pair(T.Tensor(x), w, "t", 2, 3)
        np.testing.assert_allclose(out.data, ref_block_pair(x, w, "t", 2, 3), atol=1e-10)

    def test_mask_changes_seam_tokens_only(self):
        # dropping the seam mask must only affect tokens in wrapped windows
        rng = np.random.default_rng(10)
        b, heads, dim = 7, 2, 4
        w = make_block_weights("t", dim, heads, b, seed=11)
        x = rng.normal(size=(14, 14, dim))
        masked = bb.swin_block(T.Tensor(x), w, "t.blk1", heads, b, shift=b // 2).data

        real_mask = bb._seam_mask
        try:
            bb._seam_mask = lambda *a, **k: None
            unmasked = bb.swin_block(T.Tensor(x), w, "t.blk1", heads, b, shift=b // 2).data
        finally:
            bb._seam_mask = real_mask

        shift = b // 2
        seam = np.zeros((14, 14), dtype=bool)
        seam[-shift:, :] = True
        seam[:, -shift:] = True  # rows/cols that wrap after the cyclic roll
        diff = np.abs(masked - unmasked).max(axis=-1)
        assert diff[~seam].max() < 1e-12
        assert diff[seam].max() > 1e-6


class TestPatchOps:
    def test_patch_embed_paper_shape(self):
        cfg = bb.ArchConfig(base_dim=8, heads=(1, 1, 1, 1), in_channels=3)
        w = bb.init_weights(cfg, seed=0)
        tokens, pad = bb.patch_embed(np.zeros((224, 224, 3)), w, cfg)
        assert tokens.shape == (56, 56, 8)
        assert pad == (0, 0)

    def test_patch_embed_averaging_projection(self):
        cfg = bb.ArchConfig(base_dim=2, heads=(1, 1, 1, 1), in_channels=1)
        w = bb.init_weights(cfg, seed=0)
        w["patch_embed.w"] = np.full((16, 2), 1.0 / 16.0)
        w["patch_embed.b"] = np.zeros(2)
        rng = np.random.default_rng(12)
        img = rng.normal(size=(8, 8, 1))
        tokens, _ = bb.patch_embed(img, w, cfg)
        means = img[:, :, 0].reshape(2, 4, 2, 4).mean(axis=(1, 3))
        np.testing.assert_allclose(tokens.data[:, :, 0], means, atol=1e-14)
        np.testing.assert_allclose(tokens.data[:, :, 1], means, atol=1e-14)

    def test_patch_embed_records_padding(self):
        cfg = bb.ArchConfig(base_dim=2, heads=(1, 1, 1, 1), in_channels=1)
        w = bb.init_weights(cfg, seed=0)
        tokens, pad = bb.patch_embed(np.ones((10, 10)), w, cfg)
        assert tokens.shape[:2] == (3, 3)
        assert pad == (2, 2)

    def test_patch_embed_empty_image(self):
        cfg = bb.ArchConfig(base_dim=2, heads=(1, 1, 1, 1), in_channels=1)
        with pytest.raises(ShapeError):
            bb.patch_embed(np.zeros((0, 4, 1)), bb.init_weights(cfg), cfg)

    def test_patch_merge_shapes_and_identity(self):
        rng = np.random.default_rng(13)
        c = 3
        w = {"m.w": rng.normal(size=(4 * c, 2 * c)), "m.b": np.zeros(2 * c)}
        out = bb.patch_merge(T.Tensor(rng.normal(size=(8, 8, c))), w, "m")
        assert out.shape == (4, 4, 2 * c)

        ident = np.zeros((4 * c, 2 * c))
        ident[: 2 * c, :] = np.eye(2 * c)
        w = {"m.w": ident, "m.b": np.zeros(2 * c)}
        v = np.arange(1.0, c + 1.0)
        const = np.tile(v, (4, 4, 1))
        out = bb.patch_merge(T.Tensor(const), w, "m")
        np.testing.assert_allclose(out.data[0, 0], np.concatenate([v, v]), atol=1e-15)

    def test_patch_merge_odd_extent_rejected(self):
        w = {"m.w": np.zeros((8, 4)), "m.b": np.zeros(4)}
        with pytest.raises(ShapeError):
            bb.patch_merge(T.Tensor(np.zeros((7, 8, 2))), w, "m")

    def test_patch_expand_dimension_chain(self):
        rng = np.random.default_rng(14)
        d = 8  # 8C with C=1: /32 grid 2x2 -> /16 grid 4x4 with 4C
        w = {"e.w": rng.normal(size=(d, 2 * d)), "e.b": rng.normal(size=2 * d)}
        out = bb.patch_expand(T.Tensor(rng.normal(size=(2, 2, d))), w, "e")
        assert out.shape == (4, 4, d // 2)

    def test_patch_expand_raster_order(self):
        w = {"e.w": np.hstack([np.eye(4), np.eye(4)]), "e.b": np.zeros(8)}
        tok = np.array([[[1.0, 2.0, 3.0, 4.0]]])
        out = bb.patch_expand(T.Tensor(tok), w, "e").data
        # doubled vector [a b c d a b c d] splits into 2x2 blocks of 2 channels:
        # TL=(a,b) TR=(c,d) BL=(a,b) BR=(c,d)
        np.testing.assert_array_equal(out[0, 0], [1.0, 2.0])
        np.testing.assert_array_equal(out[0, 1], [3.0, 4.0])
        np.testing.assert_array_equal(out[1, 0], [1.0, 2.0])
        np.testing.assert_array_equal(out[1, 1], [3.0, 4.0])

    def test_patch_expand_odd_channels_rejected(self):
        w = {"e.w": np.zeros((3, 6)), "e.b": np.zeros(6)}
        with pytest.raises(ShapeError):
            bb.patch_expand(T.Tensor(np.zeros((2, 2, 3))), w, "e")

    def test_skip_fuse_average_and_zero(self):
        rng = np.random.default_rng(15)
        d = 5
        x = rng.normal(size=(3, 4, d))
        w = {"f.w": 0.5 * np.vstack([np.eye(d), np.eye(d)]), "f.b": np.zeros(d)}
        out = bb.skip_fuse(T.Tensor(x), T.Tensor(x), w, "f")
        np.testing.assert_allclose(out.data, x, atol=1e-15)

        wz = {"f.w": np.zeros((2 * d, d)), "f.b": np.zeros(d)}
        np.testing.assert_array_equal(bb.skip_fuse(T.Tensor(x), T.Tensor(x), wz, "f").data, 0.0)

    def test_skip_fuse_matches_matmul_oracle(self):
        rng = np.random.default_rng(16)
        d = 4
        a, b_ = rng.normal(size=(2, 3, 4, d))
        w = {"f.w": rng.normal(size=(2 * d, d)), "f.b": rng.normal(size=d)}
        out = bb.skip_fuse(T.Tensor(a), T.Tensor(b_), w, "f")
        expected = np.concatenate([a, b_], axis=-1) @ w["f.w"] + w["f.b"]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_skip_fuse_extent_mismatch(self):
        w = {"f.w": np.zeros((4, 2)), "f.b": np.zeros(2)}
        with pytest.raises(ShapeError):
            bb.skip_fuse(T.Tensor(np.zeros((3, 3, 2))), T.Tensor(np.zeros((3, 4, 2))), w, "f")


SMALL = dict(patch_size=4, output_stride=4, base_dim=4, window=2, encoder_stages=3, heads=(1, 1, 1, 1), in_channels=1)


class TestExtractDenseFeatures:
    def test_output_at_quarter_resolution(self):
        cfg = bb.ArchConfig(**SMALL)
        w = bb.init_weights(cfg, seed=1)
        fmap = bb.extract_dense_features(np.random.default_rng(17).normal(size=(64, 64)), w, cfg)
        assert fmap.shape == (16, 16, 4)
        assert fmap.stride == 4

    def test_paper_dimension_ladder(self):
        for size in (64, 96, 128):
            cfg = bb.ArchConfig(**SMALL)
            w = bb.init_weights(cfg, seed=2)
            trace = []
            bb.forward_features(np.zeros((size, size)), w, cfg, trace=trace)
            t = size // 4
            stages = dict(trace)
            assert stages["embed"] == (t, t, 4)
            assert stages["merge0"] == (t // 2, t // 2, 8)
            assert stages["merge1"] == (t // 4, t // 4, 16)
            assert stages["merge2"] == (t // 8, t // 8, 32)
            assert stages["bottleneck"] == (t // 8, t // 8, 32)
            assert stages["dec0"] == (t // 4, t // 4, 16)
            assert stages["dec1"] == (t // 2, t // 2, 8)
            assert stages["dec2"] == (t, t, 4)

    def test_zero_weights_zero_map(self):
        cfg = bb.ArchConfig(**SMALL)
        w = {name: np.zeros(shape) for name, shape in bb.weight_spec(cfg).items()}
        fmap = bb.extract_dense_features(np.random.default_rng(18).normal(size=(32, 32)), w, cfg)
        np.testing.assert_array_equal(fmap.values, np.zeros((8, 8, 4)))

    def test_deterministic(self):
        cfg = bb.ArchConfig(**SMALL)
        w = bb.init_weights(cfg, seed=3)
        img = np.random.default_rng(19).normal(size=(40, 40))
        a = bb.extract_dense_features(img, w, cfg)
        b_ = bb.extract_dense_features(img.copy(), w, cfg)
        np.testing.assert_array_equal(a.values, b_.values)

    def test_weight_mismatch_names_stage(self):
        cfg = bb.ArchConfig(**SMALL)
        w = bb.init_weights(cfg, seed=4)
        del w["dec1.fuse.w"]
        with pytest.raises(ConfigError, match="dec1.fuse.w"):
            bb.extract_dense_features(np.zeros((32, 32)), w, cfg)

    def test_unknown_weight_rejected(self):
        cfg = bb.ArchConfig(**SMALL)
        w = bb.init_weights(cfg, seed=5)
        w["mystery"] = np.zeros(3)
        with pytest.raises(ConfigError, match="mystery"):
            bb.extract_dense_features(np.zeros((32, 32)), w, cfg)


class TestAttentionCost:
    def test_spot_value(self):
        assert bb.attention_cost(8, 8, 4, 2) == (36864, 6144)

    def test_single_patch_degenerate(self):
        c = 6
        msa, wmsa = bb.attention_cost(1, 1, c, 1)
        assert msa == wmsa == 4 * c * c + 2 * c

    def test_quadratic_vs_linear_scaling(self):
        h = w = 8
        c, b = 4, 2
        msa1, wmsa1 = bb.attention_cost(h, w, c, b)
        msa2, wmsa2 = bb.attention_cost(2 * h, w, c, b)
        quad1, quad2 = msa1 - 4 * h * w * c * c, msa2 - 8 * h * w * c * c
        win1, win2 = wmsa1 - 4 * h * w * c * c, wmsa2 - 8 * h * w * c * c
        assert quad2 == 4 * quad1
        assert win2 == 2 * win1

    def test_more_spot_values(self):
        for h, w, c, b in [(4, 4, 2, 2), (3, 5, 7, 3), (10, 10, 8, 5), (1, 7, 3, 7)]:
            hw = h * w
            msa, wmsa = bb.attention_cost(h, w, c, b)
            assert msa == 4 * hw * c**2 + 2 * hw**2 * c
            assert wmsa == 4 * hw * c**2 + 2 * b**2 * hw * c


class TestArchConfig:
    def test_output_stride_must_match_patch(self):
        with pytest.raises(ConfigError):
            bb.ArchConfig(patch_size=4, output_stride=8)

    def test_heads_length_checked(self):
        with pytest.raises(ConfigError):
            bb.ArchConfig(encoder_stages=2, heads=(1, 1, 1, 1))

    def test_head_divisibility_checked(self):
        with pytest.raises(ConfigError):
            bb.ArchConfig(base_dim=6, heads=(4, 4, 4, 4))
