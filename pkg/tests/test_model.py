"""Model contracts: attention semantics, decoder behavior, pooling with
dead-mask handling, spatial encoding, mask feature enhancement,
classification, checkpoints, and the end-to-end gradient check."""

import numpy as np
import pytest
import torch

from seal.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from seal.layers import MultiHeadAttention, sinusoidal_2d, windowed_self_attention
from seal.model import (
    ConfigError,
    EventSegmenter,
    ModelConfig,
    Prompt,
    PromptError,
    classify,
    pooling_coefficients,
)

torch.manual_seed(0)


def small_model(seed=0, **overrides):
    torch.manual_seed(seed)
    return EventSegmenter(ModelConfig.small(**overrides))


def rand_voxel(seed=0, size=64, bins=3):
    return np.random.default_rng(seed).standard_normal((bins, size, size))


class TestMaskedCrossAttention:
    def test_allow_all_equals_unmasked(self):
        torch.manual_seed(1)
        attn = MultiHeadAttention(8, 2, kv_dim=6).double()
        q = torch.randn(3, 8, dtype=torch.float64)
        kv = torch.randn(5, 6, dtype=torch.float64)
        allow = torch.ones(3, 5, dtype=torch.bool)
        diff = (attn(q, kv, allow=allow) - attn(q, kv)).abs().max()
        assert diff.item() < 1e-6

    def test_single_allowed_key_is_projected_value(self):
        torch.manual_seed(2)
        attn = MultiHeadAttention(8, 2, kv_dim=6).double()
        q = torch.randn(1, 8, dtype=torch.float64)
        kv = torch.randn(4, 6, dtype=torch.float64)
        allow = torch.zeros(1, 4, dtype=torch.bool)
        allow[0, 2] = True
        out = attn(q, kv, allow=allow)
        value = attn.v(kv[2])
        expected = attn.out(value)
        np.testing.assert_allclose(out[0].detach(), expected.detach(), atol=1e-12)

    def test_equal_logits_average_values(self):
        torch.manual_seed(3)
        attn = MultiHeadAttention(8, 2, kv_dim=6).double()
        with torch.no_grad():
            attn.k.weight.zero_()   # all logits equal -> uniform over allowed
            attn.k.bias.zero_()
        q = torch.randn(1, 8, dtype=torch.float64)
        kv = torch.randn(4, 6, dtype=torch.float64)
        allow = torch.zeros(1, 4, dtype=torch.bool)
        allow[0, 1] = allow[0, 3] = True
        out = attn(q, kv, allow=allow)
        mean_value = (attn.v(kv[1]) + attn.v(kv[3])) / 2
        expected = attn.out(mean_value)
        np.testing.assert_allclose(out[0].detach(), expected.detach(), atol=1e-12)

    def test_zero_allowed_row_falls_back_never_nan(self):
        torch.manual_seed(4)
        attn = MultiHeadAttention(8, 2)
        q = torch.randn(2, 8)
        kv = torch.randn(3, 8)
        allow = torch.zeros(2, 3, dtype=torch.bool)
        allow[0, 1] = True
        out = attn(q, kv, allow=allow)
        assert torch.isfinite(out).all()
        np.testing.assert_allclose(out[1].detach(), attn(q, kv)[1].detach(), atol=1e-6)


class TestWindowedSelfAttention:
    def test_large_window_equals_global(self):
        torch.manual_seed(5)
        attn = MultiHeadAttention(8, 2).double()
        tokens = torch.randn(4 * 6, 8, dtype=torch.float64)
        windowed = windowed_self_attention(tokens, (4, 6), 7, attn)
        global_out = attn(tokens, tokens)
        assert (windowed - global_out).abs().max().item() < 1e-6

    def test_single_token_window(self):
        torch.manual_seed(6)
        attn = MultiHeadAttention(8, 2).double()
        tokens = torch.randn(9, 8, dtype=torch.float64)
        out = windowed_self_attention(tokens, (3, 3), 1, attn)
        expected = attn.out(attn.v(tokens))
        np.testing.assert_allclose(out.detach(), expected.detach(), atol=1e-12)

    def test_cross_window_independence_exact(self):
        torch.manual_seed(7)
        attn = MultiHeadAttention(8, 2)
        tokens = torch.randn(16, 8)           # 4x4 grid, window 2
        out1 = windowed_self_attention(tokens, (4, 4), 2, attn)
        perturbed = tokens.clone()
        perturbed[0] += 10.0                  # window A: rows 0-1, cols 0-1
        out2 = windowed_self_attention(perturbed, (4, 4), 2, attn)
        # window B = rows 0-1, cols 2-3 -> token indices 2, 3, 6, 7
        for idx in (2, 3, 6, 7):
            np.testing.assert_array_equal(out1[idx].detach().numpy(),
                                          out2[idx].detach().numpy())

    def test_padding_masked_out(self):
        # 3x5 grid at window 4 pads to 4x8 -> two windows; valid tokens must
        # attend only to the valid tokens of their own window.
        torch.manual_seed(8)
        attn = MultiHeadAttention(8, 2).double()
        tokens = torch.randn(3 * 5, 8, dtype=torch.float64)
        windowed = windowed_self_attention(tokens, (3, 5), 4, attn)
        grid = tokens.reshape(3, 5, 8)
        for col_range, cols in (((0, 4), range(0, 4)), ((4, 5), range(4, 5))):
            members = [(r, c) for r in range(3) for c in cols]
            sub = torch.stack([grid[r, c] for r, c in members])
            expected = attn(sub, sub)
            for k, (r, c) in enumerate(members):
                np.testing.assert_allclose(windowed[r * 5 + c].detach(),
                                           expected[k].detach(), atol=1e-9)


class TestBackbone:
    def test_output_shape_and_downscale(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        assert tuple(feat.shape) == (32, 8, 8)

    def test_paper_scale_shape(self):
        torch.manual_seed(0)
        model = EventSegmenter(ModelConfig(backbone_depth=1, fusion_layers=1, d2=64, d=32))
        feat = model.encode_backbone(np.zeros((3, 512, 512)))
        assert tuple(feat.shape) == (64, 16, 16)

    def test_deterministic(self):
        model = small_model()
        v = rand_voxel(1)
        a = model.encode_backbone(v)
        b = model.encode_backbone(v)
        np.testing.assert_array_equal(a.detach().numpy(), b.detach().numpy())

    def test_nondegenerate(self):
        model = small_model()
        zero = model.encode_backbone(np.zeros((3, 64, 64)))
        hot = np.zeros((3, 64, 64))
        hot[0, 10, 10] = 1.0
        one = model.encode_backbone(hot)
        assert (zero - one).abs().max().item() > 0

    def test_shape_mismatch_rejected(self):
        model = small_model()
        with pytest.raises(ConfigError):
            model.encode_backbone(np.zeros((3, 32, 32)))


class TestEnhancer:
    def test_shape_preserved(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        text = torch.randn(4, 16)
        out = model.enhance(feat, text)
        assert out.shape == feat.shape

    def test_empty_text_skips_cross_attention(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        out_none = model.enhance(feat, None)
        out_empty = model.enhance(feat, torch.zeros(0, 16))
        np.testing.assert_array_equal(out_none.detach().numpy(),
                                      out_empty.detach().numpy())

    def test_text_changes_output(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        t1 = torch.randn(3, 16)
        t2 = t1.clone()
        t2[0] += 1.0
        diff = (model.enhance(feat, t1) - model.enhance(feat, t2)).abs().max()
        assert diff.item() > 0

    def test_fusion_toggle_identity(self):
        model = small_model(use_fusion=False)
        feat = model.encode_backbone(rand_voxel())
        out = model.enhance(feat, torch.randn(3, 16))
        np.testing.assert_array_equal(out.detach().numpy(), feat.detach().numpy())


class TestDecodeMasks:
    def test_point_gives_three_tagged_masks(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        preds = model.decode_masks(feat, [Prompt.point(10, 20)])
        assert [p.granularity for p in preds] == ["coarse", "mid", "fine"]
        assert any(p.mask[20, 10] for p in preds)

    def test_box_gives_one_mask_inside_dilation(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        preds = model.decode_masks(feat, [Prompt.from_box(16, 16, 31, 31)])
        assert len(preds) == 1 and preds[0].granularity == "box"
        mask = preds[0].mask
        pad = model.config.box_dilation_px
        allowed = np.zeros_like(mask)
        allowed[16 - pad:32 + pad, 16 - pad:32 + pad] = 1
        assert not (mask & ~allowed).any()
        assert mask.any()

    def test_prompt_count_contract(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        prompts = [Prompt.point(5, 5), Prompt.from_box(0, 0, 15, 15), Prompt.point(40, 40)]
        preds = model.decode_masks(feat, prompts)
        assert len(preds) == 2 * 3 + 1
        assert all(p.token.shape == (16,) for p in preds)

    def test_out_of_frame_prompt_rejected(self):
        model = small_model()
        feat = model.encode_backbone(rand_voxel())
        with pytest.raises(PromptError):
            model.decode_masks(feat, [Prompt.point(64, 0)])
        with pytest.raises(PromptError):
            model.decode_masks(feat, [Prompt.from_box(10, 10, 5, 20)])


class TestRoiMaskPool:
    def test_constant_map_projection(self):
        model = small_model()
        fused = torch.full((32, 8, 8), 2.0)
        mask = np.zeros((64, 64), np.uint8)
        mask[8:32, 8:32] = 1
        s, dead = model.roi_mask_pool(fused, mask)
        assert not dead
        expected = model.se.pool(torch.full((32,), 2.0))
        np.testing.assert_allclose(s.detach(), expected.detach(), atol=1e-5)

    def test_dead_mask_zero_vector(self):
        torch.manual_seed(0)
        model = EventSegmenter(ModelConfig(backbone_depth=1, fusion_layers=1,
                                           d2=32, d=16))
        fused = torch.randn(32, 16, 16)
        mask = np.zeros((512, 512), np.uint8)
        mask[100:103, 100:103] = 1     # 3x3 in a 32x32-pixel cell
        s, dead = model.roi_mask_pool(fused, mask)
        assert dead and not s.abs().any()

    def test_empty_mask_rejected(self):
        model = small_model()
        with pytest.raises(ValueError):
            model.roi_mask_pool(torch.zeros(32, 8, 8), np.zeros((64, 64), np.uint8))

    def test_scaling_before_bias(self):
        model = small_model()
        with torch.no_grad():
            model.se.pool.bias.zero_()
        fused = torch.randn(32, 8, 8)
        mask = np.zeros((64, 64), np.uint8)
        mask[0:24, 0:24] = 1
        s1, _ = model.roi_mask_pool(fused, mask)
        s2, _ = model.roi_mask_pool(4.0 * fused, mask)
        np.testing.assert_allclose(s2.detach(), 4.0 * s1.detach(), rtol=1e-4)


class TestSpatialEncode:
    def set_identity_blocks(self, model):
        d = model.config.d
        with torch.no_grad():
            model.se.proj.weight.copy_(torch.cat([torch.eye(d), torch.eye(d)], dim=1))
            model.se.proj.bias.zero_()

    def test_identity_blocks_sum(self):
        model = small_model()
        self.set_identity_blocks(model)
        g = torch.randn(16)
        s = torch.randn(16)
        np.testing.assert_allclose(model.spatial_encode(g, s).detach(),
                                   (g + s).detach(), atol=1e-6)

    def test_dead_mask_rescue(self):
        model = small_model()
        self.set_identity_blocks(model)
        g = torch.randn(16)
        m = model.spatial_encode(g, torch.zeros(16))
        assert m.norm().item() > 0
        np.testing.assert_allclose(m.detach(), g.detach(), atol=1e-6)

    def test_zero_inputs_give_bias(self):
        model = small_model()
        m = model.spatial_encode(torch.zeros(16), torch.zeros(16))
        np.testing.assert_allclose(m.detach(), model.se.proj.bias.detach(), atol=1e-7)


class TestMaskFeatureEnhance:
    def test_full_mask_equals_unmasked(self):
        model = small_model()
        fused = torch.randn(32, 8, 8)
        m = torch.randn(16)
        out_full = model.mask_feature_enhance(m, fused, np.ones((64, 64), np.uint8))
        kv = fused.flatten(1).T + sinusoidal_2d(8, 8, 32)
        expected = model.mfe.norm(m + model.mfe.attn(m.unsqueeze(0), kv)[0])
        np.testing.assert_allclose(out_full.detach(), expected.detach(), atol=1e-6)

    def test_single_cell_mask(self):
        model = small_model()
        fused = torch.randn(32, 8, 8)
        m = torch.randn(16)
        mask = np.zeros((64, 64), np.uint8)
        mask[8:16, 16:24] = 1     # exactly cell (1, 2)
        out = model.mask_feature_enhance(m, fused, mask)
        kv = fused.flatten(1).T + sinusoidal_2d(8, 8, 32)
        cell = 1 * 8 + 2
        value = model.mfe.attn.out(model.mfe.attn.v(kv[cell]))
        expected = model.mfe.norm(m + value)
        np.testing.assert_allclose(out.detach(), expected.detach(), atol=1e-5)

    def test_positional_sensitivity(self):
        model = small_model()
        fused = torch.randn(32, 8, 8)
        m = torch.randn(16)
        m1 = np.zeros((64, 64), np.uint8)
        m1[8:16, 16:24] = 1
        m2 = np.zeros((64, 64), np.uint8)
        m2[8:16, 24:32] = 1       # shifted one cell right
        a = model.mask_feature_enhance(m, fused, m1)
        b = model.mask_feature_enhance(m, fused, m2)
        assert (a - b).abs().max().item() > 0

    def test_vanished_mask_falls_back(self):
        model = small_model()
        fused = torch.randn(32, 8, 8)
        m = torch.randn(16)
        tiny = np.zeros((64, 64), np.uint8)
        tiny[0, 0] = 1
        out = model.mask_feature_enhance(m, fused, tiny)
        full = model.mask_feature_enhance(m, fused, np.ones((64, 64), np.uint8))
        np.testing.assert_allclose(out.detach(), full.detach(), atol=1e-6)


class TestBatchedMaskFeatures:
    def test_matches_per_mask_path(self):
        model = small_model()
        voxel = rand_voxel(3)
        feat = model.encode_backbone(voxel)
        fused = model.enhance(feat, torch.randn(2, 16))
        masks = []
        for i in range(3):
            m = np.zeros((64, 64), np.uint8)
            m[8 * i:8 * i + 16, 8:8 + 8 * (i + 1)] = 1
            masks.append(m)
        masks.append(np.zeros((64, 64), np.uint8))
        masks[-1][1:3, 1:3] = 1   # dead
        tokens = torch.randn(4, 16)
        coeff, alive, allow = pooling_coefficients(masks, 8, 8)
        batched = model.mask_features_batched(
            fused, tokens,
            torch.as_tensor(coeff, dtype=model.dtype),
            torch.as_tensor(alive, dtype=model.dtype),
            torch.as_tensor(allow))
        for i, mask in enumerate(masks):
            bundle = model.mask_feature_bundle(fused, feat, mask, tokens[i])
            np.testing.assert_allclose(batched[i].detach(), bundle.enhanced.detach(),
                                       atol=1e-5)


class TestClassify:
    def test_exact_match_scores_one(self):
        m = np.array([1.0, 2.0, 2.0])
        q0 = m / np.linalg.norm(m)
        q1 = np.array([2.0, -1.0, 0.0])
        ranked = classify(m, [("self", q0), ("orth", q1)])
        assert ranked[0][0] == "self"
        assert ranked[0][1] == pytest.approx(1.0)
        assert ranked[1][1] == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal(8)
        queries = [(f"q{i}", rng.standard_normal(8)) for i in range(4)]
        a = classify(m, queries)
        b = classify(5.0 * m, queries)
        assert [x[0] for x in a] == [x[0] for x in b]
        np.testing.assert_allclose([x[1] for x in a], [x[1] for x in b], atol=1e-12)
        # positive scaling of an individual query vector is also neutral
        scaled = [(lbl, (3.0 * v if i == 1 else v)) for i, (lbl, v) in enumerate(queries)]
        c = classify(m, scaled)
        assert [x[0] for x in a] == [x[0] for x in c]
        np.testing.assert_allclose([x[1] for x in a], [x[1] for x in c], atol=1e-12)

    def test_tie_break_first_listed(self):
        m = np.array([1.0, 0.0])
        q = np.array([1.0, 0.0])
        ranked = classify(m, [("first", q), ("second", q.copy())])
        assert ranked[0][0] == "first"

    def test_zero_norm_query_rejected(self):
        with pytest.raises(ValueError, match="zero norm"):
            classify(np.ones(3), [("bad", np.zeros(3))])

    def test_canonical_phrases_appended(self):
        from seal.synthetic import SynthTextEncoder
        enc = SynthTextEncoder(["car"], dim=16)
        m = enc("car")
        ranked = classify(m, [("car", enc("car"))], canonical=True, text_encoder=enc)
        labels = {lbl for lbl, _ in ranked}
        assert labels == {"car", "object", "things", "stuff", "texture"}
        assert ranked[0][0] == "car"

    def test_zero_feature_scores_zero(self):
        ranked = classify(np.zeros(4), [("a", np.ones(4))])
        assert ranked[0][1] == 0.0


class TestCheckpoint:
    def test_round_trip_bitwise_forward(self, tmp_path):
        model = small_model(seed=3)
        voxel = rand_voxel(4)
        with torch.no_grad():
            before = model.encode_backbone(voxel).numpy().copy()
        ckpt = Checkpoint.from_model(model, meta={"stage": 1, "seed": 3})
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        restored = load_checkpoint(path)
        assert restored.meta["stage"] == 1
        model2 = restored.to_model()
        with torch.no_grad():
            after = model2.encode_backbone(voxel).numpy()
        np.testing.assert_array_equal(before, after)

    def test_name_families(self):
        model = small_model()
        names = set(Checkpoint.from_model(model).arrays)
        for prefix in ("backbone.", "fusion.0.self.", "fusion.0.cross.",
                       "fusion.0.ffn.", "decoder.", "se.pool.", "se.proj.", "mfe."):
            assert any(n.startswith(prefix) for n in names), prefix

    def test_non_finite_rejected(self):
        model = small_model()
        ckpt = Checkpoint.from_model(model)
        bad = dict(ckpt.arrays)
        bad["se.proj.bias"] = np.full_like(bad["se.proj.bias"], np.nan)
        with pytest.raises(Exception, match="finite"):
            Checkpoint(bad, ckpt.config)


class TestEndToEndGradients:
    def test_analytic_matches_finite_differences(self):
        """Cosine loss gradients vs central differences for every parameter
        on a tiny double-precision instance (2 fusion layers, d2=d=8,
        4x4 feature map)."""
        torch.manual_seed(11)
        cfg = ModelConfig(input_size=32, bins=2, patch_size=8, backbone_depth=1,
                          backbone_heads=2, d2=8, d=8, fusion_layers=2,
                          fusion_heads=2, window=14, downscale=8,
                          decoder_blocks=1, decoder_heads=2, box_dilation_px=8)
        model = EventSegmenter(cfg).double()
        rng = np.random.default_rng(5)
        voxel = torch.as_tensor(rng.standard_normal((2, 32, 32)))
        text = torch.as_tensor(rng.standard_normal((2, 8)))
        mask = np.zeros((32, 32), np.uint8)
        mask[4:20, 8:28] = 1
        target_v = torch.as_tensor(rng.standard_normal(8))
        target_t = torch.as_tensor(rng.standard_normal(8))
        teacher = torch.as_tensor(rng.standard_normal((8, 4, 4)))
        prompt = Prompt.from_box(8, 4, 27, 19)

        def loss_fn():
            feat = model.encode_backbone(voxel)
            align = 1.0 - torch.nn.functional.cosine_similarity(
                feat.flatten(1).T, teacher.flatten(1).T, dim=1).mean()
            fused = model.enhance(feat, text)
            queries, _ = model.decoder(feat, prompt, 32, 32)
            bundle = model.mask_feature_bundle(fused, feat, mask, queries[0])
            cos_v = torch.nn.functional.cosine_similarity(bundle.enhanced, target_v, dim=0)
            cos_t = torch.nn.functional.cosine_similarity(bundle.enhanced, target_t, dim=0)
            return align + (1 - cos_v) + (1 - cos_t)

        loss = loss_fn()
        loss.backward()
        eps = 1e-4
        checked = 0
        for name, p in model.named_parameters():
            grad = p.grad
            assert grad is not None, name
            flat = p.data.view(-1)
            gflat = grad.view(-1)
            idx = np.random.default_rng(hash(name) % 2**32).integers(0, flat.numel(), size=min(3, flat.numel()))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = gflat[i].item()
                denom = max(abs(numeric), abs(analytic), 1e-6)
                assert abs(numeric - analytic) / denom < 1e-3, \
                    f"{name}[{i}]: analytic {analytic} vs numeric {numeric}"
                checked += 1
        assert checked > 100
