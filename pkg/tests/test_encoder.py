import numpy as np
import pytest

from src import numeric as nm
from src.encoder import (
    EncoderConfig,
    EncoderLayer,
    VisualTextEncoder,
    count_parameters,
    reference_parameter_comparison,
    parameter_table,
)
from src.errors import ShapeError
from src.numeric import Tensor
from src.rng import Rng
from src.vision import VisualTokens


def _visual(features: np.ndarray, positions: str = "constant") -> VisualTokens:
    v = features.shape[1]
    pos = np.zeros(v, dtype=np.int64) if positions == "constant" else np.arange(v)
    return VisualTokens(Tensor(features), np.ones(v, dtype=np.int64), pos)


def _zero(*tensors) -> None:
    for t in tensors:
        t.data[...] = 0.0


def _norm(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return nm.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data


TEXT_IDS = np.array([[2, 7, 3, 0, 0]])
TEXT_MASK = np.array([[1, 1, 1, 0, 0]])


class TestConfig:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=300, num_heads=7)

    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.num_layers, cfg.d_model, cfg.num_heads, cfg.ffn_hidden, cfg.max_seq_len) == (6, 300, 6, 2048, 64)
        assert cfg.cross_channel_hidden == 2048


class TestEmbedJoint:
    def test_layout_and_mask(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        emb, mask = enc.embed_joint(TEXT_IDS, TEXT_MASK, _visual(rng.normal(0, 1, (1, 1, 5))))
        assert emb.shape == (1, 6, 8)
        assert mask.tolist() == [[1, 1, 1, 1, 0, 0]]
        np.testing.assert_array_equal(emb.data[0, 4:], 0.0)

    def test_mask_counts_text_plus_visual(self, rng):
        cfg = EncoderConfig(vocab_size=20, num_layers=0, d_model=8, num_heads=2, max_seq_len=12, visual_dim=5)
        enc = VisualTextEncoder(cfg, rng)
        ids = np.array([[2, 7, 8, 3, 0, 0], [2, 9, 3, 0, 0, 0]])
        text_mask = (ids != 0).astype(int)
        _, mask = enc.embed_joint(ids, text_mask, _visual(rng.normal(0, 1, (2, 4, 5))))
        assert mask.sum(axis=1).tolist() == [4 + 4, 3 + 4]

    def test_zero_tables_give_zero_matrix(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        _zero(
            enc.token_embeddings.weight,
            enc.segment_embeddings.weight,
            enc.position_embeddings.weight,
            enc.visual_projection.weight,
            enc.visual_projection.bias,
        )
        emb, _ = enc.embed_joint(TEXT_IDS, TEXT_MASK, _visual(rng.normal(0, 1, (1, 2, 5))))
        np.testing.assert_array_equal(emb.data, 0.0)

    def test_visual_row_arithmetic(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        feats = rng.normal(0, 1, (1, 2, 5))
        emb, _ = enc.embed_joint(TEXT_IDS, TEXT_MASK, _visual(feats))
        proj = feats[0] @ enc.visual_projection.weight.data + enc.visual_projection.bias.data
        expected = proj + enc.segment_embeddings.weight.data[1] + enc.position_embeddings.weight.data[0]
        np.testing.assert_allclose(emb.data[0, 3:5], expected, atol=1e-12)

    def test_text_row_arithmetic(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        emb, _ = enc.embed_joint(TEXT_IDS, TEXT_MASK, _visual(rng.normal(0, 1, (1, 1, 5))))
        expected = (
            enc.token_embeddings.weight.data[7]
            + enc.segment_embeddings.weight.data[0]
            + enc.position_embeddings.weight.data[1]
        )
        np.testing.assert_allclose(emb.data[0, 1], expected, atol=1e-12)

    def test_budget_overflow(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        ids = np.array([[2, 7, 8, 3]])
        with pytest.raises(ShapeError, match="sequence budget"):
            enc.embed_joint(ids, np.ones_like(ids), _visual(rng.normal(0, 1, (1, 4, 5))))


class TestLayer:
    def _x(self, rng, n=6, d=8):
        return Tensor(rng.normal(0, 1, (1, n, d)))

    def test_single_real_token_attends_to_itself(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng).eval()
        x = self._x(rng)
        mask = np.array([[1, 0, 0, 0, 0, 0]])
        out = layer.self_attention(x, mask).data
        np.testing.assert_allclose(layer.attention.last_attention[0, :, 0, 0], 1.0)
        att = layer.attention
        v = x.data[0, 0] @ att.value.weight.data + att.value.bias.data
        o = v @ att.output.weight.data + att.output.bias.data
        np.testing.assert_allclose(out[0, 0], _norm(x.data[0, 0] + o), atol=1e-12)

    def test_pads_get_no_attention(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng).eval()
        layer.self_attention(self._x(rng), np.array([[1, 1, 1, 0, 0, 0]]))
        assert np.all(layer.attention.last_attention[..., 3:] == 0.0)

    def test_zero_output_weights_baseline(self, tiny_encoder_config, rng):
        cfg = tiny_encoder_config.model_copy(update={"variant": "baseline"})
        layer = EncoderLayer(cfg, rng).eval()
        _zero(layer.output.weight, layer.output.bias)
        x = self._x(rng)
        np.testing.assert_allclose(layer.baseline_tail(x).data, _norm(x.data), atol=1e-12)

    def test_zero_cross_token_map(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng).eval()
        _zero(layer.cross_token.weight, layer.cross_token.bias)
        x = self._x(rng)
        out = layer.cross_token_mix(x, np.array([[1, 1, 1, 1, 0, 0]]))
        np.testing.assert_allclose(out.data, _norm(x.data), atol=1e-12)

    def test_zero_cross_channel_output(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng).eval()
        _zero(layer.cross_channel_out.weight, layer.cross_channel_out.bias)
        x = self._x(rng)
        np.testing.assert_allclose(layer.cross_channel_mix(x).data, _norm(x.data), atol=1e-12)

    def test_hand_set_resmlp_tail(self, rng):
        cfg = EncoderConfig(
            vocab_size=10, num_layers=1, d_model=4, num_heads=1, cross_channel_hidden=3, max_seq_len=3, dropout=0.0
        )
        layer = EncoderLayer(cfg, rng).eval()
        a = np.array([[0.5, -1.0, 0.2], [1.5, 0.3, 0.0], [0.7, 0.7, 0.7]])
        layer.cross_token.weight.data = a.copy()
        layer.cross_token.bias.data = np.array([0.1, -0.2, 0.3])
        b_w = rng.normal(0, 1, (4, 3))
        c_w = rng.normal(0, 1, (3, 4))
        layer.cross_channel_in.weight.data, layer.cross_channel_in.bias.data = b_w, np.zeros(3)
        layer.cross_channel_out.weight.data, layer.cross_channel_out.bias.data = c_w, np.zeros(4)
        x_sa = rng.normal(0, 1, (1, 3, 4))
        mask = np.array([[1, 1, 0]])

        zeroed = x_sa[0] * mask[0][:, None]
        mixed = (zeroed.T @ a + np.array([0.1, -0.2, 0.3])).T
        x_ct = _norm(x_sa[0] + mixed)
        hidden = nm.gelu(Tensor(x_ct @ b_w)).data
        expected = _norm(x_ct + hidden @ c_w)
        np.testing.assert_allclose(layer.resmlp_tail(Tensor(x_sa), mask).data[0], expected, atol=1e-12)

    def test_cross_token_is_the_inter_token_path(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng).eval()
        mask = np.array([[1, 1, 1, 1, 0, 0]])
        i, j = 0, 2
        x = rng.normal(0, 1, (1, 6, 8))
        y = x.copy()
        y[0, j] += 1.0
        before = layer.cross_token_mix(Tensor(x), mask).data
        after = layer.cross_token_mix(Tensor(y), mask).data
        assert not np.allclose(before[0, i], after[0, i])

        layer.cross_token.weight.data[j, i] = 0.0
        before = layer.cross_token_mix(Tensor(x), mask).data
        after = layer.cross_token_mix(Tensor(y), mask).data
        np.testing.assert_allclose(before[0, i], after[0, i], atol=1e-12)

    def test_baseline_tail_is_position_wise(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config.model_copy(update={"variant": "baseline"}), rng).eval()
        x = rng.normal(0, 1, (1, 6, 8))
        y = x.copy()
        y[0, 3] += 5.0
        a, b = layer.baseline_tail(Tensor(x)).data, layer.baseline_tail(Tensor(y)).data
        np.testing.assert_allclose(np.delete(a, 3, axis=1), np.delete(b, 3, axis=1), atol=1e-12)

    def test_cross_token_needs_full_sequence(self, tiny_encoder_config, rng):
        layer = EncoderLayer(tiny_encoder_config, rng)
        with pytest.raises(ShapeError):
            layer.cross_token_mix(self._x(rng, n=5), np.ones((1, 5)))


class TestEncode:
    def test_depth_zero_pooler(self, rng):
        cfg = EncoderConfig(vocab_size=20, num_layers=0, d_model=8, num_heads=2, max_seq_len=6, visual_dim=5)
        enc = VisualTextEncoder(cfg, rng)
        vis = _visual(rng.normal(0, 1, (1, 1, 5)))
        emb, _ = enc.embed_joint(TEXT_IDS, TEXT_MASK, vis)
        out = enc.encode(TEXT_IDS, TEXT_MASK, vis)
        expected = np.tanh(emb.data[0, 0] @ enc.pooler.weight.data + enc.pooler.bias.data)
        np.testing.assert_allclose(out.pooled.data[0], expected, atol=1e-12)
        assert out.self_attention_outputs == []

    def test_full_depth_is_finite_and_deterministic(self, rng):
        cfg = EncoderConfig(vocab_size=30, d_model=12, num_heads=3, ffn_hidden=16, cross_channel_hidden=16, max_seq_len=10, visual_dim=5)
        feats = rng.normal(0, 1, (1, 4, 5))
        outs = [VisualTextEncoder(cfg, Rng(3)).eval().encode(TEXT_IDS, TEXT_MASK, _visual(feats)) for _ in range(2)]
        assert len(outs[0].self_attention_outputs) == 6
        assert np.all(np.isfinite(outs[0].states.data))
        np.testing.assert_array_equal(outs[0].pooled.data, outs[1].pooled.data)

    @pytest.mark.parametrize("variant", ["baseline", "resmlp"])
    def test_visual_permutation_invariance(self, tiny_encoder_config, variant, rng):
        cfg = tiny_encoder_config.model_copy(update={"variant": variant, "num_layers": 2})
        enc = VisualTextEncoder(cfg, rng).eval()
        if variant == "resmlp":
            for layer in enc.layers:
                _zero(layer.cross_token.weight, layer.cross_token.bias)
        feats = rng.normal(0, 1, (1, 3, 5))
        a = enc.encode(TEXT_IDS, TEXT_MASK, _visual(feats)).pooled.data
        b = enc.encode(TEXT_IDS, TEXT_MASK, _visual(feats[:, [2, 0, 1]])).pooled.data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_raster_positions_break_permutation_invariance(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config.model_copy(update={"variant": "baseline"}), rng).eval()
        feats = rng.normal(0, 1, (1, 3, 5))
        a = enc.encode(TEXT_IDS, TEXT_MASK, _visual(feats, "raster")).pooled.data
        b = enc.encode(TEXT_IDS, TEXT_MASK, _visual(feats[:, [2, 0, 1]], "raster")).pooled.data
        assert not np.allclose(a, b)

    @pytest.mark.parametrize("variant", ["baseline", "resmlp"])
    def test_gradient_check(self, tiny_encoder_config, variant, rng):
        cfg = tiny_encoder_config.model_copy(update={"variant": variant})
        enc = VisualTextEncoder(cfg, rng.child("model"))
        ids = np.array([[2, 7, 3, 0], [2, 8, 9, 3]])
        vis = _visual(rng.normal(0, 1, (2, 2, 5)))

        def loss():
            out = enc.encode(ids, (ids != 0).astype(int), vis)
            return nm.cross_entropy(enc.classify(out.pooled), [1, 3])

        errors = nm.grad_check_params(loss, enc.named_parameters(), max_entries=5, rng=rng.child("coords"))
        assert max(errors.values()) < 1e-4

    def test_classify_zero_weights_uniform(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config, rng)
        _zero(enc.classifier.weight, enc.classifier.bias)
        logits = enc.classify(Tensor(rng.normal(0, 1, (2, 8)))).data
        np.testing.assert_array_equal(logits, 0.0)

    def test_classify_without_head(self, tiny_encoder_config, rng):
        enc = VisualTextEncoder(tiny_encoder_config.model_copy(update={"num_classes": None}), rng)
        with pytest.raises(ShapeError):
            enc.classify(Tensor(np.zeros((1, 8))))

    @pytest.mark.parametrize("classes", [26, 14])
    def test_head_sizes(self, tiny_encoder_config, classes, rng):
        enc = VisualTextEncoder(tiny_encoder_config.model_copy(update={"num_classes": classes}), rng)
        assert enc.classify(Tensor(np.zeros((1, 8)))).shape == (1, classes)


class TestParameters:
    def test_baseline_ffn_tail_per_layer(self):
        table = parameter_table(EncoderConfig(variant="baseline"))
        assert table["layers.ffn"] // 6 == 1_231_148

    def test_cross_token_map_per_layer(self):
        table = parameter_table(EncoderConfig(variant="resmlp"))
        assert table["layers.cross_token"] // 6 == 4_160

    def test_counts_match_closed_form_on_random_configs(self):
        rng = Rng(99)
        for k in range(10):
            heads = int(rng.integers(1, 4))
            cfg = EncoderConfig(
                vocab_size=int(rng.integers(10, 40)),
                num_layers=int(rng.integers(0, 3)),
                d_model=heads * int(rng.integers(1, 5)),
                num_heads=heads,
                ffn_hidden=int(rng.integers(1, 20)),
                cross_channel_hidden=int(rng.integers(1, 20)),
                max_seq_len=int(rng.integers(3, 12)),
                variant="baseline" if k % 2 else "resmlp",
                visual_dim=int(rng.integers(1, 9)),
                num_classes=None if k % 3 == 0 else int(rng.integers(2, 30)),
            )
            assert count_parameters(VisualTextEncoder(cfg, rng.child(k))) == parameter_table(cfg)

    def test_comparison_readings(self):
        comparison = reference_parameter_comparison(EncoderConfig())
        readings = comparison["readings"]
        assert set(readings) == {"cch_2048", "cch_1200"}
        assert not readings["cch_2048"]["matches_reported_direction"]
        assert readings["cch_1200"]["matches_reported_direction"]
        assert readings["cch_1200"]["reduction"] > 0
        assert comparison["reported"]["reproducible"] is False
        assert comparison["reported"]["reduction"] == pytest.approx(0.1364)
