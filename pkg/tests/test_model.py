"""Model checks: config validation, ensembles, block composition, heads."""

import numpy as np
import pytest

from blockasr.model import (
    ASRModel,
    BaseWSBO,
    ConformerBlock,
    ModelConfig,
    SEWSBO,
    TransformerDecoderBlock,
    ensemble_parameter_delta,
    toy_config,
)
from blockasr.tensor import (
    ShapeError,
    Tensor,
    finite_diff_gradient,
    max_rel_err,
    no_grad,
)


def ln_rows(a, eps=1e-12):
    mu = a.mean(axis=-1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + eps)


def zero_parameters(module):
    for name, p in module.named_parameters():
        p.data[:] = 1.0 if name.endswith("gamma") else 0.0


class TestModelConfig:
    def test_defaults_validate(self):
        cfg = ModelConfig()
        assert cfg.encoder_block_range == 12
        assert cfg.decoder_block_range == 6

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=10, heads=3)

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="ensemble_mode"):
            ModelConfig(ensemble_mode="average")

    def test_bad_range(self):
        with pytest.raises(ValueError):
            ModelConfig(encoder_block_range=13)

    def test_se_ratio_divisibility(self):
        with pytest.raises(ValueError, match="ratio"):
            ModelConfig(ensemble_mode="se", se_bottleneck_ratio=5)

    def test_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            ModelConfig(conv_kernel=14)

    @pytest.mark.parametrize("mode,enc,dec,expect", [
        ("base", 12, 6, (12, 6)),
        ("base", 5, 5, (5, 5)),
        ("se", 12, 0, (12, 0)),
        ("se", 0, 6, (0, 6)),
        ("none", 12, 6, (0, 0)),
    ])
    def test_participating_blocks(self, mode, enc, dec, expect):
        cfg = ModelConfig(ensemble_mode=mode, encoder_block_range=enc,
                          decoder_block_range=dec)
        assert cfg.participating_blocks() == expect

    def test_special_token_ids(self):
        cfg = ModelConfig(vocab_size=12)
        assert cfg.sos_id == 10
        assert cfg.eos_id == 11


class TestBaseWSBO:
    def test_single_block_identity(self):
        ens = BaseWSBO(1, softmax_constrained=False)
        ens.alpha.data[:] = [1.0]
        y = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(ens([y]).data, y.data)

    def test_softmax_equal_weights_average(self):
        ens = BaseWSBO(3, softmax_constrained=True)
        ys = [Tensor(np.full((2, 2), float(i))) for i in (1, 2, 3)]
        np.testing.assert_allclose(ens(ys).data, 2.0, atol=1e-12)

    def test_raw_weighted_sum(self):
        ens = BaseWSBO(2, softmax_constrained=False)
        ens.alpha.data[:] = [0.5, 2.0]
        ys = [Tensor(np.ones((2, 2))), Tensor(np.full((2, 2), 2.0))]
        np.testing.assert_allclose(ens(ys).data, 4.5, atol=1e-12)

    def test_softmax_weights_sum_to_one(self):
        rng = np.random.default_rng(0)
        ens = BaseWSBO(7, softmax_constrained=True)
        for _ in range(20):
            ens.alpha.data[:] = rng.normal(size=7) * 10.0
            assert abs(ens.weights().data.sum() - 1.0) < 1e-12

    def test_raw_mode_positively_homogeneous(self):
        rng = np.random.default_rng(1)
        ens = BaseWSBO(3, softmax_constrained=False)
        ens.alpha.data[:] = rng.normal(size=3)
        ys = [Tensor(rng.normal(size=(4, 2))) for _ in range(3)]
        scaled = [Tensor(y.data * 2.5) for y in ys]
        np.testing.assert_allclose(ens(scaled).data, 2.5 * ens(ys).data, atol=1e-12)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            BaseWSBO(1, softmax_constrained=False)([])

    def test_shape_disagreement_rejected(self):
        ens = BaseWSBO(2, softmax_constrained=False)
        with pytest.raises(ShapeError):
            ens([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2)))])

    def test_initial_weights_are_uniform(self):
        raw = BaseWSBO(4, softmax_constrained=False)
        soft = BaseWSBO(4, softmax_constrained=True)
        np.testing.assert_allclose(raw.weights().data, 0.25)
        np.testing.assert_allclose(soft.weights().data, 0.25)


class TestSEWSBO:
    def test_squeeze_ones(self):
        ens = SEWSBO(2, 1, np.random.default_rng(2))
        z = ens.squeeze([Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4)) * 1.0)])
        np.testing.assert_allclose(z.data, [1.0, 1.0], atol=1e-15)

    def test_squeeze_hand_mean(self):
        ens = SEWSBO(1, 1, np.random.default_rng(3))
        z = ens.squeeze([Tensor([[1.0, 2.0], [3.0, 4.0]])])
        np.testing.assert_allclose(z.data, [2.5], atol=1e-15)

    def test_squeeze_excludes_padding(self):
        rng = np.random.default_rng(4)
        ens = SEWSBO(2, 1, rng)
        base = [rng.normal(size=(5, 3)) for _ in range(2)]
        z_short = ens.squeeze([Tensor(b) for b in base])
        padded = [Tensor(np.concatenate([b, rng.normal(size=(3, 3)) * 9.0]))
                  for b in base]
        z_pad = ens.squeeze(padded, mask=np.arange(8) < 5)
        np.testing.assert_allclose(z_pad.data, z_short.data, atol=1e-15)

    def test_excite_zero_weights_give_half(self):
        ens = SEWSBO(3, 1, np.random.default_rng(5))
        ens.W1.data[:] = 0.0
        ens.W2.data[:] = 0.0
        s = ens.excite(Tensor(np.array([1.0, -2.0, 0.5])))
        np.testing.assert_allclose(s.data, 0.5, atol=1e-15)

    def test_gates_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(6)
        ens = SEWSBO(4, 2, rng)
        for _ in range(25):
            s = ens.excite(Tensor(rng.normal(size=4) * 20.0)).data
            assert (s > 0.0).all() and (s < 1.0).all()

    def test_zero_weights_halve_the_sum(self):
        rng = np.random.default_rng(7)
        ens = SEWSBO(3, 1, rng)
        ens.W1.data[:] = 0.0
        ens.W2.data[:] = 0.0
        ys = [Tensor(rng.normal(size=(4, 2))) for _ in range(3)]
        expected = 0.5 * sum(y.data for y in ys)
        np.testing.assert_allclose(ens(ys).data, expected, atol=1e-12)

    def test_single_block_contracts(self):
        rng = np.random.default_rng(8)
        ens = SEWSBO(1, 1, rng)
        y = Tensor(rng.normal(size=(3, 3)))
        out = ens([y]).data
        assert np.linalg.norm(out) < np.linalg.norm(y.data)

    def test_excite_grad(self):
        rng = np.random.default_rng(9)
        ens = SEWSBO(3, 1, rng)
        z = Tensor(rng.normal(size=3), requires_grad=True)
        w = rng.normal(size=3)
        (ens.excite(z) * w).sum().backward()
        fd = finite_diff_gradient(lambda t: (ens.excite(t) * w).sum(), z)
        assert max_rel_err(z.grad, fd.data) < 1e-6

    def test_end_to_end_grad(self):
        rng = np.random.default_rng(10)
        ens = SEWSBO(2, 1, rng)
        ys = [Tensor(rng.normal(size=(3, 2)), requires_grad=True) for _ in range(2)]
        w = rng.normal(size=(3, 2))

        def loss():
            return (ens(ys) * w).sum()

        loss().backward()
        for p_name, p in [("y0", ys[0]), ("y1", ys[1]),
                          ("W1", ens.W1), ("W2", ens.W2)]:
            fd = finite_diff_gradient(lambda _: loss(), p)
            assert max_rel_err(p.grad, fd.data) < 1e-4, p_name

    def test_parameter_count(self):
        assert SEWSBO(6, 1, np.random.default_rng(0)).count_parameters() == 72
        assert SEWSBO(12, 1, np.random.default_rng(0)).count_parameters() == 288
        assert SEWSBO(12, 2, np.random.default_rng(0)).count_parameters() == 144


class TestParameterCounts:
    @pytest.mark.parametrize("mode,expect", [
        ("none", 0), ("base", 18), ("base_softmax", 18), ("se", 360),
    ])
    def test_delta_formula_full_size_shape(self, mode, expect):
        cfg = ModelConfig(ensemble_mode=mode)
        assert ensemble_parameter_delta(cfg) == expect

    def test_delta_formula_matches_constructed_models(self):
        rng = lambda: np.random.default_rng(11)
        for mode in ("base", "base_softmax", "se"):
            plain = ASRModel(toy_config("none"), rng()).count_parameters()
            with_e = ASRModel(toy_config(mode), rng()).count_parameters()
            assert with_e - plain == ensemble_parameter_delta(toy_config(mode)), mode

    def test_partial_range_delta(self):
        cfg = ModelConfig(ensemble_mode="se", encoder_block_range=5,
                          decoder_block_range=5)
        assert ensemble_parameter_delta(cfg) == 2 * 25 + 2 * 25

    def test_count_equals_named_sum(self):
        model = ASRModel(toy_config("se"), np.random.default_rng(12))
        assert model.count_parameters() == sum(p.size for _, p in
                                               model.named_parameters())

    def test_named_paths_are_unique_and_dotted(self):
        model = ASRModel(toy_config("base"), np.random.default_rng(13))
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert "encoder.blocks.0.ffn1.linear1.weight" in names
        assert "encoder.ensemble.alpha" in names
        assert "ctc_proj.weight" in names


class TestConformerBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(14)
        block = ConformerBlock(toy_config("none"), rng)
        x = Tensor(rng.normal(size=(7, 16)))
        assert block(x).shape == (7, 16)

    def test_zero_parameter_oracle(self):
        # with all weights zero every stage collapses to a layer norm,
        # so the block is exactly four stacked row normalizations
        rng = np.random.default_rng(15)
        block = ConformerBlock(toy_config("none"), rng)
        zero_parameters(block)
        x = rng.normal(size=(5, 16))
        out = block(Tensor(x)).data
        np.testing.assert_allclose(out, ln_rows(ln_rows(ln_rows(ln_rows(x)))),
                                   atol=1e-12)

    def test_padding_does_not_leak(self):
        rng = np.random.default_rng(16)
        block = ConformerBlock(toy_config("none"), rng)
        base = rng.normal(size=(6, 16))
        with no_grad():
            out = block(Tensor(base), np.ones(6, dtype=bool)).data
            padded = np.concatenate([base, rng.normal(size=(4, 16)) * 30.0])
            out_pad = block(Tensor(padded), np.arange(10) < 6).data
        np.testing.assert_allclose(out_pad[:6], out, atol=1e-9)

    def test_grad_check_all_parameters(self):
        cfg = ModelConfig(num_encoder_blocks=1, num_decoder_blocks=1, d_model=8,
                          heads=2, d_ffn=16, conv_kernel=5, feat_dim=8,
                          vocab_size=8, dropout=0.0)
        rng = np.random.default_rng(17)
        block = ConformerBlock(cfg, rng)
        x = Tensor(rng.normal(size=(5, 8)))
        w = rng.normal(size=(5, 8))

        def loss():
            return (block(x) * w).sum()

        loss().backward()
        for name, p in block.named_parameters():
            fd = finite_diff_gradient(lambda _: loss(), p)
            err = max_rel_err(p.grad_or_zeros(), fd.data)
            assert err < 1e-4, f"{name}: {err:.3g}"


class TestDecoderBlock:
    def test_grad_check_all_parameters(self):
        cfg = ModelConfig(num_encoder_blocks=1, num_decoder_blocks=1, d_model=8,
                          heads=2, d_ffn=16, conv_kernel=5, feat_dim=8,
                          vocab_size=8, dropout=0.0)
        rng = np.random.default_rng(18)
        block = TransformerDecoderBlock(cfg, rng)
        x = Tensor(rng.normal(size=(3, 8)))
        mem = Tensor(rng.normal(size=(4, 8)))
        w = rng.normal(size=(3, 8))

        def loss():
            return (block(x, mem, np.ones(4, dtype=bool)) * w).sum()

        loss().backward()
        for name, p in block.named_parameters():
            fd = finite_diff_gradient(lambda _: loss(), p)
            err = max_rel_err(p.grad_or_zeros(), fd.data)
            assert err < 1e-4, f"{name}: {err:.3g}"

    def test_absolute_mode_constructs_plain_self_attention(self):
        cfg = toy_config("none", decoder_pos_mode="absolute")
        block = TransformerDecoderBlock(cfg, np.random.default_rng(19))
        names = [n for n, _ in block.named_parameters()]
        assert not any("bias_u" in n for n in names)


class TestFullModel:
    def test_encode_shapes_and_mask(self):
        rng = np.random.default_rng(20)
        model = ASRModel(toy_config("se"), rng)
        feats = Tensor(rng.normal(size=(30, 8)))
        enc, mask = model.encode(feats)
        assert enc.shape == (6, 16)
        assert mask.all() and mask.shape == (6,)

    def test_mode_none_equals_manual_block_composition(self):
        rng = np.random.default_rng(21)
        model = ASRModel(toy_config("none"), rng)
        feats = Tensor(rng.normal(size=(25, 8)))
        with no_grad():
            enc, mask = model.encode(feats)
            x, m2 = model.encoder.subsampler(feats)
            for block in model.encoder.blocks:
                x = block(x, m2)
        assert (enc.data == x.data).all()

    def test_encoder_ensemble_consumes_suffix(self):
        rng = np.random.default_rng(22)
        cfg = toy_config("base", num_encoder_blocks=3, encoder_block_range=2)
        model = ASRModel(cfg, rng)
        assert model.encoder.ensemble.n_blocks == 2
        feats = Tensor(rng.normal(size=(20, 8)))
        with no_grad():
            enc, mask, outputs = model.encoder(feats)
            manual = model.encoder.ensemble(outputs[-2:], mask)
        np.testing.assert_array_equal(enc.data, manual.data)

    def test_decoder_ensemble_consumes_suffix(self):
        rng = np.random.default_rng(40)
        cfg = toy_config("base", num_decoder_blocks=3, decoder_block_range=2)
        model = ASRModel(cfg, rng)
        assert model.decoder.ensemble.n_blocks == 2
        feats = Tensor(rng.normal(size=(20, 8)))
        with no_grad():
            enc, mask = model.encode(feats)
            logits, outputs = model.decoder([model.config.sos_id, 1], enc, mask)
            manual = model.decoder.output_proj(
                model.decoder.ensemble(outputs[-2:]))
        np.testing.assert_array_equal(logits.data, manual.data)

    def test_deep_supervision_reaches_every_ensembled_block(self):
        rng = np.random.default_rng(23)
        model = ASRModel(toy_config("se"), rng)
        feats = Tensor(rng.normal(size=(20, 8)))
        enc, mask, outputs = model.encoder(feats)
        enc.sum().backward()
        for i, y in enumerate(outputs):
            assert y.grad is not None and np.abs(y.grad).max() > 0.0, i

    def test_decode_forward_causal(self):
        rng = np.random.default_rng(24)
        model = ASRModel(toy_config("base"), rng)
        feats = Tensor(rng.normal(size=(20, 8)))
        with no_grad():
            enc, mask = model.encode(feats)
            sos = model.config.sos_id
            a = model.decode_forward(enc, mask, [sos, 1, 2, 3]).data
            b = model.decode_forward(enc, mask, [sos, 1, 2, 5]).data
        np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
        assert np.abs(a[3] - b[3]).max() > 1e-6

    def test_decode_forward_single_token(self):
        rng = np.random.default_rng(25)
        model = ASRModel(toy_config("none"), rng)
        with no_grad():
            enc, mask = model.encode(Tensor(rng.normal(size=(15, 8))))
            logits = model.decode_forward(enc, mask, [model.config.sos_id])
        assert logits.shape == (1, 8)
        assert np.isfinite(logits.data).all()

    def test_decode_forward_rejects_bad_token(self):
        rng = np.random.default_rng(26)
        model = ASRModel(toy_config("none"), rng)
        with no_grad():
            enc, mask = model.encode(Tensor(rng.normal(size=(15, 8))))
            with pytest.raises(IndexError):
                model.decode_forward(enc, mask, [99])

    def test_ctc_head_probabilities(self):
        rng = np.random.default_rng(27)
        model = ASRModel(toy_config("none"), rng)
        with no_grad():
            enc, _ = model.encode(Tensor(rng.normal(size=(20, 8))))
            lp = model.ctc_log_probs(enc).data
        assert lp.shape == (4, 9)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)

    def test_ctc_head_zero_weights_uniform(self):
        rng = np.random.default_rng(28)
        model = ASRModel(toy_config("none"), rng)
        model.ctc_proj.weight.data[:] = 0.0
        model.ctc_proj.bias.data[:] = 0.0
        with no_grad():
            enc, _ = model.encode(Tensor(rng.normal(size=(20, 8))))
            lp = model.ctc_log_probs(enc).data
        np.testing.assert_allclose(lp, -np.log(9.0), atol=1e-12)

    def test_padded_encode_matches_unpadded(self):
        rng = np.random.default_rng(29)
        model = ASRModel(toy_config("se"), rng)
        base = rng.normal(size=(23, 8))
        with no_grad():
            enc, mask = model.encode(Tensor(base))
            padded = np.concatenate([base, rng.normal(size=(10, 8)) * 20.0])
            enc_p, mask_p = model.encode(Tensor(padded), np.arange(33) < 23)
        n = int(mask.sum())
        assert int(mask_p.sum()) == n
        np.testing.assert_allclose(enc_p.data[:n], enc.data[:n], atol=1e-9)

    def test_dropout_only_fires_in_training(self):
        rng = np.random.default_rng(30)
        model = ASRModel(toy_config("base"), rng)
        feats = Tensor(rng.normal(size=(20, 8)))
        with no_grad():
            a, _ = model.encode(feats)
            b, _ = model.encode(feats)
            c, _ = model.encode(feats, training=True, rng=np.random.default_rng(0))
        assert (a.data == b.data).all()
        assert np.abs(a.data - c.data).max() > 1e-9
