"""Architecture contracts: shapes, schedules, encoder equality, determinism."""

import numpy as np
import pytest

from btunet import engine as E
from btunet.blocks import ds_conv_param_count
from btunet.engine import Tensor
from btunet.errors import ConfigError, ShapeError
from btunet.models import (
    EncoderStage,
    ModelArchConfig,
    Variant,
    build_encoder,
    build_model,
    encoder_state_names,
)

from gradutils import fd_gradient, rel_error

RNG = np.random.default_rng(515)
ALL_VARIANTS = list(Variant)


def tiny_cfg(variant, s=16, seed=0):
    return ModelArchConfig(
        variant=variant, input_size=s, input_channels=1, base_channels=4, seed=seed
    )


class TestConfigValidation:
    def test_rejects_bad_input_size(self):
        with pytest.raises(ConfigError):
            ModelArchConfig(variant="unet", input_size=60)

    def test_rejects_wrong_stage_count(self):
        with pytest.raises(ConfigError):
            ModelArchConfig(variant="unet", stages=3)

    def test_rejects_unknown_variant(self):
        with pytest.raises(ConfigError):
            ModelArchConfig(variant="vanilla")

    def test_roundtrips_through_dict(self):
        cfg = ModelArchConfig(variant="rca_iunet", input_size=64, seed=9)
        assert ModelArchConfig.from_dict(cfg.to_dict()) == cfg

    def test_channel_schedule(self):
        cfg = ModelArchConfig(variant="unet", input_size=64)
        assert cfg.stage_widths() == [16, 32, 64, 128]
        assert cfg.bottleneck_width() == 256


class TestEncoderSchedule:
    def test_stage_outputs_match_channel_schedule(self):
        cfg = ModelArchConfig(variant="unet", input_size=64, input_channels=1)
        enc = build_encoder(cfg)
        x = RNG.random((3, 64, 64, 1)).astype(np.float32)
        with E.no_grad():
            skips, bottom = enc.encoder(Tensor(x), training=False)
        pooled = [E.max_pool2x2(s).shape for s in skips]
        assert pooled == [
            (3, 32, 32, 16),
            (3, 16, 16, 32),
            (3, 8, 8, 64),
            (3, 4, 4, 128),
        ]
        assert bottom.shape == (3, 4, 4, 256)

    def test_encoder_forward_reaches_bottleneck(self):
        cfg = ModelArchConfig(variant="unet", input_size=64, input_channels=1)
        enc = build_encoder(cfg)
        with E.no_grad():
            out = enc(RNG.random((2, 64, 64, 1)).astype(np.float32))
        assert out.shape == (2, 4, 4, 256)


class TestBuilderEquality:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_encoder_names_and_shapes_match_full_model(self, variant):
        cfg = tiny_cfg(variant, seed=5)
        model, enc = build_model(cfg), build_encoder(cfg)
        model_enc = {
            k: v.data.shape for k, v in model.state().items() if k.startswith("encoder/")
        }
        enc_state = {k: v.data.shape for k, v in enc.state().items()}
        assert model_enc == enc_state
        assert encoder_state_names(model) == set(enc_state)

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_same_seed_same_initial_encoder_weights(self, variant):
        cfg = tiny_cfg(variant, seed=11)
        model, enc = build_model(cfg), build_encoder(cfg)
        ms = model.state()
        for name, t in enc.state().items():
            assert np.array_equal(ms[name].data, t.data), name

    def test_construction_is_deterministic(self):
        cfg = ModelArchConfig(variant="a_unet", input_size=32, seed=21)
        s1 = build_model(cfg).state_arrays()
        s2 = build_model(cfg).state_arrays()
        assert set(s1) == set(s2)
        for k in s1:
            assert np.array_equal(s1[k], s2[k]), k

    def test_different_seed_changes_weights(self):
        a = build_model(ModelArchConfig(variant="unet", input_size=32, seed=1))
        b = build_model(ModelArchConfig(variant="unet", input_size=32, seed=2))
        assert not np.array_equal(
            a.encoder.stages[0].unit1.conv.pointwise.data,
            b.encoder.stages[0].unit1.conv.pointwise.data,
        )


class TestForwardContracts:
    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    @pytest.mark.parametrize("size", [16, 64])
    def test_output_shape_all_variants(self, variant, size):
        cfg = ModelArchConfig(
            variant=variant, input_size=size, input_channels=1, base_channels=4, seed=1
        )
        model = build_model(cfg)
        with E.no_grad():
            out = model(RNG.random((2, size, size, 1)).astype(np.float32))
        assert out.shape == (2, size, size, 1)

    def test_three_input_channels(self):
        cfg = tiny_cfg("unet")
        cfg = ModelArchConfig(variant="unet", input_size=16, input_channels=3,
                              base_channels=4, seed=1)
        model = build_model(cfg)
        with E.no_grad():
            out = model(RNG.random((2, 16, 16, 3)).astype(np.float32))
        assert out.shape == (2, 16, 16, 1)

    def test_zero_weight_head_emits_bias(self):
        model = build_model(tiny_cfg("unet"))
        model.head.weight.data[:] = 0.0
        model.head.bias.data[:] = 0.625
        with E.no_grad():
            out = model(RNG.random((2, 16, 16, 1)).astype(np.float32))
        np.testing.assert_allclose(out.data, 0.625, rtol=1e-6)

    def test_sigmoid_of_logits_in_unit_interval(self):
        # float64 and training-mode normalization keep logits inside the
        # range where sigmoid is strictly open (float32 saturates above ~17)
        model = build_model(tiny_cfg("i_unet"), dtype=np.float64)
        with E.no_grad():
            out = model(RNG.random((2, 16, 16, 1)), training=True)
            probs = E.sigmoid(out).data
        assert np.all((probs > 0) & (probs < 1))

    def test_inference_is_bitwise_deterministic(self):
        model = build_model(tiny_cfg("rca_iunet"))
        x = RNG.random((2, 16, 16, 1)).astype(np.float32)
        with E.no_grad():
            a = model(x, training=False).data
            b = model(x, training=False).data
        assert np.array_equal(a, b)

    def test_wrong_input_shape_rejected(self):
        model = build_model(tiny_cfg("unet"))
        with pytest.raises(ShapeError):
            model(RNG.random((2, 8, 8, 1)).astype(np.float32))

    def test_nonfinite_input_rejected(self):
        model = build_model(tiny_cfg("unet"))
        x = np.full((2, 16, 16, 1), np.nan, dtype=np.float32)
        with pytest.raises(ValueError):
            model(x)


class TestParameterCounts:
    def test_inception_variant_exceeds_plain_unet(self):
        cfg_u = ModelArchConfig(variant="unet", input_size=64)
        cfg_i = ModelArchConfig(variant="i_unet", input_size=64)
        assert E.param_count(build_model(cfg_i)) > E.param_count(build_model(cfg_u))

    def test_encoder_stage_count_matches_hand_formula(self):
        # one plain stage: two separable convs with BN, plus 1x1 projection
        c_in, c_out = 16, 32
        stage = EncoderStage(
            Variant.UNET, c_in, c_out, rng=np.random.default_rng(0), dtype=np.float32
        )
        expected = (
            ds_conv_param_count(c_in, c_out, 3)
            + ds_conv_param_count(c_out, c_out, 3)
            + 2 * (2 * c_out)  # BN scale/shift
            + c_in * c_out  # bias-free projection
        )
        assert E.param_count(stage) == expected

    def test_ds_conv_counts_hold_across_model(self):
        model = build_model(ModelArchConfig(variant="unet", input_size=64))

        def walk(module):
            yield module
            for child in module._children.values():
                if isinstance(child, E.ModuleList):
                    for m in child:
                        yield from walk(m)
                else:
                    yield from walk(child)

        from btunet.blocks import DepthwiseSeparableConv

        seen = 0
        for m in walk(model):
            if isinstance(m, DepthwiseSeparableConv):
                seen += 1
                assert E.param_count(m) == ds_conv_param_count(m.c_in, m.c_out, m.kernel)
        assert seen >= 10


class TestEndToEndGradients:
    @pytest.mark.parametrize("variant", [Variant.UNET, Variant.RCA_IUNET])
    def test_input_gradient_matches_finite_differences(self, variant):
        # directional derivatives, step 1e-6: at 1e-4 the composition of
        # ~20 ReLU layers crosses kinks and central differences degrade
        rng = np.random.default_rng(20240515)
        cfg = tiny_cfg(variant, seed=3)
        model = build_model(cfg, dtype=np.float64)
        x0 = rng.normal(size=(2, 16, 16, 1)) * 0.25 + 0.5
        v = rng.normal(size=(2, 16, 16, 1))
        h = 1e-6

        def scalar(a):
            with E.no_grad():
                out = model(Tensor(a), training=False)
            return float(np.sum(out.data * v))

        x = Tensor(x0.copy(), requires_grad=True)
        loss = (model(x, training=False) * Tensor(v)).sum()
        loss.backward()
        for _ in range(5):
            d = rng.normal(size=x0.shape)
            numeric = (scalar(x0 + h * d) - scalar(x0 - h * d)) / (2 * h)
            analytic = float(np.sum(x.grad * d))
            err = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            assert err <= 1e-3, f"{variant}: rel err {err:.2e}"
