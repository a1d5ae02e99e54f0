"""Frozen toy transformer and its recalibration schemes."""

import numpy as np
import pytest

from momentprobe import tensor as T
from momentprobe.backbone import (ToyBackboneConfig, backbone_forward,
                                  build_backbone, init_psrp, init_ssf,
                                  mp_plus_forward, psrp_apply, psrp_compute,
                                  ssf_apply)
from momentprobe.errors import ConfigError, DimensionError
from momentprobe.head import MHC3Config, init_mp_head
from momentprobe.rng import STREAM_HEAD, generator


CFG = ToyBackboneConfig(layers=2, width=16, attn_heads=2, tokens=4, seed=3)


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


def randomized_psrp(cfg=CFG, d_h=4, seed=5, scale=0.2):
    psrp = init_psrp(cfg, d_h=d_h, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for layer in psrp.layers:
        layer.w_up1.data = rng.standard_normal(layer.w_up1.data.shape) * scale
        layer.w_up2.data = rng.standard_normal(layer.w_up2.data.shape) * scale
    return psrp


class TestConfig:
    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigError):
            ToyBackboneConfig(width=10, attn_heads=4)

    def test_seed_determinism(self):
        a, b = build_backbone(CFG), build_backbone(CFG)
        for va, vb in zip(a.values(), b.values()):
            assert np.array_equal(va.data, vb.data)

    def test_all_weights_frozen(self):
        assert not any(v.requires_grad for v in build_backbone(CFG).values())


class TestBackboneForward:
    def test_output_shape(self):
        out = backbone_forward(rand(0, 5, 16), build_backbone(CFG))
        assert out.tokens.data.shape == (4, 16)
        assert out.cls.data.shape == (16,)

    def test_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            backbone_forward(rand(0, 5, 8), build_backbone(CFG))

    def test_psrp_at_init_is_identity_bitwise(self):
        frozen = build_backbone(CFG)
        raw = rand(1, 5, 16)
        plain = backbone_forward(raw, frozen)
        recal = backbone_forward(raw, frozen, recal=init_psrp(CFG, d_h=4, seed=5))
        assert np.array_equal(plain.tokens.data, recal.tokens.data)
        assert np.array_equal(plain.cls.data, recal.cls.data)

    def test_ssf_at_init_is_identity_bitwise(self):
        frozen = build_backbone(CFG)
        raw = rand(1, 5, 16)
        plain = backbone_forward(raw, frozen)
        recal = backbone_forward(raw, frozen, recal=init_ssf(CFG))
        assert np.array_equal(plain.tokens.data, recal.tokens.data)

    def test_gradients_reach_recalibration_but_not_frozen_weights(self):
        frozen = build_backbone(CFG)
        psrp = randomized_psrp()
        out = backbone_forward(rand(2, 5, 16), frozen, recal=psrp)
        T.backward(T.sum_all(out.tokens))
        assert all(v.grad is not None for v in psrp.values())
        assert all(v.grad is None for v in frozen.values())

    def test_layer_count_mismatch_rejected(self):
        other = ToyBackboneConfig(layers=3, width=16, attn_heads=2, tokens=4)
        with pytest.raises(ConfigError):
            backbone_forward(rand(0, 5, 16), build_backbone(CFG),
                             recal=init_psrp(other, d_h=4))


class TestPSRP:
    def test_zero_up_projections_give_zero_scale_and_shift(self):
        psrp = init_psrp(CFG, d_h=4, seed=5)
        w, b = psrp_compute(T.Value(rand(0, 5, 16)), psrp.layers[0])
        assert np.array_equal(w.data, np.zeros((5, 16)))
        assert np.array_equal(b.data, np.zeros((5, 16)))

    def test_zero_input_gives_zero_outputs(self):
        psrp = randomized_psrp()
        w, b = psrp_compute(T.Value(np.zeros((3, 16))), psrp.layers[0])
        assert np.array_equal(w.data, np.zeros((3, 16)))
        assert np.array_equal(b.data, np.zeros((3, 16)))

    def test_shared_trunk_feeds_both_branches(self):
        psrp = randomized_psrp()
        layer = psrp.layers[0]
        x = T.Value(np.abs(rand(3, 4, 16)) + 0.1)
        w0, b0 = psrp_compute(x, layer)
        layer.w_down.data = layer.w_down.data + 0.05
        w1, b1 = psrp_compute(x, layer)
        assert np.abs(w1.data - w0.data).max() > 0
        assert np.abs(b1.data - b0.data).max() > 0

    def test_identity_recalibration(self):
        ffn_out = T.Value(rand(0, 4, 16))
        zeros = T.Value(np.zeros((4, 16)))
        out = psrp_apply(ffn_out, zeros, zeros)
        assert np.array_equal(out.data, ffn_out.data)

    def test_scale_minus_one_leaves_only_shift(self):
        ffn_out = T.Value(rand(0, 4, 16))
        shift = T.Value(rand(1, 4, 16))
        out = psrp_apply(ffn_out, T.Value(np.full((4, 16), -1.0)), shift)
        assert np.array_equal(out.data, shift.data)

    def test_input_dependence_once_trained_away_from_zero(self):
        psrp = randomized_psrp()
        wa, ba = psrp_compute(T.Value(rand(0, 4, 16)), psrp.layers[0])
        wb, bb = psrp_compute(T.Value(rand(1, 4, 16)), psrp.layers[0])
        assert np.abs(wa.data - wb.data).max() > 1e-6
        assert np.abs(ba.data - bb.data).max() > 1e-6

    def test_up_projection_gradient_matches_finite_differences(self):
        frozen = build_backbone(CFG)
        psrp = randomized_psrp()
        raw = rand(4, 5, 16)
        # a random linear functional of the outputs; the final layer
        # norm makes sums of squares nearly constant, which would starve
        # the check of signal
        probe = rand(5, 4, 16)
        params = [psrp.layers[0].w_up1, psrp.layers[0].w_down]
        def f():
            out = backbone_forward(raw, frozen, recal=psrp)
            return T.sum_all(T.mul(out.tokens, probe))
        assert T.finite_diff_check(f, params) < 1e-4


class TestSSF:
    def test_identity_at_init(self):
        ssf = init_ssf(CFG)
        x = T.Value(rand(0, 4, 16))
        out = ssf_apply(x, ssf.layers[0])
        assert np.array_equal(out.data, x.data)

    def test_zero_gamma_leaves_beta(self):
        ssf = init_ssf(CFG)
        ssf.layers[0].gamma.data = np.zeros(16)
        ssf.layers[0].beta.data = rand(1, 16)
        out = ssf_apply(T.Value(rand(0, 4, 16)), ssf.layers[0])
        assert np.array_equal(out.data, np.tile(ssf.layers[0].beta.data, (4, 1)))

    def test_parameters_are_input_independent(self):
        # the recalibration implied by (out - beta) / x is the same
        # gamma no matter the input, unlike the input-conditioned scheme
        ssf = init_ssf(CFG)
        rng = np.random.default_rng(2)
        ssf.layers[0].gamma.data = rng.standard_normal(16)
        ssf.layers[0].beta.data = rng.standard_normal(16)
        xa = np.abs(rand(0, 4, 16)) + 0.5
        xb = np.abs(rand(1, 4, 16)) + 0.5
        ga = (ssf_apply(T.Value(xa), ssf.layers[0]).data - ssf.layers[0].beta.data) / xa
        gb = (ssf_apply(T.Value(xb), ssf.layers[0]).data - ssf.layers[0].beta.data) / xb
        np.testing.assert_allclose(ga, np.tile(ssf.layers[0].gamma.data, (4, 1)),
                                   atol=1e-12)
        np.testing.assert_allclose(ga, gb, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        ssf = init_ssf(CFG)
        with pytest.raises(DimensionError):
            ssf_apply(T.Value(rand(0, 4, 8)), ssf.layers[0])


class TestJointForward:
    def test_identity_at_init_through_head(self):
        frozen = build_backbone(CFG)
        head_cfg = MHC3Config(d=16, d_hat=8, h=2)
        head = init_mp_head(head_cfg, 3, generator(STREAM_HEAD, 0))
        rng = np.random.default_rng(9)
        for v in head.values():
            v.data = rng.standard_normal(v.data.shape) * 0.3
        raw = rand(6, 5, 16)
        psrp = init_psrp(CFG, d_h=4, seed=5)
        joint = mp_plus_forward(raw, frozen, psrp, head, head_cfg, "cls")
        from momentprobe.head import mp_forward
        plain = mp_forward(backbone_forward(raw, frozen), head, head_cfg, "cls")
        assert np.array_equal(joint.data, plain.data)

    def test_trainable_count_closed_form(self):
        psrp = init_psrp(CFG, d_h=4, seed=5)
        d, d_h, layers = CFG.width, 4, CFG.layers
        assert psrp.count() == layers * (d * d_h + 2 * d_h * d)
