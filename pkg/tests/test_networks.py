"""Shape contracts, normalization placement, and twin-update exactness."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from dira.networks import (Adversary, Decoder, Encoder, EncoderSpec, MLPHead,
                           TwinCoupling, batch_stats_forward, l2_normalize,
                           make_momentum_copy, twin_update)

SMALL = EncoderSpec(stage_channels=(4, 8), stage_strides=(2, 2), input_size=32,
                    feature_dim=16)


class TestEncoderSpec:
    def test_default_validates(self):
        EncoderSpec().validate()

    @pytest.mark.parametrize("kw,msg", [
        ({"stage_channels": (8,), "stage_strides": (2, 2)}, "equal length"),
        ({"stage_channels": (), "stage_strides": ()}, "at least one stage"),
        ({"feature_dim": 4}, "feature_dim"),
        ({"input_size": 60}, "divide"),
        ({"input_size": 8, "stage_strides": (2, 2, 2)}, "smaller than 2x2"),
    ])
    def test_validation(self, kw, msg):
        base = {"stage_channels": (4, 8, 16), "stage_strides": (2, 2, 2)}
        base.update(kw)
        with pytest.raises(ValueError, match=msg):
            EncoderSpec(**base).validate()


class TestEncoder:
    def test_feature_shapes(self):
        enc = Encoder(SMALL)
        x = torch.randn(3, 1, 32, 32)
        feats = enc(x)
        assert feats.y.shape == (3, 16)
        assert len(feats.skips) == 2
        assert feats.skips[0].shape == (3, 4, 32, 32)
        assert feats.skips[1].shape == (3, 8, 16, 16)
        assert feats.final_map.shape == (3, 8, 8, 8)

    def test_batch_size_one_works(self):
        # GroupNorm keeps conv paths batch-size independent
        enc = Encoder(SMALL).eval()
        with torch.no_grad():
            single = enc(torch.zeros(1, 1, 32, 32)).y
            double = enc(torch.zeros(2, 1, 32, 32)).y
        assert torch.allclose(single[0], double[0])

    def test_no_batchnorm_in_conv_paths(self):
        spec = EncoderSpec()
        for module in (Encoder(spec), Decoder(spec), Adversary()):
            kinds = [type(m) for m in module.modules()]
            assert nn.BatchNorm2d not in kinds and nn.BatchNorm1d not in kinds
            assert not any(issubclass(k, nn.modules.batchnorm._BatchNorm) for k in kinds)

    def test_deterministic_forward(self):
        torch.manual_seed(0)
        enc = Encoder(SMALL).eval()
        x = torch.randn(2, 1, 32, 32)
        with torch.no_grad():
            a, b = enc(x).y, enc(x).y
        assert torch.equal(a, b)


class TestDecoder:
    def test_restoration_shape_and_range(self):
        enc, dec = Encoder(SMALL), Decoder(SMALL)
        x = torch.rand(2, 1, 32, 32)
        with torch.no_grad():
            feats = enc(x)
            out = dec(feats.final_map, feats.skips)
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_trunk_resolution(self):
        enc, dec = Encoder(SMALL), Decoder(SMALL)
        feats = enc(torch.rand(2, 1, 32, 32))
        trunk = dec.trunk(feats.final_map, feats.skips)
        assert trunk.shape == (2, 4, 32, 32)

    def test_skip_count_checked(self):
        enc, dec = Encoder(SMALL), Decoder(SMALL)
        feats = enc(torch.rand(1, 1, 32, 32))
        with pytest.raises(ValueError, match="skip tensors"):
            dec(feats.final_map, feats.skips[:1])

    def test_gradient_reaches_encoder_through_decoder(self):
        enc, dec = Encoder(SMALL), Decoder(SMALL)
        x = torch.rand(2, 1, 32, 32)
        feats = enc(x)
        loss = dec(feats.final_map, feats.skips).mean()
        loss.backward()
        grads = [p.grad for p in enc.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads)


class TestMLPHead:
    def test_layer_structure_with_batchnorm(self):
        head = MLPHead(8, [16, 16, 4], batchnorm=True)
        kinds = [type(m) for m in head.net]
        assert kinds == [nn.Linear, nn.BatchNorm1d, nn.ReLU,
                         nn.Linear, nn.BatchNorm1d, nn.ReLU, nn.Linear]
        assert head.out_dim == 4

    def test_layer_structure_without_batchnorm(self):
        head = MLPHead(8, [16, 4], batchnorm=False)
        kinds = [type(m) for m in head.net]
        assert kinds == [nn.Linear, nn.ReLU, nn.Linear]

    def test_empty_widths_rejected(self):
        with pytest.raises(ValueError, match="widths"):
            MLPHead(8, [])

    def test_output_shape(self):
        head = MLPHead(8, [16, 4])
        assert head(torch.randn(5, 8)).shape == (5, 4)


class TestBatchStatsForward:
    def test_matches_manual_batch_normalization(self):
        torch.manual_seed(1)
        head = MLPHead(6, [8, 4], batchnorm=True).eval()
        x = torch.randn(16, 6)
        got = batch_stats_forward(head, x)

        # manual: linear -> zscore with batch stats -> affine -> relu -> linear
        lin1, bn, _, lin2 = head.net
        h = lin1(x)
        var, mean = torch.var_mean(h, dim=0, unbiased=False)
        h = (h - mean) / torch.sqrt(var + bn.eps) * bn.weight + bn.bias
        expected = lin2(torch.relu(h))
        assert torch.allclose(got, expected, atol=1e-6)

    def test_running_buffers_untouched(self):
        head = MLPHead(6, [8, 4], batchnorm=True)
        bn = head.net[1]
        before = (bn.running_mean.clone(), bn.running_var.clone(),
                  bn.num_batches_tracked.clone())
        batch_stats_forward(head, torch.randn(8, 6))
        assert torch.equal(bn.running_mean, before[0])
        assert torch.equal(bn.running_var, before[1])
        assert torch.equal(bn.num_batches_tracked, before[2])

    def test_no_batchnorm_head_equals_plain_forward(self):
        head = MLPHead(6, [8, 4], batchnorm=False).eval()
        x = torch.randn(4, 6)
        with torch.no_grad():
            assert torch.equal(batch_stats_forward(head, x), head(x))

    def test_spreads_near_constant_batch(self):
        # a batch of almost identical inputs must come out with per-dim
        # spread of order 1 after batch normalization
        torch.manual_seed(0)
        head = MLPHead(6, [8, 8, 4], batchnorm=True)
        x = torch.ones(32, 6) + 1e-4 * torch.randn(32, 6)
        with torch.no_grad():
            z = batch_stats_forward(head, x)
        assert float(z.std(dim=0).mean()) > 0.05
        with torch.no_grad():
            z_eval = head.eval()(x)
        assert float(z_eval.std(dim=0).mean()) < 1e-2

    def test_single_row_rejected(self):
        head = MLPHead(6, [8, 4])
        with pytest.raises(ValueError, match="at least 2"):
            batch_stats_forward(head, torch.randn(1, 6))


class TestAdversary:
    def test_single_logit_per_image(self):
        adv = Adversary()
        out = adv(torch.rand(5, 1, 64, 64))
        assert out.shape == (5,)

    def test_exactly_four_stride2_convs(self):
        adv = Adversary()
        convs = [m for m in adv.net if isinstance(m, nn.Conv2d)]
        assert len(convs) == 4
        assert all(c.stride == (2, 2) and c.kernel_size == (3, 3) for c in convs)
        relus = [m for m in adv.net if isinstance(m, nn.LeakyReLU)]
        assert len(relus) == 3
        assert all(r.negative_slope == 0.2 for r in relus)

    def test_logit_is_global_mean_of_response_map(self):
        adv = Adversary().eval()
        x = torch.rand(2, 1, 64, 64)
        with torch.no_grad():
            expected = adv.net(x).mean(dim=(1, 2, 3))
            assert torch.equal(adv(x), expected)

    def test_channel_arity_enforced(self):
        with pytest.raises(ValueError, match="three hidden"):
            Adversary(channels=(8, 16))


class TestTwinUpdate:
    def test_exact_ema_expression(self):
        # xi' must equal m*xi + (1-m)*theta bit for bit
        torch.manual_seed(2)
        theta = [torch.randn(3, 4), torch.randn(7)]
        xi = [torch.randn(3, 4), torch.randn(7)]
        expected = [x * 0.999 + t * (1.0 - 0.999) for t, x in zip(theta, xi)]
        twin_update(TwinCoupling("momentum", 0.999), iter(theta), iter(xi))
        for got, want in zip(xi, expected):
            assert torch.equal(got, want)

    def test_momentum_one_freezes_target(self):
        theta, xi = [torch.randn(4)], [torch.randn(4)]
        before = xi[0].clone()
        twin_update(TwinCoupling("momentum", 1.0), iter(theta), iter(xi))
        assert torch.equal(xi[0], before)

    def test_momentum_zero_copies_online(self):
        theta, xi = [torch.randn(4)], [torch.randn(4)]
        twin_update(TwinCoupling("momentum", 0.0), iter(theta), iter(xi))
        assert torch.equal(xi[0], theta[0])

    def test_shared_mode_is_noop(self):
        theta, xi = [torch.randn(4)], [torch.randn(4)]
        before = xi[0].clone()
        twin_update(TwinCoupling("shared"), iter(theta), iter(xi))
        assert torch.equal(xi[0], before)

    def test_module_arguments(self):
        a, b = nn.Linear(3, 3), nn.Linear(3, 3)
        expected = [p_b * 0.9 + p_a * 0.1 for p_a, p_b in zip(a.parameters(), b.parameters())]
        twin_update(TwinCoupling("momentum", 0.9), a, b)
        for got, want in zip(b.parameters(), expected):
            assert torch.equal(got.data, want)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            twin_update(TwinCoupling("momentum", 0.5),
                        iter([torch.randn(2)]), iter([torch.randn(2), torch.randn(2)]))

    def test_coupling_validation(self):
        with pytest.raises(ValueError, match="mode"):
            TwinCoupling("ema").validate()
        with pytest.raises(ValueError, match="momentum"):
            TwinCoupling("momentum", 1.5).validate()


class TestMomentumCopy:
    def test_frozen_and_equal(self):
        enc = Encoder(SMALL)
        twin = make_momentum_copy(enc)
        for p_t, p_o in zip(twin.parameters(), enc.parameters()):
            assert not p_t.requires_grad
            assert torch.equal(p_t, p_o)
            assert p_t.data_ptr() != p_o.data_ptr()  # no storage sharing

    def test_independent_after_online_update(self):
        lin = nn.Linear(2, 2)
        twin = make_momentum_copy(lin)
        with torch.no_grad():
            lin.weight += 1.0
        assert not torch.equal(twin.weight, lin.weight)


def test_l2_normalize_unit_rows():
    z = torch.randn(6, 5, dtype=torch.float64) * 10
    n = l2_normalize(z)
    np.testing.assert_allclose(n.norm(dim=1).numpy(), 1.0, atol=1e-12)
