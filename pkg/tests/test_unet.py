"""Encoder-decoder network: channel laws, stage semantics, gradients."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ghostprobe import tensor as T
from ghostprobe.errors import ShapeError
from ghostprobe.gradcheck import check_gradients
from ghostprobe.optim import make_rng
from ghostprobe.tensor import Tensor
from ghostprobe.unet import (
    UNetConfig,
    bottleneck_channels,
    contract_stage,
    decode,
    encode,
    expand_stage,
    init_unet_params,
    skip_channels,
    stage_in_channels,
    unet_forward,
)


def rand_input(rng, cfg, size, batch=1):
    data = rng.standard_normal((batch, cfg.in_channels, size, size))
    return Tensor(data.astype(np.float32))


class TestChannelLaws:
    def test_worked_example(self):
        # depth 2, base 4, 64x64x4 input
        cfg = UNetConfig(in_channels=4, base_channels=4, depth=2)
        params = init_unet_params(make_rng(0), cfg)
        pyr = unet_forward(rand_input(make_rng(1), cfg, 64), cfg, params)
        assert [s.shape for s in pyr.skips] == [(1, 8, 64, 64), (1, 16, 32, 32)]
        assert pyr.bottleneck.shape == (1, 32, 16, 16)
        assert [d.shape for d in pyr.decoded] == [(1, 8, 64, 64), (1, 16, 32, 32)]
        assert pyr.final.shape == (1, 8, 64, 64)

    def test_channel_helpers(self):
        cfg = UNetConfig(in_channels=5, base_channels=3, depth=3)
        assert [skip_channels(cfg, l) for l in (1, 2, 3)] == [6, 12, 24]
        assert stage_in_channels(cfg, 1) == 5
        assert stage_in_channels(cfg, 3) == 12
        assert bottleneck_channels(cfg) == 48

    def test_random_configs(self):
        rng = make_rng(7)
        for _ in range(12):
            depth = int(rng.integers(1, 4))
            cfg = UNetConfig(in_channels=int(rng.integers(1, 5)),
                             base_channels=int(rng.integers(1, 5)),
                             depth=depth)
            size = (2 ** depth) * int(rng.integers(1, 4)) * 2
            params = init_unet_params(rng, cfg)
            pyr = unet_forward(rand_input(rng, cfg, size, batch=2), cfg, params)
            for l in range(1, depth + 1):
                ext = size // 2 ** (l - 1)
                assert pyr.skips[l - 1].shape == (2, skip_channels(cfg, l), ext, ext)
                assert pyr.decoded[l - 1].shape == pyr.skips[l - 1].shape
            bott = size // 2 ** depth
            assert pyr.bottleneck.shape == (2, bottleneck_channels(cfg), bott, bott)
            assert pyr.final is pyr.decoded[0]

    def test_single_stage_round_trip(self):
        cfg = UNetConfig(in_channels=1, base_channels=2, depth=1)
        params = init_unet_params(make_rng(3), cfg)
        pyr = unet_forward(rand_input(make_rng(4), cfg, 8), cfg, params)
        assert pyr.final.shape == (1, 4, 8, 8)
        assert pyr.bottleneck.shape == (1, 8, 4, 4)


class TestValidation:
    def test_wrong_channel_count(self):
        cfg = UNetConfig(in_channels=3, base_channels=2, depth=1)
        params = init_unet_params(make_rng(0), cfg)
        x = Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32))
        with pytest.raises(ShapeError):
            encode(x, cfg, params)

    def test_extent_not_divisible(self):
        cfg = UNetConfig(in_channels=1, base_channels=2, depth=3)
        params = init_unet_params(make_rng(0), cfg)
        x = Tensor(np.zeros((1, 1, 12, 12), dtype=np.float32))
        with pytest.raises(ShapeError):
            encode(x, cfg, params)

    def test_odd_extent_at_stage(self):
        rng = make_rng(1)
        w1 = Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32))
        b1 = Tensor(np.zeros(2, dtype=np.float32))
        w2 = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        b2 = Tensor(np.zeros(2, dtype=np.float32))
        x = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        with pytest.raises(ShapeError):
            contract_stage(x, w1, b1, w2, b2)

    def test_mismatched_skip_extents(self):
        rng = make_rng(2)
        wt = Tensor(rng.standard_normal((4, 2, 2, 2)).astype(np.float32))
        bt = Tensor(np.zeros(2, dtype=np.float32))
        w1 = Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        b1 = Tensor(np.zeros(2, dtype=np.float32))
        w2 = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        b2 = Tensor(np.zeros(2, dtype=np.float32))
        x = Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32))
        skip = Tensor(np.zeros((1, 2, 6, 6), dtype=np.float32))
        with pytest.raises(ShapeError):
            expand_stage(x, skip, wt, bt, w1, b1, w2, b2)


class TestStageSemantics:
    def test_zero_params_give_zero_output(self):
        cfg = UNetConfig(in_channels=2, base_channels=2, depth=2)
        params = init_unet_params(make_rng(0), cfg)
        for p in params.values():
            p.data[...] = 0.0
        pyr = unet_forward(rand_input(make_rng(1), cfg, 16), cfg, params)
        assert_array_equal(pyr.final.data, np.zeros_like(pyr.final.data))

    def test_relu_only_after_second_conv(self):
        # A stage with w2 = identity (centred delta) and a large negative b1
        # must emerge all zero: the first conv's negative values pass through
        # unrectified and only the final ReLU clips them.
        rng = make_rng(5)
        w1 = Tensor(rng.standard_normal((2, 1, 3, 3)).astype(np.float32))
        b1 = Tensor(np.full(2, -100.0, dtype=np.float32))
        w2_data = np.zeros((2, 2, 3, 3), dtype=np.float32)
        w2_data[0, 0, 1, 1] = 1.0
        w2_data[1, 1, 1, 1] = 1.0
        w2 = Tensor(w2_data)
        b2 = Tensor(np.zeros(2, dtype=np.float32))
        x = Tensor(rng.standard_normal((1, 1, 6, 6)).astype(np.float32))
        skip, pooled = contract_stage(x, w1, b1, w2, b2)
        assert_array_equal(skip.data, np.zeros_like(skip.data))
        assert_array_equal(pooled.data, np.zeros_like(pooled.data))

    def test_expand_concat_order_upsampled_first(self):
        # c1 weights that read only the first half of the concatenated
        # channels see exactly the upsampled map, proving the order
        # (upsampled, skip).
        rng = make_rng(6)
        cout = 3
        wt = Tensor(rng.standard_normal((6, cout, 2, 2)).astype(np.float32))
        bt = Tensor(rng.standard_normal(cout).astype(np.float32))
        w1_data = np.zeros((cout, 2 * cout, 3, 3), dtype=np.float32)
        w1_data[:, :cout] = rng.standard_normal((cout, cout, 3, 3))
        w1 = Tensor(w1_data)
        b1 = Tensor(rng.standard_normal(cout).astype(np.float32))
        w2 = Tensor(rng.standard_normal((cout, cout, 3, 3)).astype(np.float32))
        b2 = Tensor(rng.standard_normal(cout).astype(np.float32))
        x = Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
        skip = Tensor(rng.standard_normal((1, cout, 8, 8)).astype(np.float32))
        got = expand_stage(x, skip, wt, bt, w1, b1, w2, b2)
        up = T.transpose_conv2x2(x, wt, bt)
        w1_up = Tensor(w1_data[:, :cout].copy())
        want = T.relu(T.conv2d(T.conv2d(up, w1_up, b1, padding=1), w2, b2, padding=1))
        assert_allclose(got.data, want.data, rtol=1e-5, atol=1e-6)

    def test_decoder_consumes_finer_skips_in_order(self):
        # Zeroing one skip must change exactly the decoder stages at and
        # below it, not the coarser ones.
        cfg = UNetConfig(in_channels=1, base_channels=2, depth=2)
        params = init_unet_params(make_rng(8), cfg)
        x = rand_input(make_rng(9), cfg, 8)
        skips, bottleneck = encode(x, cfg, params)
        base = decode(bottleneck, skips, cfg, params)
        zeroed = [skips[0], Tensor(np.zeros_like(skips[1].data))]
        other = decode(bottleneck, zeroed, cfg, params)
        assert not np.array_equal(base[1].data, other[1].data)
        zeroed = [Tensor(np.zeros_like(skips[0].data)), skips[1]]
        other = decode(bottleneck, zeroed, cfg, params)
        assert_array_equal(base[1].data, other[1].data)
        assert not np.array_equal(base[0].data, other[0].data)


class TestInjectedWidths:
    def test_bottleneck_injection_widens_coarsest_stage(self):
        cfg = UNetConfig(in_channels=2, base_channels=2, depth=2)
        plain = init_unet_params(make_rng(0), cfg)
        inj = init_unet_params(make_rng(0), cfg, inject_level=0, inject_channels=5)
        assert plain["dec2.up.w"].shape == (16, 8, 2, 2)
        assert inj["dec2.up.w"].shape == (21, 8, 2, 2)
        assert inj["dec1.up.w"].shape == plain["dec1.up.w"].shape

    def test_mid_level_injection_widens_next_finer_stage(self):
        cfg = UNetConfig(in_channels=2, base_channels=2, depth=2)
        plain = init_unet_params(make_rng(0), cfg)
        inj = init_unet_params(make_rng(0), cfg, inject_level=2, inject_channels=5)
        assert inj["dec2.up.w"].shape == plain["dec2.up.w"].shape
        assert plain["dec1.up.w"].shape == (8, 4, 2, 2)
        assert inj["dec1.up.w"].shape == (13, 4, 2, 2)

    def test_finest_level_injection_changes_no_decoder_stage(self):
        cfg = UNetConfig(in_channels=2, base_channels=2, depth=2)
        plain = init_unet_params(make_rng(0), cfg)
        inj = init_unet_params(make_rng(0), cfg, inject_level=1, inject_channels=5)
        assert {k: v.shape for k, v in inj.items()} == {k: v.shape for k, v in plain.items()}


class TestGradients:
    def test_full_network_matches_finite_differences(self):
        cfg = UNetConfig(in_channels=2, base_channels=2, depth=2)
        rng = make_rng(11)
        params = {k: Tensor(v.data.astype(np.float64), requires_grad=True)
                  for k, v in init_unet_params(rng, cfg).items()}
        x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
        target = rng.random((1, 4, 8, 8))

        def build_loss():
            pyr = unet_forward(x, cfg, params)
            return T.mean(T.mul(T.add(pyr.final, -target), T.add(pyr.final, -target)))

        tensors = dict(params, x=x)
        worst = check_gradients(build_loss, tensors, samples=6, rng=make_rng(12))
        assert worst < 1e-4


class TestDeterminism:
    def test_same_seed_same_forward(self):
        cfg = UNetConfig(in_channels=3, base_channels=2, depth=2)
        outs = []
        for _ in range(2):
            params = init_unet_params(make_rng(21), cfg)
            pyr = unet_forward(rand_input(make_rng(22), cfg, 16), cfg, params)
            outs.append(pyr.final.data.copy())
        assert_array_equal(outs[0], outs[1])
