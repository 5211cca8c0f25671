import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dsfusion.encoder import (
    CHANNELS,
    FeatureMap,
    GlobalStream,
    LocalStream,
    refine,
)

EXPECTED_64 = [(32, 32, 32), (64, 16, 16), (160, 8, 8), (256, 4, 4)]


@pytest.fixture(scope="module")
def streams():
    torch.manual_seed(0)
    return GlobalStream("ir").eval(), LocalStream("ir").eval()


def _shapes(pyramid):
    return [tuple(m.values.shape[1:]) for m in pyramid.maps]


class TestShapes:
    def test_schedule_at_256(self, streams):
        g, l = streams
        x = torch.rand(1, 1, 256, 256)
        expected = [(32, 128, 128), (64, 64, 64), (160, 32, 32), (256, 16, 16)]
        with torch.no_grad():
            assert _shapes(g(x)) == expected
            assert _shapes(l(x)) == expected

    def test_schedule_at_64(self, streams):
        g, l = streams
        x = torch.rand(2, 1, 64, 64)
        with torch.no_grad():
            assert _shapes(g(x)) == EXPECTED_64
            assert _shapes(l(x)) == EXPECTED_64

    @settings(max_examples=4)
    @given(h=st.sampled_from([16, 32, 48]), w=st.sampled_from([16, 32, 48]))
    def test_schedule_random_sizes(self, streams, h, w):
        g, l = streams
        x = torch.rand(1, 1, h, w)
        expected = [(c, h // s, w // s) for c, s in zip(CHANNELS, (2, 4, 8, 16))]
        with torch.no_grad():
            assert _shapes(g(x)) == expected
            assert _shapes(l(x)) == expected


class TestGuards:
    def test_zero_input_finite(self, streams):
        g, _ = streams
        with torch.no_grad():
            pyr = g(torch.zeros(1, 1, 32, 32))
        assert all(torch.isfinite(m.values).all() for m in pyr.maps)

    def test_non_divisible_input(self, streams):
        g, l = streams
        for stream in (g, l):
            with pytest.raises(ValueError, match="pad"):
                stream(torch.rand(1, 1, 60, 64))

    def test_nan_input(self, streams):
        _, l = streams
        x = torch.full((1, 1, 32, 32), float("nan"))
        with pytest.raises(ValueError, match="non-finite"):
            l(x)

    def test_wrong_channel_count(self, streams):
        g, _ = streams
        with pytest.raises(ValueError):
            g(torch.rand(1, 3, 32, 32))


class TestLocalConvContract:
    def test_constant_input_first_preactivation(self):
        torch.manual_seed(1)
        local = LocalStream("ir")
        conv = local.blocks[0].conv1
        with torch.no_grad():
            conv.bias.zero_()
            kernel_sums = conv.weight.sum(dim=(1, 2, 3))  # one s per output channel
        c = 0.37
        x = torch.full((1, 1, 16, 16), c)
        with torch.no_grad():
            pre = conv(x)
        expected = (kernel_sums * c)[None, :, None, None].expand_as(pre)
        assert torch.allclose(pre, expected, atol=1e-5)


class TestDeterminism:
    def test_same_seed_same_output(self):
        x = torch.rand(1, 1, 32, 32)
        outs = []
        for _ in range(2):
            torch.manual_seed(7)
            g = GlobalStream("ir").eval()
            l = LocalStream("ir").eval()
            with torch.no_grad():
                outs.append((g(x).maps[-1].values, l(x).maps[-1].values))
        assert torch.equal(outs[0][0], outs[1][0])
        assert torch.equal(outs[0][1], outs[1][1])

    def test_repeat_forward_identical(self, streams):
        g, l = streams
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            a = g(x).maps[0].values
            b = g(x).maps[0].values
        assert torch.equal(a, b)


def _fm(values):
    return FeatureMap(values=values, stream="local", scale=1, modality="ir")


class TestRefine:
    def test_single_channel(self):
        v = torch.rand(1, 1, 4, 4)
        r = refine(_fm(v))
        assert torch.equal(r.values[:, 0], v[:, 0])
        assert torch.equal(r.values[:, 1], v[:, 0])

    def test_hand_case(self):
        ch0 = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        ch1 = torch.tensor([[4.0, 3.0], [2.0, 1.0]])
        r = refine(_fm(torch.stack([ch0, ch1])[None]))
        assert torch.equal(r.values[0, 0], torch.tensor([[4.0, 3.0], [3.0, 4.0]]))
        assert torch.equal(r.values[0, 1], torch.full((2, 2), 2.5))

    def test_constant(self):
        v = torch.full((1, 5, 3, 3), -1.25)
        r = refine(_fm(v))
        assert torch.allclose(r.values, torch.full((1, 2, 3, 3), -1.25))

    @given(
        channels=st.integers(1, 6),
        seed=st.integers(0, 1000),
    )
    def test_max_plane_ge_mean_plane(self, channels, seed):
        gen = torch.Generator().manual_seed(seed)
        v = torch.randn(1, channels, 4, 4, generator=gen)
        r = refine(_fm(v))
        assert (r.values[:, 0] >= r.values[:, 1] - 1e-6).all()

    @given(seed=st.integers(0, 1000))
    def test_channel_permutation_invariance(self, seed):
        gen = torch.Generator().manual_seed(seed)
        v = torch.randn(1, 5, 4, 4, generator=gen)
        perm = torch.randperm(5, generator=gen)
        a = refine(_fm(v)).values
        b = refine(_fm(v[:, perm])).values
        # float32 mean reduction is order-dependent at the last ulp
        assert torch.allclose(a, b, atol=1e-6)
