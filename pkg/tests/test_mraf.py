import numpy as np
import pytest
import torch

from dsfusion.encoder import CHANNELS, FeatureMap
from dsfusion.mraf import HFD_ORDER, MultiLevelFusion, extract_hfd
from dsfusion.model import SegmentationBranch
from dsfusion.rfam import normalize_weights

SSF_ENTRIES = [("ir", "global", 3), ("vi", "local", 2)]


def _feature(modality, stream, scale, base=16, seed=0, fill=None):
    gen = torch.Generator().manual_seed(seed)
    c = CHANNELS[scale - 1]
    size = base // (2 ** (scale - 1))
    values = (
        torch.full((1, c, size, size), fill)
        if fill is not None
        else torch.randn(1, c, size, size, generator=gen)
    )
    return FeatureMap(values=values, stream=stream, scale=scale, modality=modality)


def _inputs(fill=None, seed=0):
    ssf = [_feature(m, s, sc, seed=seed + i, fill=fill) for i, (m, s, sc) in enumerate(SSF_ENTRIES)]
    hfd = [
        _feature(m, s, 1, seed=seed + 10 + i, fill=fill) for i, (m, s) in enumerate(HFD_ORDER)
    ]
    return ssf, hfd


class TestExtractHfd:
    def test_order_and_shapes(self):
        torch.manual_seed(0)
        b_ir = SegmentationBranch(2, "ir").eval()
        b_vi = SegmentationBranch(2, "vi").eval()
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            pyr_ir = b_ir.pyramids(x)
            pyr_vi = b_vi.pyramids(torch.rand(1, 1, 32, 32))
        hfd = extract_hfd(pyr_ir, pyr_vi)
        assert [(m.modality, m.stream) for m in hfd] == list(HFD_ORDER)
        assert all(m.scale == 1 for m in hfd)
        assert all(m.values.shape[1:] == (32, 16, 16) for m in hfd)

    def test_identical_inputs_identical_branches(self):
        torch.manual_seed(0)
        b_ir = SegmentationBranch(2, "ir").eval()
        b_vi = SegmentationBranch(2, "vi").eval()
        b_vi.load_state_dict(b_ir.state_dict())
        x = torch.rand(1, 1, 32, 32)
        with torch.no_grad():
            hfd = extract_hfd(b_ir.pyramids(x), b_vi.pyramids(x))
        assert torch.equal(hfd[0].values, hfd[1].values)  # ic == vc
        assert torch.equal(hfd[2].values, hfd[3].values)  # it == vt


class TestFuse:
    def test_one_hot_pre_head(self):
        torch.manual_seed(0)
        mraf = MultiLevelFusion(SSF_ENTRIES).eval()
        ssf, hfd = _inputs()
        k = 3  # one of the detail entries
        one_hot = torch.zeros(len(ssf) + len(hfd))
        one_hot[k] = 1.0
        with torch.no_grad():
            s = mraf.weighted_sum(ssf, hfd, weights=one_hot)
            expected = mraf.projections[k]((ssf + hfd)[k].values)
        assert torch.allclose(s, expected, atol=1e-6)

    def test_zero_features_constant_output(self):
        torch.manual_seed(0)
        mraf = MultiLevelFusion(SSF_ENTRIES).eval()
        ssf, hfd = _inputs(fill=0.0)
        with torch.no_grad():
            y = mraf(ssf, hfd)
        flat = y.reshape(-1)
        assert torch.allclose(flat, flat[:1].expand_as(flat), atol=1e-6)

    def test_raw_shift_invariance(self):
        torch.manual_seed(0)
        mraf = MultiLevelFusion(SSF_ENTRIES).eval()
        ssf, hfd = _inputs(seed=4)
        with torch.no_grad():
            a = mraf(ssf, hfd)
            mraf.weights.raw.add_(2.5)
            b = mraf(ssf, hfd)
        assert torch.allclose(a, b, atol=1e-6)

    def test_output_in_unit_interval(self):
        torch.manual_seed(1)
        mraf = MultiLevelFusion(SSF_ENTRIES).eval()
        ssf, hfd = _inputs(seed=9)
        for m in ssf + hfd:
            m.values.mul_(50.0)
        with torch.no_grad():
            y = mraf(ssf, hfd)
        assert y.shape == (1, 1, 32, 32)
        assert float(y.min()) >= 0.0
        assert float(y.max()) <= 1.0

    def test_pre_head_linearity(self):
        torch.manual_seed(0)
        mraf = MultiLevelFusion(SSF_ENTRIES).eval()
        ssf, hfd = _inputs(seed=2)
        n = len(ssf) + len(hfd)
        w1 = normalize_weights(torch.randn(n))
        w2 = normalize_weights(torch.randn(n))
        alpha = 0.25
        with torch.no_grad():
            mixed = mraf.weighted_sum(ssf, hfd, weights=alpha * w1 + (1 - alpha) * w2)
            combo = alpha * mraf.weighted_sum(ssf, hfd, weights=w1) + (
                1 - alpha
            ) * mraf.weighted_sum(ssf, hfd, weights=w2)
        assert torch.allclose(mixed, combo, atol=1e-5)

    def test_weight_length_mismatch(self):
        mraf = MultiLevelFusion(SSF_ENTRIES)
        ssf, hfd = _inputs()
        with pytest.raises(ValueError, match="weights"):
            mraf.weighted_sum(ssf, hfd, weights=torch.ones(3))

    def test_wrong_entries_rejected(self):
        mraf = MultiLevelFusion(SSF_ENTRIES)
        ssf, hfd = _inputs()
        with pytest.raises(ValueError, match="do not match"):
            mraf.weighted_sum(list(reversed(ssf)), hfd)

    def test_non_finite_rejected(self):
        mraf = MultiLevelFusion(SSF_ENTRIES)
        ssf, hfd = _inputs()
        ssf[0].values[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            mraf.weighted_sum(ssf, hfd)

    def test_needs_at_least_one_semantic_entry(self):
        with pytest.raises(ValueError, match="at least one"):
            MultiLevelFusion([])
