"""Multi-level representation-adaptive fusion: weighted merge of the selected
low-frequency semantic maps with the four shallow high-frequency maps, decoded
into the fused luminance image."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import CHANNELS, FeatureMap, FeaturePyramid
from .rfam import EMBED_DIM, ModulationWeights

# shallow detail maps, fixed order: (ir, conv), (vi, conv), (ir, transformer), (vi, transformer)
HFD_ORDER: tuple[tuple[str, str], ...] = (
    ("ir", "local"),
    ("vi", "local"),
    ("ir", "global"),
    ("vi", "global"),
)
HFD_TAGS = ("Hfd_ic", "Hfd_vc", "Hfd_it", "Hfd_vt")


def extract_hfd(
    pyramids_ir: dict[str, FeaturePyramid], pyramids_vi: dict[str, FeaturePyramid]
) -> list[FeatureMap]:
    """Block-1 maps of both streams and modalities, always in HFD_ORDER."""
    by_modality = {"ir": pyramids_ir, "vi": pyramids_vi}
    return [by_modality[mod][stream].maps[0] for mod, stream in HFD_ORDER]


class MultiLevelFusion(nn.Module):
    """Softmax-weighted sum of projected semantic + detail maps on the stride-2
    grid, reconstructed to a [0,1] luminance image by a shallow conv head."""

    def __init__(self, ssf_entries: list[tuple[str, str, int]], embed_dim: int = EMBED_DIM):
        super().__init__()
        if not ssf_entries:
            raise ValueError("need at least one selected semantic feature")
        self.ssf_entries = list(ssf_entries)  # (modality, stream, scale)
        self.weights = ModulationWeights(len(ssf_entries) + len(HFD_ORDER))
        channels = [CHANNELS[scale - 1] for _, _, scale in ssf_entries]
        channels += [CHANNELS[0]] * len(HFD_ORDER)
        self.projections = nn.ModuleList([nn.Conv2d(c, embed_dim, 1) for c in channels])
        self.conv1 = nn.Conv2d(embed_dim, 32, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(32, 1, 3, padding=1, padding_mode="replicate")

    def _check_entries(self, ssf: list[FeatureMap], hfd: list[FeatureMap]) -> list[FeatureMap]:
        got = [(m.modality, m.stream, m.scale) for m in ssf]
        if got != self.ssf_entries:
            raise ValueError(f"semantic entries {got} do not match configured {self.ssf_entries}")
        hfd_got = [(m.modality, m.stream) for m in hfd]
        if hfd_got != list(HFD_ORDER) or any(m.scale != 1 for m in hfd):
            raise ValueError(f"detail entries must be scale-1 maps in {HFD_ORDER}, got {hfd_got}")
        return ssf + hfd

    def weighted_sum(
        self,
        ssf: list[FeatureMap],
        hfd: list[FeatureMap],
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Pre-head weighted feature sum on the stride-2 grid."""
        entries = self._check_entries(ssf, hfd)
        if weights is None:
            weights = self.weights.effective
        if weights.shape[0] != len(entries):
            raise ValueError(f"expected {len(entries)} weights, got {weights.shape[0]}")
        grid = hfd[0].values.shape[-2:]
        total = None
        for k, m in enumerate(entries):
            v = m.values
            if not torch.isfinite(v).all():
                raise ValueError(f"non-finite feature map ({m.modality}, {m.stream}, {m.scale})")
            if v.shape[-2:] != grid:
                v = F.interpolate(v, size=grid, mode="bilinear", align_corners=False)
            term = weights[k] * self.projections[k](v)
            total = term if total is None else total + term
        return total

    def forward(
        self,
        ssf: list[FeatureMap],
        hfd: list[FeatureMap],
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        s = self.weighted_sum(ssf, hfd, weights)
        x = F.relu(self.conv1(s))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.conv2(x))
