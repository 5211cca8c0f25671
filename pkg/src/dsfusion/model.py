"""Network assembly: one segmentation branch per modality, plus the joint
fusion model, with checkpoint save/load and a plain-text parameter manifest."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .encoder import FeatureMap, FeaturePyramid, GlobalStream, LocalStream, refine
from .mraf import MultiLevelFusion, extract_hfd
from .pilot import SignificantFeatureSelection
from .rfam import RefinedFeatureModulation


class SegmentationBranch(nn.Module):
    """Dual-stream encoder + refined-feature modulation head for one modality."""

    def __init__(self, num_classes: int, modality: str):
        super().__init__()
        self.modality = modality
        self.num_classes = num_classes
        self.global_stream = GlobalStream(modality)
        self.local_stream = LocalStream(modality)
        self.rfam = RefinedFeatureModulation(num_classes)

    def pyramids(self, x: torch.Tensor) -> dict[str, FeaturePyramid]:
        return {"global": self.global_stream(x), "local": self.local_stream(x)}

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[str, FeaturePyramid]]:
        pyr = self.pyramids(x)
        refined = [refine(m) for m in pyr["global"].maps + pyr["local"].maps]
        logits = self.rfam(refined, out_size=x.shape[-2:])
        return logits, pyr


class FusionModel(nn.Module):
    """Both modality branches feeding the fusion module with their selected
    semantic maps and shallow detail maps."""

    def __init__(
        self,
        num_classes: int,
        selection_ir: SignificantFeatureSelection,
        selection_vi: SignificantFeatureSelection,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.selection_ir = selection_ir
        self.selection_vi = selection_vi
        self.branch_ir = SegmentationBranch(num_classes, "ir")
        self.branch_vi = SegmentationBranch(num_classes, "vi")
        entries = [("ir", s, i) for s, i in selection_ir.entries]
        entries += [("vi", s, i) for s, i in selection_vi.entries]
        self.mraf = MultiLevelFusion(entries)

    def gather_ssf(
        self, pyr_ir: dict[str, FeaturePyramid], pyr_vi: dict[str, FeaturePyramid]
    ) -> list[FeatureMap]:
        pyramids = {"ir": pyr_ir, "vi": pyr_vi}
        return [
            pyramids[mod][stream].maps[scale - 1] for mod, stream, scale in self.mraf.ssf_entries
        ]

    def forward(
        self, ir: torch.Tensor, vi_y: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        logits_ir, pyr_ir = self.branch_ir(ir)
        logits_vi, pyr_vi = self.branch_vi(vi_y)
        ssf = self.gather_ssf(pyr_ir, pyr_vi)
        hfd = extract_hfd(pyr_ir, pyr_vi)
        fused = self.mraf(ssf, hfd)
        return fused, logits_ir, logits_vi

    def modulation_modules(self) -> dict[str, nn.Module]:
        return {
            "rfam_ir": self.branch_ir.rfam.weights,
            "rfam_vi": self.branch_vi.rfam.weights,
            "mraf": self.mraf.weights,
        }


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def write_manifest(model: nn.Module, path: str | Path) -> None:
    """Sidecar listing of parameter/buffer names and shapes."""
    lines = [f"{name} {tuple(t.shape)}" for name, t in model.state_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(model: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"state_dict": model.state_dict(), "extra": extra or {}}
    torch.save(payload, path)
    write_manifest(model, path.with_suffix(".manifest.txt"))
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc
    if "state_dict" not in payload:
        raise RuntimeError(f"checkpoint {path} has no state_dict")
    return payload


def load_state_into(model: nn.Module, state_dict: dict, source: str = "checkpoint") -> None:
    """Strict load; on mismatch raise with a manifest-style diff."""
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state_dict.items()}
    problems = []
    for k in sorted(set(expected) - set(got)):
        problems.append(f"missing {k} {expected[k]}")
    for k in sorted(set(got) - set(expected)):
        problems.append(f"unexpected {k} {got[k]}")
    for k in sorted(set(got) & set(expected)):
        if expected[k] != got[k]:
            problems.append(f"shape mismatch {k}: checkpoint {got[k]} vs model {expected[k]}")
    if problems:
        raise RuntimeError(f"{source} does not match model:\n" + "\n".join(problems))
    model.load_state_dict(state_dict)
