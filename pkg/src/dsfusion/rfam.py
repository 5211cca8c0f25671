"""Refined-feature adaptive modulation: a learnable normalized weight per refined
map, a shared-width projection, and an MLP segmentation head, plus per-epoch
weight-trajectory logging for the pilot analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import RefinedMap

EMBED_DIM = 64
HEAD_HIDDEN = 128

# fixed stacking order of the 8 weighted entries
ENTRY_ORDER: tuple[tuple[str, int], ...] = tuple(
    (stream, i) for stream in ("global", "local") for i in (1, 2, 3, 4)
)
ENTRY_NAMES = tuple(f"w_{stream[0]}{i}" for stream, i in ENTRY_ORDER)


def normalize_weights(raw: torch.Tensor) -> torch.Tensor:
    """Softmax over the raw vector: positive weights summing to 1."""
    if not torch.isfinite(raw).all():
        raise ValueError("non-finite raw weights")
    return torch.softmax(raw, dim=0)


class ModulationWeights(nn.Module):
    """Free parameter vector whose softmax is the effective weighting."""

    def __init__(self, n: int):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(n))

    @property
    def effective(self) -> torch.Tensor:
        return normalize_weights(self.raw)

    def check_invariants(self, tol: float = 1e-6) -> None:
        eff = self.effective.detach()
        total = float(eff.sum())
        if abs(total - 1.0) > tol or float(eff.min()) <= 0.0:
            raise RuntimeError(f"weight invariant violated: sum={total}, min={float(eff.min())}")


class RefinedFeatureModulation(nn.Module):
    """Weighted aggregation of the 8 refined maps into segmentation logits.

    Each (stream, scale) entry is upsampled onto the stride-2 grid, projected to
    a shared embedding width, scaled by its softmax weight, summed, then decoded
    by a two-layer MLP head and upsampled x2 back to input resolution.
    """

    def __init__(self, num_classes: int, embed_dim: int = EMBED_DIM, hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.num_classes = num_classes
        self.weights = ModulationWeights(len(ENTRY_ORDER))
        self.projections = nn.ModuleList(
            [nn.Conv2d(2, embed_dim, 1) for _ in ENTRY_ORDER]
        )
        self.head = nn.Sequential(
            nn.Conv2d(embed_dim, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, num_classes, 1),
        )

    @staticmethod
    def _ordered(refined: list[RefinedMap]) -> list[RefinedMap]:
        keys = [(m.stream, m.scale) for m in refined]
        if len(refined) != len(ENTRY_ORDER) or set(keys) != set(ENTRY_ORDER):
            raise ValueError(f"need each (stream, scale) exactly once, got {sorted(keys)}")
        by_key = {(m.stream, m.scale): m for m in refined}
        return [by_key[k] for k in ENTRY_ORDER]

    def weighted_sum(
        self, refined: list[RefinedMap], weights: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Pre-head aggregation on the stride-2 grid; linear in the weights."""
        ordered = self._ordered(refined)
        if weights is None:
            weights = self.weights.effective
        if weights.shape[0] != len(ordered):
            raise ValueError(f"expected {len(ordered)} weights, got {weights.shape[0]}")
        grid = ordered[0].values.shape[-2:]
        total = None
        for k, m in enumerate(ordered):
            v = m.values
            if v.shape[-2:] != grid:
                v = F.interpolate(v, size=grid, mode="bilinear", align_corners=False)
            term = weights[k] * self.projections[k](v)
            total = term if total is None else total + term
        return total

    def forward(
        self,
        refined: list[RefinedMap],
        out_size: tuple[int, int],
        weights: torch.Tensor | None = None,
    ) -> torch.Tensor:
        s = self.weighted_sum(refined, weights)
        logits = self.head(s)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


@dataclass
class WeightTrajectory:
    """Per-epoch snapshots of the effective weights of one modality branch."""

    modality: str
    epochs: list[int] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def final(self) -> np.ndarray:
        if not self.epochs:
            raise ValueError("empty trajectory")
        return self.weights[-1]


def record_weights(traj: WeightTrajectory, epoch: int, effective) -> WeightTrajectory:
    """Append one epoch's effective weights; epochs must strictly increase."""
    if traj.epochs and epoch <= traj.epochs[-1]:
        raise ValueError(f"epoch {epoch} not after {traj.epochs[-1]}")
    eff = np.asarray(
        effective.detach().cpu().numpy() if isinstance(effective, torch.Tensor) else effective,
        dtype=np.float64,
    )
    if eff.shape != (len(ENTRY_ORDER),):
        raise ValueError(f"expected {len(ENTRY_ORDER)} weights, got shape {eff.shape}")
    if abs(float(eff.sum()) - 1.0) > 1e-6 or eff.min() <= 0:
        raise ValueError("recorded weights must be positive and sum to 1")
    traj.epochs.append(epoch)
    traj.weights.append(eff)
    return traj


def save_trajectory_csv(traj: WeightTrajectory, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", *ENTRY_NAMES])
        for epoch, w in zip(traj.epochs, traj.weights):
            writer.writerow([epoch, *[repr(float(v)) for v in w]])


def load_trajectory_csv(path: str | Path, modality: str = "") -> WeightTrajectory:
    traj = WeightTrajectory(modality=modality)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["epoch", *ENTRY_NAMES]:
            raise ValueError(f"unexpected trajectory header in {path}: {header}")
        for row in reader:
            record_weights(traj, int(row[0]), np.array([float(v) for v in row[1:]]))
    return traj
