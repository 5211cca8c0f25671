"""Pilot segmentation runs and significant-feature selection.

A pilot trains one modality branch on segmentation alone, logging the
modulation-weight trajectory per epoch; the converged weights determine which
(stream, scale) features carry that modality's dominant semantics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ImagePair, to_luma_chroma
from .rfam import ENTRY_ORDER, WeightTrajectory, record_weights, save_trajectory_csv
from .utils import batch_indices, seed_everything, train_val_split


@dataclass(frozen=True)
class SelectionRule:
    """Keep the smallest top-weight prefix reaching cumulative mass tau, clipped
    to [k_min, k_max]; ties resolve in stacking order."""

    tau: float = 0.6
    k_min: int = 1
    k_max: int = 3

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if not (1 <= self.k_min <= self.k_max <= len(ENTRY_ORDER)):
            raise ValueError(f"bad clip range [{self.k_min}, {self.k_max}]")


@dataclass
class SignificantFeatureSelection:
    modality: str
    rule: SelectionRule
    entries: list[tuple[str, int]]  # (stream, scale), in selection order
    final_weights: list[float]
    trajectory_path: str | None = None

    def __post_init__(self):
        if not (self.rule.k_min <= len(self.entries) <= self.rule.k_max):
            raise ValueError(f"selection size {len(self.entries)} outside clip range")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate selection entries")


def select_significant(
    traj: WeightTrajectory, rule: SelectionRule = SelectionRule()
) -> SignificantFeatureSelection:
    """Apply the cumulative-mass rule to the final-epoch weights."""
    final = traj.final
    order = sorted(range(len(final)), key=lambda i: (-final[i], i))
    k, mass = 0, 0.0
    while k < len(order) and mass < rule.tau:
        mass += float(final[order[k]])
        k += 1
    k = min(max(k, rule.k_min), rule.k_max)
    return SignificantFeatureSelection(
        modality=traj.modality,
        rule=rule,
        entries=[ENTRY_ORDER[i] for i in order[:k]],
        final_weights=[float(v) for v in final],
    )


def selection_to_dict(sel: SignificantFeatureSelection) -> dict:
    return {
        "modality": sel.modality,
        "rule": asdict(sel.rule),
        "entries": [{"stream": s, "scale": i} for s, i in sel.entries],
        "final_weights": sel.final_weights,
        "trajectory": sel.trajectory_path,
    }


def selection_from_dict(doc: dict) -> SignificantFeatureSelection:
    return SignificantFeatureSelection(
        modality=doc["modality"],
        rule=SelectionRule(**doc["rule"]),
        entries=[(e["stream"], int(e["scale"])) for e in doc["entries"]],
        final_weights=[float(v) for v in doc["final_weights"]],
        trajectory_path=doc.get("trajectory"),
    )


def save_selection(sel: SignificantFeatureSelection, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(selection_to_dict(sel), indent=2) + "\n")


def load_selection(path: str | Path) -> SignificantFeatureSelection:
    return selection_from_dict(json.loads(Path(path).read_text()))


@dataclass
class PilotConfig:
    num_classes: int = 2
    epochs: int = 100
    batch_size: int = 20
    lr: float = 1e-3
    weight_lr: float = 5e-2  # separate rate for the 8-entry modulation vector
    seed: int = 0
    val_fraction: float = 0.1
    device: str = "cpu"


def branch_inputs(patches: list[ImagePair], modality: str) -> np.ndarray:
    """Stack the single-channel branch input: infrared, or visible luminance."""
    if modality == "ir":
        return np.stack([p.infrared for p in patches])
    if modality == "vi":
        return np.stack([to_luma_chroma(p.visible).y for p in patches])
    raise ValueError(f"unknown modality {modality!r}")


def stack_labels(patches: list[ImagePair]) -> np.ndarray:
    missing = [p.id for p in patches if p.label is None]
    if missing:
        raise ValueError(f"patches without labels: {', '.join(missing[:5])}")
    return np.stack([p.label for p in patches]).astype(np.int64)


def run_pilot(
    modality: str,
    patches: list[ImagePair],
    config: PilotConfig,
    out_dir: str | Path,
) -> tuple[Path, WeightTrajectory]:
    """Train one branch on segmentation only; persist trajectory + best checkpoint."""
    from .losses import ohem_ce
    from .model import SegmentationBranch, save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)
    device = torch.device(config.device)

    x = torch.from_numpy(branch_inputs(patches, modality))[:, None].to(device)
    labels = torch.from_numpy(stack_labels(patches)).to(device)

    branch = SegmentationBranch(config.num_classes, modality).to(device)
    param_groups = [
        {"params": [p for n, p in branch.named_parameters() if not n.endswith("weights.raw")]},
        {"params": [branch.rfam.weights.raw], "lr": config.weight_lr},
    ]
    optim = torch.optim.Adam(param_groups, lr=config.lr)

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = train_val_split(len(patches), config.val_fraction, rng)
    eval_idx = val_idx if val_idx else train_idx

    traj = WeightTrajectory(modality=modality)
    ckpt_path = out_dir / f"branch_{modality}.pt"
    best_miou = -1.0
    for epoch in range(config.epochs):
        branch.train()
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        for batch in batch_indices(order, config.batch_size):
            logits, _ = branch(x[batch])
            loss = ohem_ce(logits, labels[batch])
            optim.zero_grad()
            loss.backward()
            optim.step()
            branch.rfam.weights.check_invariants()
        record_weights(traj, epoch, branch.rfam.weights.effective)

        branch.eval()
        miou = _eval_miou(branch, x, labels, eval_idx, config)
        if miou > best_miou:
            best_miou = miou
            save_checkpoint(
                branch,
                ckpt_path,
                extra={
                    "modality": modality,
                    "num_classes": config.num_classes,
                    "epoch": epoch,
                    "miou": miou,
                },
            )
    if config.epochs == 0:
        save_checkpoint(
            branch, ckpt_path, extra={"modality": modality, "num_classes": config.num_classes}
        )
    save_trajectory_csv(traj, out_dir / f"weights_{modality}.csv")
    return ckpt_path, traj


def _eval_miou(branch, x, labels, idx, config: PilotConfig) -> float:
    from .metrics import seg_scores

    with torch.no_grad():
        scores = []
        for batch in batch_indices(idx, config.batch_size):
            logits, _ = branch(x[batch])
            pred = logits.argmax(dim=1).cpu().numpy()
            gt = labels[batch].cpu().numpy()
            scores.append(seg_scores(pred, gt, config.num_classes).miou)
    return float(np.mean(scores)) if scores else 0.0
