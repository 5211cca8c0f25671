"""Joint training orchestration and fusion inference.

Warm-starts both segmentation branches from their pilot checkpoints, trains
them together with the fusion module under the combined loss, and logs
per-step loss rows plus per-step modulation-weight invariants.
"""

from __future__ import annotations

import csv
import json
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import (
    ImagePair,
    PatchGridSpec,
    load_pair,
    load_split_patches,
    pad_to_multiple,
    recombine,
    save_image,
    scan_split,
    to_luma_chroma,
)
from .losses import LOSS_CSV_HEADER, total_loss
from .model import FusionModel, count_parameters, load_checkpoint, load_state_into, save_checkpoint
from .pilot import (
    branch_inputs,
    load_selection,
    selection_from_dict,
    selection_to_dict,
    stack_labels,
)
from .utils import batch_indices, seed_everything, train_val_split


@dataclass
class TrainConfig:
    data_root: str
    pilot_ckpt_ir: str
    pilot_ckpt_vi: str
    selection_ir: str
    selection_vi: str
    num_classes: int = 2
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 20
    lam: float = 0.1
    patch_size: int = 256
    stride: int = 100
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    weight_lr: float = 5e-2
    val_fraction: float = 0.1
    grad_clip: float = 5.0
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def _require_pilot_artifacts(config: TrainConfig) -> None:
    missing = [
        p
        for p in (
            config.pilot_ckpt_ir,
            config.pilot_ckpt_vi,
            config.selection_ir,
            config.selection_vi,
        )
        if not Path(p).is_file()
    ]
    if missing:
        raise FileNotFoundError(
            "missing pilot artifacts (run the pilot + select steps first): "
            + ", ".join(str(m) for m in missing)
        )


def build_joint_model(config: TrainConfig) -> FusionModel:
    sel_ir = load_selection(config.selection_ir)
    sel_vi = load_selection(config.selection_vi)
    model = FusionModel(config.num_classes, sel_ir, sel_vi)
    for branch, ckpt in (
        (model.branch_ir, config.pilot_ckpt_ir),
        (model.branch_vi, config.pilot_ckpt_vi),
    ):
        payload = load_checkpoint(ckpt)
        load_state_into(branch, payload["state_dict"], source=str(ckpt))
    return model


def _optimizer(model: FusionModel, config: TrainConfig) -> torch.optim.Adam:
    weight_params = [m.raw for m in model.modulation_modules().values()]
    weight_ids = {id(p) for p in weight_params}
    rest = [p for p in model.parameters() if id(p) not in weight_ids]
    return torch.optim.Adam(
        [{"params": rest}, {"params": weight_params, "lr": config.weight_lr}],
        lr=config.lr,
        betas=config.betas,
    )


class _WeightLog:
    """Per-epoch effective-weight rows, flushed to per-module CSV files."""

    def __init__(self):
        self.rows: dict[str, list[tuple[int, np.ndarray]]] = {
            "rfam_ir": [],
            "rfam_vi": [],
            "mraf": [],
        }

    def record(self, model: FusionModel, epoch: int) -> None:
        for name, module in model.modulation_modules().items():
            self.rows[name].append((epoch, module.effective.detach().cpu().numpy()))

    def flush(self, run_dir: Path) -> None:
        from .rfam import ENTRY_NAMES

        files = {
            "rfam_ir": ("weights_ir.csv", list(ENTRY_NAMES)),
            "rfam_vi": ("weights_vi.csv", list(ENTRY_NAMES)),
            "mraf": ("weights_fusion.csv", None),
        }
        for name, (fname, header_names) in files.items():
            rows = self.rows[name]
            with open(run_dir / fname, "w", newline="") as f:
                writer = csv.writer(f)
                if rows:
                    names = header_names or [f"w_{k}" for k in range(len(rows[0][1]))]
                else:
                    names = header_names or []
                writer.writerow(["epoch", *names])
                for epoch, w in rows:
                    writer.writerow([epoch, *[repr(float(v)) for v in w]])


def train_joint(config: TrainConfig, run_dir: str | Path) -> Path:
    """Run joint training; returns the run directory it populated."""
    _require_pilot_artifacts(config)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)
    pilots_dir = run_dir / "pilots"
    pilots_dir.mkdir(exist_ok=True)
    for src in (
        config.pilot_ckpt_ir,
        config.pilot_ckpt_vi,
        config.selection_ir,
        config.selection_vi,
    ):
        shutil.copy2(src, pilots_dir / Path(src).name)

    seed_everything(config.seed)
    device = torch.device(config.device)

    spec = PatchGridSpec(patch_size=config.patch_size, stride=config.stride)
    patches = load_split_patches(config.data_root, "train", spec, require_labels=True)
    ir = torch.from_numpy(branch_inputs(patches, "ir"))[:, None].to(device)
    vi = torch.from_numpy(branch_inputs(patches, "vi"))[:, None].to(device)
    labels = torch.from_numpy(stack_labels(patches)).to(device)

    model = build_joint_model(config).to(device)
    (run_dir / "config.json").write_text(
        json.dumps({**asdict(config), "parameters": count_parameters(model)}, indent=2) + "\n"
    )
    optim = _optimizer(model, config)

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = train_val_split(len(patches), config.val_fraction, rng)
    sample_idx = (val_idx or train_idx)[:4]

    ckpt_extra = {
        "num_classes": config.num_classes,
        "selection_ir": selection_to_dict(model.selection_ir),
        "selection_vi": selection_to_dict(model.selection_vi),
    }
    weight_log = _WeightLog()
    best_val = float("inf")
    step = 0
    loss_f = open(run_dir / "losses.csv", "w", newline="")
    inv_f = open(run_dir / "invariants.csv", "w", newline="")
    loss_csv = csv.writer(loss_f)
    inv_csv = csv.writer(inv_f)
    loss_csv.writerow(LOSS_CSV_HEADER)
    inv_csv.writerow(["step", "rfam_ir_sum", "rfam_vi_sum", "mraf_sum", "min_weight"])
    try:
        for epoch in range(config.epochs):
            if config.max_steps is not None and step >= config.max_steps:
                break
            model.train()
            order = [train_idx[i] for i in rng.permutation(len(train_idx))]
            for batch in batch_indices(order, config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                fused, logits_ir, logits_vi = model(ir[batch], vi[batch])
                loss, breakdown = total_loss(
                    fused, ir[batch], vi[batch], labels[batch], logits_ir, logits_vi,
                    lam=config.lam,
                )
                optim.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optim.step()
                _assert_weight_invariants(model, inv_csv, step)
                loss_csv.writerow(breakdown.csv_row(step))
                step += 1
            weight_log.record(model, epoch)

            val_loss = _validate(model, ir, vi, labels, val_idx or train_idx, config)
            if val_loss < best_val:
                best_val = val_loss
                save_checkpoint(
                    model,
                    run_dir / "checkpoints" / "best.pt",
                    extra={**ckpt_extra, "epoch": epoch, "val_loss": val_loss},
                )
                _save_samples(model, ir, vi, patches, sample_idx, run_dir / "samples")
    finally:
        loss_f.close()
        inv_f.close()
    save_checkpoint(model, run_dir / "checkpoints" / "last.pt", extra=ckpt_extra)
    weight_log.flush(run_dir)
    return run_dir


def _assert_weight_invariants(model: FusionModel, inv_csv, step: int, tol: float = 1e-6) -> None:
    sums, mins = [], []
    for module in model.modulation_modules().values():
        module.check_invariants(tol)
        eff = module.effective.detach()
        sums.append(float(eff.sum()))
        mins.append(float(eff.min()))
    inv_csv.writerow([step, *[repr(s) for s in sums], repr(min(mins))])


def _validate(model, ir, vi, labels, idx, config: TrainConfig) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for batch in batch_indices(list(idx), config.batch_size):
            fused, logits_ir, logits_vi = model(ir[batch], vi[batch])
            _, breakdown = total_loss(
                fused, ir[batch], vi[batch], labels[batch], logits_ir, logits_vi, lam=config.lam
            )
            losses.append(breakdown.l_total)
    return float(np.mean(losses)) if losses else float("inf")


def _save_samples(model, ir, vi, patches: list[ImagePair], idx, samples_dir: Path) -> None:
    model.eval()
    with torch.no_grad():
        for i in idx:
            fused, _, _ = model(ir[i : i + 1], vi[i : i + 1])
            save_image(samples_dir / f"{patches[i].id}.png", fused[0, 0].cpu().numpy())


def model_from_checkpoint(path: str | Path) -> FusionModel:
    payload = load_checkpoint(path)
    extra = payload.get("extra", {})
    for key in ("num_classes", "selection_ir", "selection_vi"):
        if key not in extra:
            raise RuntimeError(f"checkpoint {path} lacks '{key}' metadata")
    model = FusionModel(
        extra["num_classes"],
        selection_from_dict(extra["selection_ir"]),
        selection_from_dict(extra["selection_vi"]),
    )
    load_state_into(model, payload["state_dict"], source=str(path))
    return model.eval()


def fuse_pair(model: FusionModel, pair: ImagePair, rgb: bool = False, device: str = "cpu"):
    """Fuse one pair; returns (image array, forward seconds)."""
    color = to_luma_chroma(pair.visible)
    ir_p, size = pad_to_multiple(pair.infrared, 16)
    y_p, _ = pad_to_multiple(color.y, 16)
    dev = torch.device(device)
    ir_t = torch.from_numpy(ir_p)[None, None].to(dev)
    y_t = torch.from_numpy(y_p)[None, None].to(dev)
    model.eval()
    t0 = time.perf_counter()
    with torch.no_grad():
        fused, _, _ = model(ir_t, y_t)
    seconds = time.perf_counter() - t0
    fused_y = fused[0, 0].cpu().numpy()[: size[0], : size[1]]
    if rgb:
        return recombine(fused_y, color.cb, color.cr), seconds
    return fused_y, seconds


def fuse_inference(
    checkpoint: str | Path,
    data_dir: str | Path,
    out_dir: str | Path,
    rgb: bool = False,
    ids: list[str] | None = None,
    device: str = "cpu",
) -> list[tuple[str, float]]:
    """Fuse every pair under data_dir/{ir,vi}; writes PNGs plus timing.csv."""
    model = model_from_checkpoint(checkpoint).to(torch.device(device))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = scan_split(data_dir)
    if ids is not None:
        wanted = set(ids)
        refs = [r for r in refs if r.id in wanted]
        missing = wanted - {r.id for r in refs}
        if missing:
            raise FileNotFoundError(f"ids not in dataset: {', '.join(sorted(missing))}")
    timings = []
    for ref in refs:
        pair = load_pair(ref)
        img, seconds = fuse_pair(model, pair, rgb=rgb, device=device)
        save_image(out_dir / f"{ref.id}.png", img)
        timings.append((ref.id, seconds))
    with open(out_dir / "timing.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "seconds"])
        for pid, s in timings:
            writer.writerow([pid, repr(s)])
        writer.writerow(["mean", repr(float(np.mean([s for _, s in timings])))])
    return timings
