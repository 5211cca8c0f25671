"""Paired infrared/visible dataset handling: scanning, loading, cropping, color."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_LABEL = 255

# BT.601 full-range luma coefficients
KR, KG, KB = 0.299, 0.587, 0.114


class DatasetError(RuntimeError):
    """On-disk dataset layout or content is inconsistent."""


@dataclass(frozen=True)
class PairRef:
    id: str
    ir_path: Path
    vi_path: Path
    label_path: Path | None = None


@dataclass
class ImagePair:
    """Aligned infrared (H,W) / visible (H,W,3) rasters in [0,1], optional class labels."""

    infrared: np.ndarray
    visible: np.ndarray
    label: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        ir, vi = self.infrared, self.visible
        if ir.ndim != 2:
            raise DatasetError(f"{self.id}: infrared must be 2-D, got shape {ir.shape}")
        if vi.ndim != 3 or vi.shape[2] != 3:
            raise DatasetError(f"{self.id}: visible must be (H,W,3), got shape {vi.shape}")
        if ir.shape != vi.shape[:2]:
            raise DatasetError(f"{self.id}: size mismatch ir {ir.shape} vs vi {vi.shape[:2]}")
        for name, arr in (("infrared", ir), ("visible", vi)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DatasetError(f"{self.id}: {name} values outside [0,1]")
        if self.label is not None:
            lab = self.label
            if lab.shape != ir.shape:
                raise DatasetError(
                    f"{self.id}: size mismatch ir {ir.shape} vs label {lab.shape}"
                )
            if not np.issubdtype(lab.dtype, np.integer):
                raise DatasetError(f"{self.id}: label must be integer-typed, got {lab.dtype}")
            if lab.min() < 0 or lab.max() > 255:
                raise DatasetError(f"{self.id}: label values outside [0,255]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.infrared.shape


@dataclass(frozen=True)
class PatchGridSpec:
    """Sliding-window crop grid; the final window is clamped to the border."""

    patch_size: int = 256
    stride: int = 100

    def __post_init__(self):
        if not (0 < self.stride <= self.patch_size):
            raise ValueError(f"need 0 < stride <= patch_size, got {self.stride}/{self.patch_size}")


@dataclass
class LumaChroma:
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray


def scan_dataset(root: str | Path, split: str) -> list[PairRef]:
    """List the pairs under root/split/{ir,vi,labels}, sorted by id."""
    return scan_split(Path(root) / split)


def scan_split(split_dir: str | Path) -> list[PairRef]:
    """List the pairs under split_dir/{ir,vi,labels}, sorted by id.

    Every id must have both an ir and a vi file; labels are optional per-id.
    """
    split_dir = Path(split_dir)
    ir_dir, vi_dir, label_dir = split_dir / "ir", split_dir / "vi", split_dir / "labels"
    for d in (ir_dir, vi_dir):
        if not d.is_dir():
            raise DatasetError(f"missing directory {d}")
    ir_ids = {p.stem for p in ir_dir.glob("*.png")}
    vi_ids = {p.stem for p in vi_dir.glob("*.png")}
    missing_vi = sorted(ir_ids - vi_ids)
    missing_ir = sorted(vi_ids - ir_ids)
    if missing_vi:
        raise DatasetError(f"missing visible for {', '.join(missing_vi)}")
    if missing_ir:
        raise DatasetError(f"missing infrared for {', '.join(missing_ir)}")
    ids = sorted(ir_ids)
    if not ids:
        raise DatasetError(f"no image pairs found under {split_dir}")
    refs = []
    for pid in ids:
        label = label_dir / f"{pid}.png"
        refs.append(
            PairRef(
                id=pid,
                ir_path=ir_dir / f"{pid}.png",
                vi_path=vi_dir / f"{pid}.png",
                label_path=label if label.is_file() else None,
            )
        )
    return refs


def _read_array(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img)


def load_pair(ref: PairRef) -> ImagePair:
    """Decode a pair to float rasters in [0,1]; labels are kept as raw class indices."""
    ir = _read_array(ref.ir_path)
    if ir.ndim == 3:
        ir = ir[..., 0]
    vi = _read_array(ref.vi_path)
    if vi.ndim == 2:
        vi = np.repeat(vi[..., None], 3, axis=2)
    vi = vi[..., :3]
    label = None
    if ref.label_path is not None:
        label = _read_array(ref.label_path)
        if label.ndim == 3:
            label = label[..., 0]
        label = label.astype(np.int64)
    if ir.shape != vi.shape[:2]:
        raise DatasetError(f"size mismatch for {ref.id}: ir {ir.shape} vs vi {vi.shape[:2]}")
    if label is not None and label.shape != ir.shape:
        raise DatasetError(f"size mismatch for {ref.id}: ir {ir.shape} vs label {label.shape}")
    return ImagePair(
        infrared=(ir.astype(np.float32) / 255.0),
        visible=(vi.astype(np.float32) / 255.0),
        label=label,
        id=ref.id,
    )


def save_image(path: str | Path, values: np.ndarray) -> None:
    """Write a float raster in [0,1] (grayscale or RGB) as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_label(path: str | Path, label: np.ndarray) -> None:
    Image.fromarray(label.astype(np.uint8)).save(path)


def grid_starts(dim: int, patch_size: int, stride: int) -> list[int]:
    """Window start offsets along one axis, with the clamped final start appended."""
    if patch_size > dim:
        raise ValueError(f"patch_size {patch_size} exceeds image extent {dim}")
    starts = list(range(0, dim - patch_size + 1, stride))
    last = dim - patch_size
    if starts[-1] != last:
        starts.append(last)
    return starts


def crop_patches(pair: ImagePair, spec: PatchGridSpec) -> list[ImagePair]:
    """Crop the sliding-window grid; every patch carries the matching label crop."""
    h, w = pair.shape
    rows = grid_starts(h, spec.patch_size, spec.stride)
    cols = grid_starts(w, spec.patch_size, spec.stride)
    p = spec.patch_size
    out = []
    for top in rows:
        for left in cols:
            out.append(
                ImagePair(
                    infrared=pair.infrared[top : top + p, left : left + p].copy(),
                    visible=pair.visible[top : top + p, left : left + p].copy(),
                    label=None
                    if pair.label is None
                    else pair.label[top : top + p, left : left + p].copy(),
                    id=f"{pair.id}_y{top}x{left}",
                )
            )
    return out


def to_luma_chroma(visible: np.ndarray) -> LumaChroma:
    """Full-range BT.601 RGB -> y/cb/cr, all channels in [0,1]."""
    if visible.min() < 0.0 or visible.max() > 1.0:
        raise ValueError("visible values outside [0,1]")
    r, g, b = visible[..., 0], visible[..., 1], visible[..., 2]
    y = KR * r + KG * g + KB * b
    cb = (b - y) / (2.0 * (1.0 - KB)) + 0.5
    cr = (r - y) / (2.0 * (1.0 - KR)) + 0.5
    return LumaChroma(y=y.astype(np.float32), cb=cb.astype(np.float32), cr=cr.astype(np.float32))


def recombine(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse of to_luma_chroma; output clipped to [0,1]."""
    r = y + 2.0 * (1.0 - KR) * (cr - 0.5)
    b = y + 2.0 * (1.0 - KB) * (cb - 0.5)
    g = (y - KR * r - KB * b) / KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0).astype(np.float32)


def pad_to_multiple(arr: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad H and W up to the next multiple; returns (padded, original (H,W))."""
    h, w = arr.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(arr, pad, mode=mode), (h, w)


def _cache_key(root: Path, split: str, spec: PatchGridSpec, refs: list[PairRef]) -> str:
    h = hashlib.sha1()
    h.update(f"{root.resolve()}|{split}|{spec.patch_size}|{spec.stride}".encode())
    for ref in refs:
        h.update(f"{ref.id}|{ref.ir_path.stat().st_mtime_ns}|{ref.vi_path.stat().st_mtime_ns}".encode())
    return h.hexdigest()[:16]


def load_split_patches(
    root: str | Path,
    split: str,
    spec: PatchGridSpec,
    require_labels: bool = False,
) -> list[ImagePair]:
    """Scan + load + crop one split. Honors DSF_CACHE for a patch-array cache."""
    root = Path(root)
    refs = scan_dataset(root, split)
    if require_labels:
        missing = [r.id for r in refs if r.label_path is None]
        if missing:
            raise DatasetError(f"labels required but missing for {', '.join(missing)}")

    cache_dir = os.environ.get("DSF_CACHE")
    cache_file = None
    if cache_dir:
        cache_file = Path(cache_dir) / f"patches_{_cache_key(root, split, spec, refs)}.npz"
        if cache_file.is_file():
            return _patches_from_npz(np.load(cache_file, allow_pickle=False))

    patches: list[ImagePair] = []
    for ref in refs:
        patches.extend(crop_patches(load_pair(ref), spec))

    labelled = sum(p.label is not None for p in patches)
    if cache_file is not None and labelled in (0, len(patches)):
        # a mixed-label split cannot round-trip through the stacked cache
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        _patches_to_npz(patches, cache_file)
    return patches


def _patches_to_npz(patches: list[ImagePair], path: Path) -> None:
    arrays = {
        "ir": np.stack([p.infrared for p in patches]),
        "vi": np.stack([p.visible for p in patches]),
        "ids": np.array([p.id for p in patches]),
    }
    if all(p.label is not None for p in patches):
        arrays["label"] = np.stack([p.label for p in patches])
    np.savez_compressed(path, **arrays)


def _patches_from_npz(data) -> list[ImagePair]:
    labels = data["label"] if "label" in data.files else None
    return [
        ImagePair(
            infrared=data["ir"][i],
            visible=data["vi"][i],
            label=None if labels is None else labels[i],
            id=str(data["ids"][i]),
        )
        for i in range(len(data["ids"]))
    ]
