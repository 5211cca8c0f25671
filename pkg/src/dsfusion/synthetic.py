"""Synthetic paired shapes dataset for desk-scale experiments and tests.

Discs and squares on smooth backgrounds: shapes glow in the infrared channel,
the visible channel carries gradients plus gentle sinusoidal texture. Labels
are two classes (0 = background, 1 = shape).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_image, save_label

NUM_CLASSES = 2


def _shape_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = rng.choice(["disc", "square"])
    radius = rng.uniform(size * 0.12, size * 0.28)
    cy = rng.uniform(radius, size - radius)
    cx = rng.uniform(radius, size - radius)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)


def make_pair(size: int, rng: np.random.Generator):
    """One synthetic (ir, vi_rgb, label) triple."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)

    ir = 0.12 + 0.10 * ramp
    base = 0.35 + 0.25 * ramp
    fx, fy = rng.integers(3, 7), rng.integers(3, 7)
    texture = 0.06 * np.sin(2 * np.pi * fx * xx) * np.sin(2 * np.pi * fy * yy)
    vi_y = base + texture

    label = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(1, 4))):
        mask = _shape_mask(size, rng)
        label[mask] = 1
        ir = np.where(mask, rng.uniform(0.75, 0.95), ir)
        shade = rng.uniform(0.55, 0.8)
        vi_y = np.where(mask, shade + texture, vi_y)

    tint = rng.uniform(-0.06, 0.06, size=3)
    rgb = np.clip(np.stack([vi_y + t for t in tint], axis=-1), 0.0, 1.0)
    return np.clip(ir, 0.0, 1.0).astype(np.float32), rgb.astype(np.float32), label


def make_shapes_dataset(
    root: str | Path,
    n_train: int = 200,
    n_test: int = 10,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write root/{train,test}/{ir,vi,labels}/<id>.png; returns root."""
    root = Path(root)
    for split, count, offset in (("train", n_train, 0), ("test", n_test, 10_000)):
        for sub in ("ir", "vi", "labels"):
            (root / split / sub).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng(seed + offset + i)
            ir, rgb, label = make_pair(size, rng)
            pid = f"img_{i:04d}"
            save_image(root / split / "ir" / f"{pid}.png", ir)
            save_image(root / split / "vi" / f"{pid}.png", rgb)
            save_label(root / split / "labels" / f"{pid}.png", label)
    return root
