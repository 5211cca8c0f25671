"""Fusion quality metrics (MI, SSIM, PSNR, SCD, each against both sources) and
segmentation IoU scoring."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .data import IGNORE_LABEL

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricsRecord:
    id: str
    mi: float
    ssim: float
    psnr: float
    scd: float


@dataclass
class SegScore:
    iou: dict[int, float]  # class -> IoU, only classes present in pred or gt
    miou: float


def _check_same_shape(*imgs: np.ndarray) -> None:
    shapes = {img.shape for img in imgs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _quantize8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """MI in bits from the 256x256 joint histogram of 8-bit quantized images."""
    _check_same_shape(x, y)
    joint, _, _ = np.histogram2d(
        _quantize8(x).ravel(), _quantize8(y).ravel(), bins=256, range=[[0, 256], [0, 256]]
    )
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log2(p[nz] / (px * py)[nz])).sum())


def mi(fused: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return mutual_information(fused, a) + mutual_information(fused, b)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def structural_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Gaussian-windowed SSIM, dynamic range 1, valid-window mean."""
    _check_same_shape(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    w = _gaussian_window()
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    sxx = convolve2d(x * x, w, mode="valid") - mu_x * mu_x
    syy = convolve2d(y * y, w, mode="valid") - mu_y * mu_y
    sxy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_sum(fused: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return structural_similarity(fused, a) + structural_similarity(fused, b)


def psnr(fused: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with the MSE averaged over both sources; inf on exact match."""
    _check_same_shape(fused, a, b)
    mse = 0.5 * (np.mean((fused - a) ** 2) + np.mean((fused - b) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x.ravel().astype(np.float64)
    y = y.ravel().astype(np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        return 0.0
    return float((xc * yc).sum() / denom)


def scd(fused: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Sum of correlations of differences: r(F-B, A) + r(F-A, B)."""
    _check_same_shape(fused, a, b)
    return _pearson(fused - b, a) + _pearson(fused - a, b)


def fusion_metrics(pid: str, fused: np.ndarray, a: np.ndarray, b: np.ndarray) -> MetricsRecord:
    return MetricsRecord(
        id=pid, mi=mi(fused, a, b), ssim=ssim_sum(fused, a, b), psnr=psnr(fused, a, b),
        scd=scd(fused, a, b),
    )


def seg_scores(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> SegScore:
    """Per-class IoU over non-ignore pixels; classes absent from both pred and gt
    are excluded from the mean."""
    _check_same_shape(pred, gt)
    valid = gt != IGNORE_LABEL
    if not valid.any():
        raise ValueError("no valid pixels (all ignore)")
    pred = pred[valid]
    gt = gt[valid]
    ious: dict[int, float] = {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        if not p.any() and not g.any():
            continue
        tp = int((p & g).sum())
        fp = int((p & ~g).sum())
        fn = int((~p & g).sum())
        ious[c] = tp / (tp + fp + fn)
    return SegScore(iou=ious, miou=float(np.mean(list(ious.values()))))


def write_fusion_csv(records: list[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "mi", "ssim", "psnr", "scd"])
        for r in records:
            writer.writerow([r.id, repr(r.mi), repr(r.ssim), repr(r.psnr), repr(r.scd)])
        finite_psnr = [r.psnr for r in records if math.isfinite(r.psnr)]
        writer.writerow(
            [
                "mean",
                repr(float(np.mean([r.mi for r in records]))),
                repr(float(np.mean([r.ssim for r in records]))),
                repr(float(np.mean(finite_psnr))) if finite_psnr else "inf",
                repr(float(np.mean([r.scd for r in records]))),
            ]
        )


def write_seg_csv(score: SegScore, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou"])
        for c in sorted(score.iou):
            writer.writerow([c, repr(score.iou[c])])
        writer.writerow(["miou", repr(score.miou)])
