"""Frequency-response probing of feature maps: radially averaged log-amplitude
spectra and low-frequency energy ratios."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_BINS = 32
DEFAULT_CUTOFF = 0.1


@dataclass
class SpectralProfile:
    frequencies: np.ndarray  # bin centers in [0,1], 1 = Nyquist; empty bins dropped
    log_amplitude: np.ndarray
    tag: str = ""


def _as_chw(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (C,H,W) or (H,W), got shape {arr.shape}")
    if arr.shape[-2] < 4 or arr.shape[-1] < 4:
        raise ValueError(f"spatial dims too small for spectral analysis: {arr.shape}")
    return arr


def _radial_grid(h: int, w: int) -> np.ndarray:
    """Normalized radial frequency per DFT cell, clipped so the Nyquist ring is 1."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.minimum(np.sqrt(fx**2 + fy**2) / 0.5, 1.0)


def power_spectrum(values) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell power of the mean-subtracted map, channel-summed.

    Normalized so the total equals the spatial sum of squared residuals.
    """
    arr = _as_chw(values)
    _, h, w = arr.shape
    centered = arr - arr.mean(axis=(1, 2), keepdims=True)
    spectrum = np.fft.fft2(centered, axes=(1, 2))
    power = (np.abs(spectrum) ** 2 / (h * w)).sum(axis=0)
    return _radial_grid(h, w), power


def spectral_profile(values, bins: int = DEFAULT_BINS, tag: str = "") -> SpectralProfile:
    """Radially binned, channel-averaged log(1+|amplitude|) of the centered DFT."""
    arr = _as_chw(values)
    _, h, w = arr.shape
    centered = arr - arr.mean(axis=(1, 2), keepdims=True)
    log_amp = np.log1p(np.abs(np.fft.fft2(centered, axes=(1, 2))))
    r = _radial_grid(h, w)
    idx = np.minimum((r * bins).astype(int), bins - 1)
    centers, means = [], []
    for b in range(bins):
        mask = idx == b
        if not mask.any():
            continue
        centers.append((b + 0.5) / bins)
        means.append(float(log_amp[:, mask].mean()))
    return SpectralProfile(
        frequencies=np.array(centers), log_amplitude=np.array(means), tag=tag
    )


def low_freq_ratio(values, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Share of spectral power at radial frequency <= cutoff; 1.0 for a constant map."""
    r, power = power_spectrum(values)
    total = power.sum()
    if total <= 0.0:
        return 1.0
    return float(power[r <= cutoff].sum() / total)


def feature_spectra(model, ir: torch.Tensor, vi_y: torch.Tensor) -> list[tuple[str, torch.Tensor]]:
    """Tagged semantic (SsF) and shallow-detail (Hfd) maps for one input pair,
    bilinearly upsampled to the input grid so spectra share one frequency axis."""
    from .mraf import HFD_TAGS, extract_hfd

    model.eval()
    with torch.no_grad():
        _, pyr_ir = model.branch_ir(ir)
        _, pyr_vi = model.branch_vi(vi_y)
        tagged = []
        for (mod, stream, scale), fm in zip(
            model.mraf.ssf_entries, model.gather_ssf(pyr_ir, pyr_vi)
        ):
            tagged.append((f"SsF_{'i' if mod == 'ir' else 'v'}_{stream[0]}{scale}", fm))
        for tag, fm in zip(HFD_TAGS, extract_hfd(pyr_ir, pyr_vi)):
            tagged.append((tag, fm))
        out_size = ir.shape[-2:]
        return [
            (tag, F.interpolate(fm.values, size=out_size, mode="bilinear", align_corners=False)[0])
            for tag, fm in tagged
        ]


def write_profiles_csv(profiles: list[SpectralProfile], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tag", "bin_center", "log_amplitude"])
        for p in profiles:
            for c, a in zip(p.frequencies, p.log_amplitude):
                writer.writerow([p.tag, repr(float(c)), repr(float(a))])


def write_ratios_csv(ratios: dict[str, float], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["tag", "low_freq_ratio"])
        for tag in ratios:
            writer.writerow([tag, repr(ratios[tag])])


def plot_profiles(profiles: list[SpectralProfile], path: str | Path) -> bool:
    """Line plot of the spectra; no-op returning False when matplotlib is absent."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in profiles:
        ax.plot(p.frequencies, p.log_amplitude, label=p.tag)
    ax.set_xlabel("normalized radial frequency")
    ax.set_ylabel("log(1+amplitude)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
