"""Training losses: infrared intensity term, Sobel texture term, hard-example-mined
cross-entropy for the segmentation branches, and their weighted combination."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import IGNORE_LABEL

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


def _as_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        return img[:, None]
    if img.dim() == 4:
        return img
    raise ValueError(f"expected 2-/3-/4-D raster, got {img.dim()}-D")


def sobel_magnitude(img: torch.Tensor) -> torch.Tensor:
    """|Gx * img| + |Gy * img| with replicate padding; same spatial size as input."""
    x = _as_nchw(img)
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValueError(f"image too small for 3x3 Sobel: {tuple(x.shape[-2:])}")
    # the kernels are zero-sum, so removing the DC level is a no-op mathematically
    # but keeps constant images at exactly zero response
    x = x - x.mean(dim=(-2, -1), keepdim=True)
    kx = torch.tensor(SOBEL_X, dtype=x.dtype, device=x.device)[None, None]
    ky = kx.transpose(-2, -1)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    mag = gx.abs() + gy.abs()
    return mag.reshape(img.shape)


def intensity_loss(fused: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
    """Mean squared residual against the infrared image."""
    if fused.shape != ir.shape:
        raise ValueError(f"shape mismatch {tuple(fused.shape)} vs {tuple(ir.shape)}")
    return ((fused - ir) ** 2).mean()


def texture_loss(fused: torch.Tensor, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of the fused gradient magnitude from the
    elementwise max of the two source gradient magnitudes."""
    if fused.shape != ir.shape or fused.shape != vi.shape:
        raise ValueError("shape mismatch between fused and source images")
    target = torch.maximum(sobel_magnitude(ir), sobel_magnitude(vi))
    return (sobel_magnitude(fused) - target).abs().mean()


def ohem_ce(
    logits: torch.Tensor,
    labels: torch.Tensor,
    thresh: float = 0.7,
    min_kept_fraction: float = 1.0 / 16.0,
) -> torch.Tensor:
    """Cross-entropy averaged over the hardest pixels.

    Pixels whose true-class probability is below `thresh` are kept; if fewer
    than ceil(min_kept_fraction * n_valid) qualify, the highest-loss pixels are
    kept instead. Ignore-label pixels never participate. With no valid pixels
    the loss is 0 (with a warning).
    """
    if logits.dim() == 3:
        logits = logits[None]
    if labels.dim() == 2:
        labels = labels[None]
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(
            f"logits {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}"
        )
    labels = labels.long()
    valid = labels != IGNORE_LABEL
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("ohem_ce: no valid pixels, returning 0", stacklevel=2)
        return logits.sum() * 0.0

    per_pixel = F.cross_entropy(logits, labels.clamp(max=logits.shape[1] - 1), reduction="none")
    per_pixel = per_pixel[valid]
    with torch.no_grad():
        log_probs = F.log_softmax(logits, dim=1)
        true_logp = log_probs.gather(1, labels.clamp(max=logits.shape[1] - 1)[:, None]).squeeze(1)
        p_true = true_logp[valid].exp()
    hard = p_true < thresh
    min_kept = math.ceil(min_kept_fraction * n_valid)
    if int(hard.sum()) >= min_kept:
        kept = per_pixel[hard]
    else:
        kept, _ = per_pixel.topk(min(min_kept, n_valid))
    return kept.mean()


@dataclass
class LossBreakdown:
    """Scalar loss components of one step; identities hold exactly by construction."""

    l_int: float
    l_tex: float
    l_visual: float
    l_seg_ir: float
    l_seg_vi: float
    l_seg: float
    l_total: float
    lam: float

    def validate(self, tol: float = 1e-9) -> None:
        if abs(self.l_visual - (self.lam * self.l_int + self.l_tex)) > tol:
            raise ValueError("l_visual != lambda*l_int + l_tex")
        if abs(self.l_seg - (self.l_seg_ir + self.l_seg_vi)) > tol:
            raise ValueError("l_seg != l_seg_ir + l_seg_vi")
        if abs(self.l_total - (self.l_visual + self.l_seg)) > tol:
            raise ValueError("l_total != l_visual + l_seg")

    def csv_row(self, step: int) -> list[str]:
        return [
            str(step),
            *[
                repr(v)
                for v in (
                    self.l_int,
                    self.l_tex,
                    self.l_visual,
                    self.l_seg_ir,
                    self.l_seg_vi,
                    self.l_total,
                )
            ],
        ]


LOSS_CSV_HEADER = ["step", "l_int", "l_tex", "l_visual", "l_seg_ir", "l_seg_vi", "l_total"]


def total_loss(
    fused: torch.Tensor,
    ir: torch.Tensor,
    vi: torch.Tensor,
    labels: torch.Tensor,
    logits_ir: torch.Tensor,
    logits_vi: torch.Tensor,
    lam: float = 0.1,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Combined objective: lambda * intensity + texture + both branch seg losses.

    Returns the differentiable total and a float breakdown for logging.
    """
    l_int = intensity_loss(fused, ir)
    l_tex = texture_loss(fused, ir, vi)
    l_seg_ir = ohem_ce(logits_ir, labels)
    l_seg_vi = ohem_ce(logits_vi, labels)
    total = lam * l_int + l_tex + l_seg_ir + l_seg_vi

    i, t = l_int.item(), l_tex.item()
    si, sv = l_seg_ir.item(), l_seg_vi.item()
    l_visual = lam * i + t
    l_seg = si + sv
    breakdown = LossBreakdown(
        l_int=i,
        l_tex=t,
        l_visual=l_visual,
        l_seg_ir=si,
        l_seg_vi=sv,
        l_seg=l_seg,
        l_total=l_visual + l_seg,
        lam=lam,
    )
    return total, breakdown
