"""Fusion-quality metrics (EN, SF, AG, SD), mask-overlap registration scores
(IoU, PR) and the patch-SSIM prior map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
import torch

from .data import LUMA_601
from .errors import ContractError

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def to_gray(img):
    """Reduce an image plane / array to a float64 ``H x W`` array.

    Accepts ``B x C x H x W`` / ``C x H x W`` tensors or arrays (first batch
    element) and plain ``H x W`` arrays. Three channels use 601 luma weights.
    """
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim == 3:
        if a.shape[0] == 3:
            a = np.tensordot(np.asarray(LUMA_601), a, axes=1)
        elif a.shape[0] == 1:
            a = a[0]
        else:
            raise ContractError(f"expected 1 or 3 channels, got {a.shape[0]}")
    if a.ndim != 2:
        raise ContractError(f"cannot interpret array of shape {a.shape} as an image")
    return a


def entropy(img):
    """Shannon entropy (bits) of the 256-bin histogram of ``img`` in [0, 1]."""
    g = to_gray(img)
    levels = np.clip(np.rint(g * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log2(p)).sum() + 0.0)


def spatial_frequency(img):
    g = to_gray(img)
    rf = np.sqrt(np.mean(np.diff(g, axis=1) ** 2)) if g.shape[1] > 1 else 0.0
    cf = np.sqrt(np.mean(np.diff(g, axis=0) ** 2)) if g.shape[0] > 1 else 0.0
    return float(np.hypot(rf, cf))


def average_gradient(img):
    """Mean of ``sqrt((dx^2 + dy^2) / 2)`` over pixels with both forward differences."""
    g = to_gray(img)
    if min(g.shape) < 2:
        return 0.0
    dx = g[:-1, 1:] - g[:-1, :-1]
    dy = g[1:, :-1] - g[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2.0)))


def std_dev(img):
    return float(np.std(to_gray(img)))


QUALITY_METRICS = {
    "EN": entropy,
    "SF": spatial_frequency,
    "AG": average_gradient,
    "SD": std_dev,
}


def quality_report(img):
    return {name: fn(img) for name, fn in QUALITY_METRICS.items()}


def _as_mask(m):
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    m = np.asarray(m)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    if m.dtype != bool:
        raise ContractError(f"mask must be boolean, got {m.dtype}")
    return m


def iou(a, b):
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pr_score(pred, ref):
    """Harmonic mean of precision and recall of ``pred`` against ``ref``."""
    pred, ref = _as_mask(pred), _as_mask(ref)
    if pred.shape != ref.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    if not ref.any():
        raise ContractError("reference mask is empty")
    inter = np.logical_and(pred, ref).sum()
    if not pred.any() or inter == 0:
        return 0.0
    precision = inter / pred.sum()
    recall = inter / ref.sum()
    return float(2 * precision * recall / (precision + recall))


def prompted_segment(img, prompt, level=0.5, margin=3):
    """Bright-object mask of ``img`` inside a region prompt.

    A lightweight stand-in for a promptable segmenter on scenes whose objects
    of interest are the bright (hot) ones: pixels whose luma exceeds
    ``level`` within ``prompt`` grown by ``margin`` pixels.
    """
    prompt = _as_mask(prompt)
    gray = to_gray(img)
    if gray.shape != prompt.shape:
        raise ContractError(f"image {gray.shape} and prompt {prompt.shape} differ")
    region = ndimage.binary_dilation(prompt, iterations=margin) if margin > 0 else prompt
    return (gray > level) & region


def segmented_pairs(img, objects, level=0.5, margin=3):
    """``(reference, segmented)`` mask pairs for scoring ``img``.

    ``objects`` holds ``(reference, deformed)`` masks per object; the prompt
    is their union, so it covers the object wherever the image shows it.
    """
    return [
        (_as_mask(a), prompted_segment(img, _as_mask(a) | _as_mask(b), level, margin))
        for a, b in objects
    ]


def ssim_stats(x, y):
    """Global SSIM of two equally sized arrays (uniform window over the whole array)."""
    mx, my = x.mean(), y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


@dataclass
class PriorMap:
    ssim: np.ndarray
    patch: int
    stride: int

    def upsampled(self, shape):
        """Per-pixel view: each pixel takes the mean SSIM of the windows covering it."""
        acc = np.zeros(shape)
        cnt = np.zeros(shape)
        for r in range(self.ssim.shape[0]):
            for c in range(self.ssim.shape[1]):
                y, x = r * self.stride, c * self.stride
                acc[y : y + self.patch, x : x + self.patch] += self.ssim[r, c]
                cnt[y : y + self.patch, x : x + self.patch] += 1
        return np.where(cnt > 0, acc / np.maximum(cnt, 1), 1.0)


def prior_map(fused, gt, patch=32, stride=16):
    """Patchwise SSIM between a fused image and its registered reference.

    Channels are scored separately and averaged.
    """
    a = _channels(fused)
    b = _channels(gt)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    _, h, w = a.shape
    if patch > min(h, w) or patch < 1 or stride < 1:
        raise ContractError(f"patch {patch} / stride {stride} invalid for {h}x{w}")
    rows = (h - patch) // stride + 1
    cols = (w - patch) // stride + 1
    out = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            y, x = r * stride, c * stride
            win = (slice(None), slice(y, y + patch), slice(x, x + patch))
            out[r, c] = np.mean(
                [ssim_stats(pa, pb) for pa, pb in zip(a[win], b[win])]
            )
    return PriorMap(np.clip(out, -1.0, 1.0), patch, stride)


def _channels(img):
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    return a


@dataclass
class EvaluationReport:
    before: dict
    after: dict
    iou_before: float | None = None
    iou_after: float | None = None
    pr_before: float | None = None
    pr_after: float | None = None
    n_pairs: int = 0
    warnings: list = field(default_factory=list)

    @property
    def deltas(self):
        d = {k: self.after[k] - self.before[k] for k in self.before}
        if self.iou_before is not None:
            d["IoU"] = self.iou_after - self.iou_before
            d["PR"] = self.pr_after - self.pr_before
        return d

    def rows(self):
        out = []
        for k in self.before:
            out.append((k, self.before[k], self.after[k], self.after[k] - self.before[k]))
        if self.iou_before is not None:
            out.append(("IoU", self.iou_before, self.iou_after, self.deltas["IoU"]))
            out.append(("PR", self.pr_before, self.pr_after, self.deltas["PR"]))
        return out


def _mean_scores(pairs):
    ious = [iou(a, b) for a, b in pairs]
    prs = [pr_score(b, a) for a, b in pairs]
    return float(np.mean(ious)), float(np.mean(prs))


def evaluate_run(before, after, masks_before=(), masks_after=None):
    """Quality metrics of both images plus mean IoU / PR over mask pairs.

    Each mask pair is ``(reference, observed)``; PR scores ``observed``
    against ``reference``. ``masks_after`` defaults to ``masks_before``.
    """
    report = EvaluationReport(quality_report(before), quality_report(after))
    masks_before = list(masks_before)
    masks_after = masks_before if masks_after is None else list(masks_after)
    if not masks_before:
        msg = "no masks supplied; reporting image quality only"
        log.warning(msg)
        report.warnings.append(msg)
        return report
    report.iou_before, report.pr_before = _mean_scores(masks_before)
    report.iou_after, report.pr_after = _mean_scores(masks_after)
    report.n_pairs = len(masks_before)
    return report
