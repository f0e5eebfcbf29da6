"""Training objective: edge (DoG), global, frequency and detail (Sobel) terms.

Norms are per-element normalised: the L2 terms are root-mean-square values
and the L1 terms mean absolute values, so the weights do not depend on
image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError, TrainingAbort

DOG_KERNEL_1D = (0.05, 0.25, 0.4, 0.25, 0.05)
SOBEL_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0  # edge
    lambda2: float = 1.0  # global
    lambda3: float = 0.1  # frequency
    lambda4: float = 10.0  # detail

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


def gaussian_kernel2d(dtype=torch.float64, device=None):
    k = torch.tensor(DOG_KERNEL_1D, dtype=dtype, device=device)
    return torch.outer(k, k)


def _depthwise(x, kernel, pad_mode):
    c = x.shape[1]
    kh, kw = kernel.shape
    weight = kernel.to(x.dtype).expand(c, 1, kh, kw)
    x = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode=pad_mode)
    return F.conv2d(x, weight, groups=c)


def gaussian_blur(x):
    mode = "reflect" if min(x.shape[-2:]) > 2 else "replicate"
    return _depthwise(x, gaussian_kernel2d(x.dtype, x.device), mode)


def dog_extract(x):
    """Band-pass response ``x - G(up(down(G(x))))``.

    ``down`` keeps every second pixel of the blurred plane and ``up`` is
    bilinear x2 interpolation. Odd sizes are reflect-padded and cropped back.
    """
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    xp = x
    if ph or pw:
        mode = "reflect" if min(h, w) > 1 else "replicate"
        xp = F.pad(x, (0, pw, 0, ph), mode=mode)
    low = gaussian_blur(xp)[..., ::2, ::2]
    low = F.interpolate(low, scale_factor=2, mode="bilinear", align_corners=False)
    low = gaussian_blur(low)
    return x - low[..., :h, :w]


def _rms(d):
    # sqrt has an unbounded slope at 0; route exact zeros around it
    ms = d.pow(2).mean()
    safe = torch.sqrt(ms.clamp_min(torch.finfo(d.dtype).tiny))
    return torch.where(ms > 0, safe, torch.zeros_like(ms))


def _check_scales(*seqs):
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise ContractError("per-scale lists have different lengths")
    for planes in zip(*seqs):
        ref = planes[0].shape
        if any(p.shape != ref for p in planes[1:]):
            raise ContractError(
                f"shape mismatch at one scale: {[tuple(p.shape) for p in planes]}"
            )


def edge_loss(outs, warps, gts):
    _check_scales(outs, warps, gts)
    total = 0
    for out, warp, gt in zip(outs, warps, gts):
        e_gt = dog_extract(gt)
        total = total + _rms(dog_extract(out) - e_gt) + _rms(dog_extract(warp) - e_gt)
    return total


def global_loss(outs, gts):
    _check_scales(outs, gts)
    return sum(_rms(o - g) for o, g in zip(outs, gts))


def frequency_loss(outs, gts):
    """Mean of ``|d real| + |d imag|`` over all 2-D DFT coefficients, per scale."""
    _check_scales(outs, gts)
    total = 0
    for o, g in zip(outs, gts):
        d = torch.fft.fft2(o) - torch.fft.fft2(g)
        total = total + (d.real.abs() + d.imag.abs()).mean()
    return total


SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


def sobel_magnitude(x, eps=SOBEL_EPS):
    kx = torch.tensor(SOBEL_X, dtype=x.dtype, device=x.device)
    gx = _depthwise(x, kx, "replicate")
    gy = _depthwise(x, kx.t(), "replicate")
    return torch.sqrt(gx * gx + gy * gy + eps)


def detail_loss(outs, gts, masks):
    """Sobel-magnitude L1 restricted to the (gradient-detached) masks."""
    _check_scales(outs, gts)
    if len(masks) != len(outs):
        raise ContractError("need one mask per scale")
    total = 0
    for o, g, m in zip(outs, gts, masks):
        if m.dim() != 4 or m.shape[1] != 1 or m.shape[-2:] != o.shape[-2:]:
            raise ContractError(
                f"mask {tuple(m.shape)} does not match image {tuple(o.shape)}"
            )
        m = m.detach()
        total = total + (sobel_magnitude(o) * m - sobel_magnitude(g) * m).abs().mean()
    return total


def loss_components(outputs, gts):
    """Unweighted edge/global/frequency/detail values for a forward pass."""
    outs = [s.out for s in outputs]
    warps = [s.warp_image for s in outputs]
    masks = [s.mask for s in outputs]
    return {
        "edge": edge_loss(outs, warps, gts),
        "global": global_loss(outs, gts),
        "frequency": frequency_loss(outs, gts),
        "detail": detail_loss(outs, gts, masks),
    }


def total_loss(outputs, gts, weights=LossWeights()):
    """Weighted objective; returns ``(total, components)``.

    Raises :class:`TrainingAbort` naming the first non-finite component.
    """
    comps = loss_components(outputs, gts)
    values = {k: float(v.detach()) for k, v in comps.items()}
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingAbort(name, values)
    w1, w2, w3, w4 = weights.as_tuple()
    total = (
        w1 * comps["edge"]
        + w2 * comps["global"]
        + w3 * comps["frequency"]
        + w4 * comps["detail"]
    )
    return total, comps
