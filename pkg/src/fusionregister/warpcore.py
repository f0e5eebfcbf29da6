"""Differentiable geometric kernels: bilinear sampling, backward warping,
coarse-to-fine field composition, bi-directional blending, correlation.

Fields are in pixels. Channel 0 is the horizontal displacement, channel 1
the vertical one. ``backward_warp(x, phi)`` samples ``x`` at ``p + phi(p)``.
"""

import torch
import torch.nn.functional as F

from .errors import ContractError


def bilinear_sample(x, px, py, padding="zeros"):
    """Sample ``x`` (B x C x H x W) at pixel coordinates ``px``/``py`` (B x h x w).

    ``padding="zeros"`` treats every sample outside the grid as 0, so weights
    fall off linearly over the last pixel; ``padding="border"`` clamps
    coordinates to the grid (edge replication).
    """
    if padding not in ("zeros", "border"):
        raise ContractError(f"unknown padding {padding!r}")
    b, c, h, w = x.shape
    if px.shape != py.shape or px.shape[0] != b:
        raise ContractError("coordinate grids must share shape and batch size")
    if padding == "border":
        px = px.clamp(0, w - 1)
        py = py.clamp(0, h - 1)

    x0 = torch.floor(px)
    y0 = torch.floor(py)
    wx1 = px - x0
    wy1 = py - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    x0 = x0.long()
    y0 = y0.long()

    flat = x.reshape(b, c, h * w)
    out = 0
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, -1)
            vals = flat.gather(2, idx.expand(b, c, idx.shape[-1]))
            wgt = (wx * wy * valid.to(x.dtype)).reshape(b, 1, -1)
            out = out + vals * wgt
    return out.reshape(b, c, *px.shape[1:])


def pixel_grid(b, h, w, dtype, device=None):
    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx.expand(b, h, w), gy.expand(b, h, w)


def backward_warp(x, phi):
    """Resample ``x`` at ``p + phi(p)`` with bilinear weights and zero padding."""
    if phi.dim() != 4 or phi.shape[1] != 2:
        raise ContractError(f"field must be B x 2 x h x w, got {tuple(phi.shape)}")
    if x.shape[0] != phi.shape[0] or x.shape[-2:] != phi.shape[-2:]:
        raise ContractError(
            f"image {tuple(x.shape)} and field {tuple(phi.shape)} disagree"
        )
    b, _, h, w = x.shape
    gx, gy = pixel_grid(b, h, w, phi.dtype, phi.device)
    return bilinear_sample(x, gx + phi[:, 0], gy + phi[:, 1], padding="zeros")


def upsample2x(t):
    return F.interpolate(t, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(t):
    return F.interpolate(t, scale_factor=0.5, mode="bilinear", align_corners=False)


def compose_fields(phi_fine, phi_coarse, additive=False):
    """Refine a fine-scale field with the next coarser one.

    Multiplicative form: ``phi_fine * (1 + 2 * up(phi_coarse))``. The factor 2
    converts coarse-scale pixels to fine-scale pixels. ``additive=True`` gives
    the residual alternative ``phi_fine + 2 * up(phi_coarse)``.
    """
    hf, wf = phi_fine.shape[-2:]
    hc, wc = phi_coarse.shape[-2:]
    if (hf, wf) != (2 * hc, 2 * wc) or phi_fine.shape[:2] != phi_coarse.shape[:2]:
        raise ContractError(
            f"coarse field {tuple(phi_coarse.shape)} is not half of "
            f"{tuple(phi_fine.shape)}"
        )
    up = upsample2x(phi_coarse)
    if additive:
        return phi_fine + 2 * up
    return phi_fine * (1 + 2 * up)


def refine_pyramid(raw_fields, additive=False):
    """Coarse-to-fine sweep over per-scale fields (index 0 = finest)."""
    out = list(raw_fields)
    for i in range(len(out) - 2, -1, -1):
        out[i] = compose_fields(out[i], out[i + 1], additive=additive)
    return out


def bidirectional_blend(x, phi, m):
    """``m * BW(x, phi) + (1 - m) * BW(x, -phi)``."""
    if m.dim() != 4 or m.shape[1] != 1 or m.shape[-2:] != x.shape[-2:]:
        raise ContractError(f"mask must be B x 1 x h x w, got {tuple(m.shape)}")
    with torch.no_grad():
        lo, hi = float(m.min()), float(m.max())
    if lo < 0 or hi > 1:
        raise ContractError(f"mask values outside [0, 1]: [{lo}, {hi}]")
    return m * backward_warp(x, phi) + (1 - m) * backward_warp(x, -phi)


def transfer_mask(mask, phi, m=None, threshold=0.5):
    """Move a boolean object mask the way the registrar moves image content.

    ``mask`` is ``H x W`` (numpy or tensor); ``phi`` and ``m`` are the
    finest-scale field and probability map of one sample. Without ``m`` the
    one-way warp is used.
    """
    t = torch.as_tensor(mask).to(phi.dtype).reshape(1, 1, *phi.shape[-2:])
    phi = phi.reshape(1, 2, *phi.shape[-2:])
    if m is None:
        moved = backward_warp(t, phi)
    else:
        moved = bidirectional_blend(t, phi, m.reshape(1, 1, *phi.shape[-2:]).to(phi.dtype))
    return (moved[0, 0] > threshold).cpu().numpy()


def correlation_layer(f_warp, f_src, p=1):
    """Channel-averaged products of ``f_warp`` with shifted copies of ``f_src``.

    Output channel ``k = n * (2p + 1) + m`` holds the product with the
    zero-padded source cropped at horizontal offset ``m`` and vertical offset
    ``n`` (both in ``0..2p``). Offset ``(p, p)`` is the unshifted pairing.
    """
    if f_warp.shape != f_src.shape:
        raise ContractError(
            f"feature shapes differ: {tuple(f_warp.shape)} vs {tuple(f_src.shape)}"
        )
    if p < 1:
        raise ContractError("correlation range must be >= 1")
    h, w = f_src.shape[-2:]
    padded = F.pad(f_src, (p, p, p, p))
    vols = []
    for n in range(2 * p + 1):
        for m in range(2 * p + 1):
            shifted = padded[..., n : n + h, m : m + w]
            vols.append((shifted * f_warp).mean(dim=1, keepdim=True))
    return torch.cat(vols, dim=1)
