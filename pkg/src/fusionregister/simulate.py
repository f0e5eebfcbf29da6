"""Synthetic misregistration and training-sample construction.

The continuous affine (scale, rotate, translate about the image centre) only
ever deforms the infrared image. The discrete flips / 90-degree rotations are
pair-level augmentation unless ``deform_only_ir`` is set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .data import LUMA_601
from .errors import ContractError
from .warpcore import bilinear_sample, pixel_grid

ROTATION_RANGE = (-2.0, 2.0)
TRANSLATION_RANGE = (-2.0, 2.0)
SCALE_RANGE = (0.95, 1.08)
DISCRETE_PROB = 0.5


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale: float = 1.0
    flip_h: bool = False
    flip_v: bool = False
    rot90_k: int = 0

    @property
    def has_discrete(self):
        return self.flip_h or self.flip_v or self.rot90_k % 4 != 0

    def continuous_only(self):
        return AffineParams(
            self.rotation_deg, self.translate_x, self.translate_y, self.scale
        )

    def discrete_only(self):
        return AffineParams(flip_h=self.flip_h, flip_v=self.flip_v, rot90_k=self.rot90_k)

    def to_line(self):
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


IDENTITY = AffineParams()


def sample_affine(rng):
    """Draw misregistration parameters with the training-time ranges."""
    rotation = float(rng.uniform(*ROTATION_RANGE))
    tx = float(rng.uniform(*TRANSLATION_RANGE))
    ty = float(rng.uniform(*TRANSLATION_RANGE))
    scale = float(rng.uniform(*SCALE_RANGE))
    flip_h = bool(rng.random() < DISCRETE_PROB)
    flip_v = bool(rng.random() < DISCRETE_PROB)
    k = int(rng.integers(1, 4)) if rng.random() < DISCRETE_PROB else 0
    return AffineParams(rotation, tx, ty, scale, flip_h, flip_v, k)


def affine_source_coords(params, b, h, w, dtype=torch.float64):
    """Source pixel coordinates for each output pixel of the continuous affine.

    The forward map sends ``p`` to ``R(s * (p - c)) + c + t``; the output
    samples the input at the inverse image of each pixel.
    """
    gx, gy = pixel_grid(b, h, w, torch.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(params.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    ux = gx - cx - params.translate_x
    uy = gy - cy - params.translate_y
    sx = (cos * ux + sin * uy) / params.scale + cx
    sy = (-sin * ux + cos * uy) / params.scale + cy
    return sx.to(dtype), sy.to(dtype)


def apply_discrete(img, params):
    out = img
    if params.flip_h:
        out = torch.flip(out, dims=(-1,))
    if params.flip_v:
        out = torch.flip(out, dims=(-2,))
    k = params.rot90_k % 4
    if k:
        if k % 2 and out.shape[-1] != out.shape[-2]:
            raise ContractError("odd 90-degree rotations need a square image")
        out = torch.rot90(out, k, dims=(-2, -1))
    return out


def apply_affine(img, params, discrete=True):
    """Warp ``img`` by ``params`` with bilinear sampling and edge replication."""
    out = img
    if params.continuous_only() != IDENTITY:
        b, _, h, w = img.shape
        sx, sy = affine_source_coords(params, b, h, w, img.dtype)
        out = bilinear_sample(img, sx, sy, padding="border")
    if discrete:
        out = apply_discrete(out, params)
    return out


def luma(x):
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ContractError(f"expected 1 or 3 channels, got {x.shape[1]}")
    w = torch.tensor(LUMA_601, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def baseline_fuse(vi, ir, variant="max"):
    """Tiny stand-in fusion backbone.

    ``max``: output luma is ``max(luma(vi), luma(ir))`` with the visible colour
    offsets kept; ``mean``: ``(vi + ir) / 2``. A single-channel ``ir`` is
    broadcast over the visible channels.
    """
    if vi.shape[0] != ir.shape[0] or vi.shape[-2:] != ir.shape[-2:]:
        raise ContractError(f"vi {tuple(vi.shape)} and ir {tuple(ir.shape)} differ")
    if ir.shape[1] not in (1, vi.shape[1]):
        raise ContractError("ir must have one channel or as many as vi")
    if variant == "mean":
        return (0.5 * vi + 0.5 * ir).clamp(0, 1)
    if variant != "max":
        raise ContractError(f"unknown fusion variant {variant!r}")

    y_vi = luma(vi)
    y_ir = luma(ir)
    y_f = torch.maximum(y_vi, y_ir)
    out = (vi + (y_f - y_vi)).clamp(0, 1)
    # clipping at 1 can drop luma below target; lift toward white to restore it
    y_out = luma(out)
    short = (y_f - y_out).clamp_min(0)
    room = (1 - y_out).clamp_min(1e-12)
    beta = torch.where(short > 0, short / room, torch.zeros_like(short))
    return (out + beta * (1 - out)).clamp(0, 1)


def resolve_fuser(fuser):
    if callable(fuser):
        return fuser
    return lambda vi, ir: baseline_fuse(vi, ir, fuser)


@dataclass
class TrainingSample:
    visible: torch.Tensor
    infrared_deformed: torch.Tensor
    fused: torch.Tensor
    fused_registered: torch.Tensor
    params: AffineParams = field(default=IDENTITY)


def make_training_sample(
    vi,
    ir,
    rng=None,
    fuser="max",
    params=None,
    deform_only_ir=False,
    fused_registered=None,
    fused_deformed=None,
):
    """Build ``(vi, ir_deformed, fused, fused_registered)`` from a registered pair.

    ``fuser`` is ``"max"``, ``"mean"`` or any callable ``(vi, ir) -> fused``
    wrapping an external backbone. Pre-computed fused images can be passed
    instead through ``fused_registered`` / ``fused_deformed``.
    """
    if params is None:
        if rng is None:
            raise ContractError("need either params or an rng")
        params = sample_affine(rng)
    fuse = resolve_fuser(fuser)

    if params.has_discrete and not deform_only_ir:
        vi = apply_discrete(vi, params)
        ir = apply_discrete(ir, params)
        if fused_registered is not None:
            fused_registered = apply_discrete(fused_registered, params)
        ir_def = apply_affine(ir, params, discrete=False)
    else:
        ir_def = apply_affine(ir, params)

    gt = fused_registered if fused_registered is not None else fuse(vi, ir)
    f = fused_deformed if fused_deformed is not None else fuse(vi, ir_def)
    return TrainingSample(vi, ir_def, f, gt, params)


# ---------------------------------------------------------------------------
# synthetic-shapes corpus


@dataclass
class SyntheticPair:
    visible: torch.Tensor
    infrared: torch.Tensor
    masks: list  # boolean H x W arrays, one per hot object


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def synthetic_pair(rng, size=64, n_background=1, n_hot=2, edge_sigma=0.8):
    """Random registered visible/infrared scene built from simple shapes.

    Background objects are textured in the visible image and lukewarm in the
    infrared one. Hot objects (the analogue of pedestrians or vehicles) are
    bright in infrared, so they dominate a max-luma fusion, and carry a
    modest visible signature, so their position is observable in both
    modalities. Shape edges are softened by a Gaussian of ``edge_sigma``
    pixels. The returned masks cover the visible footprint of each hot object
    in registered geometry.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    a, b = rng.uniform(-0.3, 0.3, size=2)
    vi_bg = 0.35 + a * (xx - 0.5) + b * (yy - 0.5)
    vi = np.repeat(vi_bg[..., None], 3, axis=-1) * rng.uniform(0.8, 1.2, size=3)
    vi += 0.02 * np.sin(2 * np.pi * rng.uniform(2, 6) * (xx + yy))[..., None]
    ir = 0.15 + 0.05 * rng.uniform(-1, 1) * xx

    drawn = []
    margin = size // 8
    for kind in ["background"] * n_background + ["hot"] * n_hot:
        cy, cx = rng.uniform(margin, size - margin, size=2)
        ry, rx = rng.uniform(size / 16, size / 6, size=2)
        shape = _ellipse if rng.random() < 0.5 else _rect
        m = shape(h, w, cy, cx, ry, rx)
        if kind == "background":
            vi[m] = rng.uniform(0.05, 0.95, size=3)
            ir[m] = rng.uniform(0.25, 0.55)
        else:
            vi[m] = vi[m] * 0.5 + rng.uniform(0.0, 0.3, size=3)
            ir[m] = rng.uniform(0.75, 0.95)
        drawn.append((kind, m))

    if edge_sigma > 0:
        vi = ndimage.gaussian_filter(vi, sigma=(edge_sigma, edge_sigma, 0), mode="nearest")
        ir = ndimage.gaussian_filter(ir, sigma=edge_sigma, mode="nearest")
    vi = np.clip(vi, 0, 1)
    ir = np.clip(ir, 0, 1)
    masks = []
    covered = np.zeros((h, w), dtype=bool)
    for kind, m in reversed(drawn):
        if kind == "hot" and (m & ~covered).any():
            masks.append(m & ~covered)
        covered |= m
    masks.reverse()
    vi_t = torch.from_numpy(vi.transpose(2, 0, 1).copy()).unsqueeze(0).float()
    ir_t = torch.from_numpy(np.repeat(ir[None], 3, axis=0)).unsqueeze(0).float()
    return SyntheticPair(vi_t, ir_t, masks)


def synthetic_corpus(n, size=64, seed=0):
    rng = np.random.default_rng(seed)
    return [synthetic_pair(rng, size) for _ in range(n)]
