"""Image I/O, dataset layout, patch cropping and run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, EmptyDatasetError, ImageFormatError
from .losses import LossWeights

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LUMA_601 = (0.299, 0.587, 0.114)


def load_image(path, channels=3, dtype=torch.float32):
    """Read a raster into a ``1 x channels x H x W`` tensor scaled to [0, 1].

    8-bit files are divided by 255 and 16-bit files by 65535. Grayscale
    rasters are replicated when ``channels == 3``; colour rasters are reduced
    to ITU-R 601 luma when ``channels == 1``.
    """
    if channels not in (1, 3):
        raise ContractError(f"channels must be 1 or 3, got {channels}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr, scale = _decode(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc

    arr = arr.astype(np.float64) / scale
    if arr.ndim == 2:
        arr = arr[..., None]
    if channels == 3 and arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    elif channels == 1 and arr.shape[-1] == 3:
        arr = (arr * np.asarray(LUMA_601)).sum(-1, keepdims=True)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return t.unsqueeze(0).to(dtype)


def _decode(im):
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(im, dtype=np.float64), 65535.0
    if im.mode == "L":
        return np.asarray(im), 255.0
    if im.mode == "LA":
        return np.asarray(im.convert("L")), 255.0
    return np.asarray(im.convert("RGB")), 255.0


def save_image(path, img):
    """Write an image plane (first batch element) as an 8-bit PNG/JPEG."""
    t = torch.as_tensor(img).detach()
    if t.dim() == 4:
        t = t[0]
    if t.dim() == 3:
        t = t.permute(1, 2, 0)
    arr = t.clamp(0, 1).cpu().double().numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def crop_patch(img, top, left, size):
    """Return the ``size x size`` window whose top-left corner is (top, left)."""
    h, w = img.shape[-2:]
    if size <= 0 or top < 0 or left < 0 or top + size > h or left + size > w:
        raise IndexError(
            f"crop window ({top}, {left}, {size}) outside image of size {h}x{w}"
        )
    return img[..., top : top + size, left : left + size]


def random_crop(imgs, size, rng):
    """Crop the same random window out of every plane in ``imgs``."""
    h, w = imgs[0].shape[-2:]
    if any(x.shape[-2:] != (h, w) for x in imgs):
        raise ContractError("planes must share spatial dims for a joint crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return [crop_patch(x, top, left, size) for x in imgs]


def pad_to_multiple(img, multiple, mode="reflect"):
    """Pad bottom/right so H and W are multiples of ``multiple``.

    Returns the padded plane and the ``(pad_h, pad_w)`` needed by :func:`unpad`.
    """
    h, w = img.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (0, 0)
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "replicate"
    return F.pad(img, (0, pw, 0, ph), mode=mode), (ph, pw)


def unpad(img, pad):
    ph, pw = pad
    h, w = img.shape[-2:]
    return img[..., : h - ph, : w - pw]


@dataclass(frozen=True)
class PairRecord:
    identifier: str
    visible_path: Path
    infrared_path: Path
    fused_path: Path | None = None
    mask_path: Path | None = None


def _stems(directory):
    if not directory.is_dir():
        return {}
    out = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(p.stem, p)
    return out


def scan_dataset(root):
    """Pair ``root/vi`` and ``root/ir`` files by filename stem.

    Optional ``fused/`` and ``masks/`` entries with a matching stem are attached.
    Unpaired files are logged and skipped.
    """
    root = Path(root)
    vi = _stems(root / "vi")
    ir = _stems(root / "ir")
    fused = _stems(root / "fused")
    masks = _stems(root / "masks")
    for stem in sorted(set(vi) ^ set(ir)):
        side = "vi" if stem in vi else "ir"
        log.warning("skipping unpaired %s/%s", side, stem)
    common = sorted(set(vi) & set(ir))
    if not common:
        raise EmptyDatasetError(f"no visible/infrared pairs found under {root}")
    return [
        PairRecord(
            identifier=stem,
            visible_path=vi[stem],
            infrared_path=ir[stem],
            fused_path=fused.get(stem),
            mask_path=masks.get(stem),
        )
        for stem in common
    ]


@dataclass
class RunConfig:
    pyramid_depth: int = 2
    base_channels: int = 16
    patch_size: int = 256
    batch_size: int = 20
    epochs: int = 5000
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    loss_weights: LossWeights = field(default_factory=LossWeights)
    correlation_range: int = 1
    patch_scales: tuple = (1, 3)
    no_mrb: bool = False
    one_way_warp: bool = False
    mrb_variant: str = "gmlp"
    additive_refine: bool = False
    grad_clip: float = 1.0
    fuser: str = "max"
    deform_only_ir: bool = False
    rng_seed: int = 0

    # keys that change the parameter layout; a checkpoint is only loadable
    # into a config agreeing on all of them
    ARCH_KEYS = (
        "pyramid_depth",
        "base_channels",
        "correlation_range",
        "patch_scales",
        "mrb_variant",
        "no_mrb",
    )

    def __post_init__(self):
        self.patch_scales = tuple(int(s) for s in self.patch_scales)
        self.validate()

    def validate(self):
        if self.pyramid_depth < 1:
            raise ContractError("pyramid_depth must be >= 1")
        if self.patch_size % (2 ** (self.pyramid_depth - 1)):
            raise ContractError("patch_size must be divisible by 2^(N-1)")
        if self.correlation_range < 1:
            raise ContractError("correlation_range must be >= 1")
        if not self.lr_start > self.lr_end > 0:
            raise ContractError("need lr_start > lr_end > 0")
        if not self.patch_scales or min(self.patch_scales) < 1:
            raise ContractError("patch_scales must be positive integers")
        if self.mrb_variant not in ("gmlp", "dc", "dt"):
            raise ContractError(f"unknown mrb_variant {self.mrb_variant!r}")
        if self.fuser not in ("max", "mean"):
            raise ContractError(f"unknown fuser {self.fuser!r}")

    @classmethod
    def desk(cls, **overrides):
        """Small preset that trains in minutes on a CPU."""
        base = dict(patch_size=64, batch_size=4, epochs=125, base_channels=16, lr_start=2e-3)
        base.update(overrides)
        return cls(**base)

    def to_flat(self):
        d = dataclasses.asdict(self)
        w = d.pop("loss_weights")
        d.update(w)
        d["patch_scales"] = list(self.patch_scales)
        return d

    def architecture_hash(self):
        arch = {k: getattr(self, k) for k in self.ARCH_KEYS}
        arch["patch_scales"] = list(arch["patch_scales"])
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes):
        flat = self.to_flat()
        flat.update(changes)
        return config_from_flat(flat)


_WEIGHT_KEYS = ("lambda1", "lambda2", "lambda3", "lambda4")


def _coerce(key, raw, default):
    if key == "patch_scales":
        if isinstance(raw, str):
            raw = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(v) for v in raw)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"{key}: not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def config_from_flat(flat):
    defaults = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"loss_weights"}
    kwargs = {}
    weights = dataclasses.asdict(defaults.loss_weights)
    for key, raw in flat.items():
        if key in _WEIGHT_KEYS:
            weights[key] = float(raw)
        elif key in known:
            kwargs[key] = _coerce(key, raw, getattr(defaults, key))
        else:
            raise ContractError(f"unknown config key {key!r}")
    return RunConfig(loss_weights=LossWeights(**weights), **kwargs)


def parse_config_text(text):
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[key] = value
    return flat


def load_config(path, **overrides):
    """Read a ``key = value`` config file; keyword overrides win."""
    flat = parse_config_text(Path(path).read_text())
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_flat(flat)


def dump_config(cfg, path):
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
