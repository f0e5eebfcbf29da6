"""The learnable registrar: feature pyramids, misregistration localisation,
bi-directional warping and the modality retainment block (MRB)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import RunConfig
from .errors import ContractError
from .warpcore import (
    backward_warp,
    bidirectional_blend,
    correlation_layer,
    downsample2x,
    refine_pyramid,
)

STREAMS = ("f", "vi", "ir")


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def image_pyramid(img, depth):
    """``[img, img/2, ...]`` by repeated factor-2 bilinear reduction."""
    levels = [img]
    for _ in range(depth - 1):
        levels.append(downsample2x(levels[-1]))
    return levels


class FeatureExtractor(nn.Module):
    """Multi-input encoder: scale ``i`` sees its own downsampled image plus a
    strided reduction of scale ``i - 1`` features, with ``c0 * 2**i`` channels."""

    def __init__(self, c0, depth, in_channels=3):
        super().__init__()
        self.depth = depth
        self.image_branch = nn.ModuleList()
        self.reduce = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in range(depth):
            c = c0 * 2**i
            self.image_branch.append(
                nn.Sequential(conv3x3(in_channels, c), nn.ReLU(), conv3x3(c, c), nn.ReLU())
            )
            if i > 0:
                self.reduce.append(conv3x3(c // 2, c, stride=2))
                self.merge.append(nn.Sequential(conv3x3(2 * c, c), nn.ReLU()))

    def forward(self, images):
        if len(images) != self.depth:
            raise ContractError(f"expected {self.depth} pyramid levels, got {len(images)}")
        feats = [self.image_branch[0](images[0])]
        for i in range(1, self.depth):
            own = self.image_branch[i](images[i])
            down = self.reduce[i - 1](feats[-1])
            feats.append(self.merge[i - 1](torch.cat([own, down], dim=1)))
        return feats


class LocalizationHead(nn.Module):
    """Predicts the misregistration probability map and a raw deformation field.

    The field layer starts at zero, so an untrained head never moves pixels.
    The mask layer's bias starts at ``mask_bias`` rather than 0: at M = 0.5 the
    two warp branches are mirror images and the loss gradient w.r.t. both M
    and the field vanishes at phi = 0, a saddle that training cannot leave.
    """

    def __init__(self, c, mask_bias=1.5):
        super().__init__()
        self.trunk = nn.Sequential(
            conv3x3(3 * c, c), nn.ReLU(),
            conv3x3(c, c), nn.ReLU(),
            conv3x3(c, c), nn.ReLU(),
        )
        self.mask = conv3x3(c, 1)
        self.field = conv3x3(c, 2)
        nn.init.constant_(self.mask.bias, mask_bias)
        nn.init.zeros_(self.field.weight)
        nn.init.zeros_(self.field.bias)

    def forward(self, f, vi, ir):
        h = self.trunk(torch.cat([f, vi, ir], dim=1))
        return torch.sigmoid(self.mask(h)), self.field(h)


class GatedMLP(nn.Module):
    """Gated MLP over non-overlapping ``s x s`` patches.

    Within a patch the tokens are the ``s**2`` pixels:
    ``(X W1) * relu((X W2) G + b)``, ``G`` mixing tokens. ``b`` starts at 1 and
    ``G`` near 0 so the gate is open at initialisation.
    """

    def __init__(self, channels, s):
        super().__init__()
        self.s = s
        t = s * s
        self.w1 = nn.Linear(channels, channels, bias=False)
        self.w2 = nn.Linear(channels, channels, bias=False)
        self.gate = nn.Parameter(torch.randn(t, t) * 1e-3)
        self.gate_bias = nn.Parameter(torch.ones(t))

    def forward(self, x):
        s = self.s
        b, c, h, w = x.shape
        if h < s or w < s:
            raise ContractError(f"feature map {h}x{w} smaller than patch size {s}")
        ph, pw = (-h) % s, (-w) % s
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        hp, wp = h + ph, w + pw
        tokens = (
            x.reshape(b, c, hp // s, s, wp // s, s)
            .permute(0, 2, 4, 3, 5, 1)
            .reshape(-1, s * s, c)
        )
        u = self.w1(tokens)
        v = torch.einsum("ts,nsc->ntc", self.gate, self.w2(tokens))
        v = v + self.gate_bias.view(1, -1, 1)
        out = u * F.relu(v)
        out = (
            out.reshape(b, hp // s, wp // s, s, s, c)
            .permute(0, 5, 1, 3, 2, 4)
            .reshape(b, c, hp, wp)
        )
        return out[..., :h, :w]


class ModalityRetainmentBlock(nn.Module):
    def __init__(self, c, p=1, scales=(1, 3)):
        super().__init__()
        self.p = p
        k = (2 * p + 1) ** 2
        self.compress = nn.Sequential(conv3x3(3 * c + 2 * k, c), nn.ReLU())
        self.scales = tuple(scales)
        self.gmlp = nn.ModuleList(GatedMLP(c, s) for s in self.scales)
        self.scale_logits = nn.Parameter(torch.zeros(len(self.scales)))
        self.vis_att = nn.Conv2d(c, c, 1)
        self.ir_att = nn.Conv2d(2, 1, 7, padding=3)
        self.bias_head = nn.Sequential(conv3x3(c, c), nn.ReLU(), conv3x3(c, 3))

    def scale_weights(self):
        return torch.softmax(self.scale_logits, dim=0)

    def attention_multipliers(self, g):
        """Visible (channel) and infrared (spatial) multipliers, both in (1, 2)."""
        vis = torch.sigmoid(self.vis_att(g.mean(dim=(-2, -1), keepdim=True))) + 1
        pooled = torch.cat(
            [g.amax(dim=1, keepdim=True), g.mean(dim=1, keepdim=True)], dim=1
        )
        ir = torch.sigmoid(self.ir_att(pooled)) + 1
        return vis, ir

    def forward(self, f_warp, f_vi, f_ir, i_warp):
        if not (f_warp.shape == f_vi.shape == f_ir.shape):
            raise ContractError("MRB feature planes must share shape")
        cor_vi = correlation_layer(f_warp, f_vi, self.p)
        cor_ir = correlation_layer(f_warp, f_ir, self.p)
        x = self.compress(torch.cat([f_warp, f_vi, f_ir, cor_vi, cor_ir], dim=1))
        w = self.scale_weights()
        g = sum(w[j] * blk(x) for j, blk in enumerate(self.gmlp))
        vis, ir = self.attention_multipliers(g)
        f_ff = g + g * vis + g * ir
        i_bias = self.bias_head(f_ff)
        return f_ff, i_bias, i_warp + i_bias


@dataclass
class ScaleOutput:
    fused: torch.Tensor  # I_f at this scale
    warp_image: torch.Tensor
    warp_feat: torch.Tensor
    bias: torch.Tensor
    out: torch.Tensor
    mask: torch.Tensor
    field: torch.Tensor
    raw_field: torch.Tensor


class FusionRegister(nn.Module):
    """Post-registration network operating on a fused image and its sources."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or RunConfig()
        if cfg.mrb_variant != "gmlp":
            raise NotImplementedError(f"MRB variant {cfg.mrb_variant!r}: variant not implemented")
        self.config = cfg
        n, c0 = cfg.pyramid_depth, cfg.base_channels
        self.depth = n
        self.extractors = nn.ModuleDict({s: FeatureExtractor(c0, n) for s in STREAMS})
        self.heads = nn.ModuleList(LocalizationHead(c0 * 2**i) for i in range(n))
        if cfg.no_mrb:
            self.mrbs = None
        else:
            self.mrbs = nn.ModuleList(
                ModalityRetainmentBlock(c0 * 2**i, cfg.correlation_range, cfg.patch_scales)
                for i in range(n)
            )

    @property
    def multiple(self):
        return 2 ** (self.depth - 1)

    def extract_pyramid(self, img, stream):
        if stream not in self.extractors:
            raise ContractError(f"unknown stream {stream!r}; expected one of {STREAMS}")
        h, w = img.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ContractError(f"{h}x{w} not divisible by {self.multiple}; pad first")
        return self.extractors[stream](image_pyramid(img, self.depth))

    def localize(self, feats_f, feats_vi, feats_ir):
        """Per-scale ``(mask, refined field, raw field)``, finest first."""
        if not (len(feats_f) == len(feats_vi) == len(feats_ir) == self.depth):
            raise ContractError("feature pyramids disagree in scale count")
        masks, raw = [], []
        for head, f, vi, ir in zip(self.heads, feats_f, feats_vi, feats_ir):
            m, phi = head(f, vi, ir)
            masks.append(m)
            raw.append(phi)
        refined = refine_pyramid(raw, additive=self.config.additive_refine)
        return list(zip(masks, refined, raw))

    def mrb_forward(self, scale, f_warp, f_vi, f_ir, i_warp):
        return self.mrbs[scale](f_warp, f_vi, f_ir, i_warp)

    def forward(self, vi, ir, fused):
        if not (vi.shape == ir.shape == fused.shape):
            raise ContractError(
                f"input shapes differ: {tuple(vi.shape)}, {tuple(ir.shape)}, "
                f"{tuple(fused.shape)}"
            )
        feats_f = self.extract_pyramid(fused, "f")
        feats_vi = self.extract_pyramid(vi, "vi")
        feats_ir = self.extract_pyramid(ir, "ir")
        fused_levels = image_pyramid(fused, self.depth)

        outputs = []
        estimates = self.localize(feats_f, feats_vi, feats_ir)
        for i, (m, phi, raw) in enumerate(estimates):
            if self.config.one_way_warp:
                i_warp = backward_warp(fused_levels[i], phi)
                f_warp = backward_warp(feats_f[i], phi)
            else:
                i_warp = bidirectional_blend(fused_levels[i], phi, m)
                f_warp = bidirectional_blend(feats_f[i], phi, m)
            if self.mrbs is None:
                i_bias = torch.zeros_like(i_warp)
                i_out = i_warp
            else:
                _, i_bias, i_out = self.mrb_forward(i, f_warp, feats_vi[i], feats_ir[i], i_warp)
            outputs.append(
                ScaleOutput(fused_levels[i], i_warp, f_warp, i_bias, i_out, m, phi, raw)
            )
        return outputs

    def zero_init_heads(self):
        """Make the network an exact identity registrar (M = 0.5, phi = 0, bias = 0)."""
        with torch.no_grad():
            for head in self.heads:
                for layer in (head.mask, head.field):
                    layer.weight.zero_()
                    layer.bias.zero_()
            if self.mrbs is not None:
                for mrb in self.mrbs:
                    mrb.bias_head[-1].weight.zero_()
                    mrb.bias_head[-1].bias.zero_()
        return self


def build_model(config, seed=None):
    if seed is not None:
        torch.manual_seed(seed)
    return FusionRegister(config)
