"""Property suite bundled with the package, run by ``fusionregister selftest``.

Each group returns a list of failure strings; an empty list is a pass. The
reference implementations here are plain loops kept deliberately separate
from the vectorised code they check.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from . import losses, metrics, warpcore

D = torch.float64


def _rand(*shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=D)


def _loop_warp(x, phi):
    x, phi = x.numpy(), phi.numpy()
    b, c, h, w = x.shape
    out = np.zeros_like(x)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                sx, sy = xx + phi[bi, 0, y, xx], y + phi[bi, 1, y, xx]
                x0, y0 = math.floor(sx), math.floor(sy)
                for cy in (y0, y0 + 1):
                    for cx in (x0, x0 + 1):
                        if 0 <= cy < h and 0 <= cx < w:
                            wgt = (1 - abs(sx - cx)) * (1 - abs(sy - cy))
                            out[bi, :, y, xx] += wgt * x[bi, :, cy, cx]
    return out


def _close(name, a, b, tol):
    a = np.asarray(a.detach() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    return [] if err <= tol else [f"{name}: max error {err:.3g} > {tol:g}"]


def group_warp(warp=warpcore.backward_warp):
    fails = []
    x = _rand(1, 2, 8, 8, seed=1)
    zero = torch.zeros(1, 2, 8, 8, dtype=D)
    fails += _close("zero field is identity", warp(x, zero), x, 1e-12)

    shift = zero.clone()
    shift[:, 0] = 1.0
    got = warp(x, shift)
    fails += _close("unit shift reads right neighbour", got[..., :-1], x[..., 1:], 1e-12)

    phi = (_rand(1, 2, 8, 8, seed=2) - 0.5) * 5
    fails += _close("bilinear loop oracle", warp(x, phi), _loop_warp(x, phi), 1e-10)

    ones = torch.ones(1, 1, 8, 8, dtype=D)
    inner = (_rand(1, 2, 8, 8, seed=3) - 0.5) * 1.8
    fails += _close("partition of unity", warp(ones, inner)[..., 1:-1, 1:-1], 1.0, 1e-12)

    m1 = torch.ones(1, 1, 8, 8, dtype=D)
    fails += _close(
        "blend m=1 is forward branch", warpcore.bidirectional_blend(x, phi, m1), warp(x, phi), 1e-12
    )
    fails += _close(
        "blend m=0 is reverse branch",
        warpcore.bidirectional_blend(x, phi, 0 * m1),
        warp(x, -phi),
        1e-12,
    )
    return fails


def group_compose():
    fails = []
    fine = _rand(1, 2, 8, 8, seed=4)
    zero_c = torch.zeros(1, 2, 4, 4, dtype=D)
    fails += _close("zero coarse field", warpcore.compose_fields(fine, zero_c), fine, 0)
    coarse = _rand(1, 2, 4, 4, seed=5)
    fails += _close(
        "zero fine field", warpcore.compose_fields(torch.zeros_like(fine), coarse), 0.0, 0
    )
    half = torch.full((1, 2, 4, 4), 0.5, dtype=D)
    fails += _close(
        "constant fields", warpcore.compose_fields(torch.ones_like(fine), half), 2.0, 0
    )
    return fails


def _gradcheck(name, fn, inputs):
    try:
        ok = torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5, rtol=1e-3)
    except RuntimeError as exc:
        return [f"{name}: {str(exc).splitlines()[0]}"]
    return [] if ok else [f"{name}: gradient check failed"]


def group_gradients():
    fails = []
    x = _rand(1, 2, 6, 6, seed=6).requires_grad_()
    # keep samples away from cell boundaries where bilinear is not differentiable
    phi = (torch.floor(_rand(1, 2, 6, 6, seed=7) * 4 - 2) + 0.3 + 0.4 * _rand(1, 2, 6, 6, seed=8))
    phi.requires_grad_()
    fails += _gradcheck("warp wrt image and field", warpcore.backward_warp, (x, phi))
    a = _rand(1, 3, 5, 5, seed=9).requires_grad_()
    b = _rand(1, 3, 5, 5, seed=10).requires_grad_()
    fails += _gradcheck("correlation", lambda u, v: warpcore.correlation_layer(u, v, 1), (a, b))

    out = _rand(1, 2, 8, 8, seed=11).requires_grad_()
    warp = _rand(1, 2, 8, 8, seed=12)
    gt = _rand(1, 2, 8, 8, seed=13)
    mask = _rand(1, 1, 8, 8, seed=14)
    cases = {
        "edge loss": lambda o: losses.edge_loss([o], [warp], [gt]),
        "global loss": lambda o: losses.global_loss([o], [gt]),
        "frequency loss": lambda o: losses.frequency_loss([o], [gt]),
        "detail loss": lambda o: losses.detail_loss([o], [gt], [mask]),
    }
    for name, fn in cases.items():
        fails += _gradcheck(name, fn, (out,))
    return fails


def _dft_distance(a, b):
    total, count = 0.0, 0
    for pa, pb in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        h, w = pa.shape
        for k in range(h):
            for l in range(w):
                acc = 0j
                for m in range(h):
                    for n in range(w):
                        ang = -2 * math.pi * (k * m / h + l * n / w)
                        acc += (pa[m, n] - pb[m, n]) * complex(math.cos(ang), math.sin(ang))
                total += abs(acc.real) + abs(acc.imag)
                count += 1
    return total / count


def _sobel_loop(img, eps=1e-8):
    k = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            gx = gy = 0.0
            for dy in range(3):
                for dx in range(3):
                    v = img[min(max(y + dy - 1, 0), h - 1), min(max(x + dx - 1, 0), w - 1)]
                    gx += k[dy][dx] * v
                    gy += k[dx][dy] * v
            out[y, x] = math.sqrt(gx * gx + gy * gy + eps)
    return out


def group_losses():
    fails = []
    a = _rand(1, 2, 6, 6, seed=15)
    b = _rand(1, 2, 6, 6, seed=16)
    m = _rand(1, 1, 6, 6, seed=17)
    fails += _close(
        "frequency loss vs direct DFT",
        losses.frequency_loss([a], [b]),
        _dft_distance(a.numpy(), b.numpy()),
        1e-9,
    )
    ref = np.mean(
        [
            np.abs(_sobel_loop(a[0, c].numpy()) * m[0, 0].numpy() - _sobel_loop(b[0, c].numpy()) * m[0, 0].numpy())
            for c in range(2)
        ]
    )
    fails += _close("detail loss vs loops", losses.detail_loss([a], [b], [m]), ref, 1e-9)
    rms = math.sqrt(float(((a - b) ** 2).sum()) / a.numel())
    fails += _close("global loss", losses.global_loss([a], [b]), rms, 1e-9)
    const = torch.full((1, 1, 8, 8), 0.4, dtype=D)
    fails += _close("edge extraction of a constant", losses.dog_extract(const), 0.0, 1e-12)
    return fails


def group_metrics():
    fails = []
    g = _rand(9, 7, seed=18).numpy()
    levels = np.clip(np.rint(g * 255), 0, 255).astype(int).ravel()
    counts = {}
    for v in levels:
        counts[v] = counts.get(v, 0) + 1
    en = -sum(c / levels.size * math.log2(c / levels.size) for c in counts.values())
    fails += _close("entropy", metrics.entropy(g), en, 1e-9)
    h, w = g.shape
    rf = sum((g[y, x] - g[y, x - 1]) ** 2 for y in range(h) for x in range(1, w)) / (h * (w - 1))
    cf = sum((g[y, x] - g[y - 1, x]) ** 2 for y in range(1, h) for x in range(w)) / ((h - 1) * w)
    fails += _close("spatial frequency", metrics.spatial_frequency(g), math.sqrt(rf + cf), 1e-9)
    ag = np.mean(
        [
            math.sqrt(((g[y, x + 1] - g[y, x]) ** 2 + (g[y + 1, x] - g[y, x]) ** 2) / 2)
            for y in range(h - 1)
            for x in range(w - 1)
        ]
    )
    fails += _close("average gradient", metrics.average_gradient(g), ag, 1e-9)
    mu = g.mean()
    fails += _close("std dev", metrics.std_dev(g), math.sqrt(((g - mu) ** 2).mean()), 1e-12)
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    b[1:3, 1:3] = True
    fails += _close("iou of offset squares", metrics.iou(a, b), 1 / 7, 1e-12)
    return fails


GROUPS: dict[str, Callable[[], list]] = {
    "warp-identity": group_warp,
    "field-composition": group_compose,
    "gradients": group_gradients,
    "loss-oracles": group_losses,
    "metric-oracles": group_metrics,
}


def run_selftest(warp=None, emit=print):
    """Run every group; returns ``{group: failures}``.

    ``warp`` replaces the backward warp under test in the warp-identity
    group, which is how the negative control injects a broken convention.
    """
    results = {}
    for name, fn in GROUPS.items():
        try:
            fails = fn(warp) if (name == "warp-identity" and warp is not None) else fn()
        except Exception as exc:  # a crash is reported as a failure of its group
            fails = [f"raised {type(exc).__name__}: {exc}"]
        results[name] = fails
        emit(f"{'PASS' if not fails else 'FAIL'} {name}")
        for f in fails:
            emit(f"     {f}")
    return results
