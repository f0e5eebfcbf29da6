import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionregister.data import RunConfig
from fusionregister.errors import ContractError
from fusionregister.losses import total_loss
from fusionregister.network import (
    FusionRegister,
    GatedMLP,
    ModalityRetainmentBlock,
    image_pyramid,
)
from fusionregister.warpcore import backward_warp, compose_fields

import oracles

D = torch.float64


def tiny(**kw):
    base = dict(pyramid_depth=2, base_channels=4, patch_size=16)
    base.update(kw)
    return RunConfig(**base)


def inputs(b=1, h=16, w=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(b, 3, h, w, generator=g, dtype=dtype) for _ in range(3)]


def randomise_heads(model, scale=0.1, seed=0):
    """Give the zero-initialised layers random values too."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for head in model.heads:
            for p in head.field.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


class TestExtractor:
    def test_shapes_default_config(self):
        torch.manual_seed(0)
        model = FusionRegister(RunConfig())
        with torch.no_grad():
            feats = model.extract_pyramid(torch.rand(1, 3, 256, 256), "vi")
        assert [tuple(f.shape) for f in feats] == [(1, 16, 256, 256), (1, 32, 128, 128)]

    def test_zero_input_zero_bias(self):
        model = FusionRegister(tiny())
        with torch.no_grad():
            for m in model.extractors.modules():
                if isinstance(m, torch.nn.Conv2d):
                    m.bias.zero_()
            feats = model.extract_pyramid(torch.zeros(1, 3, 16, 16), "f")
        assert all(torch.count_nonzero(f) == 0 for f in feats)

    def test_streams_are_independent(self):
        model = FusionRegister(tiny())
        a = model.extractors["vi"].image_branch[0][0].weight
        b = model.extractors["ir"].image_branch[0][0].weight
        assert a.data_ptr() != b.data_ptr() and not torch.equal(a, b)

    def test_unknown_stream(self):
        with pytest.raises(ContractError):
            FusionRegister(tiny()).extract_pyramid(torch.zeros(1, 3, 16, 16), "nir")

    def test_divisibility(self):
        with pytest.raises(ContractError):
            FusionRegister(tiny()).extract_pyramid(torch.zeros(1, 3, 15, 16), "f")


class TestLocalize:
    def test_zero_heads_give_identity_estimates(self):
        model = FusionRegister(tiny()).zero_init_heads()
        vi, ir, f = inputs()
        with torch.no_grad():
            outs = model(vi, ir, f)
        for o in outs:
            assert torch.count_nonzero(o.field) == 0
            assert torch.all(o.mask == 0.5)

    def test_default_init_starts_off_saddle(self):
        model = FusionRegister(tiny())
        vi, ir, f = inputs()
        with torch.no_grad():
            o = model(vi, ir, f)[0]
        assert torch.count_nonzero(o.field) == 0
        assert float(o.mask.mean()) > 0.6

    def test_refinement_is_compose(self):
        model = randomise_heads(FusionRegister(tiny()))
        vi, ir, f = inputs()
        with torch.no_grad():
            fv, fi, ff = (model.extract_pyramid(x, s) for x, s in ((vi, "vi"), (ir, "ir"), (f, "f")))
            est = model.localize(ff, fv, fi)
        (_, phi0, raw0), (_, phi1, raw1) = est
        assert torch.equal(phi1, raw1)
        assert torch.equal(phi0, compose_fields(raw0, raw1))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mask_bounded(self, seed):
        torch.manual_seed(seed)
        model = FusionRegister(tiny())
        vi, ir, f = inputs(seed=seed)
        with torch.no_grad():
            for o in model(vi * 10, ir * 10, f * 10 - 5):
                assert float(o.mask.min()) >= 0 and float(o.mask.max()) <= 1

    def test_scale_mismatch(self):
        model = FusionRegister(tiny())
        feats = model.extract_pyramid(torch.rand(1, 3, 16, 16), "f")
        with pytest.raises(ContractError):
            model.localize(feats, feats[:1], feats)


class TestGatedMLP:
    def test_zero_gate_annihilates(self):
        g = GatedMLP(4, 3)
        with torch.no_grad():
            g.gate.zero_()
            g.gate_bias.zero_()
        assert torch.count_nonzero(g(torch.rand(1, 4, 6, 6))) == 0

    def test_zero_input(self):
        assert torch.count_nonzero(GatedMLP(4, 3)(torch.zeros(1, 4, 6, 6))) == 0

    def test_scalar_square(self):
        g = GatedMLP(1, 1)
        with torch.no_grad():
            g.w1.weight.fill_(1.0)
            g.w2.weight.fill_(1.0)
            g.gate.fill_(1.0)
            g.gate_bias.zero_()
        x = torch.full((1, 1, 2, 2), 0.7)
        assert torch.allclose(g(x), x * x)

    def test_token_mixing_stays_inside_patch(self):
        torch.manual_seed(0)
        g = GatedMLP(2, 3)
        x = torch.rand(1, 2, 6, 6, dtype=torch.float32)
        y = x.clone()
        y[..., 0, 0] += 1.0
        with torch.no_grad():
            diff = (g(y) - g(x)).abs().sum(1)[0]
        assert float(diff[:3, :3].sum()) > 0
        assert float(diff[3:].sum()) == 0 and float(diff[:, 3:].sum()) == 0

    def test_reflect_pad_non_multiple(self):
        out = GatedMLP(2, 3)(torch.rand(1, 2, 7, 8))
        assert out.shape == (1, 2, 7, 8)


class TestMRB:
    def test_attention_zero_init_gives_four_g(self):
        torch.manual_seed(0)
        mrb = ModalityRetainmentBlock(4)
        with torch.no_grad():
            for conv in (mrb.vis_att, mrb.ir_att):
                conv.weight.zero_()
                conv.bias.zero_()
        g = torch.rand(1, 4, 6, 6)
        vis, ir = mrb.attention_multipliers(g)
        assert torch.all(vis == 1.5) and torch.all(ir == 1.5)
        assert torch.allclose(g + g * vis + g * ir, 4 * g)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_multipliers_strictly_inside(self, seed):
        torch.manual_seed(seed)
        mrb = ModalityRetainmentBlock(4)
        with torch.no_grad():
            vis, ir = mrb.attention_multipliers(torch.randn(2, 4, 6, 6))
        for t in (vis, ir):
            assert float(t.min()) > 1 and float(t.max()) < 2

    def test_equal_logits_average(self):
        mrb = ModalityRetainmentBlock(4, scales=(1, 3))
        assert torch.equal(mrb.scale_weights(), torch.tensor([0.5, 0.5]))

    def test_output_is_warp_plus_bias(self):
        torch.manual_seed(0)
        mrb = ModalityRetainmentBlock(4)
        f = [torch.rand(1, 4, 6, 6) for _ in range(3)]
        iw = torch.rand(1, 3, 6, 6)
        _, bias, out = mrb(*f, iw)
        assert torch.equal(out, iw + bias)

    def test_zero_bias_head_passes_warp(self):
        mrb = ModalityRetainmentBlock(4)
        with torch.no_grad():
            mrb.bias_head[-1].weight.zero_()
            mrb.bias_head[-1].bias.zero_()
        iw = torch.rand(1, 3, 6, 6)
        _, _, out = mrb(*[torch.rand(1, 4, 6, 6) for _ in range(3)], iw)
        assert torch.equal(out, iw)


class TestForward:
    def test_identity_registrar(self):
        model = FusionRegister(tiny()).zero_init_heads()
        for seed in range(5):
            vi, ir, f = inputs(seed=seed)
            with torch.no_grad():
                out = model(vi, ir, f)[0].out
            assert float((out - f).abs().max()) <= 1e-6

    def test_shapes(self):
        model = FusionRegister(tiny(pyramid_depth=3))
        vi, ir, f = inputs(b=2, h=32, w=24)
        with torch.no_grad():
            outs = model(vi, ir, f)
        for i, o in enumerate(outs):
            h, w = 32 // 2**i, 24 // 2**i
            assert o.out.shape == (2, 3, h, w)
            assert o.mask.shape == (2, 1, h, w)
            assert o.field.shape == (2, 2, h, w)
            assert torch.equal(o.out, o.warp_image + o.bias)

    def test_no_mrb(self):
        model = randomise_heads(FusionRegister(tiny(no_mrb=True)))
        with torch.no_grad():
            for o in model(*inputs()):
                assert torch.equal(o.out, o.warp_image)

    def test_one_way_warp(self):
        model = randomise_heads(FusionRegister(tiny(one_way_warp=True)))
        vi, ir, f = inputs()
        with torch.no_grad():
            outs = model(vi, ir, f)
        for o, fi in zip(outs, image_pyramid(f, 2)):
            assert torch.equal(o.warp_image, backward_warp(fi, o.field))

    @pytest.mark.parametrize("variant", ["dc", "dt"])
    def test_reserved_variants(self, variant):
        with pytest.raises(NotImplementedError, match="variant not implemented"):
            FusionRegister(tiny(mrb_variant=variant))

    def test_deterministic(self):
        torch.manual_seed(3)
        a = FusionRegister(tiny())
        torch.manual_seed(3)
        b = FusionRegister(tiny())
        x = inputs()
        with torch.no_grad():
            assert torch.equal(a(*x)[0].out, b(*x)[0].out)

    def test_shape_mismatch(self):
        vi, ir, f = inputs()
        with pytest.raises(ContractError):
            FusionRegister(tiny())(vi, ir, f[..., :8, :8])


class TestGradients:
    def _loss(self, model, batch):
        vi, ir, f, gt = batch
        outs = model(vi, ir, f)
        return total_loss(outs, image_pyramid(gt, model.depth))[0]

    def test_gradient_flow(self):
        torch.manual_seed(0)
        model = randomise_heads(FusionRegister(tiny()))
        batch = inputs(b=2, seed=4) + [torch.rand(2, 3, 16, 16)]
        self._loss(model, batch).backward()
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None and torch.isfinite(g).all() for g in grads)
        nonzero = sum(bool(g.abs().sum() > 0) for g in grads)
        assert nonzero >= 0.99 * len(grads)

    def test_symmetric_start_is_a_saddle(self):
        # M = 0.5 and phi = 0 make both warp branches mirror images, so the
        # localisation layers get no gradient at all from this point
        torch.manual_seed(0)
        model = FusionRegister(tiny())
        with torch.no_grad():
            for head in model.heads:
                for layer in (head.mask, head.field):
                    layer.weight.zero_()
                    layer.bias.zero_()
        batch = inputs(b=2, seed=8) + [torch.rand(2, 3, 16, 16)]
        self._loss(model, batch).backward()
        for head in model.heads:
            assert torch.count_nonzero(head.mask.weight.grad) == 0
            assert torch.count_nonzero(head.field.weight.grad) == 0

    def test_default_start_is_not_a_saddle(self):
        torch.manual_seed(0)
        model = FusionRegister(tiny())
        batch = inputs(b=2, seed=8) + [torch.rand(2, 3, 16, 16)]
        self._loss(model, batch).backward()
        assert any(torch.count_nonzero(h.field.weight.grad) > 0 for h in model.heads)

    def test_finite_differences_20_parameters(self):
        # the detail loss stops gradients through M, so the check runs on a
        # smooth functional of the raw outputs instead of the training loss
        torch.manual_seed(0)
        model = randomise_heads(FusionRegister(tiny())).double()
        vi, ir, f = inputs(dtype=D, seed=5)
        g = torch.Generator().manual_seed(6)
        probes = None

        def objective():
            nonlocal probes
            outs = model(vi, ir, f)
            tensors = [t for o in outs for t in (o.out, o.mask, o.field)]
            if probes is None:
                probes = [torch.randn(t.shape, generator=g, dtype=D) for t in tensors]
            return sum((t * w).sum() for t, w in zip(tensors, probes))

        params = list(model.parameters())
        objective().backward()
        rng = np.random.default_rng(0)
        analytic, numeric = [], []
        for _ in range(20):
            p = params[rng.integers(len(params))]
            idx = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + 1e-6
                hi = float(objective())
                flat[idx] = orig - 1e-6
                lo = float(objective())
                flat[idx] = orig
            analytic.append(float(p.grad.view(-1)[idx]))
            numeric.append((hi - lo) / 2e-6)
        assert oracles.relative_error(analytic, numeric) < 1e-3
