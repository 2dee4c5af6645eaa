import numpy as np
import pytest
import torch

from handpaint.denoiser import (
    DenoiserConfig,
    HandDenoiser,
    MaskHead,
    load_checkpoint,
    load_hand_denoiser,
    parameter_count,
    save_checkpoint,
)

from oracles import central_difference_grad

GOLDEN_DEFAULT_PARAM_COUNT = 981_532


def small_config(**kw):
    base = dict(image_size=16, latent_channels=4, base_channels=8,
                channel_mults=(1, 2), num_res_blocks=1)
    base.update(kw)
    return DenoiserConfig(**base)


class TestForwardContract:
    def test_output_shapes(self):
        cfg = small_config()
        model = HandDenoiser(cfg)
        xt = torch.randn(4, 4, 16, 16)
        cond = torch.rand(4, 11, 16, 16)
        out = model(xt, 3, cond, style=0)
        assert out.eps_hat.shape == (4, 4, 16, 16)
        assert out.mask_logits.shape == (4, 1, 16, 16)

    def test_mask_logits_scale_with_codec_factor(self):
        cfg = small_config(mask_head_upsample=4)
        model = HandDenoiser(cfg)
        out = model(torch.randn(1, 4, 16, 16), 1, torch.rand(1, 11, 16, 16))
        assert out.mask_logits.shape == (1, 1, 64, 64)

    def test_zero_condition_is_valid(self):
        model = HandDenoiser(small_config())
        out = model(torch.randn(2, 4, 16, 16), 5,
                    torch.zeros(2, 11, 16, 16), style=1)
        assert torch.isfinite(out.eps_hat).all()
        assert torch.isfinite(out.mask_logits).all()

    def test_deterministic_forward(self):
        model = HandDenoiser(small_config())
        xt = torch.randn(1, 4, 16, 16)
        cond = torch.rand(1, 11, 16, 16)
        a = model(xt, 7, cond, style=2)
        b = model(xt, 7, cond, style=2)
        assert torch.equal(a.eps_hat, b.eps_hat)
        assert torch.equal(a.mask_logits, b.mask_logits)

    def test_wrong_condition_channels_rejected(self):
        model = HandDenoiser(small_config())
        with pytest.raises(ValueError, match="channels"):
            model(torch.randn(1, 4, 16, 16), 1, torch.rand(1, 7, 16, 16))

    def test_condition_spatial_mismatch_rejected(self):
        model = HandDenoiser(small_config())
        with pytest.raises(ValueError, match="spatial"):
            model(torch.randn(1, 4, 16, 16), 1, torch.rand(1, 11, 8, 8))


class TestMaskHead:
    def test_upsampling_factor_sixteen(self):
        head = MaskHead(8, upsample=16)
        for h, w in ((2, 3), (4, 4)):
            out = head(torch.randn(1, 8, h, w))
            assert out.shape == (1, 1, 16 * h, 16 * w)

    def test_four_layers_all_transposed_at_sixteen(self):
        head = MaskHead(8, upsample=16)
        kinds = [type(l) for l in head.layers]
        assert kinds == [torch.nn.ConvTranspose2d] * 4
        for l in head.layers:
            assert l.kernel_size == (2, 2) and l.stride == (2, 2)

    def test_identity_factor_keeps_resolution(self):
        head = MaskHead(8, upsample=1)
        out = head(torch.randn(1, 8, 5, 7))
        assert out.shape == (1, 1, 5, 7)

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            MaskHead(8, upsample=3)

    def test_zero_final_layer_gives_half_sigmoid(self):
        head = MaskHead(8, upsample=2)
        with torch.no_grad():
            head.layers[-1].weight.zero_()
            head.layers[-1].bias.zero_()
        logits = head(torch.randn(2, 8, 4, 4))
        assert torch.all(logits == 0)
        assert torch.all(torch.sigmoid(logits) == 0.5)

    def test_finite_difference_gradient(self):
        torch.manual_seed(0)
        head = MaskHead(2, upsample=1, hidden=4).double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        weights = torch.randn(1, 1, 4, 4, dtype=torch.float64)

        def loss_fn():
            with torch.no_grad():
                return (head(x) * weights).sum()

        out = (head(x) * weights).sum()
        out.backward()
        analytic = x.grad.clone()
        fd = central_difference_grad(loss_fn, x.data, h=1e-6)
        rel = (analytic - fd).norm() / fd.norm()
        assert rel < 1e-4


class TestConditioningSensitivity:
    def test_every_heatmap_channel_reaches_eps(self):
        torch.manual_seed(1)
        cfg = small_config()
        model = HandDenoiser(cfg)
        opt = torch.optim.Adam(model.parameters(), 1e-3)
        xt = torch.randn(2, 4, 16, 16)
        cond = torch.rand(2, 11, 16, 16)
        for _ in range(5):  # take the model past raw initialization
            out = model(xt, 3, cond, 0)
            loss = out.eps_hat.pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        cond = cond.clone().requires_grad_(True)
        out = model(xt, 3, cond, 0)
        out.eps_hat.norm().backward()
        per_channel = cond.grad.abs().sum(dim=(0, 2, 3))
        assert torch.all(per_channel[:10] > 0)


class TestGoldenConfig:
    def test_default_parameter_count_frozen(self):
        model = HandDenoiser(DenoiserConfig())
        assert parameter_count(model) == GOLDEN_DEFAULT_PARAM_COUNT

    def test_shapes_are_function_of_config(self):
        cfg = DenoiserConfig()
        model = HandDenoiser(cfg)
        out = model(torch.randn(1, 3, 64, 64), 1, torch.rand(1, 11, 64, 64))
        assert out.eps_hat.shape == (1, 3, 64, 64)
        assert out.mask_logits.shape == (1, 1, 64, 64)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_config()
        model = HandDenoiser(cfg)
        path = tmp_path / "hand.pt"
        save_checkpoint(path, model, cfg, step=123, kind="hand_denoiser")
        loaded, lcfg, step = load_hand_denoiser(path)
        assert step == 123
        assert lcfg == cfg
        xt = torch.randn(1, 4, 16, 16)
        cond = torch.rand(1, 11, 16, 16)
        a = model(xt, 2, cond, 0)
        b = loaded(xt, 2, cond, 0)
        assert torch.equal(a.eps_hat, b.eps_hat)

    def test_kind_mismatch_rejected(self, tmp_path):
        cfg = small_config()
        model = HandDenoiser(cfg)
        path = tmp_path / "x.pt"
        save_checkpoint(path, model, cfg, step=1, kind="hand_denoiser")
        with pytest.raises(ValueError, match="expected"):
            load_checkpoint(path, "outpainter")
