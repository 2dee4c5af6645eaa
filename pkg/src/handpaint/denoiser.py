"""Stage-I multi-task hand denoiser: noise prediction plus a hand
segmentation mask from an 11-channel pose condition.

The mask head is a 4-layer stack; with a spatial codec factor f it uses
log2(f) transposed 2x2/stride-2 layers (upsampling by exactly f) and
stride-1 refinements for the rest. The documented full variant (factor
16, all four layers transposed) stays available through the config.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .unet import UNetBackbone

CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    image_size: int = 64
    latent_channels: int = 3
    cond_channels: int = 11          # 10 finger heatmaps + 1 mask channel
    base_channels: int = 24
    channel_mults: tuple = (1, 2, 3)
    num_res_blocks: int = 1
    attention_resolutions: tuple = ()
    num_styles: int = 16
    mask_head_upsample: int = 1      # codec factor f; power of two <= 16

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)
        f = self.mask_head_upsample
        if f not in (1, 2, 4, 8, 16):
            raise ValueError(f"mask_head_upsample must be a power of two "
                             f"in [1, 16], got {f}")

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cond_channels


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    mask_logits: torch.Tensor


class MaskHead(nn.Module):
    """Four-layer mask decoder; SiLU after each non-final layer."""

    def __init__(self, in_channels: int, upsample: int = 1,
                 hidden: int = 32):
        super().__init__()
        n_up = upsample.bit_length() - 1   # log2 for powers of two
        if 2 ** n_up != upsample:
            raise ValueError(f"upsample factor {upsample} is not a power of two")
        layers = []
        ch = in_channels
        for i in range(4):
            out_ch = 1 if i == 3 else hidden
            if i < n_up:
                layers.append(nn.ConvTranspose2d(ch, out_ch, 2, stride=2))
            else:
                layers.append(nn.Conv2d(ch, out_ch, 3, padding=1))
            ch = out_ch
        self.layers = nn.ModuleList(layers)
        self.upsample = upsample

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h = features
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < 3:
                h = F.silu(h)
        return h


class HandDenoiser(nn.Module):
    """eps_hat and mask logits from (x_t, t, pose condition, style)."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.unet = UNetBackbone(
            in_channels=config.in_channels,
            out_channels=config.latent_channels,
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            num_res_blocks=config.num_res_blocks,
            attention_resolutions=config.attention_resolutions,
            num_styles=config.num_styles,
            image_size=config.image_size,
        )
        self.mask_head = MaskHead(config.base_channels,
                                  config.mask_head_upsample)
        # condition channels of the first convolution start near zero so an
        # untrained net behaves like its unconditional counterpart
        with torch.no_grad():
            w = self.unet.conv_in.weight
            nn.init.normal_(w[:, config.latent_channels:], std=0.01)

    def forward(self, xt: torch.Tensor, t, cond: torch.Tensor,
                style=None) -> DenoiserOutput:
        if cond.shape[-3] != self.config.cond_channels:
            raise ValueError(
                f"condition has {cond.shape[-3]} channels, expected "
                f"{self.config.cond_channels}")
        if cond.ndim == 3:
            cond = cond[None].expand(xt.shape[0], -1, -1, -1)
        if cond.shape[-2:] != xt.shape[-2:]:
            raise ValueError(
                f"condition spatial size {tuple(cond.shape[-2:])} does not "
                f"match latent {tuple(xt.shape[-2:])}")
        eps_hat, features = self.unet(
            torch.cat([xt, cond.to(xt.dtype)], dim=1), t, style)
        mask_logits = self.mask_head(features)
        return DenoiserOutput(eps_hat=eps_hat, mask_logits=mask_logits)

    def as_sampler_fn(self, cond: torch.Tensor, style=None):
        """Adapter for schedule.sample: (xt, t, _) -> (eps_hat, mask)."""
        def fn(xt, t, _cond_unused):
            out = self(xt, t, cond, style)
            return out.eps_hat, out.mask_logits
        return fn


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: nn.Module, config, step: int, kind: str):
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "state_dict": model.state_dict(),
        "step": int(step),
    }, path)


def load_checkpoint(path, expected_kind: str):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    if blob.get("kind") != expected_kind:
        raise ValueError(f"checkpoint {path} holds a {blob.get('kind')!r} "
                         f"model, expected {expected_kind!r}")
    return blob


def load_hand_denoiser(path):
    blob = load_checkpoint(path, "hand_denoiser")
    config = DenoiserConfig(**blob["config"])
    model = HandDenoiser(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config, blob["step"]
