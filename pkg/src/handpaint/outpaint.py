"""Stage-II outpainting: conditional denoiser plus the latent blending
engine with three strategies (bounding box, naive, sequential mask
expansion), trailing unmasked steps, and the final pixel-space re-blend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import schedule as sched
from .conditioning import Canvas, Skeleton, downsize_to_latent, render_skeleton
from .unet import UNetBackbone

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# latent codecs

class IdentityCodec:
    """Pixel-space diffusion: encode/decode are exact identities."""

    factor = 1

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class AvgPoolCodec:
    """Factor-f average-pool encoder with nearest-neighbor decoder. Lossy;
    provided to exercise the latent-dimension logic."""

    def __init__(self, factor: int = 8):
        self.factor = factor

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(x, self.factor)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return F.interpolate(z, scale_factor=self.factor, mode="nearest")


def make_codec(name: str, factor: int = 8):
    if name == "identity":
        return IdentityCodec()
    if name == "avgpool":
        return AvgPoolCodec(factor)
    raise ValueError(f"unknown codec {name!r}")


# ---------------------------------------------------------------------------
# blending

STRATEGIES = ("bbox", "naive", "sequential")


@dataclass
class BlendConfig:
    strategy: str = "sequential"
    unmasked_tail: int = 2
    dilation_kernel: int = 3   # square structuring element side

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.unmasked_tail < 0:
            raise ValueError("unmasked_tail must be >= 0")
        if self.dilation_kernel < 1 or self.dilation_kernel % 2 == 0:
            raise ValueError("dilation_kernel must be odd and positive")


@dataclass
class BlendPlan:
    """Nested latent masks ordered largest -> original, the count of
    trailing unmasked steps, and the pixel-resolution final re-blend mask."""

    masks: list
    unmasked_tail: int = 2
    final_mask: np.ndarray = None

    def validate(self):
        for i in range(len(self.masks) - 1):
            a = self.masks[i] > 0
            b = self.masks[i + 1] > 0
            if np.any(b & ~a):
                raise ValueError(f"mask nesting violated between steps "
                                 f"{i} and {i + 1}")


def blend_latents(x_c, x_t, m):
    """Per-step convex blend: m * x_c + (1 - m) * x_t."""
    if torch.is_tensor(x_t) and not torch.is_tensor(m):
        m = torch.as_tensor(np.asarray(m), dtype=x_t.dtype)
    if x_c.shape != x_t.shape:
        raise ValueError(f"shape mismatch: {tuple(x_c.shape)} vs "
                         f"{tuple(x_t.shape)}")
    if m.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"mask spatial shape {tuple(m.shape[-2:])} does not "
                         f"match latents {tuple(x_t.shape[-2:])}")
    return m * x_c + (1 - m) * x_t


def expansion_schedule(mask: np.ndarray, steps: int, kernel=None,
                       unmasked_tail: int = 2,
                       final_mask=None) -> BlendPlan:
    """plan[i] = mask dilated (steps - 1 - i) times; plan[-1] is the mask
    itself. Nesting holds by construction; an empty mask degenerates to a
    plan of empty masks."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if kernel is None:
        kernel = np.ones((3, 3), dtype=bool)
    mask = np.asarray(mask)
    squeeze = mask.ndim == 3
    plane = (mask[0] if squeeze else mask) > 0
    seq = [plane]
    for _ in range(steps - 1):
        seq.append(ndimage.binary_dilation(seq[-1], structure=kernel))
    masks = [m.astype(np.float32) for m in reversed(seq)]
    if squeeze:
        masks = [m[None] for m in masks]
    plan = BlendPlan(masks=masks, unmasked_tail=unmasked_tail,
                     final_mask=final_mask if final_mask is not None
                     else (mask.astype(np.float32)))
    plan.validate()
    return plan


def _bbox_hull(mask: np.ndarray) -> np.ndarray:
    """Tight axis-aligned hull of the on-pixels, as a filled mask."""
    plane = mask[0] if mask.ndim == 3 else mask
    out = np.zeros_like(plane, dtype=np.float32)
    ys, xs = np.nonzero(plane > 0)
    if len(ys):
        out[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = 1.0
    return out[None] if mask.ndim == 3 else out


# ---------------------------------------------------------------------------
# stage-II model

@dataclass
class OutpainterConfig:
    image_size: int = 96             # longest side; bookkeeping only
    latent_channels: int = 3
    cond_channels: int = 4           # 3 skeleton raster + 1 precise mask
    base_channels: int = 24
    channel_mults: tuple = (1, 2, 3)
    num_res_blocks: int = 1
    attention_resolutions: tuple = ()
    num_styles: int = 16

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_resolutions = tuple(self.attention_resolutions)

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cond_channels


class OutpainterModel(nn.Module):
    """Skeleton- and mask-conditioned noise predictor (conditioning enters
    as concatenated input channels)."""

    def __init__(self, config: OutpainterConfig):
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
        with torch.no_grad():
            w = self.unet.conv_in.weight
            nn.init.normal_(w[:, config.latent_channels:], std=0.01)

    def forward(self, xt, t, cond, style=None):
        if cond.ndim == 3:
            cond = cond[None].expand(xt.shape[0], -1, -1, -1)
        if cond.shape[-3] != self.config.cond_channels:
            raise ValueError(
                f"condition has {cond.shape[-3]} channels, expected "
                f"{self.config.cond_channels}")
        eps_hat, _ = self.unet(torch.cat([xt, cond.to(xt.dtype)], dim=1),
                               t, style)
        return eps_hat


def load_outpainter(path):
    from .denoiser import load_checkpoint
    blob = load_checkpoint(path, "outpainter")
    config = OutpainterConfig(**blob["config"])
    model = OutpainterModel(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config, blob["step"]


# ---------------------------------------------------------------------------
# the outpainting loop

def strategy_masks(m_latent: np.ndarray, steps: int,
                   blend_cfg: BlendConfig) -> BlendPlan:
    """Per-step blending masks for a strategy; sequential builds the
    expansion schedule, the others repeat a fixed mask."""
    if blend_cfg.strategy == "sequential":
        k = np.ones((blend_cfg.dilation_kernel,) * 2, dtype=bool)
        return expansion_schedule(m_latent, steps, kernel=k,
                                  unmasked_tail=blend_cfg.unmasked_tail)
    if blend_cfg.strategy == "bbox":
        fixed = _bbox_hull(m_latent)
    else:
        fixed = m_latent.astype(np.float32)
    return BlendPlan(masks=[fixed] * steps,
                     unmasked_tail=blend_cfg.unmasked_tail,
                     final_mask=m_latent.astype(np.float32))


def outpaint(canvas: Canvas, sk: Skeleton, style, model, codec,
             sampler_cfg: sched.SamplerConfig, blend_cfg: BlendConfig,
             noise_schedule: sched.NoiseSchedule, strategy: str = None,
             debug_dir=None) -> np.ndarray:
    """Generate a body around the canvas hands; the hand region of the
    output is bit-identical to the canvas under the identity codec.

    The denoiser is conditioned on the skeleton raster and the precise
    (unexpanded) hand mask at every step; blending applies the strategy's
    per-step mask, the last `unmasked_tail` steps run free, and the
    decoded image is re-blended with the original pixel mask.
    """
    from .training import to_signed, to_unsigned

    if strategy is not None:
        blend_cfg = BlendConfig(strategy=strategy,
                                unmasked_tail=blend_cfg.unmasked_tail,
                                dilation_kernel=blend_cfg.dilation_kernel)

    h, w = canvas.image.shape[1:]
    f = codec.factor
    img_signed = torch.from_numpy(to_signed(canvas.image))[None]
    x_c = codec.encode(img_signed)
    m_latent = downsize_to_latent(canvas.mask, f)
    m_latent = (m_latent >= 0.5).astype(np.float32)

    degraded = False
    if m_latent.sum() == 0 and blend_cfg.strategy == "sequential":
        log.warning("empty latent mask with sequential strategy: "
                    "degrading to unconditional generation")
        degraded = True

    steps = sampler_cfg.num_inference_steps
    plan = strategy_masks(m_latent, steps, blend_cfg)
    plan.final_mask = canvas.mask.astype(np.float32)

    skel = render_skeleton(sk, (h, w))
    skel_latent = downsize_to_latent(skel, f)
    cond = torch.from_numpy(
        np.concatenate([skel_latent, m_latent], axis=0))[None]

    gen = torch.Generator().manual_seed(sampler_cfg.seed)
    x = torch.randn(x_c.shape, generator=gen)
    ts = sampler_cfg.timesteps(noise_schedule.T)
    model_eval = getattr(model, "eval", None)
    if model_eval is not None:
        model_eval()
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
            eps_hat = model(x, int(t), cond, style)
            noise = (torch.randn(x.shape, generator=gen)
                     if sampler_cfg.sigma_scale > 0 else None)
            x = sched.ddim_step(x, eps_hat, int(t), t_prev, noise_schedule,
                                sampler_cfg, noise)
            blending = (not degraded) and i < steps - plan.unmasked_tail
            if blending:
                x = blend_latents(x_c, x, plan.masks[i])
            if debug_dir is not None:
                _dump_step(debug_dir, i, int(t), x,
                           plan.masks[i] if blending else None)

    decoded = to_unsigned(codec.decode(x)[0].numpy())
    final = plan.final_mask * canvas.image + (1.0 - plan.final_mask) * decoded
    return final.astype(np.float32)


def _dump_step(debug_dir, i, t, x, mask):
    from .conditioning import save_mask
    debug_dir = Path(debug_dir)
    debug_dir.mkdir(parents=True, exist_ok=True)
    np.save(debug_dir / f"latent_{i:03d}_t{t}.npy", x.numpy())
    if mask is not None:
        save_mask(debug_dir / f"mask_{i:03d}.png", mask)
