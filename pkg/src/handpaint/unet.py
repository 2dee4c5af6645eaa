"""Small U-Net denoiser backbone with timestep and style conditioning.

Style is a categorical label standing in for text conditioning; its
embedding is added to the timestep embedding and modulates every residual
block through a per-block scale/shift of the normalized features.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0)
                      * torch.arange(half, dtype=torch.float32, device=t.device)
                      / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    """Residual block with embedding-driven feature modulation."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1)
                     if in_ch != out_ch else nn.Identity())

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.heads = heads

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads,
                                             c // self.heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        attn = torch.softmax(q.transpose(-2, -1) @ k
                             / math.sqrt(c // self.heads), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class UNetBackbone(nn.Module):
    """Returns both the output head result and the final decoder feature
    map (the attachment point for auxiliary heads)."""

    def __init__(self, in_channels: int, out_channels: int,
                 base_channels: int = 32, channel_mults=(1, 2, 4),
                 num_res_blocks: int = 1, attention_resolutions=(),
                 num_styles: int = 16, image_size: int = 64):
        super().__init__()
        emb_dim = base_channels * 4
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(),
            nn.Linear(emb_dim, emb_dim))
        self.base_channels = base_channels
        self.style_embed = nn.Embedding(num_styles, emb_dim)

        chans = [base_channels * m for m in channel_mults]
        self.conv_in = nn.Conv2d(in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        res = image_size
        skip_chans = [chans[0]]
        ch = chans[0]
        for level, out_ch in enumerate(chans):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(num_res_blocks):
                blocks.append(ResBlock(ch, out_ch, emb_dim))
                attns.append(AttentionBlock(out_ch)
                             if res in attention_resolutions else nn.Identity())
                ch = out_ch
                skip_chans.append(ch)
            self.down_blocks.append(blocks)
            self.down_attn.append(attns)
            if level < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2,
                                                  padding=1))
                skip_chans.append(ch)
                res //= 2
            else:
                self.downsamples.append(nn.Identity())

        self.mid1 = ResBlock(ch, ch, emb_dim)
        self.mid_attn = (AttentionBlock(ch)
                         if res in attention_resolutions else nn.Identity())
        self.mid2 = ResBlock(ch, ch, emb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level, out_ch in reversed(list(enumerate(chans))):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(num_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_chans.pop(), out_ch, emb_dim))
                attns.append(AttentionBlock(out_ch)
                             if res in attention_resolutions else nn.Identity())
                ch = out_ch
            self.up_blocks.append(blocks)
            self.up_attn.append(attns)
            if level > 0:
                self.upsamples.append(
                    nn.ConvTranspose2d(ch, ch, 2, stride=2))
                res *= 2
            else:
                self.upsamples.append(nn.Identity())

        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, out_channels, 3, padding=1)

    def forward(self, x, t, style):
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.long,
                           device=x.device)
        emb = self.time_mlp(timestep_embedding(t, self.base_channels)
                            .to(x.dtype))
        if style is not None:
            if not torch.is_tensor(style):
                style = torch.full((x.shape[0],), int(style),
                                   dtype=torch.long, device=x.device)
            emb = emb + self.style_embed(style).to(x.dtype)

        h = self.conv_in(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for block, attn in zip(blocks, self.down_attn[level]):
                h = attn(block(h, emb))
                skips.append(h)
            if not isinstance(self.downsamples[level], nn.Identity):
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        for level, blocks in enumerate(self.up_blocks):
            for block, attn in zip(blocks, self.up_attn[level]):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), emb))
            h = self.upsamples[level](h)

        features = F.silu(self.out_norm(h))
        return self.out_conv(features), features
