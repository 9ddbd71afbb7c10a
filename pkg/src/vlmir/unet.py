"""Noise-prediction U-Net conditioned on stage-1 features.

* SCA: cross-attention from image features to per-token LQ-caption features.
* ICA: cross-attention to the single pooled clean-image embedding; always
  placed directly after the SCA block it shares a position with.
* Degradation modulation: every residual block rescales and shifts its input
  with (1 + gamma, beta) produced from the degradation embedding fused with a
  learnable prompt.

All conditioning outputs are zero-initialized, so at step 0 the network
ignores the conditioning bundle entirely.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import UNetConfig


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class CrossAttention(nn.Module):
    """Residual multi-head cross-attention from a feature map to a context sequence."""

    def __init__(self, channels: int, context_dim: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ValueError(f"{channels} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.context_dim = context_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = zero_module(nn.Linear(channels, channels))

    def _qkv(self, features: torch.Tensor, context: torch.Tensor):
        if context.ndim != 3 or context.shape[-1] != self.context_dim or context.shape[0] != features.shape[0]:
            raise ValueError(f"context must be (B, L, {self.context_dim}), got {tuple(context.shape)}")
        if context.shape[1] == 0:
            raise ValueError("cross-attention needs at least one context token")
        b, c = features.shape[:2]
        x = self.norm(features.reshape(b, c, -1)).transpose(1, 2)
        dh = c // self.num_heads
        q = self.to_q(x).view(b, -1, self.num_heads, dh).transpose(1, 2)
        k = self.to_k(context).view(b, -1, self.num_heads, dh).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.num_heads, dh).transpose(1, 2)
        return q, k, v

    def attention_weights(self, features: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """(B, heads, H*W, L) attention probabilities."""
        q, k, _ = self._qkv(features, context)
        return (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)

    def forward(self, features: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q, k, v = self._qkv(features, context)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        b, c = features.shape[:2]
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        return features + self.to_out(out).transpose(1, 2).reshape(features.shape)


class SemanticCrossAttention(CrossAttention):
    """SCA: attends to LQ-caption token features (B, L, d)."""


class ImageCrossAttention(CrossAttention):
    """ICA: attends to the pooled clean-image embedding as a single token."""

    def forward(self, features, image_embed):
        return super().forward(features, self._as_context(image_embed))

    def attention_weights(self, features, image_embed):
        return super().attention_weights(features, self._as_context(image_embed))

    @staticmethod
    def _as_context(image_embed):
        return image_embed[:, None, :] if image_embed.ndim == 2 else image_embed


class ConditioningStage(nn.Module):
    """SCA followed by ICA (either may be disabled for ablations)."""

    def __init__(self, channels: int, cond_dim: int, num_heads: int, use_sca: bool = True, use_ica: bool = True):
        super().__init__()
        self.sca = SemanticCrossAttention(channels, cond_dim, num_heads) if use_sca else None
        self.ica = ImageCrossAttention(channels, cond_dim, num_heads) if use_ica else None

    def forward(self, h, text_tokens, image_embed):
        if self.sca is not None:
            h = self.sca(h, text_tokens)
        if self.ica is not None:
            h = self.ica(h, image_embed)
        return h


class DegradationModulation(nn.Module):
    """(1 + gamma) * features + beta, with (gamma, beta) = MLP([degradation_embed, mean(prompt)])."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(
            nn.Linear(2 * cond_dim, cond_dim),
            nn.SiLU(),
            zero_module(nn.Linear(cond_dim, 2 * channels)),
        )

    def scale_shift(self, degradation_embed: torch.Tensor, prompt: torch.Tensor):
        fused = torch.cat([degradation_embed, prompt.mean(0).expand_as(degradation_embed)], dim=-1)
        return self.mlp(fused).chunk(2, dim=-1)

    def forward(self, features, degradation_embed, prompt):
        if features.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {features.shape[1]}")
        gamma, beta = self.scale_shift(degradation_embed, prompt)
        view = (features.shape[0], self.channels) + (1,) * (features.ndim - 2)
        return features * (1 + gamma.view(view)) + beta.view(view)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, cond_dim: int):
        super().__init__()
        self.modulation = DegradationModulation(cond_dim, in_ch)
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb, degradation_embed, prompt):
        h = self.modulation(x, degradation_embed, prompt)
        h = self.conv1(F.silu(self.norm1(h)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class CondSequential(nn.ModuleList):
    def forward(self, h, ctx):
        for layer in self:
            if isinstance(layer, ResBlock):
                h = layer(h, ctx["temb"], ctx["degradation"], ctx["prompt"])
            elif isinstance(layer, ConditioningStage):
                h = layer(h, ctx["text"], ctx["image"])
            else:
                h = layer(h)
        return h


class ConditionalUNet(nn.Module):
    """eps_theta(x_i, mu, i, text_tokens, image_embed, degradation_embed) -> noise estimate (NCHW)."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        base, d = config.base_channels, config.cond_dim
        time_dim = 4 * base
        self.time_mlp = nn.Sequential(nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.prompt = nn.Parameter(torch.rand(config.prompt_len, d))
        self.null_text = nn.Parameter(torch.randn(1, d) * 0.02)

        def cond_stage(ch, ds):
            if ds in config.attn_resolutions and (config.use_sca or config.use_ica):
                return [ConditioningStage(ch, d, config.num_heads, config.use_sca, config.use_ica)]
            return []

        ch, ds = base, 1
        chans = [ch]
        self.input_blocks = nn.ModuleList([CondSequential([nn.Conv2d(6, base, 3, padding=1)])])
        for level, mult in enumerate(config.channel_mults):
            for _ in range(config.num_res_blocks):
                out = base * mult
                self.input_blocks.append(CondSequential([ResBlock(ch, out, time_dim, d), *cond_stage(out, ds)]))
                ch = out
                chans.append(ch)
            if level != len(config.channel_mults) - 1:
                self.input_blocks.append(CondSequential([Downsample(ch)]))
                chans.append(ch)
                ds *= 2
        self.middle = CondSequential(
            [ResBlock(ch, ch, time_dim, d), *cond_stage(ch, ds), ResBlock(ch, ch, time_dim, d)]
        )
        self.output_blocks = nn.ModuleList()
        for level, mult in reversed(list(enumerate(config.channel_mults))):
            for k in range(config.num_res_blocks + 1):
                out = base * mult
                layers = [ResBlock(ch + chans.pop(), out, time_dim, d), *cond_stage(out, ds)]
                ch = out
                if level and k == config.num_res_blocks:
                    layers.append(Upsample(ch))
                    ds //= 2
                self.output_blocks.append(CondSequential(layers))
        self.out = nn.Sequential(nn.GroupNorm(_groups(ch), ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1))
        self.size_multiple = 2 ** (len(config.channel_mults) - 1)

    def conditioning_stages(self) -> list[ConditioningStage]:
        return [m for m in self.modules() if isinstance(m, ConditioningStage)]

    def forward(self, x, mu, t, text_tokens, image_embed, degradation_embed):
        if x.shape != mu.shape or x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"x and mu must both be (B, 3, H, W); got {tuple(x.shape)} and {tuple(mu.shape)}")
        b, _, h, w = x.shape
        if h % self.size_multiple or w % self.size_multiple:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {self.size_multiple}")
        d = self.config.cond_dim
        for name, tensor, shape in (
            ("image_embed", image_embed, (b, d)),
            ("degradation_embed", degradation_embed, (b, d)),
        ):
            if tuple(tensor.shape) != shape:
                raise ValueError(f"{name} must be {shape}, got {tuple(tensor.shape)}")
        if text_tokens.ndim != 3 or text_tokens.shape[0] != b or text_tokens.shape[2] != d:
            raise ValueError(f"text_tokens must be (B, L, {d}), got {tuple(text_tokens.shape)}")
        if text_tokens.shape[1] == 0:
            text_tokens = self.null_text.expand(b, 1, d)
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(b)
        ctx = {
            "temb": self.time_mlp(timestep_embedding(t, self.config.base_channels).to(x.dtype)),
            "degradation": degradation_embed,
            "prompt": self.prompt,
            "text": text_tokens,
            "image": image_embed,
        }
        h = torch.cat([x, mu], dim=1)
        skips = []
        for block in self.input_blocks:
            h = block(h, ctx)
            skips.append(h)
        h = self.middle(h, ctx)
        for block in self.output_blocks:
            h = block(torch.cat([h, skips.pop()], dim=1), ctx)
        return self.out(h)
