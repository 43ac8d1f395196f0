"""Miniature 3D-UNet noise predictor.

Each of the ``L`` layers runs ResB -> SA -> CA -> TA and then exposes its
post-TA activation at an injection point. Layers ``1..L/2`` form the
downscale path, ``L/2+1..L`` the mirrored upscale path with skip connections.

Activations move between two layouts:

* frame layout ``[B*F, C, h, w]`` for convolutions and spatial attention
* token layout ``[B*h*w, F, C]`` (spatial positions folded with batch) for
  temporal attention and the injection hooks
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import sinusoidal
from .errors import ConfigError, ContractViolation, StepRangeError

Hook = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    frames: int = 16
    resolution: int = 32
    patch: int = 2
    widths: tuple = (32, 64)
    text_dim: int = 64
    max_prompt_len: int = 24
    heads: int = 1
    time_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.resolution % self.patch:
            raise ConfigError("resolution must be divisible by patch")
        base = self.resolution // self.patch
        if base % (2 ** (len(self.widths) - 1)):
            raise ConfigError("latent grid not divisible by the downscale factor")
        for w in self.widths:
            if w % self.groups or w % self.heads:
                raise ConfigError(f"width {w} must be divisible by groups and heads")

    @property
    def L(self) -> int:
        return 2 * len(self.widths)

    @property
    def down_scales(self) -> list[int]:
        base = self.resolution // self.patch
        return [base // 2**i for i in range(len(self.widths))]

    @property
    def up_scales(self) -> list[int]:
        return self.down_scales[::-1]

    def layer_shape(self, l: int) -> tuple[int, int]:
        """(spatial side, channels) of layer ``l`` (1-based)."""
        if not 1 <= l <= self.L:
            raise StepRangeError(f"layer {l} outside [1, {self.L}]")
        n = len(self.widths)
        i = l - 1 if l <= n else 2 * n - l
        return self.down_scales[i], self.widths[i]

    def is_downscale(self, l: int) -> bool:
        return l <= len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class ConditioningBundle:
    """Prompt tokens ``[B, L_P, C_text]`` with a validity mask ``[B, L_P]``."""

    text_tokens: torch.Tensor
    mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.text_tokens.ndim == 2:
            self.text_tokens = self.text_tokens.unsqueeze(0)
            if self.mask is not None:
                self.mask = self.mask.unsqueeze(0)

    def check(self, max_len: int):
        if self.text_tokens.shape[1] > max_len:
            raise ContractViolation(f"prompt length {self.text_tokens.shape[1]} exceeds {max_len}")


def to_tokens(x: torch.Tensor, b: int) -> torch.Tensor:
    """``[B*F, C, h, w] -> [B*h*w, F, C]``."""
    bf, c, h, w = x.shape
    f = bf // b
    return x.reshape(b, f, c, h, w).permute(0, 3, 4, 1, 2).reshape(b * h * w, f, c)


def to_frames(t: torch.Tensor, b: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`to_tokens`."""
    _, f, c = t.shape
    return t.reshape(b, h, w, f, c).permute(0, 3, 4, 1, 2).reshape(b * f, c, h, w)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with a residual-free output."""

    def __init__(self, dim: int, ctx_dim: Optional[int] = None, heads: int = 1, out_dim: Optional[int] = None,
                 zero_out: bool = False):
        super().__init__()
        ctx_dim = ctx_dim or dim
        out_dim = out_dim or dim
        if dim % heads:
            raise ConfigError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(ctx_dim, dim, bias=False)
        self.v = nn.Linear(ctx_dim, dim, bias=False)
        self.out = nn.Linear(dim, out_dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, ctx: Optional[torch.Tensor] = None,
                mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        ctx = x if ctx is None else ctx
        b, n, _ = x.shape
        m = ctx.shape[1]
        h = self.heads
        q = self.q(x).reshape(b, n, h, -1).transpose(1, 2)
        k = self.k(ctx).reshape(b, m, h, -1).transpose(1, 2)
        v = self.v(ctx).reshape(b, m, h, -1).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            att = att.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = att.softmax(-1)
        if mask is not None:
            # rows with no valid key attend to nothing
            att = torch.nan_to_num(att, nan=0.0)
        y = (att @ v).transpose(1, 2).reshape(b, n, -1)
        return self.out(y)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        # temb: [B*F, time_dim]
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    def __init__(self, c: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.attn = Attention(c, heads=heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bf, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.attn(self.norm(t))
        return t.transpose(1, 2).reshape(bf, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, c: int, ctx_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.attn = Attention(c, ctx_dim=ctx_dim, heads=heads, zero_out=True)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        bf, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.attn(self.norm(t), ctx, mask)
        return t.transpose(1, 2).reshape(bf, c, h, w)


class TemporalAttention(nn.Module):
    """Attention along the frame axis only; input and output in token layout."""

    def __init__(self, c: int, heads: int, max_frames: int):
        super().__init__()
        self.norm = nn.LayerNorm(c)
        self.attn = Attention(c, heads=heads)
        self.register_buffer("frame_pos", sinusoidal(max_frames, c), persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        f = t.shape[1]
        h = self.norm(t) + self.frame_pos[:f].to(t.dtype)
        return t + self.attn(h)


class UNetLayer(nn.Module):
    def __init__(self, c_in: int, c: int, cfg: BackboneConfig):
        super().__init__()
        self.res = ResBlock(c_in, c, cfg.time_dim, cfg.groups)
        self.sa = SpatialAttention(c, cfg.heads)
        self.ca = CrossAttention(c, cfg.text_dim, cfg.heads)
        self.ta = TemporalAttention(c, cfg.heads, max(cfg.frames, 64))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch
        ws = cfg.widths
        n = len(ws)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.stem = nn.Conv2d(cfg.in_channels * p * p, ws[0], 3, padding=1)

        self.layers = nn.ModuleList()
        for i in range(n):
            c_in = ws[0] if i == 0 else ws[i]
            self.layers.append(UNetLayer(c_in, ws[i], cfg))
        for j in range(n - 1, -1, -1):
            self.layers.append(UNetLayer(2 * ws[j], ws[j], cfg))

        self.downs = nn.ModuleList(nn.Conv2d(ws[i], ws[i + 1], 3, stride=2, padding=1) for i in range(n - 1))
        self.ups = nn.ModuleList(nn.Conv2d(ws[j], ws[j - 1], 3, padding=1) for j in range(n - 1, 0, -1))

        self.out_norm = nn.GroupNorm(cfg.groups, ws[0])
        self.out_conv = nn.Conv2d(ws[0], cfg.in_channels * p * p, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # ------------------------------------------------------------------

    def _step_embedding(self, k, b: int, dtype) -> torch.Tensor:
        kt = torch.as_tensor(k, dtype=torch.float64)
        if kt.ndim == 0:
            kt = kt.expand(b)
        half = self.cfg.time_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
        ang = kt[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(dtype)
        return self.time_mlp(emb)

    def _check_input(self, z: torch.Tensor):
        cfg = self.cfg
        if z.ndim != 5 or z.shape[2] != cfg.in_channels or z.shape[3] != cfg.resolution or z.shape[4] != cfg.resolution:
            raise ContractViolation(
                f"expected [B, F, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}], got {tuple(z.shape)}"
            )

    def run(
        self,
        z: torch.Tensor,
        k,
        cond: Optional[ConditioningBundle] = None,
        hooks: Optional[Mapping[int, Hook]] = None,
        stop_at: Optional[int] = None,
    ) -> torch.Tensor:
        squeeze = z.ndim == 4
        if squeeze:
            z = z.unsqueeze(0)
        self._check_input(z)
        cfg = self.cfg
        b, f = z.shape[:2]
        n = len(cfg.widths)
        hooks = hooks or {}

        ctx = mask = None
        if cond is not None:
            cond.check(cfg.max_prompt_len)
            ctx = cond.text_tokens.to(z.dtype)
            mask = cond.mask
            if ctx.shape[0] == 1 and b > 1:
                ctx = ctx.expand(b, -1, -1)
                mask = None if mask is None else mask.expand(b, -1)
            ctx = ctx.repeat_interleave(f, dim=0)
            mask = None if mask is None else mask.repeat_interleave(f, dim=0)

        temb = self._step_embedding(k, b, z.dtype).repeat_interleave(f, dim=0)
        x = F.pixel_unshuffle(z.flatten(0, 1), cfg.patch)
        x = self.stem(x)

        skips = []
        for l, layer in enumerate(self.layers, start=1):
            if l > n:
                x = torch.cat([x, skips.pop()], dim=1)
            x = layer.res(x, temb)
            x = layer.sa(x)
            if ctx is not None:
                x = layer.ca(x, ctx, mask)
            h, w = x.shape[-2:]
            t = layer.ta(to_tokens(x, b))
            if l in hooks:
                t_new = hooks[l](t, l)
                if t_new.shape != t.shape:
                    raise ContractViolation(
                        f"hook at layer {l} returned {tuple(t_new.shape)}, expected {tuple(t.shape)}"
                    )
                t = t_new
            if stop_at == l:
                return t
            x = to_frames(t, b, h, w)
            if l < n:
                skips.append(x)
                x = self.downs[l - 1](x)
            elif l == n:
                skips.append(x)
            elif l < 2 * n:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = self.ups[l - n - 1](x)

        x = self.out_conv(F.silu(self.out_norm(x)))
        x = F.pixel_shuffle(x, cfg.patch)
        out = x.reshape(z.shape)
        return out[0] if squeeze else out

    def predict_noise(self, z, k, cond=None, hooks=None) -> torch.Tensor:
        return self.run(z, k, cond, hooks)

    forward = predict_noise

    def layer_representation(self, z, k, cond, l: int) -> torch.Tensor:
        """Post-TA activation at layer ``l`` in token layout ``[B*h_l*w_l, F, C_l]``."""
        if not 1 <= l <= self.cfg.L:
            raise StepRangeError(f"layer {l} outside [1, {self.cfg.L}]")
        return self.run(z, k, cond, stop_at=l)

    def ta_parameters(self):
        return [p for name, p in self.named_parameters() if ".ta." in name]
