"""Training-only causal token selection (CTS) and grounding (CTG) blocks.

A CTS block sits at a backbone injection point. It resamples the layer's
tokens onto the vision-token grid, adds gaze-gated vision tokens, scores every
token with a small MLP and splits each frame into the top quarter ("causal")
and the rest ("background"). The recombined tokens are mapped back to the
layer's grid and added residually, through a zero-initialised projection, so
attaching fresh blocks leaves the backbone output untouched.

The CTG block at the last layer additionally scores causal, background and
noise-intervened background tokens against five answer candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Attention, BackboneConfig
from .diffusion import loss_mse
from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class BlockConfig:
    n_tokens: int = 16
    token_dim: int = 64
    temperature: float = 1.0
    gumbel_noise: bool = True
    fusion_kernel: int = 1
    mlp_hidden: int = 64
    intervention_fraction: float = 0.25
    heads: int = 1


# ---- attachment presets ----------------------------------------------------

PRESETS = ("full", "no_gaze", "no_cts_ctg", "downscale_off", "upscale_off", "ctg_only")


def preset_attachments(preset: str, L: int) -> tuple[list[tuple[int, str]], bool]:
    """(layer, kind) pairs and whether gaze is used, for a named ablation preset."""
    half = L // 2
    down = [(l, "cts") for l in range(1, half + 1)]
    up = [(l, "cts") for l in range(half + 1, L)]
    ctg = [(L, "ctg")]
    table = {
        "full": (down + up + ctg, True),
        "no_gaze": (down + up + ctg, False),
        "no_cts_ctg": ([], False),
        "downscale_off": (up + ctg, True),
        "upscale_off": (down + ctg, True),
        "ctg_only": (ctg, True),
    }
    if preset not in table:
        raise ConfigError(f"unknown hooks preset {preset!r}; choose from {', '.join(PRESETS)}")
    return table[preset]


# ---- primitives --------------------------------------------------------------

def grid_side(n_tokens: int) -> int:
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ConfigError(f"token count {n_tokens} is not a perfect square")
    return side


def resize_tokens(t: torch.Tensor, b: int, side_out: int) -> torch.Tensor:
    """Bilinear resize of token grids: ``[B*s*s, F, C] -> [B*side_out^2, F, C]``."""
    n_in = t.shape[0] // b
    side_in = grid_side(n_in)
    f, c = t.shape[1:]
    x = t.reshape(b, side_in, side_in, f, c).permute(0, 3, 4, 1, 2).reshape(b * f, c, side_in, side_in)
    if side_in != side_out:
        x = F.interpolate(x, size=(side_out, side_out), mode="bilinear", align_corners=False)
    return x.reshape(b, f, c, side_out, side_out).permute(0, 3, 4, 1, 2).reshape(b * side_out**2, f, c)


class SamplingAdaptor(nn.Module):
    """Bilinear resize to the ``n_tokens`` grid followed by a 1x1 channel map."""

    def __init__(self, c_in: int, n_tokens: int, c_out: int):
        super().__init__()
        self.side = grid_side(n_tokens)
        self.proj = nn.Conv2d(c_in, c_out, 1)

    def identity_init(self):
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
            m = min(self.proj.in_channels, self.proj.out_channels)
            self.proj.weight[:m, :m, 0, 0] = torch.eye(m)
        return self

    def forward(self, t: torch.Tensor, b: int) -> torch.Tensor:
        r = resize_tokens(t, b, self.side)
        # a 1x1 conv on the grid is a per-token linear map
        w = self.proj.weight[:, :, 0, 0]
        return r @ w.T + self.proj.bias


def sampling_adaptor(t: torch.Tensor, b: int, adaptor: SamplingAdaptor) -> torch.Tensor:
    return adaptor(t, b)


def gumbel_softmax(logits: torch.Tensor, tau: float = 1.0, dim: int = -1,
                   generator: Optional[torch.Generator] = None, noise: bool = True) -> torch.Tensor:
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype).clamp(1e-10, 1 - 1e-10)
        logits = logits - torch.log(-torch.log(u))
    return (logits / tau).softmax(dim)


class GatedFusion(nn.Module):
    """Concat vision and gaze tokens, two 1-D convs with ReLU, Gumbel-Softmax over tokens."""

    def __init__(self, c: int, c_gaze: Optional[int] = None, kernel: int = 1):
        super().__init__()
        c_gaze = c_gaze or c
        pad = kernel // 2
        self.conv1 = nn.Conv1d(c + c_gaze, c, kernel, padding=pad)
        self.conv2 = nn.Conv1d(c, c, kernel, padding=pad)

    def gate_logits(self, z_v: torch.Tensor, z_g: torch.Tensor, b: int) -> torch.Tensor:
        """Pre-softmax gate in ``[B, F, C, n]`` layout."""
        if z_v.shape[0] != z_g.shape[0] or z_v.shape[1] != z_g.shape[1]:
            raise ContractViolation(f"vision tokens {tuple(z_v.shape)} and gaze tokens {tuple(z_g.shape)} disagree")
        n = z_v.shape[0] // b
        f = z_v.shape[1]
        x = torch.cat([z_v, z_g.to(z_v.dtype)], dim=-1)  # [B*n, F, 2C]
        x = x.reshape(b, n, f, -1).permute(0, 2, 3, 1).reshape(b * f, -1, n)
        x = self.conv2(F.relu(self.conv1(x)))
        return x.reshape(b, f, -1, n)

    def forward(self, z_v: torch.Tensor, z_g: torch.Tensor, b: int, tau: float = 1.0,
                generator: Optional[torch.Generator] = None, noise: bool = True):
        """Returns ``(z_v * gate, gate)``; the gate sums to 1 over the token axis per frame and channel."""
        logits = self.gate_logits(z_v, z_g, b)
        gate = gumbel_softmax(logits, tau, dim=-1, generator=generator, noise=noise)
        n = gate.shape[-1]
        gate = gate.permute(0, 3, 1, 2).reshape(b * n, gate.shape[1], -1)
        return z_v * gate, gate


def gated_fusion(z_v, z_g, b, fusion: GatedFusion, temperature=1.0, generator=None, noise=True):
    return fusion(z_v, z_g, b, temperature, generator, noise)


class TokenScorer(nn.Module):
    def __init__(self, c: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(c, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(t))).squeeze(-1)


@dataclass
class TokenBundle:
    fused: torch.Tensor  # [B*n, F, C]
    causal: torch.Tensor  # [B, F, d, C]
    background: torch.Tensor  # [B, F, n-d, C]
    causal_idx: torch.Tensor  # [B, F, d], ascending token index
    background_idx: torch.Tensor  # [B, F, n-d]
    scores: torch.Tensor  # [B, F, n], softmax over tokens
    b: int
    adapted: Optional[torch.Tensor] = None

    @property
    def n(self) -> int:
        return self.scores.shape[-1]

    @property
    def d(self) -> int:
        return self.causal.shape[2]

    def recombine(self, background: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Scatter causal and background tokens back to the original order, ``[B*n, F, C]``."""
        bg = self.background if background is None else background
        bsz, f, _, c = self.causal.shape
        out = torch.empty(bsz, f, self.n, c, dtype=self.causal.dtype)
        out = out.scatter(2, self.causal_idx[..., None].expand(-1, -1, -1, c), self.causal)
        out = out.scatter(2, self.background_idx[..., None].expand(-1, -1, -1, c), bg)
        return out.permute(0, 2, 1, 3).reshape(bsz * self.n, f, c)


def topk_per_frame(scores: torch.Tensor, d: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of the ``d`` highest scores (ties to the lower index) and the rest, both ascending."""
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    top = order[..., :d].sort(dim=-1).values
    rest = order[..., d:].sort(dim=-1).values
    return top, rest


def select_causal_tokens(z_cp: torch.Tensor, b: int, scorer: TokenScorer,
                         adapted: Optional[torch.Tensor] = None) -> TokenBundle:
    """Split fused tokens ``[B*n, F, C]`` into the top ``floor(n/4)`` per frame and the rest.

    Tokens are multiplied by ``s / s.detach()`` (exactly 1 in value) so the
    scorer receives gradient through the hard selection. The factor is formed
    in log space, which has the same gradient but stays finite when a score
    underflows to zero.
    """
    n = z_cp.shape[0] // b
    if n < 4:
        raise ContractViolation(f"need at least 4 tokens per frame, got {n}")
    f, c = z_cp.shape[1:]
    d = n // 4
    tok = z_cp.reshape(b, n, f, c).permute(0, 2, 1, 3)  # [B, F, n, C]
    log_scores = scorer(tok).log_softmax(-1)  # [B, F, n]
    scores = log_scores.exp()
    tok = tok * (log_scores - log_scores.detach()).exp()[..., None]
    top, rest = topk_per_frame(scores.detach(), d)
    causal = tok.gather(2, top[..., None].expand(-1, -1, -1, c))
    background = tok.gather(2, rest[..., None].expand(-1, -1, -1, c))
    return TokenBundle(z_cp, causal, background, top, rest, scores, b, adapted)


def token_intervention(bg: torch.Tensor, fraction: float = 0.25,
                       generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace ``floor(fraction * m)`` random token positions per frame with N(0, I) draws.

    ``bg`` is ``[..., m, C]``; returns the intervened tokens and the boolean
    replacement mask ``[..., m]``.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"intervention fraction must lie in (0, 1), got {fraction}")
    if bg.shape[-2] == 0:
        raise ContractViolation("background token set is empty")
    m = bg.shape[-2]
    n_replace = int(math.floor(fraction * m))
    lead = bg.shape[:-2]
    ranks = torch.rand(lead + (m,), generator=generator).argsort(dim=-1)
    mask = ranks < n_replace
    fresh = torch.randn(bg.shape, generator=generator, dtype=bg.dtype)
    return torch.where(mask[..., None], fresh, bg), mask


# ---- answer head and losses ---------------------------------------------------

def masked_mean(x: torch.Tensor, mask: Optional[torch.Tensor], dim: int) -> torch.Tensor:
    if mask is None:
        return x.mean(dim)
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(dim) / m.sum(dim).clamp_min(1.0)


def score_answers(pooled: torch.Tensor, answers_pooled: torch.Tensor) -> torch.Tensor:
    """Scaled dot products ``[B, C] x [B, 5, C] -> [B, 5]``."""
    return (answers_pooled @ pooled.unsqueeze(-1)).squeeze(-1) / math.sqrt(pooled.shape[-1])


class AnswerHead(nn.Module):
    """Question tokens attend over a token set; pooled output is matched to answer embeddings."""

    def __init__(self, c_token: int, c_text: int, heads: int = 1):
        super().__init__()
        self.attn = Attention(c_text, ctx_dim=c_token, heads=heads, out_dim=c_text)

    def forward(self, tokens: torch.Tensor, z_q: torch.Tensor, answers: torch.Tensor,
                q_mask: Optional[torch.Tensor] = None, a_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """tokens ``[B, T, C]``, z_q ``[B, L_Q, C_Q]``, answers ``[B, 5, L_A, C_A]`` -> logits ``[B, 5]``."""
        if tokens.shape[1] == 0:
            raise ContractViolation("answer head needs a nonempty token set")
        attended = self.attn(z_q, tokens.to(z_q.dtype))
        pooled = masked_mean(attended, q_mask, dim=1)
        a_pooled = masked_mean(answers, a_mask, dim=2)
        return score_answers(pooled, a_pooled)


def answer_logits(tokens, z_q, answers, head: AnswerHead, q_mask=None, a_mask=None) -> torch.Tensor:
    return head(tokens, z_q, answers, q_mask, a_mask)


def kld(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(p) || softmax(q)) summed over the last axis."""
    lp = p_logits.log_softmax(-1)
    lq = q_logits.log_softmax(-1)
    return (lp.exp() * (lp - lq)).sum(-1)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * logits.log_softmax(-1)).sum(-1)


def loss_ara(causal_logits: torch.Tensor, bg_logits: torch.Tensor, bg_do_logits: torch.Tensor,
             correct_index: int = 1) -> torch.Tensor:
    """XE(causal, one-hot) + XE(background, uniform over distractors) + KL(bg || intervened bg).

    ``correct_index`` is 1-based. Batched logits ``[B, 5]`` are averaged over B.
    """
    for x in (causal_logits, bg_logits, bg_do_logits):
        if x.shape[-1] != 5:
            raise ContractViolation(f"expected 5 answer logits, got shape {tuple(x.shape)}")
    onehot = torch.zeros(5, dtype=causal_logits.dtype)
    onehot[correct_index - 1] = 1.0
    uniform = (1.0 - onehot) / 4.0
    total = cross_entropy(causal_logits, onehot) + cross_entropy(bg_logits, uniform) + kld(bg_logits, bg_do_logits)
    return total.mean()


def loss_st2(e_f: torch.Tensor, e_f_hat: torch.Tensor, ara_loss, gamma: float = 0.3) -> torch.Tensor:
    return loss_mse(e_f, e_f_hat) + gamma * ara_loss


# ---- blocks attached to the backbone -----------------------------------------

class CTSBlock(nn.Module):
    def __init__(self, layer_channels: int, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.adaptor = SamplingAdaptor(layer_channels, cfg.n_tokens, cfg.token_dim)
        self.fusion = GatedFusion(cfg.token_dim, kernel=cfg.fusion_kernel)
        self.scorer = TokenScorer(cfg.token_dim, cfg.mlp_hidden)
        self.back = nn.Linear(cfg.token_dim, layer_channels)
        nn.init.zeros_(self.back.weight)
        nn.init.zeros_(self.back.bias)

    def forward(self, t: torch.Tensor, b: int, z_v: torch.Tensor, z_g: torch.Tensor,
                generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, TokenBundle]:
        adapted = self.adaptor(t, b)
        gated, _ = self.fusion(z_v.to(t.dtype), z_g.to(t.dtype), b, self.cfg.temperature, generator,
                               self.cfg.gumbel_noise)
        fused = adapted + gated
        bundle = select_causal_tokens(fused, b, self.scorer, adapted)
        side = grid_side(t.shape[0] // b)
        back = resize_tokens(self.back(bundle.recombine()), b, side)
        return t + back, bundle


class CausalBlocks(nn.Module):
    """All CTS blocks plus the optional CTG answer head for one backbone."""

    def __init__(self, backbone_cfg: BackboneConfig, cfg: BlockConfig = BlockConfig(),
                 attachments: Sequence[tuple[int, str]] = (), use_gaze: bool = True, text_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.L = backbone_cfg.L
        self.use_gaze = use_gaze
        self.attachments = [(int(l), str(kind)) for l, kind in attachments]
        self.cts = nn.ModuleDict()
        self.ctg_layer: Optional[int] = None
        for l, kind in self.attachments:
            if kind not in ("cts", "ctg"):
                raise ConfigError(f"unknown block kind {kind!r}")
            _, c_l = backbone_cfg.layer_shape(l)
            self.cts[str(l)] = CTSBlock(c_l, cfg)
            if kind == "ctg":
                if l != self.L:
                    raise ConfigError("the grounding block attaches only to the last layer")
                self.ctg_layer = l
        self.answer_head = AnswerHead(cfg.token_dim, text_dim, cfg.heads) if self.ctg_layer else None
        self.bundles: dict[int, TokenBundle] = {}

    @property
    def empty(self) -> bool:
        return len(self.cts) == 0

    def make_hooks(self, z_v: torch.Tensor, z_g: torch.Tensor, b: int,
                   generator: Optional[torch.Generator] = None) -> dict:
        if not self.use_gaze:
            z_g = torch.zeros_like(z_g)
        self.bundles = {}

        def hook(t: torch.Tensor, l: int) -> torch.Tensor:
            out, bundle = self.cts[str(l)](t, b, z_v, z_g, generator)
            self.bundles[l] = bundle
            return out

        return {int(l): hook for l in self.cts.keys()}

    def grounding_logits(self, z_q, q_mask, answers, a_mask, generator=None):
        """(causal, background, intervened background) logits from the last-layer bundle."""
        if self.ctg_layer is None:
            raise ConfigError("no grounding block attached")
        bundle = self.bundles[self.ctg_layer]
        b = bundle.b
        c = bundle.causal.shape[-1]
        bg_do, _ = token_intervention(bundle.background, self.cfg.intervention_fraction, generator)
        head = self.answer_head
        causal = head(bundle.causal.reshape(b, -1, c), z_q, answers, q_mask, a_mask)
        bg = head(bundle.background.reshape(b, -1, c), z_q, answers, q_mask, a_mask)
        bg_i = head(bg_do.reshape(b, -1, c), z_q, answers, q_mask, a_mask)
        return causal, bg, bg_i
