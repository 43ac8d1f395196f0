"""Noise schedule, forward noising, eta-parameterised DDIM sampling and the
noise-prediction losses.

Steps are 1-based: ``k = 1..K``. ``alpha_bar(0) == 1`` denotes clean data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import ContractViolation, DegenerateInputError, StepRangeError, ConfigError

StepLike = Union[int, torch.Tensor]


@dataclass(frozen=True)
class ScheduleConfig:
    K: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass
class NoiseSchedule:
    betas: torch.Tensor  # float64, shape [K]
    alphas: torch.Tensor = field(init=False)
    alpha_bars: torch.Tensor = field(init=False)

    def __post_init__(self):
        b = torch.as_tensor(self.betas, dtype=torch.float64)
        if b.ndim != 1 or len(b) == 0:
            raise ConfigError("betas must be a non-empty 1-D sequence")
        if not bool(((b > 0) & (b < 1)).all()):
            raise ConfigError("every beta must lie in (0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        self._ab_ext = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])

    @property
    def K(self) -> int:
        return len(self.betas)

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "NoiseSchedule":
        return cls(make_betas(cfg.K, cfg.beta_start, cfg.beta_end, cfg.kind))

    @classmethod
    def linear(cls, K: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(make_betas(K, beta_start, beta_end, "linear"))

    def alpha_bar(self, k: StepLike, allow_zero: bool = True) -> torch.Tensor:
        """``prod_{i<=k} alpha_i`` as float64; ``k`` may be an int or LongTensor."""
        kt = torch.as_tensor(k, dtype=torch.long)
        lo = 0 if allow_zero else 1
        if bool((kt < lo).any()) or bool((kt > self.K).any()):
            raise StepRangeError(f"step {k} outside [{lo}, {self.K}]")
        return self._ab_ext[kt]


def make_betas(K: int, beta_start: float, beta_end: float, kind: str = "linear") -> torch.Tensor:
    if K < 1:
        raise ConfigError("K must be >= 1")
    if kind == "linear":
        if K == 1:
            return torch.tensor([beta_end], dtype=torch.float64)
        return torch.linspace(beta_start, beta_end, K, dtype=torch.float64)
    if kind == "cosine":
        s = 0.008
        t = torch.arange(K + 1, dtype=torch.float64) / K
        f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        return (1 - ab[1:] / ab[:-1]).clamp(1e-8, 0.999)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def _per_item(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # coef is scalar or [B]; broadcast over the trailing dims of `like`
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - 1))


def forward_noise(z0: torch.Tensor, e: torch.Tensor, k: StepLike, sched: NoiseSchedule) -> torch.Tensor:
    """Noise clean latents to step ``k``: ``sqrt(ab_k) z0 + sqrt(1 - ab_k) e``."""
    if z0.shape != e.shape:
        raise ContractViolation(f"latent shape {tuple(z0.shape)} != noise shape {tuple(e.shape)}")
    ab = sched.alpha_bar(k, allow_zero=False)
    return _per_item(ab.sqrt(), z0) * z0 + _per_item((1 - ab).sqrt(), e) * e


def ddim_sigma(sched: NoiseSchedule, k: StepLike, k_prev: StepLike, eta: float) -> torch.Tensor:
    ab = sched.alpha_bar(k)
    ab_prev = sched.alpha_bar(k_prev)
    return eta * ((1 - ab_prev) / (1 - ab)).sqrt() * (1 - ab / ab_prev).sqrt()


def reverse_step(
    z_k: torch.Tensor,
    k: StepLike,
    e_hat: torch.Tensor,
    sched: NoiseSchedule,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
    k_prev: Optional[StepLike] = None,
) -> torch.Tensor:
    """One sampler move from step ``k`` to ``k_prev`` (default ``k - 1``).

    eta=0 is deterministic DDIM. eta=1 with consecutive steps gives the
    ancestral DDPM step whose mean is
    ``(z - beta_k / sqrt(1 - ab_k) * e_hat) / sqrt(alpha_k)``.
    """
    if e_hat.shape != z_k.shape:
        raise ContractViolation(f"prediction shape {tuple(e_hat.shape)} != latent shape {tuple(z_k.shape)}")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    kt = torch.as_tensor(k, dtype=torch.long)
    if bool((kt <= 0).any()) or bool((kt > sched.K).any()):
        raise StepRangeError(f"step {k} outside [1, {sched.K}]")
    kp = kt - 1 if k_prev is None else torch.as_tensor(k_prev, dtype=torch.long)
    if bool((kp < 0).any()) or bool((kp >= kt).any()):
        raise StepRangeError(f"previous step {k_prev} must lie in [0, k)")

    ab = sched.alpha_bar(kt)
    ab_prev = sched.alpha_bar(kp)
    sigma = ddim_sigma(sched, kt, kp, eta)
    x0 = (z_k - _per_item((1 - ab).sqrt(), z_k) * e_hat) / _per_item(ab.sqrt(), z_k)
    direction = (1 - ab_prev - sigma**2).clamp_min(0).sqrt()
    out = _per_item(ab_prev.sqrt(), z_k) * x0 + _per_item(direction, z_k) * e_hat
    if eta > 0:
        noise = torch.randn(z_k.shape, generator=generator, dtype=z_k.dtype)
        out = out + _per_item(sigma, z_k) * noise
    return out


def ddim_timesteps(k_start: int, n_steps: int) -> list[int]:
    """Descending, evenly spaced steps from ``k_start`` down to 1 (at most ``k_start`` of them)."""
    if k_start < 1:
        return []
    n = max(1, min(n_steps, k_start))
    ks = np.round(np.linspace(k_start, 1, n)).astype(int)
    out: list[int] = []
    for v in ks.tolist():
        if not out or v < out[-1]:
            out.append(v)
    return out


def sample_chain(
    z: torch.Tensor,
    steps: Sequence[int],
    predictor,
    sched: NoiseSchedule,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Run ``reverse_step`` over ``steps`` (descending) ending at step 0.

    ``predictor(z, k)`` returns the predicted noise for latent ``z`` at step ``k``.
    """
    for i, k in enumerate(steps):
        k_prev = steps[i + 1] if i + 1 < len(steps) else 0
        e_hat = predictor(z, k)
        z = reverse_step(z, k, e_hat, sched, eta=eta, generator=generator, k_prev=k_prev)
    return z


def loss_mse(e: torch.Tensor, e_hat: torch.Tensor) -> torch.Tensor:
    if e.shape != e_hat.shape:
        raise ContractViolation(f"shape mismatch {tuple(e.shape)} vs {tuple(e_hat.shape)}")
    return ((e - e_hat) ** 2).mean()


def loss_ns(e_f_hat: torch.Tensor, e_r_hat: torch.Tensor, batched: bool = True) -> torch.Tensor:
    """``1 - cos`` between predictions, per batch item (leading dim) then averaged.

    With ``batched=False`` the whole tensor is one vector.
    """
    if e_f_hat.shape != e_r_hat.shape:
        raise ContractViolation(f"shape mismatch {tuple(e_f_hat.shape)} vs {tuple(e_r_hat.shape)}")
    if batched and e_f_hat.ndim > 1:
        a = e_f_hat.reshape(e_f_hat.shape[0], -1)
        b = e_r_hat.reshape(e_r_hat.shape[0], -1)
    else:
        a = e_f_hat.reshape(1, -1)
        b = e_r_hat.reshape(1, -1)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("negative-similarity loss needs nonzero predictions")
    cos = (a * b).sum(dim=1) / (na * nb)
    return (1 - cos).mean()


def loss_st1(
    e_f: torch.Tensor,
    e_f_hat: torch.Tensor,
    e_r: torch.Tensor,
    e_r_hat: torch.Tensor,
    lam: float = 0.2,
) -> torch.Tensor:
    return loss_mse(e_f, e_f_hat) + loss_mse(e_r, e_r_hat) + lam * loss_ns(e_f_hat, e_r_hat)
