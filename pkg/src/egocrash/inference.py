"""Text-to-video generation and partial-noising video-to-video editing.

Only the backbone is used here. CTS/CTG blocks, gaze maps and ArA items are
training-time inputs and are never read.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import Backbone, ConditioningBundle
from .diffusion import NoiseSchedule, ddim_timesteps, forward_noise, sample_chain
from .encoders import ToyClip
from .errors import ConfigError, ContractViolation

Predictor = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class InferenceRequest:
    mode: str
    prompt: str
    source: Optional[np.ndarray] = None  # [F, 3, H, W] in [-1, 1]
    ddim_steps: int = 50
    eta: float = 0.0
    strength: float = 0.6
    seed: int = 0

    def validate(self) -> "InferenceRequest":
        if self.mode not in ("t2v", "v2v"):
            raise ConfigError(f"mode must be t2v or v2v, got {self.mode!r}")
        if self.mode == "v2v" and self.source is None:
            raise ContractViolation("v2v needs a source clip")
        if self.mode == "t2v" and self.source is not None:
            raise ContractViolation("t2v does not take a source clip")
        if self.mode == "v2v" and not 0.0 <= self.strength <= 1.0:
            raise ConfigError("edit strength must lie in [0, 1]")
        if self.ddim_steps < 1:
            raise ConfigError("ddim_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        return self

    def describe(self) -> dict:
        d = asdict(self)
        d["source"] = None if self.source is None else list(np.shape(self.source))
        return d


def model_predictor(model: Backbone, encoder: ToyClip, prompt: str) -> Predictor:
    tokens, mask = encoder.encode_text(prompt, model.cfg.max_prompt_len)
    cond = ConditioningBundle(tokens[None], mask[None])

    def predict(z: torch.Tensor, k: int) -> torch.Tensor:
        with torch.no_grad():
            return model.predict_noise(z[None], torch.tensor([k]), cond)[0]

    return predict


def t2v_generate(req: InferenceRequest, predictor: Predictor, sched: NoiseSchedule, shape) -> torch.Tensor:
    """DDIM chain from seeded pure noise over ``ddim_steps`` evenly spaced steps."""
    req.validate()
    gen = torch.Generator().manual_seed(req.seed)
    z = torch.randn(tuple(shape), generator=gen)
    steps = ddim_timesteps(sched.K, req.ddim_steps)
    return sample_chain(z, steps, predictor, sched, req.eta, gen)


def edit_step(strength: float, K: int) -> int:
    return int(round(strength * K))


def v2v_edit(req: InferenceRequest, predictor: Predictor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise the source to ``round(s*K)`` then denoise under the prompt.

    Full strength starts from the seeded noise itself, which makes it the
    same chain as :func:`t2v_generate` with that seed.
    """
    req.validate()
    src = torch.as_tensor(np.asarray(req.source), dtype=torch.float32)
    k_edit = edit_step(req.strength, sched.K)
    if k_edit == 0:
        return src.clone()
    gen = torch.Generator().manual_seed(req.seed)
    e = torch.randn(src.shape, generator=gen)
    z = e if k_edit == sched.K else forward_noise(src, e, k_edit, sched)
    n = max(1, int(round(req.ddim_steps * k_edit / sched.K)))
    steps = ddim_timesteps(k_edit, n)
    return sample_chain(z, steps, predictor, sched, req.eta, gen)


def run_request(req: InferenceRequest, model: Backbone, encoder: ToyClip, sched: NoiseSchedule) -> torch.Tensor:
    """Run ``req`` through the backbone alone; the sample is clamped to the pixel range [-1, 1]."""
    model.eval()
    pred = model_predictor(model, encoder, req.prompt)
    cfg = model.cfg
    with torch.no_grad():
        if req.mode == "t2v":
            out = t2v_generate(req, pred, sched, (cfg.frames, cfg.in_channels, cfg.resolution, cfg.resolution))
        else:
            out = v2v_edit(req, pred, sched)
    return out.clamp(-1.0, 1.0)


# ---- export -----------------------------------------------------------------------

def to_uint8(clip) -> np.ndarray:
    """``[F, 3, H, W]`` in [-1, 1] -> ``[F, H, W, 3]`` uint8."""
    arr = np.asarray(clip.detach().cpu() if isinstance(clip, torch.Tensor) else clip, dtype=np.float64)
    return np.round((np.clip(arr, -1, 1) + 1) / 2 * 255).astype(np.uint8).transpose(0, 2, 3, 1)


def grid_image(clip, cols: int = 8, pad: int = 1) -> np.ndarray:
    frames = to_uint8(clip)
    f, h, w, c = frames.shape
    rows = -(-f // cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i, fr in enumerate(frames):
        r, q = divmod(i, cols)
        out[pad + r * (h + pad): pad + r * (h + pad) + h, pad + q * (w + pad): pad + q * (w + pad) + w] = fr
    return out


def save_clip_frames(clip, directory) -> list[Path]:
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fr in enumerate(to_uint8(clip)):
        p = d / f"{i:05d}.png"
        Image.fromarray(fr, mode="RGB").save(p)
        paths.append(p)
    return paths


def load_clip_frames(directory) -> np.ndarray:
    from PIL import Image

    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise ContractViolation(f"no frames in {directory}")
    arr = np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) for p in files])
    return (arr.transpose(0, 3, 1, 2) / 255.0 * 2 - 1).astype(np.float32)


def save_grid(clip, path, cols: int = 8) -> Path:
    from PIL import Image

    Image.fromarray(grid_image(clip, cols)).save(path)
    return Path(path)
