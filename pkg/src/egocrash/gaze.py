"""Fixation logs -> per-frame gaze maps -> gaze tokens."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.signal import convolve2d

from .errors import ConfigError, ContractViolation, DataError

log = logging.getLogger(__name__)

LOG_HEADER = ("timestamp_ms", "x", "y", "subject_id")


@dataclass
class FixationLog:
    timestamps: np.ndarray  # int64 ms
    xs: np.ndarray  # pixel column
    ys: np.ndarray  # pixel row
    subjects: list
    width: int
    height: int

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        self.subjects = [str(s) for s in self.subjects]
        n = len(self.timestamps)
        if not (len(self.xs) == len(self.ys) == len(self.subjects) == n):
            raise ContractViolation("fixation columns have different lengths")

    def __len__(self) -> int:
        return len(self.timestamps)

    def validate(self):
        if len(self) == 0:
            return
        if (self.xs < 0).any() or (self.xs >= self.width).any() or (self.ys < 0).any() or (self.ys >= self.height).any():
            raise ContractViolation("fixation outside the source frame")
        last: dict = {}
        for t, s in zip(self.timestamps.tolist(), self.subjects):
            if t < last.get(s, t):
                raise ContractViolation(f"timestamps decrease for subject {s}")
            last[s] = t


def read_fixation_log(path, width: int, height: int) -> FixationLog:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != LOG_HEADER:
                raise DataError(f"{path}: expected header {','.join(LOG_HEADER)}")
            rows = [r for r in reader if r]
    except FileNotFoundError as exc:
        raise DataError(f"fixation log not found: {path}") from exc
    ts = [int(r[0]) for r in rows]
    xs = [float(r[1]) for r in rows]
    ys = [float(r[2]) for r in rows]
    subs = [r[3] for r in rows]
    out = FixationLog(ts, xs, ys, subs, width, height)
    out.validate()
    return out


def write_fixation_log(fix: FixationLog, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for t, x, y, s in zip(fix.timestamps.tolist(), fix.xs.tolist(), fix.ys.tolist(), fix.subjects):
            w.writerow([t, repr(x) if x != int(x) else int(x), repr(y) if y != int(y) else int(y), s])


@dataclass
class Accumulation:
    frames: list  # per frame: list of (x, y)
    dropped: int = 0

    @property
    def counts(self) -> list[int]:
        return [len(p) for p in self.frames]


def accumulate_fixations(fix: FixationLog, fps: float = 30.0, frame_count: int = 16) -> Accumulation:
    """Bucket samples into video frames: ``frame = floor(t * fps / 1000)``, subjects pooled."""
    if fps <= 0:
        raise ConfigError("fps must be positive")
    frames: list[list[tuple[float, float]]] = [[] for _ in range(frame_count)]
    dropped = 0
    for t, x, y in zip(fix.timestamps.tolist(), fix.xs.tolist(), fix.ys.tolist()):
        # integer arithmetic keeps bucket edges exact for integer fps
        idx = (t * int(fps)) // 1000 if float(fps).is_integer() else math.floor(t * fps / 1000.0)
        if t < 0 or idx >= frame_count:
            dropped += 1
            continue
        frames[idx].append((x, y))
    if dropped:
        log.warning("dropped %d fixation samples outside the clip duration", dropped)
    return Accumulation(frames, dropped)


def gaussian_kernel(kernel_size: int = 50) -> np.ndarray:
    """Normalised 2-D Gaussian on an odd window; even sizes grow by one, sigma = size / 6."""
    if kernel_size < 1:
        raise ConfigError("kernel size must be positive")
    window = kernel_size if kernel_size % 2 else kernel_size + 1
    sigma = kernel_size / 6.0
    r = np.arange(window) - window // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def impulse_image(points: Iterable[tuple[float, float]], height: int, width: int) -> np.ndarray:
    img = np.zeros((height, width), dtype=np.float64)
    for x, y in points:
        c, r = int(round(x)), int(round(y))
        if not (0 <= r < height and 0 <= c < width):
            raise ContractViolation(f"fixation ({x}, {y}) outside {width}x{height}")
        img[r, c] += 1.0
    return img


def render_unnormalised(points, height: int, width: int, kernel_size: int = 50) -> np.ndarray:
    return convolve2d(impulse_image(points, height, width), gaussian_kernel(kernel_size), mode="same")


def render_gaze_map(points, height: int, width: int, kernel_size: int = 50) -> np.ndarray:
    """Gaussian-blurred fixation impulses, max-normalised to [0, 1]; no points -> zeros."""
    m = render_unnormalised(points, height, width, kernel_size)
    peak = m.max()
    return m / peak if peak > 0 else m


def render_sequence(acc: Accumulation, height: int, width: int, kernel_size: int = 50) -> np.ndarray:
    return np.stack([render_gaze_map(p, height, width, kernel_size) for p in acc.frames]).astype(np.float32)


def rescale_points(fix: FixationLog, height: int, width: int) -> FixationLog:
    """Map fixations from the source resolution to ``width x height``."""
    sx = width / fix.width
    sy = height / fix.height
    xs = np.clip(np.floor(fix.xs * sx), 0, width - 1)
    ys = np.clip(np.floor(fix.ys * sy), 0, height - 1)
    return FixationLog(fix.timestamps, xs, ys, fix.subjects, width, height)


def gaze_maps_from_log(fix: FixationLog, frame_count: int, height: int, width: int,
                       fps: float = 30.0, kernel_size: int = 50) -> np.ndarray:
    fix = rescale_points(fix, height, width)
    return render_sequence(accumulate_fixations(fix, fps, frame_count), height, width, kernel_size)


def tokenize_gaze(maps: torch.Tensor, patch_embed: nn.Conv2d) -> torch.Tensor:
    """Patch-embed gaze maps ``[B, F, H, W]`` -> ``[B*n_G, F, C]``.

    Only the patch/position embedding is applied; the map is replicated to the
    embedder's input channels.
    """
    if maps.ndim == 3:
        maps = maps.unsqueeze(0)
    b, f, h, w = maps.shape
    p = patch_embed.stride[0]
    if h % p or w % p:
        raise ConfigError(f"gaze map {h}x{w} not divisible by patch {p}")
    x = maps.reshape(b * f, 1, h, w).expand(-1, patch_embed.in_channels, -1, -1)
    x = patch_embed(x.to(patch_embed.weight.dtype))  # [B*F, C, h', w']
    x = x.flatten(2).transpose(1, 2)  # [B*F, n, C]
    n = x.shape[1]
    return x.reshape(b, f, n, -1).permute(0, 2, 1, 3).reshape(b * n, f, -1)


def save_gaze_maps(maps: np.ndarray, directory) -> None:
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps):
        Image.fromarray(np.round(np.clip(m, 0, 1) * 255).astype(np.uint8), mode="L").save(d / f"gaze_{i:05d}.png")


def load_gaze_maps(directory) -> np.ndarray:
    from PIL import Image

    files = sorted(Path(directory).glob("gaze_*.png"))
    if not files:
        raise DataError(f"no gaze maps in {directory}")
    return np.stack([np.asarray(Image.open(p), dtype=np.float32) / 255.0 for p in files])
