"""Evaluation metrics: prompt alignment score, temporal consistency, Fréchet
distance over clip embeddings, and the gaze-overlap affordance rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

from .entities import ENTITY_COLORS
from .errors import ContractViolation, DegenerateInputError, NumericError

Box = Optional[tuple]  # (x0, y0, x1, y1) half-open pixel box; None means empty


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine similarity of a zero-norm embedding")
    return (a * b).sum(-1) / (na * nb)


# ---- alignment and consistency --------------------------------------------------

def clip_score_from_embeddings(frame_embs, text_emb) -> float:
    """100 x mean over frames of cos(frame embedding, prompt embedding)."""
    f = _np(frame_embs)
    t = _np(text_emb)
    return float(100.0 * _cos_rows(f, np.broadcast_to(t, f.shape)).mean())


def clip_score(clip, prompt: str, embedder) -> float:
    with torch.no_grad():
        embs = embedder.embed_frames(torch.as_tensor(_np(clip), dtype=torch.float32))
        text = embedder.pooled_text(prompt)
    return clip_score_from_embeddings(embs, text)


def temp_c_from_embeddings(frame_embs) -> float:
    e = _np(frame_embs)
    if e.shape[0] < 2:
        raise ContractViolation("temporal consistency needs at least two frames")
    return float(_cos_rows(e[:-1], e[1:]).mean())


def temp_c(clip, embedder) -> float:
    with torch.no_grad():
        embs = embedder.embed_frames(torch.as_tensor(_np(clip), dtype=torch.float32))
    return temp_c_from_embeddings(embs)


# ---- Fréchet distance ---------------------------------------------------------------

def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^{1/2})`` via the symmetric form ``(A^{1/2} B A^{1/2})^{1/2}``."""
    mu_a, mu_b = np.atleast_1d(_np(mu_a)), np.atleast_1d(_np(mu_b))
    a, b = np.atleast_2d(_np(cov_a)), np.atleast_2d(_np(cov_b))
    if a.shape != b.shape or mu_a.shape != mu_b.shape or a.shape[0] != mu_a.shape[0]:
        raise ContractViolation("mean/covariance shapes disagree")
    ra = _sym_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(abs(w).max(), 1e-300)
    if w.min() < -1e-8 * scale:
        cond = float(np.linalg.cond(a)), float(np.linalg.cond(b))
        raise NumericError(f"covariance product not PSD (min eigenvalue {w.min():.3g}); condition numbers {cond}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(a) + np.trace(b) - 2 * tr_sqrt, 0.0))


def gaussian_fit(embs, reg: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    e = _np(embs)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ContractViolation("need at least two embeddings per set")
    cov = np.cov(e, rowvar=False).reshape(e.shape[1], e.shape[1])
    return e.mean(0), cov + reg * np.eye(e.shape[1])


def frechet_from_embeddings(emb_a, emb_b, reg: float = 1e-6) -> float:
    mu_a, ca = gaussian_fit(emb_a, reg)
    mu_b, cb = gaussian_fit(emb_b, reg)
    return frechet_from_stats(mu_a, ca, mu_b, cb)


def clip_embedding(clip, embedder) -> np.ndarray:
    """One vector per clip: frame embeddings averaged over time."""
    with torch.no_grad():
        return _np(embedder.embed_frames(torch.as_tensor(_np(clip), dtype=torch.float32))).mean(0)


def frechet_distance(set_a: Sequence, set_b: Sequence, embedder, reg: float = 1e-6) -> float:
    if len(set_a) < 2 or len(set_b) < 2:
        raise ContractViolation("each clip set needs at least two clips")
    ea = np.stack([clip_embedding(c, embedder) for c in set_a])
    eb = np.stack([clip_embedding(c, embedder) for c in set_b])
    return frechet_from_embeddings(ea, eb, reg)


# ---- boxes, gaze regions, affordance -------------------------------------------------

def box_area(b: Box) -> int:
    if b is None:
        return 0
    x0, y0, x1, y1 = b
    return max(0, x1 - x0) * max(0, y1 - y0)


def iou(a: Box, b: Box) -> float:
    if a is None or b is None:
        return 0.0
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def mask_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(1))
    cols = np.flatnonzero(mask.any(0))
    if len(rows) == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def gazed_region(gaze_map, threshold: float = 0.5) -> Box:
    """Tight box of pixels at or above ``threshold`` times the frame maximum."""
    m = _np(gaze_map)
    peak = m.max()
    if peak <= 0:
        return None
    return mask_box(m >= threshold * peak)


def afd(detections: Sequence[Box], gaze_regions: Sequence[Box]) -> float:
    """Percentage of checks whose detected box overlaps the gazed region (IOU > 0)."""
    if len(detections) != len(gaze_regions):
        raise ContractViolation("detections and gaze regions must pair up")
    if len(detections) == 0:
        raise ContractViolation("affordance needs at least one check")
    hits = sum(1 for d, g in zip(detections, gaze_regions) if iou(d, g) > 0)
    return 100.0 * hits / len(detections)


class Detector(Protocol):
    def __call__(self, frames, entity_word: str) -> list: ...


@dataclass
class ColorDetector:
    """Stand-in open-vocabulary detector: tight box of pixels matching the entity's render colour."""

    tol: float = 0.25
    min_pixels: int = 3

    def __call__(self, frames, entity_word: str) -> list:
        color = ENTITY_COLORS.get(entity_word)
        if color is None:
            return [None] * len(frames)
        rgb = (np.clip(_np(frames), -1, 1) + 1) / 2  # [F, 3, H, W]
        d = np.sqrt(((rgb - np.asarray(color)[:, None, None]) ** 2).sum(1))
        out = []
        for m in d <= self.tol:
            out.append(mask_box(m) if m.sum() >= self.min_pixels else None)
        return out


# ---- report ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)  # metric name -> float
    settings: dict = field(default_factory=dict)  # e.g. edit strength, counts
    per_clip: list = field(default_factory=list)  # dicts keyed by metric

    def to_text(self) -> str:
        """Stable ``key<TAB>value`` lines; floats printed with 6 decimals."""
        lines = ["# egocrash metric report v1"]
        for k in sorted(self.values):
            lines.append(f"{k}\t{_fmt(self.values[k])}")
        for k in sorted(self.settings):
            lines.append(f"setting.{k}\t{_fmt(self.settings[k])}")
        for i, row in enumerate(self.per_clip):
            for k in sorted(row):
                lines.append(f"clip.{i:04d}.{k}\t{_fmt(row[k])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            k, v = line.split("\t", 1)
            val = _parse(v)
            if k.startswith("setting."):
                rep.settings[k[8:]] = val
            elif k.startswith("clip."):
                _, i, name = k.split(".", 2)
                while len(rep.per_clip) <= int(i):
                    rep.per_clip.append({})
                rep.per_clip[int(i)][name] = val
            else:
                rep.values[k] = val
        return rep


def _fmt(v) -> str:
    if isinstance(v, bool) or isinstance(v, int) or isinstance(v, str):
        return str(v)
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    return f"{float(v):.6f}"


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v
