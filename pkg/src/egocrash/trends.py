"""Toy-scale training trend experiments: overfit smoke test and counterfactual AEdit.

The AEdit check trains stages 0, 1 and 2 on synthetic clips, then edits
held-out clips by swapping the entity word in their prompt. Because the
scenario generator renders the same seed with another entity class changing
only the two entity tubes, the union of both tubes is exactly where a faithful
edit should act; everything else is background.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, toy_config
from .diffusion import NoiseSchedule
from .encoders import ToyClip
from .entities import ENTITY_CLASSES
from .inference import InferenceRequest, run_request
from .metrics import clip_score
from .scenario import ClipRecord, generate_scenario, tube_mask
from .training import EncodedDataset, load_backbone, run_stage

log = logging.getLogger(__name__)


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} losses, got {len(v)}")
    return np.convolve(v, np.ones(window) / window, mode="valid")


def overfit_drop(losses, window: int = 100) -> float:
    """Relative fall of the windowed loss from its first to its last window."""
    ma = moving_average(losses, window)
    return float(1.0 - ma[-1] / ma[0])


@dataclass
class OverfitResult:
    drop: float
    first: float
    last: float
    steps: int
    seconds: float


def run_overfit(out, n_clips: int = 4, steps: int = 2000, seed: int = 0, cfg: Optional[RunConfig] = None) -> OverfitResult:
    cfg = (cfg or toy_config()).override(stage=0, steps=steps, seed=seed, ckpt_every=0, out=str(out))
    enc = ToyClip(cfg.encoder)
    data = EncodedDataset.from_records([generate_scenario(seed * 100003 + i, cfg.scenario) for i in range(n_clips)], enc)
    t0 = time.perf_counter()
    res = run_stage(cfg, data, enc)
    ma = moving_average(res.losses)
    return OverfitResult(overfit_drop(res.losses), float(ma[0]), float(ma[-1]), steps, time.perf_counter() - t0)


# ---- counterfactual AEdit ----------------------------------------------------------------

@dataclass
class AEditConfig:
    n_train: int = 64
    n_heldout: int = 8
    steps0: int = 2800
    steps1: int = 200
    steps2: int = 200
    lr2: float = 3e-4  # stage 2 moves slower so the backbone stays valid once the blocks are detached
    strength: float = 0.2
    ddim_steps: int = 25
    ratio_target: float = 2.0
    ablation: str = "no_cts_ctg"


def counterfactual_class(cls: str) -> str:
    """Deterministic swap target: the next class in the fixed class order."""
    i = ENTITY_CLASSES.index(cls)
    return ENTITY_CLASSES[(i + 1) % len(ENTITY_CLASSES)]


@dataclass
class EditOutcome:
    seed: int
    source_class: str
    target_class: str
    tube_change: float
    background_change: float
    clip_s: float

    @property
    def ratio(self) -> float:
        return self.tube_change / max(self.background_change, 1e-12)


def edit_outcome(model, encoder: ToyClip, sched: NoiseSchedule, rec: ClipRecord, cfg: RunConfig,
                 strength: float, ddim_steps: int, seed: int) -> EditOutcome:
    """Swap the entity word of ``rec`` and measure where the edit changed pixels."""
    target_cls = counterfactual_class(rec.meta.entity_class)
    target = generate_scenario(rec.meta.seed, cfg.scenario, entity_class=target_cls)
    req = InferenceRequest("v2v", target.prompt_f, source=rec.frames, ddim_steps=ddim_steps,
                           strength=strength, seed=seed)
    edited = run_request(req, model, encoder, sched).numpy().astype(np.float64)
    F_, R = len(rec.frames), cfg.scenario.resolution
    tubes = tube_mask(rec.entity_boxes, F_, R) | tube_mask(target.entity_boxes, F_, R)
    diff = np.abs(edited - rec.frames.astype(np.float64)).mean(axis=1)  # [F, H, W]
    return EditOutcome(
        seed=rec.meta.seed,
        source_class=rec.meta.entity_class,
        target_class=target_cls,
        tube_change=float(diff[tubes].mean()),
        background_change=float(diff[~tubes].mean()),
        clip_s=clip_score(edited, target.prompt_f, encoder),
    )


@dataclass
class AEditResult:
    seed: int
    full: list = field(default_factory=list)
    ablation: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def tube_change(self) -> float:
        return float(np.mean([o.tube_change for o in self.full]))

    @property
    def background_change(self) -> float:
        return float(np.mean([o.background_change for o in self.full]))

    @property
    def localization(self) -> float:
        return self.tube_change / max(self.background_change, 1e-12)

    @property
    def clip_s_full(self) -> float:
        return float(np.mean([o.clip_s for o in self.full]))

    @property
    def clip_s_ablation(self) -> float:
        return float(np.mean([o.clip_s for o in self.ablation]))

    def passed(self, ratio_target: float = 2.0) -> bool:
        return self.localization >= ratio_target and self.clip_s_full >= self.clip_s_ablation

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "localization": self.localization,
            "tube_change": self.tube_change,
            "background_change": self.background_change,
            "clip_s_full": self.clip_s_full,
            "clip_s_ablation": self.clip_s_ablation,
            "seconds": self.seconds,
            "edits_full": [asdict(o) for o in self.full],
            "edits_ablation": [asdict(o) for o in self.ablation],
        }


def run_aedit(out, seed: int = 0, exp: AEditConfig = AEditConfig(), cfg: Optional[RunConfig] = None) -> AEditResult:
    """Stages 0 and 1 once, stage 2 for the full preset and the ablation, then AEdit on held-out clips."""
    out = Path(out)
    t0 = time.perf_counter()
    cfg = (cfg or toy_config()).override(seed=seed, ckpt_every=0)
    enc = ToyClip(cfg.encoder)
    base = seed * 100003
    train = [generate_scenario(base + i, cfg.scenario) for i in range(exp.n_train)]
    held = [generate_scenario(base + exp.n_train + i, cfg.scenario) for i in range(exp.n_heldout)]
    data = EncodedDataset.from_records(train, enc)

    s0 = run_stage(cfg.override(stage=0, steps=exp.steps0, out=str(out / "stage0")), data, enc)
    log.info("seed %d stage 0 done, last loss %.4f", seed, s0.losses[-1])
    s1 = run_stage(cfg.override(stage=1, steps=exp.steps1, ckpt_in=str(s0.checkpoint), out=str(out / "stage1")),
                   data, enc)
    sched = NoiseSchedule.from_config(cfg.schedule)
    result = AEditResult(seed)
    for preset, bucket in (("full", result.full), (exp.ablation, result.ablation)):
        s2 = run_stage(cfg.override(stage=2, steps=exp.steps2, lr=exp.lr2, hooks=preset, ckpt_in=str(s1.checkpoint),
                                    out=str(out / f"stage2-{preset}")), data, enc)
        model, _ = load_backbone(s2.checkpoint)
        for j, rec in enumerate(held):
            bucket.append(edit_outcome(model, enc, sched, rec, cfg, exp.strength, exp.ddim_steps, seed * 1000 + j))
    result.seconds = time.perf_counter() - t0
    (out / "aedit.json").write_text(json.dumps(result.summary(), indent=1) + "\n", encoding="utf-8")
    return result


def majority(outcomes: list[bool], total: int) -> Optional[bool]:
    """Decided majority of ``total`` trials given the first outcomes, or None while still open."""
    need = total // 2 + 1
    if sum(outcomes) >= need:
        return True
    if len(outcomes) - sum(outcomes) >= need:
        return False
    return None
