"""Synthetic egocentric accident clips, clip directories and dataset manifests.

Each scenario is an ego-forward road scene with one causal entity that
converges onto the ego zone at the collision frame. Background, entity class,
trajectory and gaze are drawn from independent seeded streams, so the same
seed rendered with another entity class differs only inside the two entity
tubes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .entities import ENTITY_CLASSES, ENTITY_COLORS
from .errors import ConfigError, DanglingPath, DataError, MalformedRecord, ManifestNotFound
from .gaze import FixationLog, accumulate_fixations, render_sequence, save_gaze_maps, load_gaze_maps, write_fixation_log

# stream ids for np.random.SeedSequence([seed, stream])
_BACKGROUND, _CLASS, _TRAJECTORY, _GAZE, _TEXT = range(5)

BEHAVIOURS = {
    "pedestrian": "crosses the road in front of the ego vehicle",
    "cyclist": "rides across the lane without looking",
    "motorbike": "cuts into the ego lane from the side",
    "car": "changes lanes and merges into the ego lane",
    "truck": "drives head on toward the ego vehicle",
}

REASON_TEMPLATES = (
    "a {cls} {beh}",
    "the {cls} suddenly {beh}",
    "an inattentive {cls} {beh}",
    "at the junction a {cls} {beh}",
    "without warning the {cls} {beh}",
)

AVOIDANCE = (
    "slow down and yield to the {cls}",
    "brake early and keep distance from the {cls}",
    "steer away from the {cls} and slow down",
    "watch the {cls} and brake in time",
    "keep a safe distance and yield to the {cls}",
)

QUESTION = "what is the reason for this accident"

# normalised (x, y) centre start/end and (w, h) start/end; x start mirrored by side
PROFILES = {
    "pedestrian": dict(start=(0.08, 0.58), end=(0.5, 0.86), size0=(0.07, 0.14), size1=(0.12, 0.28), arc=False),
    "cyclist": dict(start=(0.15, 0.48), end=(0.5, 0.86), size0=(0.08, 0.10), size1=(0.16, 0.22), arc=False),
    "motorbike": dict(start=(0.30, 0.45), end=(0.5, 0.86), size0=(0.06, 0.08), size1=(0.14, 0.20), arc=True),
    "car": dict(start=(0.32, 0.44), end=(0.5, 0.84), size0=(0.14, 0.09), size1=(0.40, 0.24), arc=True),
    "truck": dict(start=(0.46, 0.40), end=(0.5, 0.80), size0=(0.14, 0.12), size1=(0.52, 0.38), arc=False),
}


@dataclass(frozen=True)
class ScenarioConfig:
    frames: int = 16
    resolution: int = 32
    class_probs: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    collision_min: Optional[int] = None  # default frames // 2
    collision_max: Optional[int] = None  # default frames - 2
    gaze_jitter: float = 0.03  # fraction of width, per fixation sample
    gaze_kernel: int = 8
    gaze_subjects: int = 2
    fps: float = 30.0
    gaze_hz: float = 250.0
    ego_zone: tuple = (0.3, 0.8, 0.7, 1.0)  # x0, y0, x1, y1 normalised

    def collision_range(self) -> tuple[int, int]:
        lo = self.collision_min if self.collision_min is not None else self.frames // 2
        hi = self.collision_max if self.collision_max is not None else self.frames - 2
        lo, hi = max(1, lo), min(self.frames - 1, hi)
        if lo > hi:
            raise ConfigError(f"empty collision frame range [{lo}, {hi}]")
        return lo, hi


@dataclass
class ArAItem:
    question: str
    answers: list  # five strings; answers[0] is correct
    correct_index: int = 1

    def __post_init__(self):
        if len(self.answers) != 5:
            raise ConfigError("an ArA item has exactly five answers")
        if self.correct_index != 1:
            raise ConfigError("the correct answer is R1 by construction")


@dataclass
class ScenarioMeta:
    entity_class: str
    seed: int
    collision_frame: int
    side: int  # -1 enters from the left, +1 from the right
    reason_template: int


@dataclass
class ClipRecord:
    frames: np.ndarray  # [F, 3, H, W] float32 in [-1, 1]
    gaze: np.ndarray  # [F, H, W] float32 in [0, 1]
    prompt_f: str
    prompt_r: str
    ara: ArAItem
    entity_boxes: list  # per frame (x0, y0, x1, y1), pixel, half-open
    meta: ScenarioMeta
    reversed: bool = False
    fixations: Optional[FixationLog] = None

    @property
    def prompt(self) -> str:
        """Prompt that conditions this clip's time order."""
        return self.prompt_r if self.reversed else self.prompt_f

    @property
    def collision_frame(self) -> int:
        c = self.meta.collision_frame
        return len(self.frames) - 1 - c if self.reversed else c


# ---- generation ----------------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def sample_entity_class(seed: int, cfg: ScenarioConfig = ScenarioConfig()) -> str:
    p = np.asarray(cfg.class_probs, dtype=np.float64)
    if p.shape != (len(ENTITY_CLASSES),) or (p < 0).any() or p.sum() <= 0:
        raise ConfigError("class_probs needs one nonnegative weight per entity class")
    return ENTITY_CLASSES[int(_rng(seed, _CLASS).choice(len(p), p=p / p.sum()))]


def render_background(seed: int, cfg: ScenarioConfig) -> np.ndarray:
    """Ego-forward road scene ``[F, 3, H, W]`` in [0, 1], a function of the seed only."""
    rng = _rng(seed, _BACKGROUND)
    F_, R = cfg.frames, cfg.resolution
    horizon = int(round(R * rng.uniform(0.30, 0.40)))
    sky = np.array([0.45, 0.60, 0.80]) + rng.uniform(-0.08, 0.08, 3)
    ground = np.array([0.35, 0.30, 0.22]) + rng.uniform(-0.04, 0.04, 3)
    road = rng.uniform(0.38, 0.50)
    road_half_bottom = rng.uniform(0.40, 0.48) * R
    dash_period = int(rng.integers(5, 8))
    speed = rng.uniform(0.5, 1.2)
    pole_x = rng.uniform(0.05, 0.2)
    pole_phase = rng.uniform(0, 1)

    ys, xs = np.mgrid[0:R, 0:R].astype(np.float64)
    depth = np.clip((ys - horizon) / max(R - horizon, 1), 0, 1)
    on_road = (ys >= horizon) & (np.abs(xs + 0.5 - R / 2) <= 0.5 + depth * road_half_bottom)

    out = np.empty((F_, 3, R, R))
    for f in range(F_):
        img = np.where(ys[None] < horizon, sky[:, None, None], ground[:, None, None]).copy()
        img[:, on_road] = road
        # centre dashes move toward the viewer with ego motion
        phase = (ys - horizon - speed * f) % dash_period
        dash = on_road & (np.abs(xs + 0.5 - R / 2) < 0.5 + 0.6 * depth) & (phase < dash_period / 2) & (depth > 0.1)
        img[:, dash] = 0.9
        # roadside poles drift outward as the ego vehicle advances
        u = (pole_phase + 0.04 * speed * f) % 1.0
        py = horizon + u * (R - horizon)
        ph = 2 + 6 * u
        for side in (-1, 1):
            px = R / 2 + side * (0.5 + u * (0.5 - pole_x)) * R * 0.95
            c = int(np.clip(round(px), 0, R - 1))
            r0, r1 = int(max(0, py - ph)), int(min(R, py + 1))
            img[:, r0:r1, c] = 0.15
        out[f] = img
    return out


def entity_boxes(entity_class: str, collision_frame: int, side: int, jitter: np.ndarray, cfg: ScenarioConfig):
    """Per-frame pixel boxes following the class motion profile; static after the collision."""
    prof = PROFILES[entity_class]
    R = cfg.resolution
    sx, sy = prof["start"]
    if side > 0:
        sx = 1.0 - sx
    sx += jitter[0]
    sy += jitter[1]
    ex, ey = prof["end"]
    boxes = []
    for f in range(cfg.frames):
        u = min(f / collision_frame, 1.0)
        if prof["arc"]:
            ux = (1 - math.cos(math.pi * u)) / 2
        else:
            ux = u
        uy = u**1.5
        cx = sx + (ex - sx) * ux
        cy = sy + (ey - sy) * uy
        w = prof["size0"][0] + (prof["size1"][0] - prof["size0"][0]) * u
        h = prof["size0"][1] + (prof["size1"][1] - prof["size0"][1]) * u
        x0 = int(np.clip(round((cx - w / 2) * R), 0, R - 1))
        x1 = int(np.clip(round((cx + w / 2) * R), x0 + 1, R))
        y0 = int(np.clip(round((cy - h / 2) * R), 0, R - 1))
        y1 = int(np.clip(round((cy + h / 2) * R), y0 + 1, R))
        boxes.append((x0, y0, x1, y1))
    return boxes


def synth_fixations(boxes, seed: int, cfg: ScenarioConfig) -> FixationLog:
    """Fixation samples at ``gaze_hz`` around the entity centre, one stream per subject."""
    rng = _rng(seed, _GAZE)
    R = cfg.resolution
    duration_ms = cfg.frames * 1000.0 / cfg.fps
    step = 1000.0 / cfg.gaze_hz
    ts, xs, ys, subs = [], [], [], []
    for s in range(cfg.gaze_subjects):
        bias = rng.normal(0, cfg.gaze_jitter * R, 2)
        t = 0.0
        while t < duration_ms:
            ti = int(math.floor(t))
            f = min(int(ti * cfg.fps // 1000), cfg.frames - 1)
            x0, y0, x1, y1 = boxes[f]
            cx = (x0 + x1 - 1) / 2 + bias[0] + rng.normal(0, cfg.gaze_jitter * R)
            cy = (y0 + y1 - 1) / 2 + bias[1] + rng.normal(0, cfg.gaze_jitter * R)
            ts.append(ti)
            xs.append(float(np.clip(round(cx), 0, R - 1)))
            ys.append(float(np.clip(round(cy), 0, R - 1)))
            subs.append(f"s{s}")
            t += step
    return FixationLog(ts, xs, ys, subs, R, R)


def _quantise(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255) / 255


def generate_scenario(seed: int, cfg: ScenarioConfig = ScenarioConfig(),
                      entity_class: Optional[str] = None) -> ClipRecord:
    """Deterministic clip for ``seed``; ``entity_class`` overrides the sampled class."""
    cls = entity_class or sample_entity_class(seed, cfg)
    if cls not in ENTITY_CLASSES:
        raise ConfigError(f"unknown entity class {cls!r}")
    lo, hi = cfg.collision_range()
    traj = _rng(seed, _TRAJECTORY)
    collision = int(traj.integers(lo, hi + 1))
    side = int(traj.choice([-1, 1]))
    jitter = traj.uniform(-0.03, 0.03, 2)
    boxes = entity_boxes(cls, collision, side, jitter, cfg)

    frames = render_background(seed, cfg)
    color = np.asarray(ENTITY_COLORS[cls])
    for f, (x0, y0, x1, y1) in enumerate(boxes):
        frames[f, :, y0:y1, x0:x1] = color[:, None, None]
    frames = (_quantise(frames) * 2 - 1).astype(np.float32)

    fix = synth_fixations(boxes, seed, cfg)
    acc = accumulate_fixations(fix, cfg.fps, cfg.frames)
    gaze = _quantise(render_sequence(acc, cfg.resolution, cfg.resolution, cfg.gaze_kernel)).astype(np.float32)

    text = _rng(seed, _TEXT)
    t_idx = int(text.integers(len(REASON_TEMPLATES)))
    reason = REASON_TEMPLATES[t_idx].format(cls=cls, beh=BEHAVIOURS[cls])
    prompt_f = f"{reason} and the ego vehicle collides with the {cls}"
    prompt_r = "the ego vehicle should " + AVOIDANCE[int(text.integers(len(AVOIDANCE)))].format(cls=cls)
    others = [c for c in ENTITY_CLASSES if c != cls]
    text.shuffle(others)
    answers = [reason] + [REASON_TEMPLATES[t_idx].format(cls=o, beh=BEHAVIOURS[o]) for o in others]
    meta = ScenarioMeta(cls, int(seed), collision, side, t_idx)
    return ClipRecord(frames, gaze, prompt_f, prompt_r, ArAItem(QUESTION, answers), boxes, meta, fixations=fix)


def ego_box(cfg: ScenarioConfig) -> tuple[int, int, int, int]:
    R = cfg.resolution
    x0, y0, x1, y1 = cfg.ego_zone
    return (int(x0 * R), int(y0 * R), int(math.ceil(x1 * R)), int(math.ceil(y1 * R)))


def reverse_clip(rec: ClipRecord) -> ClipRecord:
    """Backward time order: frames, gaze and boxes reversed together; conditioning switches prompt."""
    return replace(
        rec,
        frames=rec.frames[::-1].copy(),
        gaze=rec.gaze[::-1].copy(),
        entity_boxes=list(rec.entity_boxes[::-1]),
        reversed=not rec.reversed,
    )


def tube_mask(boxes: Sequence, frames: int, resolution: int, margin: int = 0) -> np.ndarray:
    """Boolean ``[F, H, W]`` mask covering each frame's box grown by ``margin`` pixels."""
    m = np.zeros((frames, resolution, resolution), dtype=bool)
    for f, (x0, y0, x1, y1) in enumerate(boxes):
        m[f, max(0, y0 - margin):min(resolution, y1 + margin), max(0, x0 - margin):min(resolution, x1 + margin)] = True
    return m


# ---- clip directories ------------------------------------------------------------

def save_clip(rec: ClipRecord, directory) -> Path:
    from PIL import Image

    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(rec.frames):
        arr = np.round((np.transpose(fr, (1, 2, 0)) + 1) / 2 * 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(d / "frames" / f"{i:05d}.png")
    save_gaze_maps(rec.gaze, d / "gaze")
    meta = {
        "prompt_f": rec.prompt_f,
        "prompt_r": rec.prompt_r,
        "question": rec.ara.question,
        "answers": list(rec.ara.answers),
        "correct_index": rec.ara.correct_index,
        "entity_boxes": [list(b) for b in rec.entity_boxes],
        "scenario": asdict(rec.meta),
        "reversed": rec.reversed,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if rec.fixations is not None:
        write_fixation_log(rec.fixations, d / "fixations.csv")
    return d


def load_clip(directory) -> ClipRecord:
    from PIL import Image

    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"missing meta.json in {d}") from exc
    files = sorted((d / "frames").glob("*.png"))
    if not files:
        raise DataError(f"no frames in {d / 'frames'}")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) for p in files])
    frames = (np.transpose(frames, (0, 3, 1, 2)) / 255.0 * 2 - 1).astype(np.float32)
    gaze = load_gaze_maps(d / "gaze")
    return ClipRecord(
        frames,
        gaze,
        meta["prompt_f"],
        meta["prompt_r"],
        ArAItem(meta["question"], meta["answers"], meta["correct_index"]),
        [tuple(b) for b in meta["entity_boxes"]],
        ScenarioMeta(**meta["scenario"]),
        reversed=meta.get("reversed", False),
    )


# ---- manifest ------------------------------------------------------------------------

MANIFEST_MAGIC = "#egocrash-manifest"
MANIFEST_COLUMNS = (
    "clip_dir", "gaze_dir", "split", "prompt_f", "prompt_r", "question",
    "answer_1", "answer_2", "answer_3", "answer_4", "answer_5", "correct_index",
)


@dataclass
class ManifestRecord:
    clip_dir: str
    gaze_dir: str
    split: str
    prompt_f: str
    prompt_r: str
    question: str
    answers: tuple
    correct_index: int = 1

    def fields(self) -> list[str]:
        return [self.clip_dir, self.gaze_dir, self.split, self.prompt_f, self.prompt_r, self.question,
                *self.answers, str(self.correct_index)]


def record_for(rec: ClipRecord, clip_dir: str, split: str) -> ManifestRecord:
    return ManifestRecord(clip_dir, f"{clip_dir}/gaze", split, rec.prompt_f, rec.prompt_r, rec.ara.question,
                          tuple(rec.ara.answers), rec.ara.correct_index)


def write_manifest(records: Sequence[ManifestRecord], path) -> Path:
    path = Path(path)
    lines = [f"{MANIFEST_MAGIC}\tversion=1\tcount={len(records)}", "\t".join(MANIFEST_COLUMNS)]
    for i, r in enumerate(records):
        fields = r.fields()
        if any(("\t" in x or "\n" in x) for x in fields):
            raise MalformedRecord(i, "fields may not contain tabs or newlines")
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path, check_paths: bool = True) -> list[ManifestRecord]:
    """Parse and validate a manifest; paths are relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFound(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2 or not lines[0].startswith(MANIFEST_MAGIC):
        raise MalformedRecord(-1, "missing manifest header")
    try:
        header = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        count = int(header["count"])
    except (KeyError, ValueError) as exc:
        raise MalformedRecord(-1, f"bad header line: {lines[0]!r}") from exc
    if tuple(lines[1].split("\t")) != MANIFEST_COLUMNS:
        raise MalformedRecord(-1, "unexpected column line")
    body = lines[2:]
    if len(body) != count:
        raise MalformedRecord(len(body), f"header declares {count} records, found {len(body)}")
    root = path.parent
    out = []
    for i, line in enumerate(body):
        f = line.split("\t")
        if len(f) != len(MANIFEST_COLUMNS):
            raise MalformedRecord(i, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(f)}")
        try:
            ci = int(f[11])
        except ValueError as exc:
            raise MalformedRecord(i, "correct_index is not an integer") from exc
        if ci != 1:
            raise MalformedRecord(i, "correct_index must be 1")
        rec = ManifestRecord(f[0], f[1], f[2], f[3], f[4], f[5], tuple(f[6:11]), ci)
        if check_paths:
            for p in (rec.clip_dir, rec.gaze_dir):
                if not (root / p).is_dir():
                    raise DanglingPath(i, p)
        out.append(rec)
    return out


def generate_dataset(n: int, seed: int, out_dir, cfg: ScenarioConfig = ScenarioConfig(),
                     test_fraction: float = 0.125) -> Path:
    """Write ``n`` clips plus ``manifest.tsv``; clip ``i`` uses seed ``seed * 100003 + i``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(test_fraction * n))
    records = []
    for i in range(n):
        rec = generate_scenario(seed * 100003 + i, cfg)
        rel = f"clips/{i:05d}"
        save_clip(rec, out / rel)
        records.append(record_for(rec, rel, "test" if i >= n - n_test else "train"))
    return write_manifest(records, out / "manifest.tsv")
