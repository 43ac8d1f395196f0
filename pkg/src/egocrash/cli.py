"""``egocrash`` command line: gen-data, train, infer, eval.

Every command writes ``resolved_config.json`` into its output directory
before doing any heavy work. Exit codes: 0 ok, 2 usage, 3 config, 4 stage
chain, 5 numeric, 6 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, default_out_root, toy_config
from .diffusion import NoiseSchedule
from .encoders import ToyClip
from .errors import ConfigError, ContractViolation, DataError, EgocrashError
from .metrics import (ColorDetector, MetricReport, afd, clip_score, frechet_distance, gazed_region, temp_c)

log = logging.getLogger("egocrash")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CHAIN, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5, 6


class UsageError(EgocrashError):
    exit_code = EXIT_USAGE


# ---- config resolution --------------------------------------------------------------

def base_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else (
        toy_config() if args.profile == "toy" else RunConfig())
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = cfg.set_path(key, value)
    return cfg


def write_resolved(out: Path, payload: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else default_out_root() / default_name


# ---- gen-data -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .scenario import generate_dataset

    cfg = base_config(args)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    seed = cfg.seed if args.seed is None else args.seed
    out = _out_dir(args, f"data-seed{seed}")
    write_resolved(out, {"command": "gen-data", "n": args.n, "seed": seed,
                         "test_fraction": args.test_fraction, "scenario": cfg.to_dict()["scenario"]})
    path = generate_dataset(args.n, seed, out, cfg.scenario, args.test_fraction)
    print(path)
    return EXIT_OK


# ---- train -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import run_stage

    cfg = base_config(args).override(
        stage=args.stage, seed=args.seed, hooks=args.hooks, manifest=args.manifest, ckpt_in=args.ckpt,
        steps=args.steps, lr=args.lr, batch=args.batch, ckpt_every=args.ckpt_every,
    )
    out = _out_dir(args, f"stage{cfg.stage}-{cfg.hooks}-seed{cfg.seed}")
    cfg = cfg.override(out=str(out))
    cfg.validate()
    write_resolved(out, {"command": "train", **cfg.to_dict()})

    def progress(step, res):
        if args.log_every and step % args.log_every == 0:
            log.info("stage %d step %d loss %.6f", cfg.stage, step, float(res.loss.detach()))

    result = run_stage(cfg, progress=progress)
    print(result.checkpoint)
    return EXIT_OK


# ---- infer -----------------------------------------------------------------------------

def _load_frames(path) -> np.ndarray:
    from .inference import load_clip_frames

    p = Path(path)
    if not p.exists():
        raise DataError(f"source not found: {p}")
    return load_clip_frames(p / "frames" if (p / "frames").is_dir() else p)


def _model_for(args, cfg: RunConfig):
    from .training import build_model, load_backbone

    if args.ckpt:
        return load_backbone(args.ckpt)
    return build_model(cfg), cfg


def cmd_infer(args) -> int:
    from .inference import InferenceRequest, run_request, save_clip_frames, save_grid

    if args.mode == "v2v" and not args.source:
        raise UsageError("--mode v2v needs --source")
    if args.mode == "t2v" and args.source:
        raise UsageError("--mode t2v does not take --source")
    cfg = base_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    source = _load_frames(args.source) if args.source else None
    req = InferenceRequest(args.mode, args.prompt, source, args.ddim_steps, args.eta, args.strength, seed)
    try:
        req.validate()
    except ContractViolation as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args, f"infer-{args.mode}-seed{seed}")
    # the checkpoint's own config describes the model it holds
    model, model_cfg = _model_for(args, cfg)
    resolved = {"command": "infer", "request": req.describe(), "ckpt": args.ckpt, "source": args.source,
                "model": model_cfg.to_dict()["model"], "encoder": model_cfg.to_dict()["encoder"],
                "schedule": model_cfg.to_dict()["schedule"]}
    write_resolved(out, resolved)

    encoder = ToyClip(model_cfg.encoder)
    sched = NoiseSchedule.from_config(model_cfg.schedule)
    clip = run_request(req, model, encoder, sched)
    save_clip_frames(clip, out / "frames")
    save_grid(clip, out / "grid.png")

    rep = MetricReport(settings={"mode": req.mode, "seed": seed, "ddim_steps": req.ddim_steps, "eta": req.eta})
    rep.values["clip_s"] = clip_score(clip, req.prompt, encoder)
    rep.values["temp_c"] = temp_c(clip, encoder)
    if source is not None:
        rep.settings["strength"] = req.strength
        rep.values["source_clip_s"] = clip_score(source, req.prompt, encoder)
        rep.values["mean_abs_change"] = float(np.abs(clip.numpy().astype(np.float64) - source).mean())
    (out / "metrics.txt").write_text(rep.to_text(), encoding="utf-8")
    print(out)
    return EXIT_OK


# ---- eval ------------------------------------------------------------------------------

def clip_dirs(root) -> list[Path]:
    """A clip is any directory with a ``frames/`` folder; ``root`` may be one clip or hold many."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    if (root / "frames").is_dir():
        return [root]
    found = sorted(p for p in root.rglob("frames") if p.is_dir())
    return [p.parent for p in found]


def _frames_of(d: Path) -> np.ndarray:
    from .inference import load_clip_frames

    return load_clip_frames(d / "frames")


def _box_list(raw) -> list:
    return [None if b is None else tuple(int(v) for v in b) for b in raw]


def cmd_eval(args) -> int:
    cfg = base_config(args)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"clip_s", "temp_c", "frechet", "afd"}
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(sorted(unknown))}")
    if not args.gen:
        raise UsageError("eval needs --gen")
    out = Path(args.out) if args.out else None
    if out is not None:
        write_resolved(out, {"command": "eval", "metrics": wanted, "gen": args.gen, "real": args.real,
                             "prompt": args.prompt, "entity": args.entity, "afd_fixture": args.afd_fixture,
                             "gaze": args.gaze, "threshold": args.threshold, "encoder": cfg.to_dict()["encoder"]})
    encoder = ToyClip(cfg.encoder)
    gen_dirs = clip_dirs(args.gen)
    if not gen_dirs:
        raise DataError(f"no clips under {args.gen}")
    gen = [_frames_of(d) for d in gen_dirs]
    rep = MetricReport(settings={"clips": len(gen)})
    rows = [{} for _ in gen]

    if "temp_c" in wanted:
        vals = [temp_c(c, encoder) for c in gen]
        for r, v in zip(rows, vals):
            r["temp_c"] = v
        rep.values["temp_c"] = float(np.mean(vals))
    if "clip_s" in wanted:
        if not args.prompt:
            raise UsageError("clip_s needs --prompt")
        vals = [clip_score(c, args.prompt, encoder) for c in gen]
        for r, v in zip(rows, vals):
            r["clip_s"] = v
        rep.values["clip_s"] = float(np.mean(vals))
    if "frechet" in wanted:
        if not args.real:
            raise UsageError("frechet needs --real")
        real = [_frames_of(d) for d in clip_dirs(args.real)]
        rep.values["frechet"] = frechet_distance(real, gen, encoder)
        rep.settings["real_clips"] = len(real)
    if "afd" in wanted:
        if args.afd_fixture:
            fx = json.loads(Path(args.afd_fixture).read_text(encoding="utf-8"))
            dets, regions = _box_list(fx["detections"]), _box_list(fx["gaze_regions"])
        else:
            if not (args.gaze and args.entity):
                raise UsageError("afd needs --afd-fixture, or --gaze with --entity")
            dets, regions = _afd_checks(gen, clip_dirs(args.gaze), args.entity, args.threshold)
        rep.values["afd"] = afd(dets, regions)
        rep.settings["afd_checks"] = len(dets)
    if any(rows[0]):
        rep.per_clip = rows
    text = rep.to_text()
    if out is not None:
        (out / "metrics.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _afd_checks(gen: Sequence[np.ndarray], gaze_dirs: Sequence[Path], entity: str, threshold: float):
    """One check per frame: detected entity box against the gazed region of the paired clip."""
    from .gaze import load_gaze_maps

    if len(gaze_dirs) != len(gen):
        raise UsageError(f"--gaze has {len(gaze_dirs)} clips but --gen has {len(gen)}")
    detector = ColorDetector()
    dets, regions = [], []
    for clip, gd in zip(gen, gaze_dirs):
        maps = load_gaze_maps(gd / "gaze")
        boxes = detector(clip, entity)
        for f in range(min(len(boxes), len(maps))):
            dets.append(boxes[f])
            regions.append(gazed_region(maps[f], threshold))
    return dets, regions


# ---- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egocrash", description="Synthetic ego-view crash video diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.add_argument("--profile", choices=("toy", "full"), default="toy",
                        help="defaults used when no --config is given")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default under ${'{'}EGOCRASH_OUT{'}'} or ./runs)")

    g = sub.add_parser("gen-data", help="write synthetic clips and a manifest")
    common(g)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--test-fraction", type=float, default=0.125)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--hooks", help="block preset (full, no_gaze, no_cts_ctg, downscale_off, upscale_off, ctg_only)")
    t.add_argument("--manifest")
    t.add_argument("--ckpt", help="input checkpoint: previous stage or a mid-stage resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="text-to-video or video-to-video generation")
    common(i)
    i.add_argument("--mode", choices=("t2v", "v2v"), required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--source", help="clip directory (or frames directory) for v2v")
    i.add_argument("--ckpt", help="trained checkpoint; a freshly initialised model is used when absent")
    i.add_argument("--strength", type=float, default=0.6)
    i.add_argument("--ddim-steps", type=int, default=50)
    i.add_argument("--eta", type=float, default=0.0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="compute metrics over clip directories")
    common(e)
    e.add_argument("--gen", help="generated clip directory or a directory of clips")
    e.add_argument("--real", help="reference clips (frechet)")
    e.add_argument("--metrics", default="temp_c", help="comma list of clip_s,temp_c,frechet,afd")
    e.add_argument("--prompt", help="prompt for clip_s")
    e.add_argument("--entity", help="entity word for afd detection")
    e.add_argument("--gaze", help="clips holding gaze maps, paired with --gen in sorted order (afd)")
    e.add_argument("--afd-fixture", help="JSON with 'detections' and 'gaze_regions' box lists")
    e.add_argument("--threshold", type=float, default=0.5, help="gazed-region threshold relative to frame max")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except EgocrashError as exc:
        print(f"egocrash: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"egocrash: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


if __name__ == "__main__":
    sys.exit(main())
