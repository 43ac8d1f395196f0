import math

import numpy as np
import pytest
import torch

import egocrash.causal_blocks as causal_blocks
from conftest import tiny_config, tiny_dataset
from egocrash.checkpoint import load_checkpoint, save_checkpoint
from egocrash.diffusion import NoiseSchedule, ScheduleConfig, ddim_timesteps
from egocrash.encoders import ToyClip
from egocrash.errors import ConfigError, ContractViolation
from egocrash.inference import (
    InferenceRequest, edit_step, grid_image, load_clip_frames, run_request, save_clip_frames, t2v_generate,
    to_uint8, v2v_edit,
)
from egocrash.training import load_backbone, run_stage

SHAPE = (4, 3, 8, 8)


def sched(K=100):
    return NoiseSchedule.from_config(ScheduleConfig(K=K))


def seeded_noise(seed, shape=SHAPE):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def test_request_mode_guards():
    with pytest.raises(ContractViolation):
        InferenceRequest("v2v", "p").validate()
    with pytest.raises(ContractViolation):
        InferenceRequest("t2v", "p", source=np.zeros(SHAPE)).validate()
    with pytest.raises(ConfigError):
        InferenceRequest("x2v", "p").validate()
    with pytest.raises(ConfigError):
        InferenceRequest("v2v", "p", source=np.zeros(SHAPE), strength=1.5).validate()
    with pytest.raises(ConfigError):
        InferenceRequest("t2v", "p", ddim_steps=0).validate()


def test_t2v_shape_and_determinism():
    s = sched()
    pred = lambda z, k: 0.1 * z + 0.01 * k
    a = t2v_generate(InferenceRequest("t2v", "p", ddim_steps=7, seed=3), pred, s, SHAPE)
    b = t2v_generate(InferenceRequest("t2v", "p", ddim_steps=7, seed=3), pred, s, SHAPE)
    assert a.shape == SHAPE and torch.equal(a, b)
    c = t2v_generate(InferenceRequest("t2v", "p", ddim_steps=7, seed=4), pred, s, SHAPE)
    assert not torch.equal(a, c)


def test_t2v_with_injected_noise_predictor_matches_scalar_chain():
    s = sched(1000)
    e = seeded_noise(5).double()
    req = InferenceRequest("t2v", "p", ddim_steps=10, seed=5)
    out = t2v_generate(req, lambda z, k: e.to(z.dtype), s, SHAPE).double()
    # every latent in the chain is a multiple of e: track the scalar
    a = 1.0
    steps = ddim_timesteps(1000, 10) + [0]
    for k, k_prev in zip(steps[:-1], steps[1:]):
        ab = float(s.alpha_bars[k - 1])
        ab_prev = 1.0 if k_prev == 0 else float(s.alpha_bars[k_prev - 1])
        x0 = (a - math.sqrt(1 - ab)) / math.sqrt(ab)
        a = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev)
    # the chain runs in float32 and the last step cancels two O(1) terms
    assert (out - a * e).abs().max() < 5e-5


def test_v2v_zero_strength_returns_source():
    src = np.random.default_rng(0).uniform(-1, 1, SHAPE).astype(np.float32)
    out = v2v_edit(InferenceRequest("v2v", "p", source=src, strength=0.0), lambda z, k: z, sched())
    assert np.array_equal(out.numpy(), src)
    assert edit_step(0.6, 1000) == 600 and edit_step(1.0, 1000) == 1000


def test_v2v_full_strength_is_t2v_with_the_same_seed():
    s = sched()
    src = np.random.default_rng(1).uniform(-1, 1, SHAPE).astype(np.float32)
    pred = lambda z, k: 0.2 * z
    a = v2v_edit(InferenceRequest("v2v", "p", source=src, strength=1.0, ddim_steps=9, seed=2), pred, s)
    b = t2v_generate(InferenceRequest("t2v", "p", ddim_steps=9, seed=2), pred, s, SHAPE)
    assert torch.equal(a, b)


def test_v2v_with_exact_noise_recovers_the_source():
    s = sched(1000)
    src = torch.from_numpy(np.random.default_rng(2).uniform(-1, 1, SHAPE).astype(np.float64))
    req = InferenceRequest("v2v", "p", source=src.numpy(), strength=0.5, ddim_steps=20, seed=6)
    e = seeded_noise(6).double()
    out = v2v_edit(req, lambda z, k: e, s)
    assert (out - src).abs().max() < 1e-4


def _trained_stage2(tmp_path):
    cfg = tiny_config(steps=2)
    data, enc = tiny_dataset(cfg)
    s0 = run_stage(cfg.override(out=str(tmp_path / "s0")), data, enc)
    s1 = run_stage(cfg.override(stage=1, ckpt_in=str(s0.checkpoint), out=str(tmp_path / "s1")), data, enc)
    s2 = run_stage(cfg.override(stage=2, ckpt_in=str(s1.checkpoint), out=str(tmp_path / "s2")), data, enc)
    return cfg, s2.checkpoint, data


def test_removing_blocks_from_checkpoint_leaves_inference_unchanged(tmp_path, monkeypatch):
    cfg, path, data = _trained_stage2(tmp_path)
    ck = load_checkpoint(path)
    assert ck.prefixed("blocks")
    stripped = ck.without("blocks")
    save_checkpoint(tmp_path / "stripped.npz", stripped.meta, stripped.arrays)

    # inference must never build CTS/CTG state or read gaze / ArA inputs
    def forbidden(*a, **k):
        raise AssertionError("causal blocks used at inference")

    monkeypatch.setattr(causal_blocks, "select_causal_tokens", forbidden)
    monkeypatch.setattr(causal_blocks.TokenBundle, "__init__", forbidden)

    enc = ToyClip(cfg.encoder)
    s = NoiseSchedule.from_config(cfg.schedule)
    src = data.records[0].frames
    outs = []
    for p in (path, tmp_path / "stripped.npz"):
        model, _ = load_backbone(p)
        t2v = run_request(InferenceRequest("t2v", "a red pedestrian", ddim_steps=5, seed=1), model, enc, s)
        v2v = run_request(InferenceRequest("v2v", "a yellow truck", source=src, ddim_steps=5, seed=1), model, enc, s)
        outs.append((t2v, v2v))
    assert torch.equal(outs[0][0], outs[1][0]) and torch.equal(outs[0][1], outs[1][1])
    assert outs[0][0].abs().max() <= 1.0


def test_frame_export_round_trip(tmp_path):
    clip = torch.linspace(-1, 1, 4 * 3 * 8 * 8).reshape(SHAPE)
    u8 = to_uint8(clip)
    assert u8.shape == (4, 8, 8, 3) and u8.dtype == np.uint8
    assert u8.min() == 0 and u8.max() == 255
    save_clip_frames(clip, tmp_path / "frames")
    back = load_clip_frames(tmp_path / "frames")
    assert np.abs(back - clip.numpy()).max() <= 1 / 255 + 1e-6
    g = grid_image(clip, cols=2, pad=1)
    assert g.shape == (2 * 9 + 1, 2 * 9 + 1, 3)
    assert np.array_equal(g[1:9, 10:18], u8[1])
