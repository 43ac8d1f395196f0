import math

import numpy as np
import pytest
import torch

from conftest import tiny_config, tiny_dataset
from egocrash.checkpoint import load_checkpoint, save_checkpoint
from egocrash.diffusion import NoiseSchedule, loss_mse, loss_ns
from egocrash.errors import ChainError, ConfigError, NumericError
from egocrash.training import (
    Batch, Trainer, batch_indices, build_blocks, build_model, run_stage, stage0_loss, stage1_loss, stage2_loss,
    step_generator,
)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


class OraclePredictor(torch.nn.Module):
    """Recovers the injected noise exactly from the clean clip it was built with."""

    def __init__(self, z0, sched):
        super().__init__()
        self.z0 = z0
        self.sched = sched

    def forward(self, z_k, k, cond=None, hooks=None):
        ab = torch.as_tensor(self.sched.alpha_bars[k.numpy() - 1], dtype=z_k.dtype).reshape(-1, 1, 1, 1, 1)
        return (z_k - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class PromptOnly(torch.nn.Module):
    """Prediction depends on the prompt alone."""

    def forward(self, z_k, k, cond=None, hooks=None):
        return cond.text_tokens.mean((1, 2)).reshape(-1, 1, 1, 1, 1).expand_as(z_k)


# ---- stage losses -------------------------------------------------------------------

def test_untrained_stage0_loss_is_finite_and_positive(tiny):
    cfg, data, enc = tiny
    res = stage0_loss(build_model(cfg), data.batch([0, 1]), NoiseSchedule.from_config(cfg.schedule), gen())
    assert torch.isfinite(res.loss) and res.loss > 0


def test_stage0_oracle_floor(tiny):
    cfg, data, _ = tiny
    batch = data.batch([0, 1]).to(torch.float64)
    sched = NoiseSchedule.from_config(cfg.schedule)
    res = stage0_loss(OraclePredictor(batch.frames, sched), batch, sched, gen())
    assert res.loss.item() < 1e-20


def test_stage1_without_contrast_is_two_stage0_losses(tiny):
    cfg, data, _ = tiny
    m = build_model(cfg)
    with torch.no_grad():
        m.out_conv.weight.normal_(0, 0.1, generator=gen(3))
    batch = data.batch([0, 1])
    sched = NoiseSchedule.from_config(cfg.schedule)
    res = stage1_loss(m, batch, sched, gen(4), lam=0.0)
    # replay the generator: k, e_f, e_r
    g = gen(4)
    k = torch.randint(1, sched.K + 1, (2,), generator=g)
    e_f = torch.randn(batch.frames.shape, generator=g)
    e_r = torch.randn(batch.frames.shape, generator=g)
    from egocrash.diffusion import forward_noise
    mse_f = loss_mse(e_f, m(forward_noise(batch.frames, e_f, k, sched), k, batch.prompt_f))
    rev = batch.frames.flip(1)
    mse_r = loss_mse(e_r, m(forward_noise(rev, e_r, k, sched), k, batch.prompt_r))
    assert torch.allclose(res.loss, mse_f + mse_r, atol=1e-7)


def test_stage1_identical_pathways_have_no_contrast(tiny):
    cfg, data, _ = tiny
    batch = data.batch([0, 1]).to(torch.float64)
    batch.prompt_r = batch.prompt_f
    res = stage1_loss(PromptOnly(), batch, NoiseSchedule.from_config(cfg.schedule), gen(), lam=0.2)
    assert abs(res.parts["ns"]) < 1e-12


def test_stage1_pathways_share_parameter_storage(tiny):
    cfg, data, _ = tiny
    m = build_model(cfg)
    with torch.no_grad():
        m.out_conv.weight.normal_(0, 0.1, generator=gen(5))
    seen = []
    handle = m.register_forward_pre_hook(lambda mod, args: seen.append([p.data_ptr() for p in mod.parameters()]))
    batch = data.batch([0, 1])
    sched = NoiseSchedule.from_config(cfg.schedule)
    res = stage1_loss(m, batch, sched, gen(6))
    handle.remove()
    assert len(seen) == 2 and seen[0] == seen[1]
    # the shared gradient is the sum of each pathway's contribution
    res.loss.backward()
    g_total = m.out_conv.weight.grad.clone()
    assert g_total.abs().sum() > 0
    # updating the storage is visible to both pathways
    with torch.no_grad():
        m.out_conv.bias.add_(1.0)
    again = stage1_loss(m, batch, sched, gen(6))
    assert again.parts["mse_f"] != res.parts["mse_f"] and again.parts["mse_r"] != res.parts["mse_r"]


def test_contrast_term_gradient_matches_finite_differences(tiny):
    cfg, data, _ = tiny
    m = build_model(cfg).double()
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=gen(7), dtype=p.dtype) * 0.05)
    batch = data.batch([0, 1]).to(torch.float64)
    sched = NoiseSchedule.from_config(cfg.schedule)

    def contrast():
        return stage1_loss(m, batch, sched, gen(8), lam=1.0).loss - stage1_loss(m, batch, sched, gen(8), lam=0.0).loss

    probe = m.layers[1].ta.attn.q.weight
    grad = torch.autograd.grad(contrast(), probe)[0]
    eps = 1e-6
    flat = probe.data.view(-1)
    for i in (0, 7, 33):
        old = flat[i].item()
        flat[i] = old + eps
        up = contrast().item()
        flat[i] = old - eps
        dn = contrast().item()
        flat[i] = old
        fd = (up - dn) / (2 * eps)
        an = grad.view(-1)[i].item()
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3


def _stage2_parts(cfg, data, enc, gamma, hooks="full", seed=9, dtype=torch.float32):
    m = build_model(cfg).to(dtype)
    blocks = build_blocks(cfg.override(hooks=hooks, stage=2)).to(dtype)
    batch = data.batch([0, 1]).to(dtype)
    return m, blocks, stage2_loss(m, blocks, enc, batch, NoiseSchedule.from_config(cfg.schedule), gen(seed), gamma)


def test_stage2_total_is_mse_plus_weighted_grounding(tiny):
    cfg, data, enc = tiny
    _, _, res = _stage2_parts(cfg, data, enc, 0.3, dtype=torch.float64)
    assert abs(res.loss.item() - (res.parts["mse_f"] + 0.3 * res.parts["ara"])) < 1e-8
    assert res.parts["ara"] > 0


def test_stage2_without_grounding_weight_leaves_the_head_idle(tiny):
    cfg, data, enc = tiny
    m, blocks, res = _stage2_parts(cfg, data, enc, 0.0)
    assert res.loss.item() == res.parts["mse_f"]
    res.loss.backward()
    for p in blocks.answer_head.parameters():
        assert p.grad is None or not p.grad.any()


def test_no_gaze_preset_runs(tiny):
    cfg, data, enc = tiny
    _, blocks, res = _stage2_parts(cfg, data, enc, 0.3, hooks="no_gaze")
    assert not blocks.use_gaze
    assert torch.isfinite(res.loss)


def test_stage2_requires_gaze_and_answers(tiny):
    cfg, data, enc = tiny
    batch = data.batch([0, 1])
    batch.gaze = None
    m = build_model(cfg)
    blocks = build_blocks(cfg.override(stage=2))
    with pytest.raises(ConfigError):
        stage2_loss(m, blocks, enc, batch, NoiseSchedule.from_config(cfg.schedule), gen())


# ---- trainer and run_stage ------------------------------------------------------------

def test_batch_order_is_a_seeded_permutation_per_epoch():
    idx = [i for s in range(4) for i in batch_indices(s, 2, 4, seed=3)]
    assert sorted(idx[:4]) == [0, 1, 2, 3] and sorted(idx[4:]) == [0, 1, 2, 3]
    assert idx == [i for s in range(4) for i in batch_indices(s, 2, 4, seed=3)]
    assert step_generator(1, 5).initial_seed() == step_generator(1, 5).initial_seed()


def test_log_has_one_line_per_step(tiny, tmp_path):
    cfg, data, enc = tiny
    res = run_stage(cfg.override(out=str(tmp_path), steps=5), data, enc)
    lines = res.log.read_text().splitlines()
    assert len(lines) == 5
    step, loss, *parts = lines[2].split("\t")
    assert step == "2" and float(loss) == res.losses[2]
    assert parts[0].startswith("mse_f=")


def test_resume_replays_the_uninterrupted_run(tiny, tmp_path):
    cfg, data, enc = tiny
    full = run_stage(cfg.override(out=str(tmp_path / "full"), steps=6), data, enc)
    part = run_stage(cfg.override(out=str(tmp_path / "part"), steps=6), data, enc, stop_after=3)
    assert load_checkpoint(part.checkpoint).meta["complete"] is False
    resumed = run_stage(cfg.override(out=str(tmp_path / "part"), steps=6, ckpt_in=str(part.checkpoint)), data, enc)
    assert resumed.losses == full.losses
    assert (tmp_path / "part" / "stage0_loss.tsv").read_text() == (tmp_path / "full" / "stage0_loss.tsv").read_text()
    a, b = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
    for k in a.arrays:
        assert np.array_equal(a.arrays[k], b.arrays[k]), k


def test_chain_guard(tiny, tmp_path):
    cfg, data, enc = tiny
    with pytest.raises(ChainError):
        run_stage(cfg.override(stage=1, out=str(tmp_path / "s1")), data, enc)
    s0 = run_stage(cfg.override(out=str(tmp_path / "s0"), steps=2), data, enc)
    with pytest.raises(ChainError):
        run_stage(cfg.override(stage=2, ckpt_in=str(s0.checkpoint), out=str(tmp_path / "s2")), data, enc)
    other = cfg.set_path("model.time_dim", 8).override(stage=1, ckpt_in=str(s0.checkpoint), out=str(tmp_path / "x"))
    with pytest.raises(ChainError):
        run_stage(other, data, enc)
    s1 = run_stage(cfg.override(stage=1, ckpt_in=str(s0.checkpoint), out=str(tmp_path / "s1"), steps=2), data, enc)
    s2 = run_stage(cfg.override(stage=2, ckpt_in=str(s1.checkpoint), out=str(tmp_path / "s2"), steps=2), data, enc)
    ck = load_checkpoint(s2.checkpoint)
    assert ck.stage == 2 and ck.prefixed("blocks")
    with pytest.raises(ChainError):
        run_stage(cfg.override(ckpt_in=str(tmp_path / "missing.npz"), out=str(tmp_path / "y")), data, enc)


def test_stage1_starts_from_stage0_weights(tiny, tmp_path):
    cfg, data, enc = tiny
    s0 = run_stage(cfg.override(out=str(tmp_path / "s0"), steps=3), data, enc)
    t = Trainer(cfg.override(stage=1), data, enc)
    load_checkpoint(s0.checkpoint).load_into(t.model, "backbone")
    w0 = load_checkpoint(s0.checkpoint).prefixed("backbone")["out_conv.weight"]
    assert np.array_equal(t.model.out_conv.weight.detach().numpy(), w0)
    assert np.abs(w0).sum() > 0


def test_stage2_only_updates_the_configured_set(tiny):
    cfg, data, enc = tiny
    s2 = cfg.override(stage=2)
    t = Trainer(s2, data, enc)
    with torch.no_grad():
        t.model.out_conv.weight.normal_(0, 0.1, generator=gen(11))
    before = {n: p.detach().clone() for n, p in t.model.named_parameters()}
    blocks_before = {n: p.detach().clone() for n, p in t.blocks.named_parameters()}
    for _ in range(10):
        t.train_step()
    for n, p in t.model.named_parameters():
        changed = not torch.equal(before[n], p.detach())
        assert changed == (".ta." in n), n
    moved = [n for n, p in t.blocks.named_parameters() if not torch.equal(blocks_before[n], p.detach())]
    assert any(n.startswith("answer_head") for n in moved)
    assert any(".scorer." in n for n in moved) and any(".back." in n for n in moved)


def test_train_all_override_updates_everything(tiny):
    cfg, data, enc = tiny
    t = Trainer(cfg.override(stage=2, trainable="train_all"), data, enc)
    assert len(t.params) == len(list(t.model.parameters())) + len(list(t.blocks.parameters()))


def test_non_finite_loss_aborts_with_diagnostics(tiny):
    cfg, data, enc = tiny
    t = Trainer(cfg, data, enc)
    with torch.no_grad():
        t.model.out_conv.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="step 0"):
        t.train_step()


def test_adam_reaches_the_bottom_of_a_quadratic_bowl():
    cfg = tiny_config()
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([x], lr=cfg.lr, betas=tuple(cfg.betas))
    for _ in range(8_000):
        opt.zero_grad()
        ((x - 0.75) ** 2).sum().backward()
        opt.step()
    assert abs(x.item() - 0.75) < 1e-4


def test_checkpoint_shape_validation(tmp_path):
    save_checkpoint(tmp_path / "c.npz", {"stage": 0}, {"backbone/w": np.zeros((2, 3))})
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.meta["shapes"] == {"backbone/w": [2, 3]}
    m = torch.nn.Linear(3, 3, bias=False)
    from egocrash.errors import ContractViolation

    with pytest.raises(ContractViolation):
        ck.load_into(m, "backbone")
