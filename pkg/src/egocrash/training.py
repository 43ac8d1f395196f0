"""Progressive three-stage training.

Stage 0 trains forward-order noise prediction. Stage 1 adds the reversed-clip
pathway with the prevention prompt and a negative-similarity term between the
two predicted noises. Stage 2 attaches CTS/CTG blocks and adds the weighted
answer-grounding loss.

Randomness is drawn from a generator seeded by ``(seed, step)`` and the data
order is a per-epoch permutation of ``(seed, epoch)``, so resuming from a
mid-stage checkpoint replays the same losses as an uninterrupted run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, ConditioningBundle
from .causal_blocks import CausalBlocks, loss_ara, loss_st2, preset_attachments
from .checkpoint import Checkpoint, load_checkpoint, module_arrays, save_checkpoint
from .config import RunConfig
from .diffusion import NoiseSchedule, forward_noise, loss_mse, loss_ns
from .encoders import ToyClip
from .errors import ChainError, ConfigError, NumericError
from .gaze import tokenize_gaze
from .scenario import ClipRecord, load_clip, load_manifest

log = logging.getLogger(__name__)


# ---- data -----------------------------------------------------------------------

@dataclass
class EncodedDataset:
    """Clip tensors plus frozen-encoder text embeddings, indexable by clip."""

    frames: torch.Tensor  # [N, F, 3, H, W]
    gaze: torch.Tensor  # [N, F, H, W]
    prompt_f: torch.Tensor  # [N, L_P, D]
    prompt_f_mask: torch.Tensor
    prompt_r: torch.Tensor
    prompt_r_mask: torch.Tensor
    question: torch.Tensor  # [N, L_Q, D]
    question_mask: torch.Tensor
    answers: torch.Tensor  # [N, 5, L_A, D]
    answers_mask: torch.Tensor
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @classmethod
    def from_records(cls, records: Sequence[ClipRecord], encoder: ToyClip) -> "EncodedDataset":
        c = encoder.cfg

        def enc(texts, n):
            pairs = [encoder.encode_text(t, n) for t in texts]
            return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])

        pf, pfm = enc([r.prompt_f for r in records], c.max_prompt_len)
        pr, prm = enc([r.prompt_r for r in records], c.max_prompt_len)
        q, qm = enc([r.ara.question for r in records], c.max_question_len)
        ans, am = enc([a for r in records for a in r.ara.answers], c.max_answer_len)
        n = len(records)
        return cls(
            frames=torch.from_numpy(np.stack([r.frames for r in records])),
            gaze=torch.from_numpy(np.stack([r.gaze for r in records])),
            prompt_f=pf, prompt_f_mask=pfm, prompt_r=pr, prompt_r_mask=prm,
            question=q, question_mask=qm,
            answers=ans.reshape(n, 5, *ans.shape[1:]), answers_mask=am.reshape(n, 5, -1),
            records=list(records),
        )

    def batch(self, idx: Sequence[int]) -> "Batch":
        i = torch.as_tensor(list(idx), dtype=torch.long)
        return Batch(
            frames=self.frames[i], gaze=self.gaze[i],
            prompt_f=ConditioningBundle(self.prompt_f[i], self.prompt_f_mask[i]),
            prompt_r=ConditioningBundle(self.prompt_r[i], self.prompt_r_mask[i]),
            question=self.question[i], question_mask=self.question_mask[i],
            answers=self.answers[i], answers_mask=self.answers_mask[i],
        )


@dataclass
class Batch:
    frames: torch.Tensor
    gaze: Optional[torch.Tensor]
    prompt_f: ConditioningBundle
    prompt_r: Optional[ConditioningBundle] = None
    question: Optional[torch.Tensor] = None
    question_mask: Optional[torch.Tensor] = None
    answers: Optional[torch.Tensor] = None
    answers_mask: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    def to(self, dtype) -> "Batch":
        def cv(c):
            return None if c is None else ConditioningBundle(c.text_tokens.to(dtype), c.mask)

        def tv(x):
            return None if x is None else x.to(dtype)

        return Batch(tv(self.frames), tv(self.gaze), cv(self.prompt_f), cv(self.prompt_r), tv(self.question),
                     self.question_mask, tv(self.answers), self.answers_mask)


def load_dataset(manifest, encoder: ToyClip, split: Optional[str] = "train") -> EncodedDataset:
    manifest = Path(manifest)
    recs = load_manifest(manifest)
    clips = [load_clip(manifest.parent / r.clip_dir) for r in recs if split is None or r.split == split]
    if not clips:
        raise ConfigError(f"manifest {manifest} has no clips in split {split!r}")
    return EncodedDataset.from_records(clips, encoder)


def batch_indices(step: int, batch: int, n: int, seed: int) -> list[int]:
    """Clip indices for ``step``: consecutive slices of per-epoch seeded permutations."""
    out = []
    for p in range(step * batch, (step + 1) * batch):
        epoch, pos = divmod(p, n)
        perm = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch])).permutation(n)
        out.append(int(perm[pos]))
    return out


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def sample_steps(b: int, K: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(1, K + 1, (b,), generator=gen)


# ---- per-stage losses ---------------------------------------------------------------

@dataclass
class StepResult:
    loss: torch.Tensor
    parts: dict


def stage0_loss(model, batch: Batch, sched: NoiseSchedule, gen: torch.Generator, hooks=None) -> StepResult:
    z0 = batch.frames
    k = sample_steps(batch.size, sched.K, gen)
    e_f = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    z_k = forward_noise(z0, e_f, k, sched)
    e_hat = model(z_k, k, batch.prompt_f, hooks=hooks)
    mse = loss_mse(e_f, e_hat)
    return StepResult(mse, {"mse_f": float(mse.detach()), "k_mean": float(k.double().mean())})


def stage1_loss(model, batch: Batch, sched: NoiseSchedule, gen: torch.Generator, lam: float = 0.2) -> StepResult:
    """Forward clip with the reason prompt and reversed clip with the prevention prompt, one shared model."""
    if batch.prompt_r is None:
        raise ConfigError("stage 1 needs backward prompts")
    z0_f = batch.frames
    z0_r = batch.frames.flip(1)
    k = sample_steps(batch.size, sched.K, gen)
    e_f = torch.randn(z0_f.shape, generator=gen, dtype=z0_f.dtype)
    e_r = torch.randn(z0_r.shape, generator=gen, dtype=z0_r.dtype)
    e_f_hat = model(forward_noise(z0_f, e_f, k, sched), k, batch.prompt_f)
    e_r_hat = model(forward_noise(z0_r, e_r, k, sched), k, batch.prompt_r)
    mse_f = loss_mse(e_f, e_f_hat)
    mse_r = loss_mse(e_r, e_r_hat)
    ns = loss_ns(e_f_hat, e_r_hat)
    total = mse_f + mse_r + lam * ns
    return StepResult(total, {"mse_f": float(mse_f.detach()), "mse_r": float(mse_r.detach()), "ns": float(ns.detach())})


def stage2_loss(model, blocks: CausalBlocks, encoder: ToyClip, batch: Batch, sched: NoiseSchedule,
                gen: torch.Generator, gamma: float = 0.3) -> StepResult:
    if blocks.empty:
        res = stage0_loss(model, batch, sched, gen)
        return StepResult(res.loss, {**res.parts, "ara": 0.0})
    if batch.gaze is None:
        raise ConfigError("stage 2 with causal blocks needs gaze maps")
    if blocks.ctg_layer is not None and (batch.question is None or batch.answers is None):
        raise ConfigError("stage 2 with a grounding block needs ArA question/answers")
    dtype = batch.frames.dtype
    z0 = batch.frames
    b = batch.size
    k = sample_steps(b, sched.K, gen)
    e_f = torch.randn(z0.shape, generator=gen, dtype=dtype)
    z_k = forward_noise(z0, e_f, k, sched)
    with torch.no_grad():
        z_v = encoder.vision_tokens(z0.float()).to(dtype)
        z_g = tokenize_gaze(batch.gaze.float(), encoder.patch_embed).to(dtype)
    hooks = blocks.make_hooks(z_v, z_g, b, gen)
    e_hat = model(z_k, k, batch.prompt_f, hooks=hooks)
    mse = loss_mse(e_f, e_hat)
    if blocks.ctg_layer is not None:
        c, bg, bg_do = blocks.grounding_logits(batch.question, batch.question_mask, batch.answers,
                                               batch.answers_mask, gen)
        ara = loss_ara(c, bg, bg_do)
        acc = float((c.argmax(-1) == 0).double().mean())
    else:
        ara = torch.zeros((), dtype=dtype)
        acc = float("nan")
    total = loss_st2(e_f, e_hat, ara, gamma)
    return StepResult(total, {"mse_f": float(mse.detach()), "ara": float(ara.detach()), "ara_acc": acc})


# ---- trainer ----------------------------------------------------------------------------

def build_model(cfg: RunConfig, seed: Optional[int] = None) -> Backbone:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed if seed is None else seed)
        return Backbone(cfg.model)


def build_blocks(cfg: RunConfig, seed: Optional[int] = None) -> CausalBlocks:
    att, use_gaze = preset_attachments(cfg.hooks, cfg.model.L)
    with torch.random.fork_rng():
        torch.manual_seed((cfg.seed if seed is None else seed) + 1)
        return CausalBlocks(cfg.model, cfg.blocks, att, use_gaze, text_dim=cfg.encoder.dim)


def trainable_parameters(cfg: RunConfig, model: Backbone, blocks: Optional[CausalBlocks]) -> list:
    """Stage 2 defaults to temporal attention plus the causal blocks; earlier stages train everything."""
    if cfg.stage < 2 or cfg.trainable == "train_all":
        params = list(model.parameters())
    else:
        params = model.ta_parameters()
    if blocks is not None:
        params += list(blocks.parameters())
    return params


class Trainer:
    def __init__(self, cfg: RunConfig, data: EncodedDataset, encoder: Optional[ToyClip] = None,
                 model: Optional[Backbone] = None, blocks: Optional[CausalBlocks] = None):
        self.cfg = cfg.validate()
        self.data = data
        self.encoder = encoder or ToyClip(cfg.encoder)
        self.sched = NoiseSchedule.from_config(cfg.schedule)
        self.model = model or build_model(cfg)
        self.blocks = blocks if blocks is not None else (build_blocks(cfg) if cfg.stage == 2 else None)
        params = trainable_parameters(cfg, self.model, self.blocks)
        ids = {id(p) for p in params}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in ids)
        self.params = params
        self.opt = torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas))
        self.step = 0

    def loss(self, batch: Batch, gen: torch.Generator) -> StepResult:
        cfg = self.cfg
        if cfg.stage == 0:
            return stage0_loss(self.model, batch, self.sched, gen)
        if cfg.stage == 1:
            return stage1_loss(self.model, batch, self.sched, gen, cfg.lam)
        return stage2_loss(self.model, self.blocks, self.encoder, batch, self.sched, gen, cfg.gamma)

    def train_step(self) -> StepResult:
        cfg = self.cfg
        idx = batch_indices(self.step, cfg.batch, len(self.data), cfg.seed)
        gen = step_generator(cfg.seed, self.step)
        res = self.loss(self.data.batch(idx), gen)
        if not torch.isfinite(res.loss):
            norms = {n: float(p.detach().norm()) for n, p in self.model.named_parameters()}
            worst = max(norms, key=norms.get)
            raise NumericError(
                f"non-finite loss at stage {cfg.stage} step {self.step}: parts={res.parts}, "
                f"largest parameter norm {worst}={norms[worst]:.3g}"
            )
        self.opt.zero_grad(set_to_none=True)
        res.loss.backward()
        self.opt.step()
        self.step += 1
        return res

    # ---- checkpoints ----

    def arrays(self, with_optimizer: bool = True) -> dict:
        arrays = module_arrays(self.model, "backbone")
        if self.blocks is not None:
            arrays.update(module_arrays(self.blocks, "blocks"))
        if with_optimizer:
            state = self.opt.state_dict()["state"]
            for i, st in state.items():
                for k, v in st.items():
                    arrays[f"opt/{i}/{k}"] = v.detach().cpu().numpy().copy()
        return arrays

    def save(self, path, complete: bool) -> Path:
        meta = {
            "stage": self.cfg.stage,
            "step": self.step,
            "complete": complete,
            "model_hash": self.cfg.model_hash(),
            "hooks": self.cfg.hooks,
            "config": self.cfg.to_dict(),
        }
        return save_checkpoint(path, meta, self.arrays())

    def restore_optimizer(self, ck: Checkpoint):
        opt_arrays = ck.prefixed("opt")
        state = {}
        for key, v in opt_arrays.items():
            i, name = key.split("/", 1)
            state.setdefault(int(i), {})[name] = torch.from_numpy(v.copy())
        sd = self.opt.state_dict()
        sd["state"] = state
        self.opt.load_state_dict(sd)


def _check_chain(cfg: RunConfig, ck: Optional[Checkpoint]) -> bool:
    """Validate the incoming checkpoint; returns True when it is a mid-stage resume."""
    if ck is None:
        if cfg.stage > 0:
            raise ChainError(f"stage {cfg.stage} needs a completed stage {cfg.stage - 1} checkpoint (ckpt_in)")
        return False
    if ck.meta.get("model_hash") != cfg.model_hash():
        raise ChainError(
            f"checkpoint model hash {ck.meta.get('model_hash')} disagrees with this config ({cfg.model_hash()})"
        )
    if ck.stage == cfg.stage and not ck.meta.get("complete", False):
        return True
    if ck.stage != cfg.stage - 1 or not ck.meta.get("complete", False):
        raise ChainError(
            f"stage {cfg.stage} cannot start from a stage {ck.stage} checkpoint "
            f"(complete={ck.meta.get('complete')}); expected a completed stage {cfg.stage - 1} checkpoint"
        )
    return False


@dataclass
class StageResult:
    checkpoint: Path
    log: Path
    losses: list


def format_log_line(step: int, res: StepResult) -> str:
    parts = "\t".join(f"{k}={v!r}" for k, v in res.parts.items())
    return f"{step}\t{float(res.loss.detach())!r}\t{parts}"


def run_stage(cfg: RunConfig, data: Optional[EncodedDataset] = None, encoder: Optional[ToyClip] = None,
              progress: Optional[Callable[[int, StepResult], None]] = None,
              stop_after: Optional[int] = None) -> StageResult:
    """Train one stage for ``cfg.steps`` steps, writing checkpoints and a per-step loss log.

    ``stop_after`` ends the run early with an incomplete checkpoint (used to
    exercise resume).
    """
    cfg.validate()
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(cfg.ckpt_in) if cfg.ckpt_in else None
    resume = _check_chain(cfg, ck)
    encoder = encoder or ToyClip(cfg.encoder)
    if data is None:
        if not cfg.manifest:
            raise ConfigError("no manifest configured")
        data = load_dataset(cfg.manifest, encoder)

    trainer = Trainer(cfg, data, encoder)
    if ck is not None:
        ck.load_into(trainer.model, "backbone")
        if resume:
            if trainer.blocks is not None:
                ck.load_into(trainer.blocks, "blocks")
            trainer.restore_optimizer(ck)
            trainer.step = int(ck.meta["step"])

    log_path = out / f"stage{cfg.stage}_loss.tsv"
    lines = log_path.read_text().splitlines()[: trainer.step] if (resume and log_path.exists()) else []
    losses = [float(l.split("\t")[1]) for l in lines]
    ckpt_final = Path(cfg.ckpt_out) if cfg.ckpt_out else out / f"stage{cfg.stage}.npz"

    with log_path.open("w", encoding="utf-8") as fh:
        for l in lines:
            fh.write(l + "\n")
        while trainer.step < cfg.steps:
            step = trainer.step
            res = trainer.train_step()
            fh.write(format_log_line(step, res) + "\n")
            losses.append(float(res.loss.detach()))
            if progress is not None:
                progress(step, res)
            if cfg.ckpt_every and trainer.step % cfg.ckpt_every == 0 and trainer.step < cfg.steps:
                trainer.save(out / f"stage{cfg.stage}_step{trainer.step:06d}.npz", complete=False)
            if stop_after is not None and trainer.step >= stop_after and trainer.step < cfg.steps:
                fh.flush()
                path = trainer.save(out / f"stage{cfg.stage}_step{trainer.step:06d}.npz", complete=False)
                return StageResult(path, log_path, losses)
    path = trainer.save(ckpt_final, complete=True)
    return StageResult(path, log_path, losses)


def load_backbone(path, cfg: Optional[RunConfig] = None) -> tuple[Backbone, RunConfig]:
    """Backbone only; block and optimizer arrays in the checkpoint are ignored."""
    ck = load_checkpoint(path)
    run_cfg = cfg or RunConfig.from_dict(ck.meta["config"])
    model = Backbone(run_cfg.model)
    ck.load_into(model, "backbone")
    model.eval()
    return model, run_cfg
