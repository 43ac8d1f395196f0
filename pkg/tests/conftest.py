import pytest
import torch

from egocrash.backbone import BackboneConfig
from egocrash.causal_blocks import BlockConfig
from egocrash.config import RunConfig
from egocrash.diffusion import ScheduleConfig
from egocrash.encoders import EncoderConfig, ToyClip
from egocrash.scenario import ScenarioConfig, generate_scenario
from egocrash.training import EncodedDataset

torch.set_num_threads(1)


def tiny_config(**kw) -> RunConfig:
    """A config small enough for many training steps inside a unit test."""
    cfg = RunConfig(
        lr=1e-3,
        steps=6,
        batch=2,
        ckpt_every=0,
        schedule=ScheduleConfig(K=100),
        model=BackboneConfig(frames=4, resolution=16, patch=2, widths=(8, 16), text_dim=16, max_prompt_len=24,
                             time_dim=16, groups=4),
        encoder=EncoderConfig(dim=16),
        blocks=BlockConfig(n_tokens=4, token_dim=16, mlp_hidden=16),
        scenario=ScenarioConfig(frames=4, resolution=16, gaze_kernel=4, collision_min=2, collision_max=3),
    )
    return cfg.override(**kw)


def tiny_dataset(cfg: RunConfig, n: int = 4, seed: int = 0):
    enc = ToyClip(cfg.encoder)
    recs = [generate_scenario(seed + i, cfg.scenario) for i in range(n)]
    return EncodedDataset.from_records(recs, enc), enc


@pytest.fixture
def tiny():
    cfg = tiny_config()
    data, enc = tiny_dataset(cfg)
    return cfg, data, enc


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
