from __future__ import annotations

import pytest
import torch

from vlmir.captions import mock_caption
from vlmir.config import (
    EncoderConfig,
    LoraAdapterConfig,
    RunConfig,
    ScheduleConfig,
    Stage1Config,
    Stage2Config,
    SynthParams,
    UNetConfig,
)
from vlmir.synthesis import build_corpus, write_toy_scenes

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'}  {detail}")


def tiny_config(seed: int = 0, **stage2) -> RunConfig:
    """Small enough that a full train/restore round trip takes seconds."""
    enc = EncoderConfig(
        embed_dim=32,
        text_layers=1,
        text_width=32,
        text_heads=2,
        context_length=16,
        vocab_size=512,
        image_size=32,
        image_patch=8,
        image_layers=1,
        image_width=32,
        image_heads=2,
        predictor_width=8,
    )
    return RunConfig(
        seed=seed,
        encoder=enc,
        lora=LoraAdapterConfig(rank=2),
        schedule=ScheduleConfig(steps=10),
        unet=UNetConfig(base_channels=8, channel_mults=(1, 2), attn_resolutions=(1, 2), cond_dim=32, num_heads=2),
        stage1=Stage1Config(epochs=2, batch_size=8),
        stage2=Stage2Config(**{"steps": 4, "batch_size": 2, "patch_size": 16, **stage2}),
    )


def make_corpus(root, n: int = 4, size: int = 32, seed: int = 0, tasks=("noise", "haze", "raindrop"), split="train"):
    gt = write_toy_scenes(root / f"gt_{split}", n, size, seed, prefix=split)
    m = build_corpus(gt, list(tasks), SynthParams(seed=seed), root / split, split=split)
    for r in m.records:
        r.gt_caption = mock_caption(r.scene_id, r.scene, "gt")
        r.lq_caption = mock_caption(r.id, r.scene, "lq", seed)
    m.save(root / split / "manifest.json")
    return m


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("tiny"))


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch):
    monkeypatch.delenv("VLMIR_SEED", raising=False)
    monkeypatch.delenv("VLMIR_DEVICE", raising=False)


@pytest.fixture
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
