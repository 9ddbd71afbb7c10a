"""Stage 2: train the conditional noise predictor and run the reverse-time sampler."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import Stage1Model, conditioning_batch, label_text_matrix
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import RunConfig, ScheduleConfig, Stage2Config, UNetConfig, from_dict
from .images import to_numpy, to_tensor
from .manifest import DatasetManifest, ManifestError
from .sde import NoiseSchedule, forward_sample, optimal_reverse_state, reconstruct_x0
from .synthesis import sample_patch
from .unet import ConditionalUNet
from .utils import cosine_lr, derive_seed, state_fingerprint

log = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ("step", "loss", "lr")


class IncompatibleCheckpointError(CheckpointError):
    pass


class NonFiniteStage2LossError(RuntimeError):
    pass


# --------------------------------------------------------------------------- loss


def predict_x0(net, x_i, mu, i, cond: dict[str, torch.Tensor], schedule: NoiseSchedule) -> torch.Tensor:
    """x0 estimate from the network output, read as noise or as the residual x0 - mu."""
    out = net(x_i, mu, i, cond["text"], cond["image"], cond["degradation"])
    if getattr(net, "config", None) is not None and net.config.prediction == "x0":
        return mu + out
    return reconstruct_x0(x_i, mu, out, schedule, i)


def stage2_loss(
    net: ConditionalUNet,
    x0: torch.Tensor,
    mu: torch.Tensor,
    cond: dict[str, torch.Tensor],
    schedule: NoiseSchedule,
    i: torch.Tensor,
    noise: torch.Tensor,
    norm: str = "l1",
) -> torch.Tensor:
    """Distance between the reverse step taken from x0_hat and the optimal reverse step."""
    x_i = forward_sample(x0, mu, schedule, i, noise)
    x0_hat = predict_x0(net, x_i, mu, i, cond, schedule)
    pred = optimal_reverse_state(x_i, x0_hat, mu, schedule, i)
    target = optimal_reverse_state(x_i, x0, mu, schedule, i)
    if norm == "l1":
        return F.l1_loss(pred, target)
    return F.mse_loss(pred, target)


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Stage2Result:
    net: ConditionalUNet
    schedule: NoiseSchedule
    log: list[dict]
    checkpoint: Path | None


def build_unet(config: RunConfig, device="cpu") -> ConditionalUNet:
    torch.manual_seed(derive_seed(config.seed, "stage2-init"))
    return ConditionalUNet(config.unet).to(device)


def save_stage2(net: ConditionalUNet, path, config: RunConfig, schedule: NoiseSchedule, step: int) -> Path:
    metadata = {
        "kind": "stage2",
        "unet": from_unet(net.config),
        "schedule": {"steps": schedule.T, "lam": schedule.lam, "terminal": config.schedule.terminal},
        "embed_dim": net.config.cond_dim,
        "text_mode": config.stage2.text_mode,
        "teacher_forcing": config.stage2.teacher_forcing,
        "variant": net.config.variant,
        "step": step,
        "seed": config.seed,
        "config": config.to_dict(),
    }
    return save_checkpoint(dict(net.state_dict()), path, metadata)


def from_unet(cfg: UNetConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()}


def load_stage2(path, device="cpu") -> tuple[ConditionalUNet, NoiseSchedule, dict]:
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "stage2":
        raise IncompatibleCheckpointError(f"{path} is not a stage-2 checkpoint")
    net = ConditionalUNet(from_dict(UNetConfig, metadata["unet"]))
    load_into(net, tensors)
    schedule = NoiseSchedule.from_config(from_dict(ScheduleConfig, metadata["schedule"]))
    return net.to(device).eval(), schedule, metadata


def check_compatible(stage1: Stage1Model, net: ConditionalUNet, schedule=None, expected=None) -> None:
    """Raise if the stage-1 embedding width or the sampling schedule does not match stage 2."""
    d1, d2 = stage1.encoder_config.embed_dim, net.config.cond_dim
    if d1 != d2:
        raise IncompatibleCheckpointError(f"stage-1 embed_dim {d1} does not match stage-2 cond_dim {d2}")
    if schedule is not None and expected is not None and not schedule.matches(expected):
        raise IncompatibleCheckpointError(
            f"schedule {schedule.describe()} does not match the trained schedule {expected.describe()}"
        )


# --------------------------------------------------------------------------- training


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOSS_LOG_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _captions(manifest: DatasetManifest, text_mode: str) -> list[str | None]:
    caps = [r.lq_caption for r in manifest.records]
    if text_mode == "caption" and any(c is None for c in caps):
        raise ManifestError("text mode 'caption' needs LQ captions for every record; run the caption step")
    return caps


def train_stage2(
    manifest: DatasetManifest,
    stage1: Stage1Model,
    config: RunConfig,
    out_dir: str | Path | None = None,
    device: str = "cpu",
) -> Stage2Result:
    """Train the conditional denoiser with the stage-1 model frozen.

    Conditioning features are computed once from the full LQ images; each step
    draws random patches, timesteps and noise from seeds derived from
    ``config.seed`` so the loss log is reproducible.
    """
    cfg: Stage2Config = config.stage2
    out_dir = Path(out_dir) if out_dir is not None else None
    if not manifest.records:
        raise ManifestError("manifest has no records")
    schedule = NoiseSchedule.from_config(config.schedule)
    stage1 = stage1.to(device).eval()
    net = build_unet(config, device)
    check_compatible(stage1, net)
    fingerprint = state_fingerprint(stage1)

    pairs = [manifest.load_pair(r) for r in manifest.records]
    p = stage1.temperature
    lq_all = to_tensor([lq for _, lq in pairs], p.device, p.dtype)
    labels = [r.degradation for r in manifest.records] if cfg.teacher_forcing else None
    cond_all = conditioning_batch(
        stage1, lq_all, _captions(manifest, cfg.text_mode), cfg.text_mode, labels, label_text_matrix(stage1)
    )
    cond_all = {k: v.detach() for k, v in cond_all.items() if k != "predicted"}

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "stage2-steps"))
    n = len(pairs)
    rows, checkpoint = [], None
    net.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        patches = [
            sample_patch(*pairs[int(k)], cfg.patch_size, cfg.hflip, cfg.vflip, derive_seed(config.seed, "patch", step, b))
            for b, k in enumerate(idx)
        ]
        x0 = to_tensor([g for g, _ in patches], device)
        mu = to_tensor([q for _, q in patches], device)
        i = torch.randint(1, schedule.T + 1, (cfg.batch_size,), generator=gen).to(device)
        noise = torch.randn(x0.shape, generator=gen).to(device)
        cond = {k: v[idx.to(v.device)].to(device) for k, v in cond_all.items()}

        lr = cosine_lr(cfg.lr, step, cfg.steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss = stage2_loss(net, x0, mu, cond, schedule, i, noise, cfg.loss)
        if not torch.isfinite(loss):
            raise NonFiniteStage2LossError(
                f"non-finite stage-2 loss at step {step} (timesteps {i.tolist()}, lr {lr:.3g})"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append({"step": step, "loss": float(loss.detach()), "lr": lr})
        if step % 100 == 0:
            log.info("stage2 step %d/%d loss=%.5f", step, cfg.steps, float(loss.detach()))
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint = save_stage2(net, out_dir / "checkpoint", config, schedule, step + 1)
            _write_log(checkpoint / "loss.csv", rows)

    if state_fingerprint(stage1) != fingerprint:
        raise AssertionError("stage-1 tensors changed during stage-2 training")
    net.eval()
    if out_dir is not None:
        checkpoint = save_stage2(net, out_dir / "checkpoint", config, schedule, cfg.steps)
        _write_log(checkpoint / "loss.csv", rows)
        _write_log(out_dir / "loss.csv", rows)
    return Stage2Result(net, schedule, rows, checkpoint)


# --------------------------------------------------------------------------- sampling

X0Fn = Callable[[torch.Tensor, int], torch.Tensor]


def sample(
    mu: torch.Tensor,
    x0_fn: X0Fn,
    schedule: NoiseSchedule,
    x_T: torch.Tensor,
    trace: list | None = None,
) -> torch.Tensor:
    """Deterministic reverse recursion from ``x_T``: x_{i-1} = x*(x_i, x0_fn(x_i, i))."""
    x = x_T
    for i in range(schedule.T, 0, -1):
        x = optimal_reverse_state(x, x0_fn(x, i), mu, schedule, i)
        if trace is not None:
            trace.append(x.detach().clone())
    return x


def _pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


@torch.no_grad()
def restore_batch(
    lq_images: list[np.ndarray],
    captions: list[str | None],
    stage1: Stage1Model,
    net: ConditionalUNet,
    schedule: NoiseSchedule,
    seed: int = 0,
    text_mode: str = "caption",
    keys: list | None = None,
    batch_size: int = 8,
    trace_dir: str | Path | None = None,
) -> list[np.ndarray]:
    """Restore HWC float images; each image's start noise depends only on ``(seed, key)``.

    Images of one batch must share a size, so they are grouped by shape.
    """
    check_compatible(stage1, net)
    if len(captions) != len(lq_images):
        raise ValueError("need one caption per image")
    keys = list(range(len(lq_images))) if keys is None else list(keys)
    device = next(net.parameters()).device
    net.eval()
    stage1.eval()
    outputs: list[np.ndarray | None] = [None] * len(lq_images)
    groups: dict[tuple, list[int]] = {}
    for k, img in enumerate(lq_images):
        groups.setdefault(img.shape, []).append(k)
    for members in groups.values():
        for start in range(0, len(members), batch_size):
            chunk = members[start : start + batch_size]
            mu = to_tensor([lq_images[k] for k in chunk], device)
            cond = conditioning_batch(stage1.to(device), mu, [captions[k] for k in chunk], text_mode)
            mu_p, (h, w) = _pad_to_multiple(mu, net.size_multiple)
            z = torch.stack(
                [
                    torch.randn(mu_p.shape[1:], generator=torch.Generator().manual_seed(derive_seed(seed, "restore", keys[k])))
                    for k in chunk
                ]
            ).to(device)
            x_T = mu_p + schedule.lam * z

            def x0_fn(x, i):
                t = torch.full((x.shape[0],), i, device=device, dtype=torch.long)
                return predict_x0(net, x, mu_p, t, cond, schedule)

            trace = [] if trace_dir is not None else None
            x0 = sample(mu_p, x0_fn, schedule, x_T, trace)[..., :h, :w].clamp(0, 1)
            if trace is not None:
                _dump_trace(trace_dir, [keys[k] for k in chunk], trace, schedule)
            for k, img in zip(chunk, to_numpy(x0)):
                outputs[k] = img
    return outputs


def _dump_trace(trace_dir, keys, trace, schedule) -> None:
    tensors = {}
    for step, x in enumerate(trace):
        i = schedule.T - step - 1
        for key, xi in zip(keys, x):
            tensors[f"{key}/x_{i:04d}"] = xi
    save_checkpoint(tensors, Path(trace_dir) / f"trace_{keys[0]}", {"kind": "trace", "T": schedule.T})


def restore(
    lq: np.ndarray,
    lq_caption: str | None,
    stage1: Stage1Model,
    net: ConditionalUNet,
    schedule: NoiseSchedule,
    seed: int = 0,
    text_mode: str = "caption",
) -> np.ndarray:
    return restore_batch([lq], [lq_caption], stage1, net, schedule, seed, text_mode)[0]


__all__ = [
    "IncompatibleCheckpointError",
    "LOSS_LOG_COLUMNS",
    "NonFiniteStage2LossError",
    "Stage2Result",
    "build_unet",
    "check_compatible",
    "load_stage2",
    "predict_x0",
    "restore",
    "restore_batch",
    "sample",
    "save_stage2",
    "stage2_loss",
    "train_stage2",
]
