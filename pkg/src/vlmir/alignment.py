"""Stage 1: align LQ-image, caption and degradation embeddings.

The objective is

    total = Lc(f_img, f_gt) + Lc(f_deg_img, f_deg_txt) + alpha * mean(Lcos(f_lq, f_gt))

where ``Lc`` is an image-to-text InfoNCE loss with a learnable temperature and
``Lcos`` is one minus cosine similarity. Only the degradation predictor, the
LoRA adapters, the temperature and (optionally) the image encoder train; the
text tower stays frozen.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import (
    FIXED_CAPTION,
    TEXT_MODES,
    DegradationLabel,
    EncoderConfig,
    LoraAdapterConfig,
    RunConfig,
    Stage1Config,
    from_dict,
)
from .encoders import (
    DegradationPredictor,
    Embedding,
    ImageEncoder,
    LoraAdapters,
    TextEncoder,
    ZeroVectorError,
    tokenize_batch,
)
from .images import to_tensor
from .manifest import DatasetManifest, ManifestError
from .utils import cosine_lr, derive_seed

log = logging.getLogger(__name__)

LABELS = tuple(DegradationLabel)
DEGRADATION_PROMPT = "a photo that is degraded by {label}"
TEMPERATURE_RANGE = (0.01, 1.0)
LOSS_LOG_COLUMNS = ("step", "l_content", "l_degradation", "l_caption", "total", "lr", "s")


class NotNormalizedError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


# --------------------------------------------------------------------------- losses


def contrastive_loss(m: torch.Tensor, n: torch.Tensor, s, symmetric: bool = False) -> torch.Tensor:
    """-(1/K) sum_i log softmax_j(m_i . n_j / s)[i] for unit-norm rows of ``m`` and ``n``."""
    if m.ndim != 2 or m.shape != n.shape:
        raise ValueError(f"expected two (K, d) batches of equal shape, got {tuple(m.shape)} and {tuple(n.shape)}")
    if m.shape[0] < 1:
        raise ValueError("contrastive loss needs K >= 1")
    with torch.no_grad():
        for name, t in (("m", m), ("n", n)):
            dev = (torch.linalg.vector_norm(t, dim=1) - 1).abs().max()
            if dev > 1e-3:
                raise NotNormalizedError(f"rows of {name} deviate from unit norm by {float(dev):.3g}")
    logits = (m @ n.T) / s
    loss = -_diagonal_log_softmax(logits).mean()
    if symmetric:
        loss = 0.5 * (loss - _diagonal_log_softmax(logits.T).mean())
    return loss


def _diagonal_log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.amax(dim=1, keepdim=True).detach()
    return shifted.diagonal() - shifted.exp().sum(dim=1).log()


def cosine_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, b) along the last axis; values lie in [0, 2]."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroVectorError("cosine loss of a zero vector is undefined")
    return 1 - (a * b).sum(-1) / (na * nb)


@dataclass
class Stage1Losses:
    l_content: torch.Tensor
    l_degradation: torch.Tensor
    l_caption: torch.Tensor
    alpha: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_content": float(self.l_content.detach()),
            "l_degradation": float(self.l_degradation.detach()),
            "l_caption": float(self.l_caption.detach()),
            "total": float(self.total.detach()),
        }


@dataclass
class AlignmentBatch:
    lq_images: torch.Tensor  # (K, 3, H, W)
    gt_caption_tokens: torch.Tensor  # (K, L)
    lq_caption_tokens: torch.Tensor  # (K, L)
    degradation_labels: torch.Tensor  # (K,) indices into LABELS

    def __post_init__(self):
        counts = {
            self.lq_images.shape[0],
            self.gt_caption_tokens.shape[0],
            self.lq_caption_tokens.shape[0],
            self.degradation_labels.shape[0],
        }
        if len(counts) != 1:
            raise ValueError(f"alignment batch components disagree in size: {sorted(counts)}")
        if counts.pop() < 1:
            raise ValueError("alignment batch must hold at least one record")

    def __len__(self) -> int:
        return self.lq_images.shape[0]


# --------------------------------------------------------------------------- model


class Stage1Model(nn.Module):
    """Container for every stage-1 network plus the shared temperature."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        lora_config: LoraAdapterConfig,
        temperature_init: float = 0.07,
        freeze_image_encoder: bool = True,
    ):
        super().__init__()
        self.encoder_config = encoder_config
        self.lora_config = lora_config
        self.image_encoder = ImageEncoder(encoder_config)
        self.text_encoder = TextEncoder(encoder_config)
        self.adapters = LoraAdapters(lora_config, encoder_config)
        self.predictor = DegradationPredictor(encoder_config)
        self.temperature = nn.Parameter(torch.tensor(float(temperature_init)))
        self.text_encoder.requires_grad_(False)
        self.image_encoder.requires_grad_(not freeze_image_encoder)

    def tokenize(self, texts) -> torch.Tensor:
        cfg = self.encoder_config
        return tokenize_batch(list(texts), cfg.context_length, cfg.vocab_size).to(self.temperature.device)

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k.startswith("text_encoder.")}


def degradation_prompt(label: DegradationLabel) -> str:
    return DEGRADATION_PROMPT.format(label=label.value)


def label_text_matrix(model: Stage1Model) -> torch.Tensor:
    """Frozen text embeddings of every degradation prompt, rows in enum order."""
    with torch.no_grad():
        pooled, _ = model.text_encoder(model.tokenize(degradation_prompt(l) for l in LABELS))
    return pooled


def degradation_text_embeddings(model: Stage1Model, labels=LABELS) -> dict[DegradationLabel, Embedding]:
    matrix = label_text_matrix(model)
    return {
        DegradationLabel(label): Embedding(matrix[LABELS.index(DegradationLabel(label))], "degradation_text")
        for label in labels
    }


def _grad_scope(module: nn.Module):
    return torch.set_grad_enabled(torch.is_grad_enabled() and any(p.requires_grad for p in module.parameters()))


def stage1_total_loss(
    batch: AlignmentBatch,
    model: Stage1Model,
    alpha: float = 0.5,
    label_matrix: torch.Tensor | None = None,
    symmetric: bool = False,
) -> Stage1Losses:
    if label_matrix is None:
        label_matrix = label_text_matrix(model)
    with _grad_scope(model.image_encoder):
        f_img = model.image_encoder(batch.lq_images)
    with torch.no_grad():
        f_gt, _ = model.text_encoder(batch.gt_caption_tokens)
    f_lq, _ = model.text_encoder(batch.lq_caption_tokens, model.adapters)
    f_deg = model.predictor(batch.lq_images)
    f_deg_txt = label_matrix[batch.degradation_labels]

    s = model.temperature
    l_content = contrastive_loss(f_img, f_gt, s, symmetric)
    l_degradation = contrastive_loss(f_deg, f_deg_txt, s, symmetric)
    l_caption = cosine_loss(f_lq, f_gt).mean()
    total = l_content + l_degradation + alpha * l_caption
    return Stage1Losses(l_content, l_degradation, l_caption, alpha, total)


# --------------------------------------------------------------------------- classification


def classify_embedding(f_deg: torch.Tensor, label_embeds: dict) -> tuple[DegradationLabel, dict]:
    """Argmax-cosine label; a later label must beat the best by more than rounding noise."""
    if not label_embeds:
        raise ValueError("label_embeds must not be empty")
    f = f_deg.vector if isinstance(f_deg, Embedding) else torch.as_tensor(f_deg)
    tol = 8 * torch.finfo(f.dtype).eps
    scores = {}
    best, best_score = None, -math.inf
    for label in sorted(label_embeds, key=LABELS.index):
        e = label_embeds[label]
        e = e.vector if isinstance(e, Embedding) else torch.as_tensor(e)
        score = float(1 - cosine_loss(f, e.to(f.dtype)))
        scores[label] = score
        if best is None or score > best_score + tol:
            best, best_score = label, score
    return best, scores


def classify_degradation(img: np.ndarray, model: Stage1Model, label_embeds: dict | None = None):
    if label_embeds is None:
        label_embeds = degradation_text_embeddings(model)
    p = model.temperature
    with torch.no_grad():
        f_deg = model.predictor(to_tensor(img, p.device, p.dtype))[0]
    return classify_embedding(f_deg, label_embeds)


def predict_label_indices(model: Stage1Model, images: torch.Tensor, label_matrix=None, batch_size=64) -> torch.Tensor:
    """Batched classification; exact ties resolve to the lower enum index."""
    if label_matrix is None:
        label_matrix = label_text_matrix(model)
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            f = model.predictor(images[start : start + batch_size])
            out.append((f @ label_matrix.T).argmax(dim=1))
    return torch.cat(out)


# --------------------------------------------------------------------------- data


@dataclass
class AlignmentData:
    images: torch.Tensor
    gt_tokens: torch.Tensor
    lq_tokens: torch.Tensor
    labels: torch.Tensor
    ids: list[str]

    def batch(self, index: torch.Tensor) -> AlignmentBatch:
        return AlignmentBatch(self.images[index], self.gt_tokens[index], self.lq_tokens[index], self.labels[index])


def load_alignment_data(manifest: DatasetManifest, model: Stage1Model) -> AlignmentData:
    missing = [r.id for r in manifest.records if r.gt_caption is None or r.lq_caption is None]
    if missing:
        raise ManifestError(f"{len(missing)} records lack captions (first: {missing[:3]}); run the caption step")
    if not manifest.records:
        raise ManifestError("manifest has no records")
    lq = [manifest.load_pair(r)[1] for r in manifest.records]
    p = model.temperature
    return AlignmentData(
        images=to_tensor(lq, p.device, p.dtype),
        gt_tokens=model.tokenize(r.gt_caption for r in manifest.records),
        lq_tokens=model.tokenize(r.lq_caption for r in manifest.records),
        labels=torch.tensor([LABELS.index(r.degradation) for r in manifest.records], device=p.device),
        ids=[r.id for r in manifest.records],
    )


# --------------------------------------------------------------------------- training


@dataclass
class Stage1Result:
    model: Stage1Model
    log: list[dict]
    checkpoint: Path | None


def build_stage1_model(config: RunConfig, device="cpu") -> Stage1Model:
    torch.manual_seed(derive_seed(config.seed, "stage1-init"))
    model = Stage1Model(
        config.encoder,
        config.lora,
        temperature_init=config.stage1.temperature_init,
        freeze_image_encoder=config.stage1.freeze_image_encoder,
    )
    return model.to(device)


def _trainable(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def save_stage1(model: Stage1Model, path, config: RunConfig, epoch: int, step: int, optimizer=None) -> Path:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        for name, p in _trainable(model):
            state = optimizer.state.get(p)
            if state:
                tensors[f"optim/{name}/exp_avg"] = state["exp_avg"]
                tensors[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"]
    metadata = {
        "kind": "stage1",
        "config": config.to_dict(),
        "epoch": epoch,
        "step": step,
        "seed": config.seed,
        "embed_dim": config.encoder.embed_dim,
    }
    return save_checkpoint(tensors, path, metadata)


def load_stage1(path, device="cpu") -> tuple[Stage1Model, dict, dict]:
    """Returns ``(model, metadata, optimizer_tensors)``."""
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "stage1":
        raise ManifestError(f"{path} is not a stage-1 checkpoint")
    config = from_dict(RunConfig, metadata["config"])
    model = Stage1Model(
        config.encoder,
        config.lora,
        temperature_init=config.stage1.temperature_init,
        freeze_image_encoder=config.stage1.freeze_image_encoder,
    )
    weights = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    optim = {k: v for k, v in tensors.items() if k.startswith("optim/")}
    load_into(model, weights)
    return model.to(device), metadata, optim


def _write_log(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_log(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train_stage1(
    manifest: DatasetManifest,
    config: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    device: str = "cpu",
) -> Stage1Result:
    """Train the stage-1 alignment model; deterministic for a given ``config.seed``.

    When ``out_dir`` is given, ``out_dir/checkpoint`` is rewritten after every
    epoch (plus ``epoch_XXX`` copies if ``keep_epoch_checkpoints``) and
    ``out_dir/loss.csv`` receives the per-step log.
    """
    cfg: Stage1Config = config.stage1
    out_dir = Path(out_dir) if out_dir is not None else None

    start_epoch, step, rows = 0, 0, []
    if resume is not None:
        model, meta, optim_tensors = load_stage1(resume, device)
        start_epoch, step = int(meta["epoch"]), int(meta["step"])
        log_file = Path(resume) / "loss.csv"
        rows = read_log(log_file) if log_file.exists() else []
    else:
        model, optim_tensors = build_stage1_model(config, device), {}

    frozen_before = {k: v.clone() for k, v in model.frozen_state().items()}
    params = _trainable(model)
    optimizer = torch.optim.Adam([p for _, p in params], lr=cfg.lr)
    for name, p in params:
        if f"optim/{name}/exp_avg" in optim_tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": optim_tensors[f"optim/{name}/exp_avg"].to(p),
                "exp_avg_sq": optim_tensors[f"optim/{name}/exp_avg_sq"].to(p),
            }

    data = load_alignment_data(manifest, model)
    n = data.images.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    label_matrix = label_text_matrix(model)
    checkpoint = None

    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=torch.Generator().manual_seed(derive_seed(config.seed, "epoch", epoch)))
        for start in range(0, n, cfg.batch_size):
            batch = data.batch(order[start : start + cfg.batch_size].to(data.images.device))
            lr = cosine_lr(cfg.lr, step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            s_used = float(model.temperature.detach())
            losses = stage1_total_loss(batch, model, cfg.alpha, label_matrix, cfg.symmetric)
            if not torch.isfinite(losses.total):
                raise NonFiniteLossError(f"non-finite stage-1 loss at step {step}: {losses.as_floats()}")
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            with torch.no_grad():
                model.temperature.clamp_(*TEMPERATURE_RANGE)
            rows.append({"step": step, **losses.as_floats(), "lr": lr, "s": s_used})
            step += 1
        epoch_rows = rows[-steps_per_epoch:]
        log.info("stage1 epoch %d/%d total=%.4f", epoch + 1, cfg.epochs, np.mean([r["total"] for r in epoch_rows]))
        if out_dir is not None:
            checkpoint = save_stage1(model, out_dir / "checkpoint", config, epoch + 1, step, optimizer)
            _write_log(checkpoint / "loss.csv", rows, LOSS_LOG_COLUMNS)
            if cfg.keep_epoch_checkpoints:
                ep = save_stage1(model, out_dir / f"epoch_{epoch + 1:03d}", config, epoch + 1, step, optimizer)
                _write_log(ep / "loss.csv", rows, LOSS_LOG_COLUMNS)

    for k, v in model.frozen_state().items():
        if not torch.equal(v, frozen_before[k]):
            raise AssertionError(f"frozen tensor {k} changed during stage-1 training")
    if out_dir is not None:
        _write_log(out_dir / "loss.csv", rows, LOSS_LOG_COLUMNS)
        if checkpoint is None:
            checkpoint = save_stage1(model, out_dir / "checkpoint", config, cfg.epochs, step, optimizer)
            _write_log(checkpoint / "loss.csv", rows, LOSS_LOG_COLUMNS)
    model.eval()
    return Stage1Result(model, rows, checkpoint)


# --------------------------------------------------------------------------- conditioning export


@dataclass
class ConditioningBundle:
    text_tokens: torch.Tensor  # (L, d); L == 0 in "null" text mode
    image_embed: Embedding
    degradation_embed: Embedding
    predicted_label: DegradationLabel
    text_mode: str = "caption"


def caption_for_mode(caption: str | None, text_mode: str) -> str | None:
    if text_mode not in TEXT_MODES:
        raise ValueError(f"text mode must be one of {TEXT_MODES}, got {text_mode!r}")
    if text_mode == "fixed":
        return FIXED_CAPTION
    if text_mode == "null":
        return None
    return caption or ""


def conditioning_batch(
    model: Stage1Model,
    images: torch.Tensor,
    captions,
    text_mode: str = "caption",
    labels=None,
    label_matrix: torch.Tensor | None = None,
    batch_size: int = 64,
) -> dict[str, torch.Tensor]:
    """Frozen stage-1 features for a batch of LQ images.

    ``labels`` (teacher forcing) selects the degradation text embedding of the
    given labels; otherwise the predicted label's embedding is used.
    """
    captions = list(captions)
    if label_matrix is None:
        label_matrix = label_text_matrix(model)
    texts, feats, preds = [], [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start : start + batch_size]
            feats.append(model.image_encoder(chunk))
            preds.append((model.predictor(chunk) @ label_matrix.T).argmax(dim=1))
            caps = [caption_for_mode(c, text_mode) for c in captions[start : start + batch_size]]
            if text_mode == "null":
                texts.append(chunk.new_zeros(chunk.shape[0], 0, model.encoder_config.embed_dim))
            else:
                texts.append(model.text_encoder(model.tokenize(caps), model.adapters)[1])
    predicted = torch.cat(preds)
    chosen = predicted if labels is None else torch.as_tensor(
        [LABELS.index(DegradationLabel(l)) for l in labels], device=predicted.device
    )
    return {
        "text": torch.cat(texts),
        "image": torch.cat(feats),
        "degradation": label_matrix[chosen],
        "predicted": predicted,
    }


def export_conditioning(
    img: np.ndarray, lq_caption: str | None, model: Stage1Model, text_mode: str = "caption"
) -> ConditioningBundle:
    p = model.temperature
    out = conditioning_batch(model, to_tensor(img, p.device, p.dtype), [lq_caption], text_mode)
    return ConditioningBundle(
        text_tokens=out["text"][0],
        image_embed=Embedding(out["image"][0], "image_content"),
        degradation_embed=Embedding(out["degradation"][0], "degradation_text"),
        predicted_label=LABELS[int(out["predicted"][0])],
        text_mode=text_mode,
    )
