"""CLIP-style encoders used in stage 1.

A hash tokenizer feeds a transformer text tower; the same tower, with low-rank
adapters on its query/value projections, encodes LQ captions. A ViT-style
image tower produces the content embedding and a small conv net predicts the
degradation embedding. Every embedding leaving this module is L2-normalized.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig, LoraAdapterConfig
from .images import to_tensor

PAD_ID = 0
BOT_ID = 1
EOT_ID = 2
NUM_SPECIAL_TOKENS = 3

EMBEDDING_KINDS = ("image_content", "caption_gt", "caption_lq", "degradation_image", "degradation_text")


class ZeroVectorError(ValueError):
    pass


class ImageSizeError(ValueError):
    pass


class LoraShapeError(ValueError):
    pass


# --------------------------------------------------------------------------- tokenizer


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # int64, shape (context_length,)
    length: int


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return NUM_SPECIAL_TOKENS + int.from_bytes(digest, "little") % (vocab_size - NUM_SPECIAL_TOKENS)


def tokenize(text: str, context_length: int = 32, vocab_size: int = 4096) -> TokenSequence:
    """Lowercase, whitespace-split and hash ``text`` into a padded id sequence.

    The sequence always starts with BOT and ends with EOT; words beyond
    ``context_length - 2`` are dropped.
    """
    if context_length < 2:
        raise ValueError("context_length must be >= 2")
    words = text.lower().split()[: context_length - 2]
    ids = [BOT_ID, *(_word_id(w, vocab_size) for w in words), EOT_ID]
    out = np.full(context_length, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return TokenSequence(out, len(ids))


def tokenize_batch(texts, context_length: int = 32, vocab_size: int = 4096) -> torch.Tensor:
    return torch.from_numpy(np.stack([tokenize(t, context_length, vocab_size).ids for t in texts]))


# --------------------------------------------------------------------------- embeddings


@dataclass
class Embedding:
    vector: torch.Tensor  # 1-D, unit norm
    kind: str

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def normalize_embedding(v):
    """Scale ``v`` (last axis) to unit L2 norm. Accepts numpy arrays or tensors."""
    as_numpy = isinstance(v, np.ndarray) or isinstance(v, (list, tuple))
    t = torch.as_tensor(np.asarray(v) if as_numpy else v)
    if not t.is_floating_point():
        t = t.to(torch.float64 if as_numpy else torch.float32)
    norm = torch.linalg.vector_norm(t, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ZeroVectorError("cannot normalize a zero vector")
    out = t / norm
    return out.numpy() if as_numpy else out


# --------------------------------------------------------------------------- LoRA


class LoraDelta(nn.Module):
    """Low-rank update ``scale * up @ down``; ``up`` starts at zero."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float):
        super().__init__()
        self.scale = scale
        self.down = nn.Parameter(torch.empty(rank, in_features))
        self.up = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.kaiming_uniform_(self.down, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * F.linear(F.linear(x, self.down), self.up)


class LoraAdapters(nn.Module):
    """One LoraDelta per (layer, target projection) of a TextEncoder."""

    def __init__(self, config: LoraAdapterConfig, encoder_config: EncoderConfig):
        super().__init__()
        width = encoder_config.text_width
        if config.rank > min(width, encoder_config.embed_dim):
            raise LoraShapeError(
                f"LoRA rank {config.rank} exceeds min(text_width={width}, embed_dim={encoder_config.embed_dim})"
            )
        self.config = config
        self.width = width
        self.layers = nn.ModuleList(
            nn.ModuleDict({t: LoraDelta(width, width, config.rank, config.scale) for t in config.targets})
            for _ in range(encoder_config.text_layers)
        )

    def check_compatible(self, encoder: "TextEncoder") -> None:
        if len(self.layers) != len(encoder.blocks) or self.width != encoder.width:
            raise LoraShapeError(
                f"adapters built for {len(self.layers)} layers of width {self.width}, "
                f"encoder has {len(encoder.blocks)} layers of width {encoder.width}"
            )
        for layer in self.layers:
            for delta in layer.values():
                if delta.down.shape[1] != self.width or delta.up.shape[0] != self.width:
                    raise LoraShapeError("adapter projection shape does not match encoder width")
                if delta.down.shape[0] != delta.up.shape[1]:
                    raise LoraShapeError("adapter down/up ranks disagree")


# --------------------------------------------------------------------------- transformer


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, key_padding_mask=None, lora: nn.ModuleDict | None = None):
        q, k, v = self.query(x), self.key(x), self.value(x)
        if lora is not None:
            if "query" in lora:
                q = q + lora["query"](x)
            if "value" in lora:
                v = v + lora["value"](x)
        b, n, c = x.shape
        dh = c // self.heads
        q, k, v = (t.view(b, n, self.heads, dh).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, key_padding_mask=None, lora=None):
        x = x + self.attn(self.ln_1(x), key_padding_mask, lora)
        return x + self.mlp(self.ln_2(x))


class TextEncoder(nn.Module):
    """Transformer text tower.

    Returns ``(pooled, token_features)``: ``token_features`` are the projected
    per-position features (B, L, d) before normalization, and ``pooled`` is the
    L2-normalized mean over the non-pad positions.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.width = config.text_width
        self.token_embedding = nn.Embedding(config.vocab_size, config.text_width)
        self.positional_embedding = nn.Parameter(torch.randn(config.context_length, config.text_width) * 0.01)
        self.blocks = nn.ModuleList(Block(config.text_width, config.text_heads) for _ in range(config.text_layers))
        self.ln_final = nn.LayerNorm(config.text_width)
        self.projection = nn.Linear(config.text_width, config.embed_dim, bias=False)
        nn.init.normal_(self.token_embedding.weight, std=0.02)

    def forward(self, ids: torch.Tensor, adapters: LoraAdapters | None = None):
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.config.context_length:
            raise ValueError(f"expected {self.config.context_length} token positions, got {ids.shape[1]}")
        if adapters is not None:
            adapters.check_compatible(self)
        pad = ids == PAD_ID
        x = self.token_embedding(ids) + self.positional_embedding
        for i, block in enumerate(self.blocks):
            x = block(x, pad, None if adapters is None else adapters.layers[i])
        tokens = self.projection(self.ln_final(x))
        keep = (~pad).to(tokens.dtype)[..., None]
        pooled = (tokens * keep).sum(1) / keep.sum(1)
        return normalize_embedding(pooled), tokens


def _prepare_images(images: torch.Tensor, config: EncoderConfig) -> torch.Tensor:
    if images.ndim == 3:
        images = images[None]
    h, w = images.shape[-2:]
    if min(h, w) < config.image_patch:
        raise ImageSizeError(f"image {h}x{w} is smaller than one {config.image_patch}px patch")
    if (h, w) != (config.image_size, config.image_size):
        images = F.interpolate(images, size=(config.image_size,) * 2, mode="bilinear", align_corners=False)
    return images


class ImageEncoder(nn.Module):
    """Patch transformer producing the clean-content embedding."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        grid = config.image_size // config.image_patch
        self.patchify = nn.Conv2d(3, config.image_width, config.image_patch, stride=config.image_patch)
        self.positional_embedding = nn.Parameter(torch.randn(grid * grid, config.image_width) * 0.02)
        self.blocks = nn.ModuleList(Block(config.image_width, config.image_heads) for _ in range(config.image_layers))
        self.ln_post = nn.LayerNorm(config.image_width)
        self.projection = nn.Linear(config.image_width, config.embed_dim, bias=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patchify(_prepare_images(images, self.config) * 2 - 1)
        x = x.flatten(2).transpose(1, 2) + self.positional_embedding
        for block in self.blocks:
            x = block(x)
        return normalize_embedding(self.projection(self.ln_post(x).mean(1)))


class DegradationPredictor(nn.Module):
    """Small conv net mapping an LQ image to a degradation embedding.

    Mean and standard-deviation pooling of the last feature map are both fed to
    the head: noise mostly shows up in the spread of high-frequency responses.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.predictor_width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.head = nn.Sequential(
            nn.Linear(8 * w, config.embed_dim), nn.GELU(), nn.Linear(config.embed_dim, config.embed_dim)
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        f = self.features(_prepare_images(images, self.config) * 2 - 1).flatten(2)
        mean = f.mean(-1)
        std = (f.var(-1, unbiased=False) + 1e-6).sqrt()
        return normalize_embedding(self.head(torch.cat([mean, std], dim=1)))


# --------------------------------------------------------------------------- single-item API


def _param_device(module: nn.Module):
    p = next(module.parameters())
    return p.device, p.dtype


def encode_image(img: np.ndarray, encoder: ImageEncoder) -> Embedding:
    device, dtype = _param_device(encoder)
    with torch.no_grad():
        v = encoder(to_tensor(img, device, dtype))[0]
    return Embedding(v, "image_content")


def predict_degradation(img: np.ndarray, predictor: DegradationPredictor) -> Embedding:
    device, dtype = _param_device(predictor)
    with torch.no_grad():
        v = predictor(to_tensor(img, device, dtype))[0]
    return Embedding(v, "degradation_image")


def _encode_tokens(tokens: TokenSequence, encoder: TextEncoder, adapters, kind: str):
    device, _ = _param_device(encoder)
    with torch.no_grad():
        pooled, feats = encoder(torch.from_numpy(tokens.ids).to(device)[None], adapters)
    return Embedding(pooled[0], kind), feats[0]


def encode_text_frozen(tokens: TokenSequence, encoder: TextEncoder, kind: str = "caption_gt"):
    """Pooled embedding and per-position features from the frozen text tower."""
    return _encode_tokens(tokens, encoder, None, kind)


def encode_text_lq(tokens: TokenSequence, encoder: TextEncoder, adapters: LoraAdapters):
    """Same tower with LoRA adapters; identical to the frozen path while every ``up`` is zero."""
    return _encode_tokens(tokens, encoder, adapters, "caption_lq")
