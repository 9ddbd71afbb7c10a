"""Seeding and schedule helpers shared by the trainers."""

from __future__ import annotations

import hashlib
import math
import random

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts, e.g. ``derive_seed(seed, image_id)``."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing to zero; ``step`` counts from 0."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def state_fingerprint(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
