"""GT/LQ caption sources: a deterministic mock, a remote HTTP client, and a JSONL cache."""

from __future__ import annotations

import base64
import io
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from .images import to_uint8
from .utils import derive_seed

log = logging.getLogger(__name__)

SOURCES = ("gt", "lq")

# confusion table for simulated LQ-caption errors
CONFUSIONS = {
    "red": ("orange", "purple"),
    "orange": ("red", "yellow"),
    "yellow": ("orange", "white"),
    "green": ("blue", "yellow"),
    "blue": ("purple", "green"),
    "purple": ("blue", "red"),
    "white": ("yellow", "black"),
    "black": ("white", "purple"),
    "circle": ("square", "triangle"),
    "square": ("circle", "triangle"),
    "triangle": ("square", "circle"),
    "striped": ("checkered", "dotted"),
    "checkered": ("striped", "dotted"),
    "dotted": ("checkered", "striped"),
    "gradient": ("sandy", "striped"),
    "sandy": ("gradient", "dotted"),
    "wall": ("floor", "carpet"),
    "floor": ("wall", "table"),
    "sky": ("wall", "sea"),
    "carpet": ("floor", "blanket"),
    "beach": ("desert", "floor"),
}


class CaptionError(RuntimeError):
    pass


class MissingMetadataError(CaptionError):
    pass


class MalformedResponseError(CaptionError):
    pass


class ProviderUnavailableError(CaptionError):
    pass


def _join_objects(objects: list[dict]) -> str:
    parts = [f"a {o['color']} {o['shape']}" for o in objects]
    if not parts:
        raise KeyError("objects")
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def scene_caption(scene: dict) -> str:
    try:
        return f"a photo of {_join_objects(scene['objects'])} on a {scene['background']}"
    except (KeyError, TypeError):
        raise MissingMetadataError(f"scene metadata lacks objects/background: {scene!r}") from None


def mock_caption(image_id: str, scene: dict | None, source: str, seed: int = 0, corruption: float = 0.3) -> str:
    """Template caption; for ``source="lq"`` content words are swapped with probability ``corruption``."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    if not scene:
        raise MissingMetadataError(f"no scene metadata for image {image_id!r}")
    clean = scene_caption(scene)
    if source == "gt" or corruption <= 0:
        return clean
    rng = np.random.default_rng(derive_seed(seed, image_id, "lq-caption"))
    words = clean.split()
    for k, word in enumerate(words):
        key = word.rstrip(",")
        if key in CONFUSIONS and rng.uniform() < corruption:
            options = CONFUSIONS[key]
            words[k] = word.replace(key, options[int(rng.integers(len(options)))])
    return " ".join(words)


# --------------------------------------------------------------------------- remote


def encode_png_base64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def remote_caption(
    image: np.ndarray,
    endpoint: str,
    timeout: float = 10.0,
    retries: int = 3,
    backoff: float = 0.5,
    client: httpx.Client | None = None,
) -> str:
    """POST ``{"image": <base64 png>}`` to ``{endpoint}/caption`` and return the caption.

    Transport failures and non-2xx responses are retried up to ``retries``
    attempts in total with exponential backoff; a malformed 2xx body is not.
    """
    url = endpoint.rstrip("/") + "/caption"
    payload = {"image": encode_png_base64(image)}
    own_client = client is None
    client = client or httpx.Client(timeout=timeout)
    last_error: Exception | None = None
    try:
        for attempt in range(max(1, retries)):
            if attempt:
                time.sleep(backoff * 2 ** (attempt - 1))
            try:
                response = client.post(url, json=payload, timeout=timeout)
            except httpx.HTTPError as exc:
                last_error = exc
                log.warning("caption request %d/%d to %s failed: %s", attempt + 1, retries, url, exc)
                continue
            if not response.is_success:
                last_error = CaptionError(f"HTTP {response.status_code} from {url}")
                log.warning("caption request %d/%d: HTTP %d", attempt + 1, retries, response.status_code)
                continue
            try:
                caption = response.json().get("caption")
            except (ValueError, AttributeError):
                raise MalformedResponseError(f"non-JSON or non-object response from {url}") from None
            if not isinstance(caption, str) or not caption.strip():
                raise MalformedResponseError(f"response from {url} has no caption")
            return caption.strip()
    finally:
        if own_client:
            client.close()
    raise ProviderUnavailableError(f"captioner at {url} unavailable after {retries} attempts: {last_error}")


# --------------------------------------------------------------------------- cache


@dataclass
class CaptionRecord:
    image_id: str
    source: str
    text: str
    provider: str
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if not self.text:
            raise ValueError("caption text must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return self.image_id, self.source


class CaptionCache:
    """Append-only JSONL cache; the newest record per (image_id, source) wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._index: dict[tuple[str, str], CaptionRecord] | None = None
        self._lock = threading.Lock()

    def _load(self) -> dict:
        if self._index is None:
            index = {}
            if self.path.exists():
                with open(self.path, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, 1):
                        if not line.strip():
                            continue
                        try:
                            rec = CaptionRecord(**json.loads(line))
                        except (ValueError, TypeError) as exc:
                            log.warning("%s:%d: skipping corrupt caption record (%s)", self.path, lineno, exc)
                            continue
                        index[rec.key] = rec
            self._index = index
        return self._index

    def get(self, image_id: str, source: str) -> CaptionRecord | None:
        return self._load().get((image_id, source))

    def put(self, record: CaptionRecord) -> None:
        with self._lock:
            index = self._load()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record), ensure_ascii=False) + "\n")
            index[record.key] = record

    def __len__(self) -> int:
        return len(self._load())


def caption_get(cache_file: str | Path, image_id: str, source: str) -> CaptionRecord | None:
    return CaptionCache(cache_file).get(image_id, source)


def caption_put(cache_file: str | Path, record: CaptionRecord) -> None:
    CaptionCache(cache_file).put(record)
