"""Paired LQ/GT dataset manifests (JSON, paths relative to the manifest file)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DegradationLabel
from .images import load_image

SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    id: str
    gt_path: str
    lq_path: str
    degradation: DegradationLabel
    gt_caption: str | None = None
    lq_caption: str | None = None
    scene_id: str | None = None
    scene: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degradation"] = self.degradation.value
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"
    metadata: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if check_files:
                for attr in ("gt_path", "lq_path"):
                    if not self.resolve(getattr(rec, attr)).is_file():
                        raise ManifestError(f"record {rec.id}: {attr} {getattr(rec, attr)!r} does not exist")

    def load_pair(self, rec: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
        gt = load_image(self.resolve(rec.gt_path))
        lq = load_image(self.resolve(rec.lq_path))
        if gt.shape != lq.shape:
            raise ManifestError(f"record {rec.id}: GT {gt.shape} and LQ {lq.shape} differ")
        return gt, lq

    def labels(self) -> list[DegradationLabel]:
        return sorted({r.degradation for r in self.records}, key=list(DegradationLabel).index)

    def to_dict(self) -> dict:
        return {"split": self.split, "metadata": self.metadata, "records": [r.to_dict() for r in self.records]}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        self.root = path.parent
        return path


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    try:
        records = []
        for raw in data["records"]:
            raw = dict(raw)
            raw["degradation"] = DegradationLabel(raw["degradation"])
            records.append(ManifestRecord(**raw))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed record in {path}: {exc}") from None
    manifest = DatasetManifest(records, data.get("split", "train"), data.get("metadata", {}), root=path.parent)
    if validate:
        manifest.validate()
    return manifest
