"""Dataset-level evaluation, metric plugins and comparison tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .images import load_image
from .manifest import DatasetManifest
from .metrics import BUILTIN_METRICS

log = logging.getLogger(__name__)

# True when larger is better
POLARITY = {
    "psnr": True,
    "ssim": True,
    "y_psnr": True,
    "y_ssim": True,
    "lpips": False,
    "fid": False,
    "loss": False,
}
FAILED = "failed"


class MissingRestoredError(FileNotFoundError):
    def __init__(self, missing: list[str], directory: Path):
        self.missing = missing
        super().__init__(f"{len(missing)} restored images missing from {directory}: {', '.join(missing)}")


class MetricPlugin(Protocol):
    """Perceptual-metric hook.

    ``compute`` receives aligned lists of restored and GT images plus their ids
    and returns either a per-image ``{id: value}`` map or a single
    distribution-level scalar.
    """

    name: str
    higher_is_better: bool

    def compute(self, restored: list[np.ndarray], gt: list[np.ndarray], ids: list[str]) -> dict[str, float] | float:
        ...


@dataclass
class MetricReport:
    name: str
    per_image: dict[str, dict[str, float]]
    aggregate: dict[str, float | str]
    metadata: dict = field(default_factory=dict)
    inf_counts: dict[str, int] = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return list(self.aggregate)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metadata": self.metadata,
            "aggregate": {k: _fmt_json(v) for k, v in self.aggregate.items()},
            "inf_counts": self.inf_counts,
            "per_image": {i: {k: _fmt_json(v) for k, v in m.items()} for i, m in self.per_image.items()},
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _fmt_json(v):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def finite_mean(values) -> tuple[float, int]:
    """Mean over finite values and the number of infinite values left out."""
    vals = [v for v in values if isinstance(v, (int, float))]
    finite = [v for v in vals if math.isfinite(v)]
    n_inf = len(vals) - len(finite)
    if not finite:
        return (math.inf if n_inf else math.nan), n_inf
    return float(np.mean(finite)), n_inf


def evaluate_pairs(
    restored: list[np.ndarray],
    gt: list[np.ndarray],
    ids: list[str],
    plugins=(),
    name: str = "restored",
    metadata: dict | None = None,
) -> MetricReport:
    per_image: dict[str, dict] = {}
    for rid, r, g in zip(ids, restored, gt):
        if r.shape != g.shape:
            raise ValueError(f"image {rid}: restored {r.shape} and GT {g.shape} differ")
        per_image[rid] = {m: fn(r, g) for m, fn in BUILTIN_METRICS.items()}

    scalar_plugins: dict[str, float | str] = {}
    for plugin in plugins:
        try:
            value = plugin.compute(restored, gt, ids)
        except Exception as exc:  # a plugin must never take the built-ins down with it
            log.warning("metric plugin %s failed: %s", plugin.name, exc)
            scalar_plugins[plugin.name] = FAILED
            continue
        if isinstance(value, dict):
            for rid in ids:
                per_image[rid][plugin.name] = float(value[rid])
        else:
            scalar_plugins[plugin.name] = float(value)

    aggregate: dict[str, float | str] = {}
    inf_counts: dict[str, int] = {}
    per_image_cols = list(per_image[ids[0]]) if ids else list(BUILTIN_METRICS)
    for col in per_image_cols:
        aggregate[col], inf_counts[col] = finite_mean(per_image[i][col] for i in ids)
    aggregate.update(scalar_plugins)
    meta = {"y_conversion": "BT.601 full range", "region": "full image", "n_images": len(ids)}
    meta.update(metadata or {})
    meta["polarity"] = {p.name: bool(p.higher_is_better) for p in plugins}
    return MetricReport(name, per_image, aggregate, meta, inf_counts)


def evaluate_dataset(
    manifest: DatasetManifest,
    restored_dir: str | Path,
    plugins=(),
    name: str | None = None,
    metadata: dict | None = None,
) -> MetricReport:
    """Score ``restored_dir/<id>.png`` against every manifest record's GT."""
    restored_dir = Path(restored_dir)
    ids = [r.id for r in manifest.records]
    missing = [i for i in ids if not (restored_dir / f"{i}.png").is_file()]
    if missing:
        raise MissingRestoredError(missing, restored_dir)
    restored = [load_image(restored_dir / f"{i}.png") for i in ids]
    gt = [load_image(manifest.resolve(r.gt_path)) for r in manifest.records]
    return evaluate_pairs(restored, gt, ids, plugins, name or restored_dir.name, metadata)


# --------------------------------------------------------------------------- tables


def _higher_is_better(column: str, reports: list[MetricReport]) -> bool:
    for rep in reports:
        if column in rep.metadata.get("polarity", {}):
            return rep.metadata["polarity"][column]
    return POLARITY.get(column, True)


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


def emit_table(reports: list[MetricReport], fmt: str = "text", title: str | None = None) -> str:
    """Render reports as rows; the best value of each column is suffixed with ``*``."""
    if not reports:
        raise ValueError("emit_table needs at least one report")
    columns = reports[0].columns
    for rep in reports[1:]:
        if rep.columns != columns:
            raise ValueError(f"report {rep.name!r} has columns {rep.columns}, expected {columns}")
    best = {}
    for col in columns:
        vals = [(rep.aggregate[col], k) for k, rep in enumerate(reports) if not isinstance(rep.aggregate[col], str)]
        vals = [(v, k) for v, k in vals if not math.isnan(v)]
        if len(reports) > 1 and vals:
            pick = max if _higher_is_better(col, reports) else min
            target = pick(v for v, _ in vals)
            best[col] = {k for v, k in vals if v == target}
    rows = [
        [rep.name] + [_cell(rep.aggregate[c]) + ("*" if k in best.get(c, ()) else "") for c in columns]
        for k, rep in enumerate(reports)
    ]
    header = ["variant"] + columns
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    widths = [max(len(r[j]) for r in [header] + rows) for j in range(len(header))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    notes = [
        f"{rep.name}: {n} image(s) with infinite {col} excluded from the mean"
        for rep in reports
        for col, n in rep.inf_counts.items()
        if n
    ]
    lines += ["", *notes] if notes else []
    lines.append("* best value per column")
    return "\n".join(lines) + "\n"
