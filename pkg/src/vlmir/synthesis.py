"""Paired LQ/GT corpus synthesis: toy scenes, noise, haze, raindrops, patch sampling."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import DegradationLabel, HazeParams, RaindropParams, SynthParams
from .images import load_image, save_image
from .manifest import DatasetManifest, ManifestError, ManifestRecord
from .utils import derive_seed

log = logging.getLogger(__name__)

SCENES_FILE = "scenes.json"

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.20, 0.70, 0.25),
    "blue": (0.20, 0.30, 0.85),
    "yellow": (0.95, 0.85, 0.20),
    "purple": (0.60, 0.25, 0.70),
    "orange": (0.95, 0.55, 0.15),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("striped wall", "checkered floor", "gradient sky", "dotted carpet", "sandy beach")


# --------------------------------------------------------------------------- toy scenes


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    base = rng.uniform(0.3, 0.7, 3).astype(np.float32)
    if kind == "striped wall":
        freq = rng.uniform(3, 7)
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + 0.3 * yy))
        img = base * (0.75 + 0.25 * pattern[..., None])
    elif kind == "checkered floor":
        tile = int(rng.integers(6, 12))
        check = ((np.arange(size)[:, None] // tile + np.arange(size)[None, :] // tile) % 2).astype(np.float32)
        img = base * (0.7 + 0.3 * check[..., None])
    elif kind == "gradient sky":
        top = np.array([0.35, 0.55, 0.9], np.float32)
        bottom = np.array([0.85, 0.9, 0.97], np.float32)
        img = top + (bottom - top) * yy[..., None]
    elif kind == "dotted carpet":
        step = int(rng.integers(7, 11))
        dots = (((np.arange(size)[:, None] % step) - step // 2) ** 2 + ((np.arange(size)[None, :] % step) - step // 2) ** 2) <= 2
        img = base * (1 - 0.35 * dots[..., None])
    elif kind == "sandy beach":
        sand = np.array([0.86, 0.76, 0.55], np.float32)
        waves = 0.06 * np.sin(2 * np.pi * (2 * yy + rng.uniform(0, 1)))
        img = sand * (0.92 + waves[..., None])
    else:
        raise ValueError(f"unknown background {kind!r}")
    return img.astype(np.float32)


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward triangle
    top, bottom = cy - r, cy + r * 0.8
    half = (yy - top) / (bottom - top) * r
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def generate_scene(seed: int, size: int = 64) -> tuple[np.ndarray, dict]:
    """Colored shapes on a textured background, plus the metadata used for captions."""
    rng = np.random.default_rng(seed)
    background = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
    img = _background(background, size, rng)
    objects = []
    names = list(COLORS)
    for _ in range(int(rng.integers(1, 4))):
        color = names[int(rng.integers(len(names)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        r = rng.uniform(0.12, 0.22) * size
        cy, cx = rng.uniform(r, size - r, 2)
        img[_shape_mask(shape, size, cy, cx, r)] = COLORS[color]
        objects.append({"color": color, "shape": shape})
    return np.clip(img, 0, 1), {"objects": objects, "background": background}


def write_toy_scenes(out_dir: str | Path, n: int, size: int = 64, seed: int = 0, prefix: str = "scene") -> Path:
    """Write ``n`` toy scenes as PNGs plus a ``scenes.json`` metadata sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {}
    for k in range(n):
        scene_id = f"{prefix}{k:04d}"
        img, info = generate_scene(derive_seed(seed, "scene", scene_id), size)
        save_image(img, out_dir / f"{scene_id}.png")
        meta[scene_id] = info
    (out_dir / SCENES_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out_dir


# --------------------------------------------------------------------------- degradations


def add_gaussian_noise(gt: np.ndarray, sigma: float = 50 / 255, seed: int = 0) -> np.ndarray:
    if not 0 < sigma <= 1:
        raise ValueError(f"noise sigma must lie in (0, 1], got {sigma}")
    rng = np.random.default_rng(seed)
    noisy = gt.astype(np.float64) + rng.normal(0.0, sigma, gt.shape)
    return np.clip(noisy, 0, 1).astype(np.float32)


def haze_depth_field(shape: tuple[int, int], grid: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field in [0, 1]: bilinear upsampling of a grid x grid uniform draw."""
    coarse = rng.uniform(0, 1, (grid, grid))
    h, w = shape
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return np.clip(ndimage.map_coordinates(coarse, coords, order=1), 0, 1)


def apply_haze(gt: np.ndarray, depth: np.ndarray, airlight: float, beta: float) -> np.ndarray:
    """Atmospheric scattering: I = J t + A (1 - t), t = exp(-beta * depth)."""
    t = np.exp(-beta * np.asarray(depth, np.float64))[..., None]
    return np.clip(gt * t + airlight * (1 - t), 0, 1).astype(np.float32)


def synth_haze(gt: np.ndarray, params: HazeParams | None = None, seed: int = 0) -> np.ndarray:
    params = params or HazeParams()
    rng = np.random.default_rng(seed)
    airlight = rng.uniform(*params.airlight)
    beta = rng.uniform(*params.beta)
    depth = haze_depth_field(gt.shape[:2], params.grid, rng)
    return apply_haze(gt, depth, airlight, beta)


def _ellipse(shape, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def raindrop_layout(shape: tuple[int, int], params: RaindropParams, rng: np.random.Generator):
    """Place elliptical drops; returns ``(mask, drops)``.

    Drops whose addition would push coverage past ``coverage[1]`` are
    rejected. Placement continues past the sampled count only while coverage
    is still below ``coverage[0]``.
    """
    h, w = shape
    mask = np.zeros(shape, bool)
    drops = []
    if params.count[1] == 0:
        return mask, drops
    target = int(rng.integers(params.count[0], params.count[1] + 1))
    cov_lo, cov_hi = params.coverage
    attempts = 0
    while attempts < 200 and (len(drops) < target or mask.mean() < cov_lo):
        attempts += 1
        r = rng.uniform(*params.radius)
        ry, rx = (r, r * rng.uniform(0.7, 1.0)) if rng.uniform() < 0.5 else (r * rng.uniform(0.7, 1.0), r)
        cy = rng.uniform(min(ry, h / 2), max(h - ry, h / 2))
        cx = rng.uniform(min(rx, w / 2), max(w - rx, w / 2))
        new = mask | _ellipse(shape, cy, cx, ry, rx)
        if new.mean() > cov_hi:
            continue
        mask = new
        drops.append((cy, cx, ry, rx))
    return mask, drops


def synth_raindrop(gt: np.ndarray, params: RaindropParams | None = None, seed: int = 0, return_mask: bool = False):
    """Refraction-like raindrops: each drop shows a flipped, blurred view of its surroundings."""
    params = params or RaindropParams()
    rng = np.random.default_rng(seed)
    mask, drops = raindrop_layout(gt.shape[:2], params, rng)
    if not drops:
        out = gt.astype(np.float32).copy()
        return (out, mask) if return_mask else out

    h, w = gt.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_y, src_x = yy.copy(), xx.copy()
    for cy, cx, ry, rx in drops:
        inside = _ellipse((h, w), cy, cx, ry, rx)
        # looking through a drop shows an inverted, shrunk view of the scene just above it
        src_y[inside] = cy - ry - params.displacement * (yy[inside] - cy)
        src_x[inside] = cx - params.displacement * (xx[inside] - cx)
    refracted = np.stack(
        [ndimage.map_coordinates(gt[..., c], [src_y, src_x], order=1, mode="nearest") for c in range(3)], axis=-1
    )
    if params.blur_sigma > 0:
        refracted = ndimage.gaussian_filter(refracted, sigma=(params.blur_sigma, params.blur_sigma, 0))
    refracted = np.clip(refracted * 1.08 + 0.03, 0, 1)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7) * mask
    alpha = (params.alpha * soft)[..., None]
    out = np.clip(gt * (1 - alpha) + refracted * alpha, 0, 1).astype(np.float32)
    return (out, mask) if return_mask else out


def degrade(gt: np.ndarray, label: DegradationLabel, params: SynthParams, seed: int) -> np.ndarray:
    if label is DegradationLabel.NOISE:
        return add_gaussian_noise(gt, params.noise_sigma, seed)
    if label is DegradationLabel.HAZE:
        return synth_haze(gt, params.haze, seed)
    return synth_raindrop(gt, params.raindrop, seed)


# --------------------------------------------------------------------------- corpus


def build_corpus(
    gt_dir: str | Path,
    tasks,
    params: SynthParams,
    out_dir: str | Path,
    split: str = "train",
    assign: str = "all",
) -> DatasetManifest:
    """Degrade every PNG in ``gt_dir`` and write ``out_dir/manifest.json``.

    ``assign="all"`` gives each GT image every task (records interleaved per
    image); ``assign="cycle"`` gives image k the task ``tasks[k % len(tasks)]``.
    """
    gt_dir, out_dir = Path(gt_dir), Path(out_dir)
    tasks = sorted({DegradationLabel(t) for t in tasks}, key=list(DegradationLabel).index)
    if not tasks:
        raise ValueError("at least one degradation task is required")
    if assign not in ("all", "cycle"):
        raise ValueError("assign must be 'all' or 'cycle'")
    gt_files = sorted(gt_dir.glob("*.png"))
    if not gt_files:
        raise ManifestError(f"no PNG images found in {gt_dir}")
    scenes_path = gt_dir / SCENES_FILE
    scenes = json.loads(scenes_path.read_text()) if scenes_path.exists() else {}
    try:
        (out_dir / "lq").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot write to {out_dir}: {exc}") from None

    records = []
    for k, path in enumerate(gt_files):
        gt = load_image(path)
        stem = path.stem
        image_tasks = tasks if assign == "all" else [tasks[k % len(tasks)]]
        for label in image_tasks:
            rec_id = f"{stem}_{label.value}"
            lq = degrade(gt, label, params, derive_seed(params.seed, rec_id))
            lq_path = out_dir / "lq" / f"{rec_id}.png"
            save_image(lq, lq_path)
            records.append(
                ManifestRecord(
                    id=rec_id,
                    gt_path=os.path.relpath(path, out_dir),
                    lq_path=os.path.relpath(lq_path, out_dir),
                    degradation=label,
                    scene_id=stem,
                    scene=scenes.get(stem),
                )
            )
    metadata = {
        "synth_params": asdict(params),
        "tasks": [t.value for t in tasks],
        "mode": "universal" if len(tasks) > 1 else "degradation-specific",
        "assign": assign,
        "seed": params.seed,
    }
    manifest = DatasetManifest(records, split, metadata)
    manifest.save(out_dir / "manifest.json")
    return manifest


def sample_patch(
    gt: np.ndarray,
    lq: np.ndarray,
    patch_size: int,
    hflip: bool = True,
    vflip: bool = True,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Random crop plus random flips, applied identically to both images."""
    if gt.shape != lq.shape:
        raise ValueError(f"GT {gt.shape} and LQ {lq.shape} must match")
    h, w = gt.shape[:2]
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than patch {patch_size}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    flip_h = hflip and rng.uniform() < 0.5
    flip_v = vflip and rng.uniform() < 0.5
    out = []
    for img in (gt, lq):
        p = img[top : top + patch_size, left : left + patch_size]
        if flip_h:
            p = p[:, ::-1]
        if flip_v:
            p = p[::-1]
        out.append(np.ascontiguousarray(p))
    return out[0], out[1]
