"""``vlmir`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import httpx

from .alignment import load_stage1, train_stage1
from .captions import CaptionCache, CaptionRecord, mock_caption, remote_caption
from .config import TEXT_MODES, ConfigError, DegradationLabel, RunConfig, load_config, resolve_device
from .evaluation import MetricReport, emit_table, evaluate_dataset, evaluate_pairs
from .images import load_image, save_image
from .manifest import DatasetManifest, load_manifest
from .restoration import IncompatibleCheckpointError, check_compatible, load_stage2, restore_batch, train_stage2
from .sde import NoiseSchedule
from .synthesis import build_corpus, write_toy_scenes
from .utils import derive_seed

log = logging.getLogger("vlmir")

VARIANTS = {"both": (True, True), "sca": (True, False), "ica": (False, True)}
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _run_dir(args, config: RunConfig, command: str) -> Path:
    """``--out`` if given, else ``<runs root>/<command>-<timestamp>-<config hash>``."""
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = Path(args.runs_root or config.output_dir)
        name = args.run_name or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{config.digest()}"
        out = root / name
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    return out


def _parse_tasks(text: str) -> list[DegradationLabel]:
    tasks = [DegradationLabel.parse(t.strip()) for t in text.split(",") if t.strip()]
    if not tasks:
        raise ConfigError("--tasks needs at least one of noise, haze, raindrop")
    return tasks


def _load_stage1_for(config: RunConfig, path, device):
    model, meta, _ = load_stage1(path, device)
    if meta["embed_dim"] != config.unet.cond_dim:
        raise IncompatibleCheckpointError(
            f"stage-1 checkpoint {path} has embed_dim {meta['embed_dim']} but unet.cond_dim is {config.unet.cond_dim}"
        )
    return model.eval()


# --------------------------------------------------------------------------- commands


def cmd_synth(args, config: RunConfig) -> int:
    tasks = _parse_tasks(args.tasks)
    out = _run_dir(args, config, "synth")
    params = config.synth
    if args.gt:
        m = build_corpus(args.gt, tasks, params, out, split=args.split, assign=args.assign)
        print(out / "manifest.json")
        log.info("wrote %d records", len(m))
        return EXIT_OK
    c = config.corpus
    for split, n, prefix in (("train", c.n_train, "train"), ("test", c.n_test, "test")):
        gt_dir = write_toy_scenes(out / "gt" / split, n, c.image_size, derive_seed(params.seed, "scenes", split), prefix)
        m = build_corpus(gt_dir, tasks, params, out / split, split=split, assign=args.assign)
        print(out / split / "manifest.json")
        log.info("%s: %d records", split, len(m))
    return EXIT_OK


def cmd_caption(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    cache = CaptionCache(args.cache or Path(args.manifest).parent / "captions.jsonl")
    client = httpx.Client(timeout=args.timeout) if args.provider == "remote" else None
    if args.provider == "remote" and not args.endpoint:
        raise UsageError("--provider remote needs --endpoint")
    fetched = hits = 0

    def get(image_id: str, source: str, image_path: Path, scene, cache_id: str) -> str:
        nonlocal fetched, hits
        rec = cache.get(cache_id, source)
        if rec is not None and rec.provider == args.provider:
            hits += 1
            return rec.text
        if args.provider == "mock":
            text = mock_caption(image_id, scene, source, config.seed, config.corpus.caption_corruption)
        else:
            text = remote_caption(load_image(image_path), args.endpoint, args.timeout, args.retries, client=client)
        fetched += 1
        cache.put(CaptionRecord(cache_id, source, text, args.provider))
        return text

    try:
        new = []
        for r in manifest.records:
            gt_key = r.scene_id or Path(r.gt_path).stem
            gt_cap = get(gt_key, "gt", manifest.resolve(r.gt_path), r.scene, gt_key)
            lq_cap = get(r.id, "lq", manifest.resolve(r.lq_path), r.scene, r.id)
            new.append((gt_cap, lq_cap))
    finally:
        if client is not None:
            client.close()
    # only touch the manifest once every caption is available
    for r, (gt_cap, lq_cap) in zip(manifest.records, new):
        r.gt_caption, r.lq_caption = gt_cap, lq_cap
    manifest.save(args.manifest)
    print(f"captioned {len(manifest)} records ({fetched} generated, {hits} cache hits)")
    return EXIT_OK


def cmd_train_stage1(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    out = _run_dir(args, config, "train-stage1")
    result = train_stage1(manifest, config, out, resume=args.resume, device=resolve_device())
    print(result.checkpoint)
    return EXIT_OK


def _apply_stage2_flags(args, config: RunConfig) -> None:
    if getattr(args, "variant", None):
        config.unet.use_sca, config.unet.use_ica = VARIANTS[args.variant]
    if getattr(args, "text_mode", None):
        config.stage2.text_mode = args.text_mode
    if getattr(args, "steps", None):
        config.stage2.steps = args.steps


def cmd_train_stage2(args, config: RunConfig) -> int:
    _apply_stage2_flags(args, config)
    device = resolve_device()
    stage1 = _load_stage1_for(config, args.stage1, device)
    manifest = load_manifest(args.manifest)
    out = _run_dir(args, config, "train-stage2")
    result = train_stage2(manifest, stage1, config, out, device)
    print(result.checkpoint)
    return EXIT_OK


def _read_captions(path) -> dict[str, str]:
    """Captions keyed by image stem, from a ``{stem: caption}`` JSON or a dataset manifest."""
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "records" in data:
        return {Path(r["lq_path"]).stem: r.get("lq_caption") for r in data["records"] if r.get("lq_caption")}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object of captions or a manifest")
    return {str(k): str(v) for k, v in data.items()}


def cmd_restore(args, config: RunConfig) -> int:
    device = resolve_device()
    net, trained_schedule, meta = load_stage2(args.stage2, device)
    stage1, _, _ = load_stage1(args.stage1, device)
    schedule = NoiseSchedule.from_config(config.schedule) if args.config else trained_schedule
    check_compatible(stage1, net, schedule, trained_schedule)
    text_mode = args.text_mode or meta.get("text_mode", "caption")

    src = Path(args.input)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files or not all(f.is_file() for f in files):
        raise UsageError(f"no input PNG images at {src}")
    captions = _read_captions(args.captions)
    if args.caption is not None:
        captions.update({f.stem: args.caption for f in files})
    missing = [f.stem for f in files if f.stem not in captions]
    if text_mode == "caption" and missing:
        raise UsageError(f"text mode 'caption' needs captions for: {', '.join(missing)}")

    images = [load_image(f) for f in files]
    restored = restore_batch(
        images,
        [captions.get(f.stem) for f in files],
        stage1,
        net,
        schedule,
        seed=config.seed,
        text_mode=text_mode,
        keys=[f.stem for f in files],
        trace_dir=args.trace,
    )
    out = Path(args.out)
    if not src.is_dir() and out.suffix.lower() == ".png":
        targets = [out]
    else:
        targets = [out / f"{f.stem}.png" for f in files]
    for img, target in zip(restored, targets):
        save_image(img, target)
    print(out)
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(manifest, args.restored, metadata={"seed": config.seed, "split": manifest.split})
    if args.report:
        report.save(args.report)
    sys.stdout.write(emit_table([report], args.format))
    return EXIT_OK


def _ablation_report(name, manifest: DatasetManifest, stage1, net, schedule, text_mode, seed) -> MetricReport:
    pairs = [manifest.load_pair(r) for r in manifest.records]
    restored = restore_batch(
        [lq for _, lq in pairs],
        [r.lq_caption for r in manifest.records],
        stage1,
        net,
        schedule,
        seed=seed,
        text_mode=text_mode,
        keys=[r.id for r in manifest.records],
    )
    return evaluate_pairs(restored, [g for g, _ in pairs], [r.id for r in manifest.records], name=name)


def cmd_ablate(args, config: RunConfig) -> int:
    """Train and score the module variants (SCA / ICA / both) and text variants (caption / fixed / null)."""
    if args.steps:
        config.stage2.steps = args.steps
    device = resolve_device()
    stage1 = _load_stage1_for(config, args.stage1, device)
    train_m = load_manifest(args.manifest)
    test_m = load_manifest(args.test_manifest) if args.test_manifest else train_m
    out = _run_dir(args, config, "ablate")

    def run(variant: str, text_mode: str) -> MetricReport:
        cfg = load_config(args.config, args.preset)
        cfg.seed = config.seed
        cfg.stage2.steps = config.stage2.steps
        cfg.unet.use_sca, cfg.unet.use_ica = VARIANTS[variant]
        cfg.stage2.text_mode = text_mode
        log.info("ablation: variant=%s text=%s", variant, text_mode)
        result = train_stage2(train_m, stage1, cfg, out / f"{variant}-{text_mode}", device)
        return _ablation_report(variant, test_m, stage1, result.net, result.schedule, text_mode, cfg.seed)

    modules = {v: run(v, "caption") for v in ("sca", "ica", "both")}
    texts = {"caption": modules["both"]}
    texts.update({t: run("both", t) for t in ("fixed", "null")})
    module_rows = [modules[v] for v in ("sca", "ica", "both")]
    module_rows[2].name = "sca+ica"
    text_rows = []
    for t in TEXT_MODES:
        rep = texts[t]
        text_rows.append(MetricReport(t, rep.per_image, rep.aggregate, rep.metadata, rep.inf_counts))

    sections = [
        ("module variants", "module_variants", module_rows),
        ("text variants", "text_variants", text_rows),
    ]
    for title, stem, rows in sections:
        (out / f"{stem}.csv").write_text(emit_table(rows, "csv"))
        text = emit_table(rows, "text", title=title)
        (out / f"{stem}.txt").write_text(text)
        sys.stdout.write(text + "\n")
    psnr = lambda r: r.aggregate["psnr"]  # noqa: E731
    sca, ica, both = module_rows
    caption, fixed, null = text_rows
    # expected PSNR orderings; reported only, toy-scale runs are too noisy to gate on
    ordering = {
        "psnr sca+ica > ica > sca": psnr(both) > psnr(ica) > psnr(sca),
        "psnr caption > fixed > null": psnr(caption) > psnr(fixed) > psnr(null),
    }
    (out / "ordering.json").write_text(json.dumps(ordering, indent=2))
    for k, v in ordering.items():
        print(f"ordering {k}: {'holds' if v else 'does not hold'}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults to the toy configuration)")
    common.add_argument("--preset", choices=["toy", "vit_b32"], help="encoder size preset")
    common.add_argument("--runs-root", help="parent directory for run outputs (default: config output_dir)")
    common.add_argument("--run-name", help="run directory name instead of <command>-<time>-<hash>")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vlmir", description="Vision-language guided image restoration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="build a degraded LQ/GT corpus")
    p.add_argument("--tasks", default="noise,haze,raindrop", help="comma-separated degradations")
    p.add_argument("--gt", help="directory of GT PNGs (default: generate toy scenes)")
    p.add_argument("--split", choices=["train", "test"], default="train", help="split label when --gt is given")
    p.add_argument("--assign", choices=["all", "cycle"], default="all", help="every task per image, or one each")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("caption", parents=[common], help="fill GT/LQ captions in a manifest")
    p.add_argument("manifest")
    p.add_argument("--provider", choices=["mock", "remote"], default="mock")
    p.add_argument("--endpoint")
    p.add_argument("--cache", help="JSONL cache (default: captions.jsonl next to the manifest)")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("train-stage1", parents=[common], help="train the alignment model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="stage-1 checkpoint directory to continue from")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", parents=[common], help="train the conditional restorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1", required=True)
    p.add_argument("--variant", choices=list(VARIANTS), help="cross-attention blocks to include")
    p.add_argument("--text-mode", choices=TEXT_MODES)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("restore", parents=[common], help="restore a PNG or a directory of PNGs")
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--captions", help="JSON {stem: caption} or a manifest with lq_caption fields")
    p.add_argument("--caption", help="caption used for every input")
    p.add_argument("--text-mode", choices=TEXT_MODES)
    p.add_argument("--trace", help="directory for per-step sampler states")
    p.add_argument("--out", required=True, help="output PNG (single input) or directory")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", parents=[common], help="score restored images against GT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--restored", required=True)
    p.add_argument("--report", help="write the full report as JSON")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="module and text-input ablations")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--test-manifest", help="evaluation manifest (default: the training manifest)")
    p.add_argument("--stage1", required=True)
    p.add_argument("--steps", type=int, help="stage-2 steps per variant")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.preset)
        return args.func(args, config)
    except (ConfigError, UsageError, IncompatibleCheckpointError) as exc:
        print(f"vlmir {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"vlmir {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
