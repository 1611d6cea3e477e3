"""Batch entry points: ``leapd <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, parse_overrides
from .datasets import VISDRONE_CATEGORIES, load_visdrone, make_domain_split, write_dataset
from .detector import detect, write_detections
from .evaluation import (
    EvalReport,
    ablate_prompt_length,
    ablation_records,
    compare_runs,
    evaluate,
    render_ablation,
)
from .training import load_checkpoint, strip_domain_modules, train

log = logging.getLogger("leapd")

VERBS = ("gen-data", "train", "eval", "compare", "ablate", "strip", "render-overlays")
DEFAULT_TRAIN_DOMAINS = "low-front-day;high-bird-day"
DEFAULT_HELDOUT_DOMAINS = "medium-side-night"

GT_COLOR = (40, 220, 60)
DET_COLOR = (235, 40, 40)
OVERLAY_SCALE = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leapd", description="learnable-prompt domain-generalised detection")
    p.add_argument("--version", action="version", version=f"leapd {__version__}")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help="output directory (default: $LEAPD_OUT/<verb>)")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="write a synthetic domain-shift split in the VisDrone layout")
    common(g, config=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--per-domain", type=int, default=100)
    g.add_argument("--heldout-per-domain", type=int, default=50)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--train-domains", default=DEFAULT_TRAIN_DOMAINS)
    g.add_argument("--heldout-domains", default=DEFAULT_HELDOUT_DOMAINS)

    t = sub.add_parser("train", help="one-step training (or --two-step baseline)")
    common(t)
    t.add_argument("--data", required=True, help="training split directory")
    t.add_argument("--val", help="evaluation split directory")
    t.add_argument("--two-step", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e, config=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)

    c = sub.add_parser("compare", help="tabulate run reports against a baseline")
    common(c, config=False)
    c.add_argument("--runs", required=True, help="comma-separated run directories holding report.json")
    c.add_argument("--baseline")

    a = sub.add_parser("ablate", help="prompt-length ablation")
    common(a)
    a.add_argument("--lengths", default="4,8,16,32")
    a.add_argument("--data", required=True)
    a.add_argument("--val", required=True)

    s = sub.add_parser("strip", help="drop the vision-language branch from a checkpoint")
    common(s, config=False)
    s.add_argument("--checkpoint", required=True)

    r = sub.add_parser("render-overlays", help="draw ground truth and detections per image")
    common(r, config=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    return p


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    elif os.environ.get("LEAPD_OUT"):
        out = Path(os.environ["LEAPD_OUT"]) / args.verb
    else:
        raise UsageError("no output directory: pass --out or set LEAPD_OUT")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "two_step", False):
        overrides["two_step"] = "true"
    return load_config(args.config, overrides)


def _write_manifest(out: Path, argv, config: RunConfig | None = None, **extra) -> None:
    manifest = {"version": git_describe(), "argv": list(argv), **extra}
    if config is not None:
        manifest.update(config_hash=config.digest(), seed=config.seed, config=dump_config(config))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_domains(text: str) -> list[tuple[str, str, str]]:
    out = []
    for item in text.split(";"):
        parts = tuple(item.strip().split("-"))
        if len(parts) != 3:
            raise UsageError(f"domain {item!r} is not altitude-view-weather")
        out.append(parts)
    return out


def _write_report(out: Path, report: EvalReport) -> None:
    (out / "report.txt").write_text(report.render())
    (out / "report.json").write_text(json.dumps(report.to_dict()) + "\n")
    (out / "report.jsonl").write_text(json.dumps({k: report.to_dict()[k] for k in ("mAP50", "mAP75", "mAP50_95")})
                                      + "\n")


def _load_split(path, categories=None):
    root = Path(path)
    cats_file = root / "categories.txt"
    if categories is None:
        categories = (tuple(cats_file.read_text().split()) if cats_file.exists() else VISDRONE_CATEGORIES)
    return load_visdrone(root, categories=categories)


def cmd_gen_data(args, argv) -> None:
    out = _out_dir(args)
    tr, ho = make_domain_split(_parse_domains(args.train_domains), _parse_domains(args.heldout_domains),
                               args.per_domain, args.seed, args.heldout_per_domain, (args.canvas, args.canvas))
    for idx, name in ((tr, "train"), (ho, "heldout")):
        write_dataset(idx, out / name)
        (out / name / "categories.txt").write_text("\n".join(idx.categories) + "\n")
    _write_manifest(out, argv, seed=args.seed, splits={"train": len(tr), "heldout": len(ho)})
    print(f"wrote {len(tr)} train and {len(ho)} held-out scenes to {out}")


def cmd_train(args, argv) -> None:
    config = _config(args)
    data = _load_split(args.data)
    val = _load_split(args.val, data.categories) if args.val else None
    out = _out_dir(args)
    (out / "config.cfg").write_text(dump_config(config))
    ckpt = train(config, data, out, eval_dataset=val)
    if val is not None:
        model = load_checkpoint(ckpt)
        _write_report(out, evaluate(model.detector, val, config.score_threshold, config.nms_iou,
                                    config.max_detections))
    _write_manifest(out, argv, config, data=str(args.data), val=args.val)
    print(f"checkpoint: {ckpt}")


def cmd_eval(args, argv) -> None:
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    data = _load_split(args.data, model.categories)
    dets = {}
    for i in range(len(data)):
        s = data[i]
        dets[s.id] = detect(model.detector, s.image, cfg.score_threshold, cfg.nms_iou, cfg.max_detections)
    write_detections(out / "detections.txt", dets)
    report = evaluate(model.detector, data, cfg.score_threshold, cfg.nms_iou, cfg.max_detections)
    _write_report(out, report)
    _write_manifest(out, argv, cfg, checkpoint=str(args.checkpoint), data=str(args.data))
    sys.stdout.write(report.render())


def cmd_compare(args, argv) -> None:
    out = _out_dir(args)
    runs = [Path(r) for r in args.runs.split(",") if r]
    reports = []
    for r in runs:
        path = r / "report.json" if r.is_dir() else r
        if not path.exists():
            raise FileNotFoundError(f"no report at {path}")
        name = r.name if r.is_dir() else r.stem
        reports.append((name, EvalReport.from_dict(json.loads(path.read_text()))))
    baseline = Path(args.baseline).name if args.baseline else None
    table = compare_runs(reports, baseline)
    table.write(out)
    _write_manifest(out, argv, runs=[str(r) for r in runs], baseline=table.baseline)
    sys.stdout.write(table.render())


def cmd_ablate(args, argv) -> None:
    config = _config(args)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    if len(set(lengths)) != len(lengths):
        raise UsageError("duplicate length")
    data = _load_split(args.data)
    val = _load_split(args.val, data.categories)
    out = _out_dir(args)
    rows = ablate_prompt_length(lengths, config, data, val, out)
    (out / "ablation.txt").write_text(render_ablation(rows))
    (out / "ablation.jsonl").write_text("".join(json.dumps(r) + "\n" for r in ablation_records(rows)))
    _write_manifest(out, argv, config, lengths=lengths)
    sys.stdout.write(render_ablation(rows))
    if any(r.error for r in rows):
        raise RuntimeError("some ablation rows failed")


def cmd_strip(args, argv) -> None:
    out = _out_dir(args)
    dst = strip_domain_modules(args.checkpoint, out / "checkpoint.leapd")
    _write_manifest(out, argv, source=str(args.checkpoint))
    print(f"inference checkpoint: {dst}")


def render_overlays(checkpoint, dataset, out_dir, min_score: float = 0.5,
                    max_boxes: int = 20) -> tuple[list[Path], int]:
    """One PNG per sample: ground truth in green, detections in red with scores.

    Only the ``max_boxes`` best detections scoring at least ``min_score`` are
    drawn. Returns the written paths and the number of samples skipped because
    their image could not be read.
    """
    import numpy as np
    from PIL import Image, ImageDraw

    model = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    cfg = model.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, skipped = [], 0
    for i in range(len(dataset)):
        try:
            s = dataset[i]
        except (OSError, ValueError) as e:
            log.warning("skipping sample %d: %s", i, e)
            skipped += 1
            continue
        dets = detect(model.detector, s.image, cfg.score_threshold, cfg.nms_iou, cfg.max_detections)
        k = OVERLAY_SCALE
        pixels = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        im = Image.fromarray(pixels).resize((pixels.shape[1] * k, pixels.shape[0] * k), Image.NEAREST)
        draw = ImageDraw.Draw(im)
        for x, y, w, h, _ in s.boxes:
            draw.rectangle([x * k, y * k, (x + w) * k - 1, (y + h) * k - 1], outline=GT_COLOR, width=2)
        for d in [d for d in dets if d.score >= min_score][:max_boxes]:
            x, y, w, h = d.box
            draw.rectangle([x * k, y * k, (x + w) * k - 1, (y + h) * k - 1], outline=DET_COLOR, width=1)
            draw.text((x * k + 2, y * k + 1), f"{d.score:.2f}", fill=DET_COLOR)
        path = out_dir / f"{s.id}.png"
        im.save(path)
        paths.append(path)
    return paths, skipped


def cmd_render_overlays(args, argv) -> None:
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    data = _load_split(args.data, model.categories)
    paths, skipped = render_overlays(model, data, out / "overlays")
    _write_manifest(out, argv, checkpoint=str(args.checkpoint), data=str(args.data), skipped=skipped)
    print(f"wrote {len(paths)} overlays ({skipped} skipped)")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "ablate": cmd_ablate, "strip": cmd_strip, "render-overlays": cmd_render_overlays}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.verb:
            raise UsageError("missing verb; one of " + ", ".join(VERBS))
        COMMANDS[args.verb](args, argv)
    except (UsageError, ConfigError) as e:
        print(str(e), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return 0 if not e.code else 1
    except Exception as e:
        print(f"leapd: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
