"""COCO-style detection metrics, run comparison and the prompt-length ablation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import Detection, detect, parameter_count

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
IGNORE_OVERLAP = 0.5
METRIC_NAMES = ("mAP50", "mAP75", "mAP50_95")


def iou(a, b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError("boxes must have positive width and height")
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _overlaps_ignored(box, regions) -> bool:
    area = box[2] * box[3]
    for r in regions:
        ix = max(0.0, min(box[0] + box[2], r[0] + r[2]) - max(box[0], r[0]))
        iy = max(0.0, min(box[1] + box[3], r[1] + r[3]) - max(box[1], r[1]))
        if ix * iy > IGNORE_OVERLAP * area:
            return True
    return False


def match_detections(detections, ground_truth, iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching for a single category.

    ``detections``: sequence of ``(image_id, box, score)``; ``ground_truth``:
    mapping image id -> list of boxes. Returns the TP flags in ranked order
    (descending score, ties by input position) and the GT count.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][2], i))
    taken = {k: [False] * len(v) for k, v in ground_truth.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        image_id, box, _ = detections[i]
        best, best_j = iou_threshold, -1
        for j, g in enumerate(ground_truth.get(image_id, ())):
            if taken[image_id][j]:
                continue
            o = iou(box, g)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            taken[image_id][best_j] = True
            tp[rank] = True
    return tp, sum(len(v) for v in ground_truth.values())


def _mean(xs) -> float:
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(xs) / len(xs)


def ap_from_matches(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from ranked TP flags."""
    tps = np.cumsum(tp).astype(np.int64)
    fps = np.cumsum(~tp).astype(np.int64)
    precision = tps / np.maximum(tps + fps, 1)
    recall = tps / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([envelope[i] if i < len(envelope) else 0.0 for i in idx])
    return _mean(sampled)


def average_precision(detections, ground_truth, iou_threshold: float,
                      ignored: Mapping[str, list] | None = None) -> float | None:
    """AP for one category; ``None`` when it has no ground truth."""
    if ignored:
        detections = [d for d in detections if not _overlaps_ignored(d[1], ignored.get(d[0], ()))]
    tp, n_gt = match_detections(detections, ground_truth, iou_threshold)
    if n_gt == 0:
        return None
    return ap_from_matches(tp, n_gt)


@dataclass
class EvalReport:
    mAP50: float | None
    mAP75: float | None
    mAP50_95: float | None
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def metrics(self) -> tuple[float | None, float | None, float | None]:
        return (self.mAP50, self.mAP75, self.mAP50_95)

    def to_dict(self) -> dict:
        return {"mAP50": self.mAP50, "mAP75": self.mAP75, "mAP50_95": self.mAP50_95,
                "per_category": self.per_category, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["mAP50"], d["mAP75"], d["mAP50_95"], d.get("per_category", {}), d.get("counts", {}))

    def render(self) -> str:
        lines = [f"images {self.counts.get('images', 0)}  gt {self.counts.get('gt_boxes', 0)}  "
                 f"detections {self.counts.get('detections', 0)}",
                 f"{'category':<16}{'AP50':>8}{'AP75':>8}{'AP50:95':>9}"]
        for name, row in self.per_category.items():
            lines.append(f"{name:<16}{_pct(row['AP50']):>8}{_pct(row['AP75']):>8}{_pct(row['AP50_95']):>9}")
        lines.append(f"{'mean':<16}{_pct(self.mAP50):>8}{_pct(self.mAP75):>8}{_pct(self.mAP50_95):>9}")
        return "\n".join(lines) + "\n"


def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def map_metrics(detections: Mapping[str, Sequence[Detection]],
                ground_truth: Mapping[str, Sequence[tuple]],
                categories: Sequence[str],
                ignored: Mapping[str, list] | None = None) -> EvalReport:
    """mAP at IoU 0.5, 0.75 and averaged over 0.50:0.05:0.95.

    ``ground_truth`` maps image id -> ``(x, y, w, h, category)`` boxes; images
    absent from ``detections`` simply have no predictions.
    """
    per_cat = {}
    for k, name in enumerate(categories):
        dets = [(img, d.box, d.score) for img, ds in detections.items() for d in ds if d.category == k]
        gts = {img: [b[:4] for b in boxes if b[4] == k] for img, boxes in ground_truth.items()}
        aps = [average_precision(dets, gts, t, ignored) for t in IOU_THRESHOLDS]
        if aps[0] is None:
            continue
        per_cat[name] = {"AP50": aps[0], "AP75": aps[IOU_THRESHOLDS.index(0.75)],
                         "AP50_95": _mean(aps), "by_threshold": aps}
    counts = {"images": len(set(ground_truth) | set(detections)),
              "gt_boxes": sum(len(v) for v in ground_truth.values()),
              "detections": sum(len(v) for v in detections.values())}
    if not per_cat:
        log.warning("no ground-truth boxes; metrics are undefined")
        return EvalReport(None, None, None, {}, counts)
    means = [_mean([row[key] for row in per_cat.values()]) for key in ("AP50", "AP75", "AP50_95")]
    return EvalReport(*means, per_category=per_cat, counts=counts)


def evaluate(detector, dataset, score_threshold=0.05, nms_iou=0.5, max_detections=100) -> EvalReport:
    """Run ``detect`` over every sample of ``dataset`` and score the result."""
    dets, gts, ignored = {}, {}, {}
    for i in range(len(dataset)):
        s = dataset[i]
        dets[s.id] = detect(detector, s.image, score_threshold, nms_iou, max_detections)
        gts[s.id] = list(s.boxes)
        ignored[s.id] = list(s.ignored)
    return map_metrics(dets, gts, dataset.categories, ignored)


# -- run comparison ----------------------------------------------------------


@dataclass
class ComparisonTable:
    names: list[str]
    values: list[tuple[float, float, float]]
    baseline: str

    @property
    def deltas(self) -> list[tuple[float, float, float]]:
        base = self.values[self.names.index(self.baseline)]
        return [tuple(v - b for v, b in zip(row, base)) for row in self.values]

    def render(self) -> str:
        """Aligned text in percentage points; best score per column marked ``*``."""
        best = [max(row[c] for row in self.values) for c in range(3)]
        width = max(10, *(len(n) for n in self.names)) + 2
        lines = [f"{'run':<{width}}" + "".join(f"{m:>18}" for m in METRIC_NAMES)]
        for name, row, delta in zip(self.names, self.values, self.deltas):
            cells = []
            for c in range(3):
                mark = "*" if row[c] == best[c] else " "
                cell = f"{100 * row[c]:.1f}{mark}"
                if name != self.baseline:
                    cell += f" ({100 * delta[c]:+.1f})"
                cells.append(f"{cell:>18}")
            lines.append(f"{name:<{width}}" + "".join(cells))
        lines.append(f"deltas vs. {self.baseline}; * marks the best score per column")
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        return [{"run": n, **dict(zip(METRIC_NAMES, v)),
                 **{f"delta_{m}": d for m, d in zip(METRIC_NAMES, dl)}, "baseline": n == self.baseline}
                for n, v, dl in zip(self.names, self.values, self.deltas)]

    def write(self, out_dir: str | Path, stem: str = "comparison", plot: bool = True) -> list[Path]:
        out_dir = Path(out_dir)
        paths = [out_dir / f"{stem}.txt", out_dir / f"{stem}.jsonl"]
        paths[0].write_text(self.render())
        paths[1].write_text("".join(json.dumps(r) + "\n" for r in self.to_records()))
        if plot:
            paths.append(plot_comparison(self, out_dir / f"{stem}.png"))
        return paths


def _metric_tuple(report) -> tuple[float, float, float]:
    vals = report.metrics() if isinstance(report, EvalReport) else tuple(report)
    return tuple(0.0 if v is None else float(v) for v in vals)


def compare_runs(reports: Sequence[tuple[str, EvalReport | Sequence[float]]] | Mapping[str, EvalReport],
                 baseline: str | None = None) -> ComparisonTable:
    """Rows in input order with deltas against ``baseline`` (default: first run)."""
    items = list(reports.items()) if isinstance(reports, Mapping) else list(reports)
    names = [n for n, _ in items]
    if len(items) < 2:
        raise ValueError("need at least two runs to compare")
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ValueError(f"duplicate run names: {', '.join(dup)}")
    baseline = names[0] if baseline is None else baseline
    if baseline not in names:
        raise ValueError(f"baseline {baseline!r} is not among the runs")
    return ComparisonTable(names, [_metric_tuple(r) for _, r in items], baseline)


def plot_comparison(table: ComparisonTable, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(3)
    width = 0.8 / len(table.names)
    for i, (name, row) in enumerate(zip(table.names, table.values)):
        ax.bar(x + i * width - 0.4 + width / 2, [100 * v for v in row], width, label=name)
    ax.set_xticks(x, METRIC_NAMES)
    ax.set_ylabel("score (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


# -- prompt-length ablation --------------------------------------------------


@dataclass
class AblationRow:
    label: str
    config: object
    report: EvalReport | None
    detector_params: int | None
    error: str | None = None


def ablate_prompt_length(lengths: Sequence[int], config, train_data, eval_data,
                         out_dir: str | Path, include_manual: bool = True) -> list[AblationRow]:
    """Train and evaluate once per prompt length, plus a manual-prompt row.

    Each length row differs from ``config`` only in ``prompt_len``. A failing row
    is recorded with its error and the remaining rows still run.
    """
    from .training import load_checkpoint, train  # circular at import time

    lengths = list(lengths)
    if len(set(lengths)) != len(lengths):
        raise ValueError("duplicate length")
    for n in lengths:
        if not 1 <= n <= 64:
            raise ValueError(f"prompt length {n} outside 1..64")
    out_dir = Path(out_dir)
    jobs = []
    if include_manual:
        jobs.append(("manual", config.replace(prompt_mode="manual")))
    jobs += [(str(n), config.replace(prompt_mode="learnable", prompt_len=n)) for n in lengths]
    rows = []
    for label, cfg in jobs:
        run_dir = out_dir / f"len_{label}"
        try:
            ckpt = train(cfg, train_data, run_dir)
            model = load_checkpoint(ckpt)
            report = evaluate(model.detector, eval_data, cfg.score_threshold, cfg.nms_iou, cfg.max_detections)
            (run_dir / "report.json").write_text(json.dumps(report.to_dict()) + "\n")
            rows.append(AblationRow(label, cfg, report, parameter_count(model.detector)))
        except Exception as e:  # recorded per row; remaining rows continue
            log.error("ablation row %s failed: %s", label, e)
            rows.append(AblationRow(label, cfg, None, None, f"{type(e).__name__}: {e}"))
    return rows


def render_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'prompt':<12}" + "".join(f"{m:>10}" for m in METRIC_NAMES) + f"{'det.params':>12}"]
    for r in rows:
        label = f"manual({r.config.token_dim})" if r.label == "manual" else r.label
        if r.report is None:
            lines.append(f"{label:<12}  failed: {r.error}")
            continue
        lines.append(f"{label:<12}" + "".join(f"{_pct(v):>10}" for v in r.report.metrics())
                     + f"{r.detector_params:>12}")
    return "\n".join(lines) + "\n"


def ablation_records(rows: Sequence[AblationRow]) -> list[dict]:
    return [{"row": r.label, "prompt_len": r.config.prompt_len, "prompt_mode": r.config.prompt_mode,
             "detector_params": r.detector_params, "error": r.error,
             **({m: v for m, v in zip(METRIC_NAMES, r.report.metrics())} if r.report else {})}
            for r in rows]
