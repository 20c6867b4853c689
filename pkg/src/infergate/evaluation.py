"""Detection metrics: IoU matching, AP/mAP@50, false-positive share, latency.

Boxes are ``(x0, y0, x1, y1)`` with an exclusive bottom-right corner, so a
box's area is ``(x1 - x0) * (y1 - y0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FixtureError(ValueError):
    pass


def area(box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def iou(a, b) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    area_a, area_b = area(a), area(b)
    if area_a == 0 or area_b == 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class Truth:
    label: int
    box: tuple[int, int, int, int]


@dataclass(frozen=True)
class Prediction:
    label: int
    confidence: float
    box: tuple[int, int, int, int]


@dataclass
class EvalRecord:
    frame_id: object
    truths: list[Truth]
    predictions: list[Prediction]
    latency_us: int | None = None
    crowding: int = 0

    def __post_init__(self):
        for t in self.truths:
            _check_box(t.box)
        for p in self.predictions:
            _check_box(p.box)


def _check_box(box):
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"invalid box {box}")


@dataclass
class MatchResult:
    order: list[int]  # prediction indices, descending confidence
    tp: list[bool]  # per prediction (original indexing)
    matched_truth: list[int | None]  # per prediction: index of matched truth
    truth_matched: list[bool]


def _by_confidence(preds: Sequence[Prediction]) -> list[int]:
    # stable: ties keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(record: EvalRecord, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching by descending confidence, each truth used at most once.

    A prediction takes the unmatched same-label truth with the highest IoU,
    provided that IoU >= ``iou_threshold``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    preds, truths = record.predictions, record.truths
    order = _by_confidence(preds)
    tp = [False] * len(preds)
    matched: list[int | None] = [None] * len(preds)
    used = [False] * len(truths)
    for i in order:
        p = preds[i]
        best, best_iou = None, iou_threshold
        for j, t in enumerate(truths):
            if used[j] or t.label != p.label:
                continue
            o = iou(p.box, t.box)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is not None:
            used[best] = True
            tp[i] = True
            matched[i] = best
    return MatchResult(order, tp, matched, used)


def ap_from_flags(scored_flags: Iterable[tuple[float, bool]], n_truth: int) -> float:
    """All-points interpolated AP from (confidence, is_tp) pairs.

    Pairs are ranked by descending confidence; ties keep their given order.
    """
    if n_truth <= 0:
        raise ValueError("AP is undefined without ground truth")
    pairs = sorted(scored_flags, key=lambda p: -p[0])
    if not pairs:
        return 0.0
    tp = np.array([f for _, f in pairs], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_truth
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # precision envelope: running max from the right
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class MetricReport:
    ap_per_class: dict[int, float]
    map50: float | None
    false_positive_pct: float | None
    latency: dict[str, float] | None
    frames: int
    extra: dict = field(default_factory=dict)


def evaluate(records: Sequence[EvalRecord], iou_threshold: float = 0.5) -> dict[int, float]:
    """Per-class AP over a set of records (classes with ground truth only)."""
    scored: dict[int, list[tuple[float, bool]]] = {}
    n_truth: dict[int, int] = {}
    for rec in records:
        m = match_detections(rec, iou_threshold)
        for t in rec.truths:
            n_truth[t.label] = n_truth.get(t.label, 0) + 1
        for i in m.order:
            p = rec.predictions[i]
            scored.setdefault(p.label, []).append((p.confidence, m.tp[i]))
    return {c: ap_from_flags(scored.get(c, []), n) for c, n in sorted(n_truth.items())}


def mean_ap(ap_per_class: dict[int, float]) -> float | None:
    if not ap_per_class:
        return None
    return float(np.mean(list(ap_per_class.values())))


def false_positive_pct(
    records: Sequence[EvalRecord], crowded_threshold: int = 10, iou_threshold: float = 0.5
) -> float | None:
    """100 * FP / predictions over records with crowding >= ``crowded_threshold``."""
    fp = total = 0
    for rec in records:
        if rec.crowding < crowded_threshold:
            continue
        m = match_detections(rec, iou_threshold)
        total += len(rec.predictions)
        fp += sum(not f for f in m.tp)
    if total == 0:
        return None
    return 100.0 * fp / total


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return sorted_values[rank - 1]


def latency_summary(samples: Iterable[float]) -> dict[str, float] | None:
    """mean, p50, p99 (nearest rank) and max of latency samples."""
    v = sorted(samples)
    if not v:
        return None
    return {
        "mean": float(np.mean(v)),
        "p50": nearest_rank(v, 50),
        "p99": nearest_rank(v, 99),
        "max": v[-1],
    }


def report(
    records: Sequence[EvalRecord], crowded_threshold: int = 10, iou_threshold: float = 0.5
) -> MetricReport:
    aps = evaluate(records, iou_threshold)
    lat = latency_summary(r.latency_us for r in records if r.latency_us is not None)
    return MetricReport(
        ap_per_class=aps,
        map50=mean_ap(aps),
        false_positive_pct=false_positive_pct(records, crowded_threshold, iou_threshold),
        latency=lat,
        frames=len(records),
    )


# --- Table I comparison ------------------------------------------------------


@dataclass(frozen=True)
class BaselineRow:
    method: str
    map50: str
    inference_ms: str


def default_baseline_path() -> Path:
    return Path(str(resources.files("infergate") / "data" / "table1.csv"))


def load_baselines(path: str | Path | None = None) -> list[BaselineRow]:
    """Read ``method,map50,inference_ms`` lines; values are kept verbatim."""
    path = Path(path) if path is not None else default_baseline_path()
    if not path.exists():
        raise FileNotFoundError(f"baseline fixture {path} not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = [p.strip() for p in text.split(",")]
        if parts == ["method", "map50", "inference_ms"]:
            continue
        if len(parts) != 3:
            raise FixtureError(f"{path}:{lineno}: expected 3 fields, got {line!r}")
        try:
            float(parts[1]), float(parts[2])
        except ValueError:
            raise FixtureError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        rows.append(BaselineRow(*parts))
    return rows


def render_comparison(
    baselines: Sequence[BaselineRow], measured: Sequence[BaselineRow] = ()
) -> str:
    rows = [BaselineRow("Method", "mAP50", "Inference Time (ms)")]
    rows += list(baselines)
    rows += [BaselineRow(f"{r.method} (measured)", r.map50, r.inference_ms) for r in measured]
    widths = [max(len(getattr(r, f)) for r in rows) for f in ("method", "map50", "inference_ms")]
    lines = []
    for k, r in enumerate(rows):
        lines.append(
            f"{r.method:<{widths[0]}}  {r.map50:>{widths[1]}}  {r.inference_ms:>{widths[2]}}"
        )
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def measured_row(name: str, rep: MetricReport) -> BaselineRow:
    map50 = "-" if rep.map50 is None else f"{100 * rep.map50:.1f}"
    ms = "-" if rep.latency is None else f"{rep.latency['mean'] / 1000:.1f}"
    return BaselineRow(name, map50, ms)
