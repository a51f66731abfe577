"""Detection metrics at an IoU threshold and fixed-vs-learned threshold sweeps.

Matching is greedy in descending detection score: each detection claims the
unmatched ground truth with the highest mask IoU, provided it reaches the IoU
threshold. Conventions for empty inputs:

    no dets, no gts   -> P = R = F = 1
    no dets, gts      -> P = R = F = 0
    dets, no gts      -> P = 0, R = 1, F = 0

Corpus scores pool TP and counts over images before dividing.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .postprocess import DEFAULT_MIN_AREA, TextInstance, extract_instances
from .tensor import ContractError, ShapeError
from .threshold import binarize

MATCHING_RULE = "greedy-score-order"


def iou(a: TextInstance, b: TextInstance) -> float:
    if a.mask.shape != b.mask.shape:
        raise ShapeError(f"instances live on different canvases: {a.mask.shape} vs {b.mask.shape}")
    ax0, ay0, ax1, ay1 = a.bbox
    bx0, by0, bx1, by1 = b.bbox
    x0, y0, x1, y1 = min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1)
    ma = a.mask[y0:y1, x0:x1]
    mb = b.mask[y0:y1, x0:x1]
    union = np.count_nonzero(ma | mb)
    if union == 0:
        raise ValueError("iou of two empty masks")
    return np.count_nonzero(ma & mb) / union


def _bbox_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def fmeasure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def prf(tp: int, n_det: int, n_gt: int) -> tuple[float, float, float]:
    if n_det == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    p = tp / n_det if n_det else 0.0
    r = tp / n_gt if n_gt else 1.0
    return p, r, fmeasure(p, r)


@dataclass
class EvalReport:
    precision: float
    recall: float
    fmeasure: float
    tp: int
    n_det: int
    n_gt: int
    matches: list = field(default_factory=list)  # per image: [(det_idx, gt_idx, iou), ...]
    iou_thresh: float = 0.5
    matching_rule: str = MATCHING_RULE

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("matches")
        return d

    def to_json(self) -> dict:
        d = asdict(self)
        d["matches"] = [[list(m) for m in img] for img in self.matches]
        return d


def greedy_matches(dets: Sequence[TextInstance], gts: Sequence[TextInstance], iou_thresh: float = 0.5):
    scores = [d.score for d in dets]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ContractError("detections must be sorted by descending score")
    taken = [False] * len(gts)
    out = []
    for i, det in enumerate(dets):
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if taken[j] or not _bbox_overlap(det.bbox, gt.bbox):
                continue
            v = iou(det, gt)
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            out.append((i, best_j, best))
    return out


def match_and_score(dets: Sequence[TextInstance], gts: Sequence[TextInstance], iou_thresh: float = 0.5) -> EvalReport:
    m = greedy_matches(dets, gts, iou_thresh)
    p, r, f = prf(len(m), len(dets), len(gts))
    return EvalReport(p, r, f, len(m), len(dets), len(gts), [m], iou_thresh)


def evaluate(pairs, iou_thresh: float = 0.5) -> EvalReport:
    """Pool (dets, gts) pairs over a corpus."""
    tp = n_det = n_gt = 0
    matches = []
    for dets, gts in pairs:
        m = greedy_matches(dets, gts, iou_thresh)
        tp += len(m)
        n_det += len(dets)
        n_gt += len(gts)
        matches.append(m)
    p, r, f = prf(tp, n_det, n_gt)
    return EvalReport(p, r, f, tp, n_det, n_gt, matches, iou_thresh)


def evaluate_maps(prob_maps, gts, thresholds, min_area: int = DEFAULT_MIN_AREA, iou_thresh: float = 0.5) -> EvalReport:
    """Binarize each map at its threshold, extract instances and score the corpus."""
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (len(prob_maps),))
    pairs = []
    for m, gt, t in zip(prob_maps, gts, thresholds):
        pairs.append((extract_instances(binarize(m, t), m, min_area), gt))
    return evaluate(pairs, iou_thresh)


# --------------------------------------------------------------------------
# threshold sweep


def threshold_grid(step: float) -> np.ndarray:
    """Strictly interior grid step, 2*step, ... < 1."""
    n = int(round(1.0 / step))
    if n < 2 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step must divide 1 into >= 2 parts, got {step}")
    return np.round(np.arange(1, n) * step, 10)


def pixel_f(prob_maps, gt_masks, t) -> float:
    inter = pred = true = 0
    for m, g in zip(prob_maps, gt_masks):
        b = np.asarray(m) > t
        inter += np.count_nonzero(b & g)
        pred += np.count_nonzero(b)
        true += np.count_nonzero(g)
    return 2 * inter / (pred + true) if pred + true else 1.0


@dataclass
class SweepCurve:
    thresholds: list[float]
    fmeasures: list[float]
    ith_point: tuple[float, float] | None
    fine_thresholds: list[float] = field(default_factory=list)
    fine_fmeasures: list[float] = field(default_factory=list)
    oracle_threshold: float | None = None
    oracle_f: float | None = None

    def __post_init__(self):
        for grid in (self.thresholds, self.fine_thresholds):
            g = np.asarray(grid)
            if g.size and (np.any(np.diff(g) <= 0) or g[0] <= 0 or g[-1] >= 1):
                raise ValueError("threshold grids must be strictly ascending inside (0, 1)")

    @property
    def best_coarse_f(self) -> float:
        return max(self.fmeasures)

    @property
    def median_coarse_f(self) -> float:
        return float(np.median(self.fmeasures))

    def to_json(self) -> dict:
        return asdict(self)


def sweep(prob_maps, gts, ith=None, grid_step: float = 0.1, fine_step: float | None = 0.01,
          min_area: int = DEFAULT_MIN_AREA, iou_thresh: float = 0.5) -> SweepCurve:
    """F-measure at fixed thresholds, plus the per-image learned threshold point.

    The oracle optimum is the fine-grid threshold with the highest corpus F;
    exact F ties are broken by pooled pixel F, then by the lower threshold.
    """
    coarse = threshold_grid(grid_step)
    fs = [evaluate_maps(prob_maps, gts, t, min_area, iou_thresh).fmeasure for t in coarse]
    ith_point = None
    if ith is not None:
        ith = np.asarray(ith, dtype=np.float64)
        f_ith = evaluate_maps(prob_maps, gts, ith, min_area, iou_thresh).fmeasure
        ith_point = (float(ith.mean()), f_ith)
    curve = SweepCurve([float(t) for t in coarse], fs, ith_point)
    if fine_step:
        fine = threshold_grid(fine_step)
        ffs = [evaluate_maps(prob_maps, gts, t, min_area, iou_thresh).fmeasure for t in fine]
        gt_masks = [np.logical_or.reduce([g.mask for g in gs]) if gs else np.zeros(np.shape(m), bool)
                    for m, gs in zip(prob_maps, gts)]
        best = max(ffs)
        ties = [t for t, f in zip(fine, ffs) if f == best]
        pix = [pixel_f(prob_maps, gt_masks, t) for t in ties]
        curve.fine_thresholds = [float(t) for t in fine]
        curve.fine_fmeasures = ffs
        curve.oracle_threshold = float(ties[int(np.argmax(pix))])
        curve.oracle_f = best
    return curve


# --------------------------------------------------------------------------
# report emission


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    summary = report.summary()
    w.writerow(list(summary))
    w.writerow([summary[k] for k in summary])
    return buf.getvalue()


def sweep_csv(curve: SweepCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "threshold", "fmeasure"])
    for t, f in zip(curve.thresholds, curve.fmeasures):
        w.writerow(["fixed", f"{t:.2f}", repr(f)])
    for t, f in zip(curve.fine_thresholds, curve.fine_fmeasures):
        w.writerow(["fine", f"{t:.2f}", repr(f)])
    if curve.ith_point is not None:
        w.writerow(["ith", repr(curve.ith_point[0]), repr(curve.ith_point[1])])
    if curve.oracle_threshold is not None:
        w.writerow(["oracle", f"{curve.oracle_threshold:.2f}", repr(curve.oracle_f)])
    return buf.getvalue()


def sweep_svg(curve: SweepCurve, width: int = 480, height: int = 320) -> str:
    """Line chart of F against threshold; the ITH point is a filled red circle."""
    ml, mr, mt, mb = 50, 20, 20, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(t):
        return ml + t * pw

    def py(f):
        return mt + (1.0 - f) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for i in range(0, 11, 2):
        v = i / 10
        parts.append(f'<text x="{px(v):.2f}" y="{mt + ph + 16}" font-size="11" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{ml - 6}" y="{py(v) + 4:.2f}" font-size="11" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 6}" font-size="12" text-anchor="middle">threshold</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2:.1f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2:.1f})">F-measure</text>')
    pts = " ".join(f"{px(t):.2f},{py(f):.2f}" for t, f in zip(curve.thresholds, curve.fmeasures))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>')
    for t, f in zip(curve.thresholds, curve.fmeasures):
        parts.append(f'<circle cx="{px(t):.2f}" cy="{py(f):.2f}" r="3" fill="steelblue"/>')
    if curve.ith_point is not None:
        t, f = curve.ith_point
        parts.append(f'<circle cx="{px(t):.2f}" cy="{py(f):.2f}" r="5" fill="crimson"/>')
        parts.append(f'<text x="{px(t) + 8:.2f}" y="{py(f) - 8:.2f}" font-size="11" fill="crimson">ITH</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(out_dir, report: EvalReport, stem: str = "report") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    (out / f"{stem}.csv").write_text(report_csv(report))


def write_sweep(out_dir, curve: SweepCurve, stem: str = "sweep") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(curve.to_json(), indent=1) + "\n")
    (out / f"{stem}.csv").write_text(sweep_csv(curve))
    (out / f"{stem}.svg").write_text(sweep_svg(curve))
