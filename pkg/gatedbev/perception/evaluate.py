"""
Detection Evaluation

NuScenes-style scoring of BEV detections:
- Greedy center-distance matching, highest score first
- Precision-recall sweep with a monotone precision envelope and trapezoid
  integration, averaged over the distance thresholds
- Per-class AP and mAP over classes present in the ground truth
- Breakdown by context bucket and by the night / rain subsets
- report.json / report.csv emission
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from gatedbev.errors import EvaluationError
from gatedbev.perception.adverseop_synth import CONTEXT_BUCKETS, Context
from gatedbev.perception.geometry import Box3D, center_distance

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "gatedbev-report/1"
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
UNION_SCOPES = {
    "night": ("night_clear", "night_rain"),
    "rain": ("day_rain", "night_rain"),
}
SCOPES = ("all", *CONTEXT_BUCKETS, *UNION_SCOPES)
CSV_COLUMNS = ("scope", "class", "ap", "map")


# ==================== MATCHING ====================

@dataclass
class MatchResult:
    is_tp: List[bool]                 # per prediction, input order
    matched_gt: List[Optional[int]]   # per prediction, index of the consumed GT
    num_fn: int


def score_order(preds: Sequence[Box3D]) -> List[int]:
    """Indices by descending score; ties keep insertion order."""
    return sorted(range(len(preds)), key=lambda i: -(preds[i].score or 0.0))


def match_predictions(preds: Sequence[Box3D], gts: Sequence[Box3D], dist_thresh: float) -> MatchResult:
    """Greedy matching: each prediction, best score first, takes the nearest unmatched GT closer than dist_thresh."""
    is_tp = [False] * len(preds)
    matched_gt: List[Optional[int]] = [None] * len(preds)
    taken = [False] * len(gts)
    for i in score_order(preds):
        best, best_dist = None, dist_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            d = center_distance(preds[i], gt)
            if d < best_dist:
                best, best_dist = j, d
        if best is not None:
            taken[best] = True
            is_tp[i] = True
            matched_gt[i] = best
    return MatchResult(is_tp=is_tp, matched_gt=matched_gt, num_fn=taken.count(False))


Frame = Tuple[Sequence[Box3D], Sequence[Box3D]]  # (predictions, ground truth) of one sample


def _ranked_labels(frames: Sequence[Frame], dist_thresh: float) -> Tuple[np.ndarray, int]:
    """TP flags of all predictions across frames, ranked by score."""
    scores, labels = [], []
    n_gt = 0
    for preds, gts in frames:
        result = match_predictions(preds, gts, dist_thresh)
        scores.extend(p.score or 0.0 for p in preds)
        labels.extend(result.is_tp)
        n_gt += len(gts)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(labels, dtype=bool)[order], n_gt


# ==================== AP ====================

@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    envelope: np.ndarray
    dist_thresh: float
    class_id: Optional[int] = None


def pr_curve(frames: Sequence[Frame], dist_thresh: float, class_id: Optional[int] = None) -> PRCurve:
    labels, n_gt = _ranked_labels(frames, dist_thresh)
    if n_gt == 0:
        raise EvaluationError("Precision-recall is undefined without ground truth")
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    return PRCurve(recall=recall, precision=precision, envelope=envelope, dist_thresh=dist_thresh, class_id=class_id)


def area_under(curve: PRCurve) -> float:
    """Trapezoid area under the envelope, starting flat from recall 0."""
    if len(curve.recall) == 0:
        return 0.0
    r_prev = np.concatenate([[0.0], curve.recall[:-1]])
    e_prev = np.concatenate([[curve.envelope[0]], curve.envelope[:-1]])
    return float(np.sum((curve.recall - r_prev) * (curve.envelope + e_prev) / 2.0))


def average_precision_frames(frames: Sequence[Frame], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    if sum(len(gts) for _, gts in frames) == 0:
        raise EvaluationError("Average precision is undefined without ground truth; exclude the class")
    return float(np.mean([area_under(pr_curve(frames, t)) for t in thresholds]))


def average_precision(preds: Sequence[Box3D], gts: Sequence[Box3D],
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """AP in [0, 1] for one class-homogeneous set of predictions and ground truth."""
    return average_precision_frames([(preds, gts)], thresholds)


def mean_ap(aps: Dict[str, Optional[float]]) -> Optional[float]:
    """Mean over defined APs; None when no class has ground truth."""
    defined = [ap for ap in aps.values() if ap is not None]
    if not defined:
        return None
    return float(np.mean(defined))


# ==================== REPORT ====================

class Counts(BaseModel):
    tp: int
    fp: int
    fn: int


class ClassResult(BaseModel):
    class_id: int
    class_name: str
    num_gt: int
    num_pred: int
    ap: Optional[float]  # percent, None when the class has no ground truth
    counts: Dict[str, Counts]  # keyed by threshold


class ScopeResult(BaseModel):
    scope: str
    num_samples: int
    map: Optional[float]  # percent
    classes: List[ClassResult]


class EvalReport(BaseModel):
    version: str = REPORT_SCHEMA
    class_names: List[str]
    thresholds: List[float]
    scopes: List[ScopeResult]

    def scope(self, name: str) -> ScopeResult:
        for s in self.scopes:
            if s.scope == name:
                return s
        raise KeyError(f"No scope {name!r} in report")

    def class_ap(self, scope: str, class_name: str) -> Optional[float]:
        for c in self.scope(scope).classes:
            if c.class_name == class_name:
                return c.ap
        raise KeyError(f"No class {class_name!r} in report")

    @property
    def night_bucket_map(self) -> Optional[float]:
        """Mean of the night_clear and night_rain mAPs."""
        return mean_ap({b: self.scope(b).map for b in UNION_SCOPES["night"]})


@dataclass(frozen=True, eq=False)
class EvaluatedSample:
    token: str
    context: Context
    ground_truth: List[Box3D]
    predictions: List[Box3D]


def _scope_members(samples: Sequence[EvaluatedSample], scope: str) -> List[EvaluatedSample]:
    if scope == "all":
        return list(samples)
    buckets = UNION_SCOPES.get(scope, (scope,))
    return [s for s in samples if s.context.bucket in buckets]


def _class_result(members: Sequence[EvaluatedSample], class_id: int, class_name: str,
                  thresholds: Sequence[float]) -> ClassResult:
    frames = [
        ([p for p in s.predictions if p.class_id == class_id], [g for g in s.ground_truth if g.class_id == class_id])
        for s in members
    ]
    num_gt = sum(len(g) for _, g in frames)
    num_pred = sum(len(p) for p, _ in frames)
    counts = {}
    for t in thresholds:
        tp = fn = 0
        for preds, gts in frames:
            m = match_predictions(preds, gts, t)
            tp += sum(m.is_tp)
            fn += m.num_fn
        counts[f"{t:g}"] = Counts(tp=tp, fp=num_pred - tp, fn=fn)
    ap = 100.0 * average_precision_frames(frames, thresholds) if num_gt else None
    return ClassResult(class_id=class_id, class_name=class_name, num_gt=num_gt, num_pred=num_pred, ap=ap, counts=counts)


def context_breakdown(samples: Sequence[EvaluatedSample], class_names: Sequence[str],
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    """Per-class AP and mAP over every sample and per context scope."""
    scopes = []
    for scope in SCOPES:
        members = _scope_members(samples, scope)
        if not members:
            logger.warning(f"Scope {scope} has no samples; its APs are undefined")
        classes = [_class_result(members, k, name, thresholds) for k, name in enumerate(class_names)]
        scope_map = mean_ap({c.class_name: c.ap for c in classes})
        scopes.append(ScopeResult(scope=scope, num_samples=len(members), map=scope_map, classes=classes))
        logger.debug(f"Scope {scope}: {len(members)} samples, mAP {scope_map}")
    return EvalReport(class_names=list(class_names), thresholds=list(thresholds), scopes=scopes)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def report_rows(report: EvalReport) -> List[List[str]]:
    """CSV body: per scope, one row per class followed by an `all` summary row."""
    rows = []
    for scope in report.scopes:
        for c in scope.classes:
            rows.append([scope.scope, c.class_name, _fmt(c.ap), ""])
        rows.append([scope.scope, "all", "", _fmt(scope.map)])
    return rows


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.model_dump_json(indent=2) + "\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(report_rows(report))
    logger.info(f"Report written to {json_path} and {csv_path}")
    return json_path, csv_path


def read_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text())
