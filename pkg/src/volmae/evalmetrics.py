"""Mask-restricted voxelwise ranking metrics against box ground truth.

Voxels outside the tissue mask are excluded from numerator and denominator
alike — they are never scored as negatives. Bounding boxes are inclusive on
both corners (see volio.box_to_mask). AUROC uses midranks for ties; AP
treats tied scores as a single threshold group with step interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError, ValidationError
from .volio import Volume, boxes_to_mask


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties ½)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes; got {n_pos} positives, {n_neg} negatives"
        )
    ranks = rankdata(scores)  # midranks for ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall sweep, AP = Σ (Rₙ − Rₙ₋₁)·Pₙ."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    # threshold groups: positions where the score strictly drops
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.append(boundary, s.size - 1)
    tp = np.cumsum(l)[ends]
    count = ends + 1.0
    precision = tp / count
    recall = tp / n_pos
    drecall = np.diff(np.concatenate([[0.0], recall]))
    return float((drecall * precision).sum())


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics (means over cases) plus the per-case breakdown."""

    auroc: float
    ap: float
    ap_baseline: float
    n_pos: int
    n_neg: int
    n_excluded: int
    cases: tuple = ()

    def to_json(self) -> dict:
        obj = {
            "auroc": self.auroc,
            "ap": self.ap,
            "ap_baseline": self.ap_baseline,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "n_excluded": self.n_excluded,
        }
        if self.cases:
            obj["cases"] = [c.to_json() for c in self.cases]
        return obj


def _case_metrics(anomaly_map: Volume, boxes, tissue_mask: Volume) -> EvalReport:
    if anomaly_map.n_channels != 1:
        raise DimensionError(
            f"evaluation expects a single-channel map, got {anomaly_map.n_channels}"
        )
    if anomaly_map.data.shape[1:] != tissue_mask.data.shape[1:]:
        raise DimensionError(
            f"map dims {anomaly_map.data.shape} vs mask dims {tissue_mask.data.shape}"
        )
    mdata = tissue_mask.data[0]
    if not np.all((mdata == 0.0) | (mdata == 1.0)):
        raise ValidationError("tissue mask must be binary (0/1)")
    inside = mdata == 1.0
    labels = boxes_to_mask(boxes, anomaly_map.dims).data[0][inside].astype(bool)
    scores = anomaly_map.data[0][inside]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0:
        raise UndefinedMetricError("no positive voxels inside the tissue mask")
    if n_neg == 0:
        raise UndefinedMetricError("no negative voxels inside the tissue mask")
    return EvalReport(
        auroc=auroc(scores, labels),
        ap=average_precision(scores, labels),
        ap_baseline=n_pos / labels.size,
        n_pos=n_pos,
        n_neg=n_neg,
        n_excluded=int(np.count_nonzero(~inside)),
    )


def evaluate(anomaly_map: Volume, boxes, tissue_mask: Volume) -> EvalReport:
    """Score one case; metrics over tissue-mask voxels only."""
    case = _case_metrics(anomaly_map, boxes, tissue_mask)
    return EvalReport(
        auroc=case.auroc,
        ap=case.ap,
        ap_baseline=case.ap_baseline,
        n_pos=case.n_pos,
        n_neg=case.n_neg,
        n_excluded=case.n_excluded,
        cases=(case,),
    )


def evaluate_cases(cases) -> EvalReport:
    """Score many (map, boxes, mask) triples; aggregate = mean over cases."""
    reports = [_case_metrics(m, b, t) for m, b, t in cases]
    if not reports:
        raise UndefinedMetricError("no cases to evaluate")
    return EvalReport(
        auroc=float(np.mean([r.auroc for r in reports])),
        ap=float(np.mean([r.ap for r in reports])),
        ap_baseline=float(np.mean([r.ap_baseline for r in reports])),
        n_pos=sum(r.n_pos for r in reports),
        n_neg=sum(r.n_neg for r in reports),
        n_excluded=sum(r.n_excluded for r in reports),
        cases=tuple(reports),
    )
