"""Detection and classification metrics.

Candidate-to-truth matching is greedy one-to-one in descending score
order with a voxelwise IoU > 0.1 gate; the resulting table is then
swept over score thresholds for the FROC family. Sensitivity at any
false-positive rate can never exceed the fraction of truth instances
that received a matched candidate, which is what ties the measured
curves to the upstream proposal recall ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

IOU_THRESHOLD = 0.1
FROC_FP_RATES = (1, 2, 3, 4)
SMALL_AXIS_CUTOFF_MM = 10.0


class MetricUndefinedError(DataError):
    """Metric requested on data where it has no value (no positives...)."""


# ---------------------------------------------------------------------------
# voxel overlap


def voxel_iou(a: np.ndarray, b: np.ndarray, dims) -> float:
    """IoU of two (n, 3) voxel index sets on a common grid."""
    if a.size == 0 or b.size == 0:
        return 0.0
    fa = np.ravel_multi_index(tuple(np.asarray(a).T), dims)
    fb = np.ravel_multi_index(tuple(np.asarray(b).T), dims)
    inter = np.intersect1d(fa, fb, assume_unique=False).size
    union = np.union1d(fa, fb).size
    return inter / union


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice coefficient of two binary masks; two empty masks give 1.0."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"dsc: mask shapes differ, {pred.shape} vs {truth.shape}")
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, truth).sum() / float(denom)


def cpd(pred: np.ndarray, truth: np.ndarray) -> float:
    """Centroid distance of two binary masks, in voxel units."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"cpd: mask shapes differ, {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        raise DataError("cpd: empty mask has no centroid")
    cp = np.argwhere(pred).mean(axis=0)
    ct = np.argwhere(truth).mean(axis=0)
    return float(np.linalg.norm(cp - ct))


# ---------------------------------------------------------------------------
# matching


@dataclass
class GTInstance:
    gt_id: str
    patient_id: str
    voxels: np.ndarray
    short_axis_mm: float


@dataclass
class ScoredCandidate:
    candidate_id: str
    patient_id: str
    score: float
    region: np.ndarray  # (n, 3) voxels; empty for pure false positives
    label: int = 0      # candidate-level truth used for maxF1 / AUC


@dataclass
class DetectionRow:
    candidate_id: str
    patient_id: str
    score: float
    matched_gt: str | None
    label: int


@dataclass
class DetectionTable:
    rows: list
    gt: list            # GTInstance without voxels needed downstream
    patient_ids: list   # full evaluation universe, candidates or not

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_gt(self) -> int:
        return len(self.gt)


def match_detections(
    candidates: list,
    gt_instances: list,
    patient_ids: list,
    dims,
    iou_threshold: float = IOU_THRESHOLD,
) -> DetectionTable:
    """Greedy one-to-one matching, descending score (candidate id breaks
    ties), within each patient. A candidate claims the unclaimed truth
    instance of highest IoU when that IoU exceeds the threshold."""
    patient_ids = list(patient_ids)
    known = set(patient_ids)
    for c in candidates:
        if c.patient_id not in known:
            raise DataError(f"match_detections: candidate from unknown patient {c.patient_id!r}")
    for g in gt_instances:
        if g.patient_id not in known:
            raise DataError(f"match_detections: truth from unknown patient {g.patient_id!r}")

    order = sorted(candidates, key=lambda c: (-c.score, c.candidate_id))
    claimed = set()
    by_patient = {}
    for g in gt_instances:
        by_patient.setdefault(g.patient_id, []).append(g)

    rows = []
    for cand in order:
        best_id, best_iou = None, 0.0
        for g in by_patient.get(cand.patient_id, ()):
            if g.gt_id in claimed:
                continue
            iou = voxel_iou(cand.region, g.voxels, dims)
            if iou > iou_threshold and iou > best_iou:
                best_id, best_iou = g.gt_id, iou
        if best_id is not None:
            claimed.add(best_id)
        rows.append(
            DetectionRow(
                candidate_id=cand.candidate_id,
                patient_id=cand.patient_id,
                score=float(cand.score),
                matched_gt=best_id,
                label=int(cand.label),
            )
        )
    gt_slim = [
        GTInstance(g.gt_id, g.patient_id, np.empty((0, 3), dtype=np.intp), g.short_axis_mm)
        for g in gt_instances
    ]
    return DetectionTable(rows=rows, gt=gt_slim, patient_ids=patient_ids)


# ---------------------------------------------------------------------------
# FROC


@dataclass
class FrocResult:
    points: list                # (fp_per_patient, sensitivity), descending threshold
    froc_at: dict               # fp rate -> max sensitivity with fp_rate <= rate
    mfroc: float


def froc_curve(table: DetectionTable, fp_rates=FROC_FP_RATES) -> FrocResult:
    if table.n_gt == 0:
        raise MetricUndefinedError("froc: no truth instances, sensitivity undefined")
    if table.n_patients == 0:
        raise MetricUndefinedError("froc: empty patient universe")
    rows = sorted(table.rows, key=lambda r: -r.score)
    n_gt = table.n_gt
    n_pat = table.n_patients
    points = []
    tp = fp = 0
    i = 0
    while i < len(rows):
        j = i
        while j < len(rows) and rows[j].score == rows[i].score:
            if rows[j].matched_gt is not None:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_pat, tp / n_gt))
        i = j
    froc_at = {}
    for rate in fp_rates:
        feasible = [s for f, s in points if f <= rate]
        froc_at[rate] = max(feasible) if feasible else 0.0
    return FrocResult(
        points=points,
        froc_at=froc_at,
        mfroc=float(np.mean([froc_at[r] for r in fp_rates])),
    )


# ---------------------------------------------------------------------------
# threshold metrics


def max_f1(labels, scores) -> tuple:
    """Best F1 over the decision rule score >= t; returns (f1, threshold).

    Among thresholds achieving the maximum, the smallest is returned.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ShapeError(f"max_f1: labels {labels.shape} vs scores {scores.shape}")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricUndefinedError("max_f1: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    pred = np.arange(1, len(s) + 1)
    # thresholds at the end of each tie block
    block_end = np.nonzero(np.diff(s, append=-np.inf))[0]
    best_f1, best_thr = 0.0, float("inf")
    for i in block_end[::-1]:  # ascending threshold order -> keep smallest on ties
        precision = tp[i] / pred[i]
        recall = tp[i] / n_pos
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        if f1 >= best_f1:
            if f1 > best_f1 or s[i] < best_thr:
                best_f1, best_thr = float(f1), float(s[i])
    return best_f1, best_thr


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ShapeError(f"auc: labels {labels.shape} vs scores {scores.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auc: needs both classes")
    ranks = _average_ranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j < len(sv) and sv[j] == sv[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # 1-based average rank
        i = j
    return ranks


# ---------------------------------------------------------------------------
# stratification and correlation


def size_stratified(table: DetectionTable, cutoff_mm: float = SMALL_AXIS_CUTOFF_MM) -> dict:
    """Split the table by truth short axis (<= cutoff -> "small").

    False positives are size-agnostic and count in both groups; rows
    matched to the other group's truth are dropped from that group's
    classification metrics. Empty groups get ``defined: False``.
    """
    groups = {
        "small": {g.gt_id for g in table.gt if g.short_axis_mm <= cutoff_mm},
        "large": {g.gt_id for g in table.gt if g.short_axis_mm > cutoff_mm},
    }
    out = {}
    for name, ids in groups.items():
        gt = [g for g in table.gt if g.gt_id in ids]
        rows = [
            DetectionRow(
                candidate_id=r.candidate_id,
                patient_id=r.patient_id,
                score=r.score,
                matched_gt=r.matched_gt if r.matched_gt in ids else None,
                label=1 if r.matched_gt in ids else 0,
            )
            for r in table.rows
            if r.matched_gt is None or r.matched_gt in ids
        ]
        sub = DetectionTable(rows=rows, gt=gt, patient_ids=table.patient_ids)
        if not gt:
            out[name] = {"defined": False, "n_gt": 0}
            continue
        froc = froc_curve(sub)
        entry = {
            "defined": True,
            "n_gt": len(gt),
            "froc_at": {str(k): v for k, v in froc.froc_at.items()},
            "mfroc": froc.mfroc,
        }
        labels = np.array([r.label for r in rows])
        scores = np.array([r.score for r in rows])
        if labels.size and 0 < labels.sum() < labels.size:
            f1, thr = max_f1(labels, scores)
            entry["max_f1"] = f1
            entry["max_f1_threshold"] = thr
            entry["auc"] = auc(labels, scores)
        out[name] = entry
    return out


@dataclass
class SpearmanResult:
    matrix: np.ndarray          # (12, 12), unit diagonal
    constant: np.ndarray        # (12,) bool, True where a column was constant


def spearman_matrix(labels: np.ndarray) -> SpearmanResult:
    """Pairwise Spearman rank correlation of station label columns.

    ``labels`` is (n_patients, 12). Pairs involving a constant column
    get correlation 0 and are flagged. Needs at least two patients.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ShapeError(f"spearman_matrix: expected (n, 12), got {labels.shape}")
    n, m = labels.shape
    if n < 2:
        raise MetricUndefinedError("spearman_matrix: needs at least 2 rows")
    ranks = np.stack([_average_ranks(labels[:, j]) for j in range(m)], axis=1)
    centred = ranks - ranks.mean(axis=0)
    std = centred.std(axis=0)
    constant = std == 0
    denom = np.where(constant, 1.0, std)
    normed = centred / denom
    mat = (normed.T @ normed) / n
    mat[constant, :] = 0.0
    mat[:, constant] = 0.0
    np.fill_diagonal(mat, 1.0)
    return SpearmanResult(matrix=mat, constant=constant)
