"""Lesion-level and patient-level scoring.

Lesion-level counting follows a detection protocol: detected candidates
are greedily matched to truth lesions by voxel overlap (TP), unmatched
candidates are FP, unmatched truth lesions FN, and the negative unit is
the *sextant* -- the prostate split left/right x base/mid/apex by
bounding-box thirds -- a truth-free sextant untouched by any candidate
counts as TN.  Lesion-level ROC units are truth lesions (positives)
and truth-free sextants (negatives), each scored by its peak predicted
probability.  Patient-level units are whole cases scored by the
patient score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DegenerateInputError, GridMismatchError
from .volumes import BinaryMask, LabelVolume, connected_components

__all__ = [
    "ConfusionCounts",
    "MatchResult",
    "MetricPanel",
    "match_lesions",
    "sextant_masks",
    "region_negatives",
    "roc_auc",
    "metric_panel",
    "CaseEvaluation",
    "evaluate_case",
    "aggregate_cases",
    "BENCHMARK_MAIN",
    "BENCHMARK_ABLATION",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MatchResult:
    """Per-case lesion matching outcome.

    ``matched_pairs`` holds (candidate index, truth component index)
    pairs, truth components in canonical order (size desc, centroid).
    ``tn``/``region_fp`` are sextant counts filled in by
    :func:`evaluate_case`.
    """

    tp: int
    fp: int
    fn: int
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)
    tn: int = 0
    region_fp: int = 0


def match_lesions(candidates, truth: LabelVolume, min_overlap_fraction: float = 0.1) -> MatchResult:
    """Greedy candidate-to-truth matching by voxel overlap.

    A candidate may claim a truth component when their intersection
    covers at least ``min_overlap_fraction`` of the smaller of the two.
    Candidates are visited by descending score; each truth component is
    matched at most once.
    """
    comps = connected_components(truth.as_mask(), connectivity=26)
    index_map = np.full(truth.shape, -1, dtype=np.int32)
    for j, comp in enumerate(comps):
        index_map[comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]] = j

    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    matched: list[tuple[int, int]] = []
    taken = set()
    for ci in order:
        voxels = candidates[ci].component.voxels
        if (voxels >= np.asarray(truth.shape)).any() or (voxels < 0).any():
            raise GridMismatchError(f"candidate {ci} has voxels outside the truth grid {truth.shape}")
        hits = index_map[voxels[:, 0], voxels[:, 1], voxels[:, 2]]
        counts = np.bincount(hits[hits >= 0], minlength=len(comps))
        best_j, best_overlap = -1, 0
        for j, overlap in enumerate(counts):
            if j in taken or overlap == 0:
                continue
            needed = min_overlap_fraction * min(voxels.shape[0], comps[j].size)
            if overlap >= needed and overlap > best_overlap:
                best_j, best_overlap = j, int(overlap)
        if best_j >= 0:
            matched.append((ci, best_j))
            taken.add(best_j)
    return MatchResult(
        tp=len(matched),
        fp=len(candidates) - len(matched),
        fn=len(comps) - len(matched),
        matched_pairs=sorted(matched),
    )


def _split_lengths(extent: int, parts: int) -> list[int]:
    base, extra = divmod(extent, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def sextant_masks(prostate: BinaryMask) -> list[np.ndarray]:
    """Six prostate zones: bounding-box thirds along axis 0 (base/mid/apex)
    crossed with halves along axis 2 (left/right).  Zones that contain no
    prostate voxels are dropped."""
    if prostate.is_empty():
        raise DegenerateInputError("prostate mask is empty")
    idx = np.argwhere(prostate.data)
    lo, hi = idx.min(axis=0), idx.max(axis=0)
    if hi[0] - lo[0] + 1 < 3:
        raise DegenerateInputError("prostate thinner than 3 slices along the base/apex axis")
    thirds = _split_lengths(int(hi[0] - lo[0] + 1), 3)
    halves = _split_lengths(int(hi[2] - lo[2] + 1), 2)
    masks = []
    a = int(lo[0])
    for t in thirds:
        c = int(lo[2])
        for h in halves:
            zone = np.zeros(prostate.shape, dtype=bool)
            zone[a:a + t, :, c:c + h] = True
            zone &= prostate.data
            if zone.any():
                masks.append(zone)
            c += h
        a += t
    return masks


def region_negatives(
    prostate: BinaryMask, truth: LabelVolume, candidate_mask: np.ndarray
) -> tuple[int, int]:
    """Count clean (TN) and falsely-hit (FP) truth-free sextants."""
    tn = fp = 0
    for zone in sextant_masks(prostate):
        if (zone & (truth.data != 0)).any():
            continue
        if (zone & candidate_mask).any():
            fp += 1
        else:
            tn += 1
    return tn, fp


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic, ties at 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC-AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricPanel:
    """One row of the standard metric table; undefined ratios are NaN."""

    level: str
    roc_auc: float
    se: float
    sp: float
    ppv: float
    npv: float
    acc: float

    METRICS = ("roc_auc", "se", "sp", "ppv", "npv", "acc")

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in self.METRICS}


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else math.nan


def metric_panel(counts: ConfusionCounts, scores=None, labels=None, level: str = "lesion") -> MetricPanel:
    """Build the SE/SP/PPV/NPV/ACC panel from confusion counts, with
    ROC-AUC from unit scores when both classes are present."""
    auc = math.nan
    if scores is not None and labels is not None and len(scores) > 0:
        labels_arr = np.asarray(labels, dtype=int)
        if (labels_arr == 1).any() and (labels_arr == 0).any():
            auc = roc_auc(scores, labels)
    return MetricPanel(
        level=level,
        roc_auc=auc,
        se=_ratio(counts.tp, counts.tp + counts.fn),
        sp=_ratio(counts.tn, counts.tn + counts.fp),
        ppv=_ratio(counts.tp, counts.tp + counts.fp),
        npv=_ratio(counts.tn, counts.tn + counts.fn),
        acc=_ratio(counts.tp + counts.tn, counts.total),
    )


@dataclass
class CaseEvaluation:
    """Everything one case contributes to the aggregate panels."""

    case_id: str
    match: MatchResult
    lesion_scores: list[float]
    lesion_labels: list[int]
    patient_score: float
    patient_label: int
    patient_pred: int
    fp_voxels: np.ndarray  # (n, 3) voxels of unmatched candidates


def evaluate_case(
    case_id: str,
    prob: np.ndarray,
    truth: LabelVolume,
    prostate: BinaryMask,
    candidates,
    patient_score_value: float,
    min_overlap_fraction: float = 0.1,
) -> CaseEvaluation:
    """Score one case: match candidates, count sextants, emit ROC units."""
    if prob.shape != truth.shape:
        raise GridMismatchError(f"probability grid {prob.shape} vs truth {truth.shape}")
    match = match_lesions(candidates, truth, min_overlap_fraction)

    candidate_mask = np.zeros(truth.shape, dtype=bool)
    fp_voxel_arrays = []
    matched_cands = {ci for ci, _ in match.matched_pairs}
    for i, cand in enumerate(candidates):
        v = cand.component.voxels
        candidate_mask[v[:, 0], v[:, 1], v[:, 2]] = True
        if i not in matched_cands:
            fp_voxel_arrays.append(v)
    match.tn, match.region_fp = region_negatives(prostate, truth, candidate_mask)

    lesion_scores, lesion_labels = [], []
    for comp in connected_components(truth.as_mask(), connectivity=26):
        lesion_scores.append(float(prob[comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]].max()))
        lesion_labels.append(1)
    for zone in sextant_masks(prostate):
        if (zone & (truth.data != 0)).any():
            continue
        lesion_scores.append(float(prob[zone].max()))
        lesion_labels.append(0)

    fp_voxels = np.concatenate(fp_voxel_arrays, axis=0) if fp_voxel_arrays else np.zeros((0, 3), dtype=np.int64)
    return CaseEvaluation(
        case_id=case_id,
        match=match,
        lesion_scores=lesion_scores,
        lesion_labels=lesion_labels,
        patient_score=float(patient_score_value),
        patient_label=int(truth.data.any()),
        patient_pred=int(len(candidates) > 0),
        fp_voxels=fp_voxels,
    )


def aggregate_cases(evaluations: list[CaseEvaluation]) -> tuple[MetricPanel, MetricPanel]:
    """Pool per-case results into (lesion-level, patient-level) panels."""
    lesion_counts = ConfusionCounts()
    patient_counts = ConfusionCounts()
    lesion_scores, lesion_labels = [], []
    patient_scores, patient_labels = [], []
    for ev in evaluations:
        lesion_counts += ConfusionCounts(tp=ev.match.tp, fp=ev.match.fp, tn=ev.match.tn, fn=ev.match.fn)
        patient_counts += ConfusionCounts(
            tp=int(ev.patient_pred and ev.patient_label),
            fp=int(ev.patient_pred and not ev.patient_label),
            tn=int(not ev.patient_pred and not ev.patient_label),
            fn=int(not ev.patient_pred and ev.patient_label),
        )
        lesion_scores += ev.lesion_scores
        lesion_labels += ev.lesion_labels
        patient_scores.append(ev.patient_score)
        patient_labels.append(ev.patient_label)
    return (
        metric_panel(lesion_counts, lesion_scores, lesion_labels, level="lesion"),
        metric_panel(patient_counts, patient_scores, patient_labels, level="patient"),
    )


def _bench(name, lesion, patient):
    nan = math.nan
    return (
        name,
        MetricPanel("lesion", *lesion),
        MetricPanel("patient", nan, *patient),
    )


# Published clinical benchmark rows (reader study + reference detectors on
# the original cohorts).  Reference values for report rendering only:
# phantom experiments do not reproduce them.  Lesion columns are
# (ROC-AUC, SE, SP, PPV, NPV, ACC); patient columns lack a published AUC.
BENCHMARK_MAIN = [
    _bench("expert-1", (0.64, 0.41, 0.91, 0.63, 0.89, 0.84), (0.47, 0.86, 0.75, 0.64, 0.68)),
    _bench("expert-2", (0.74, 0.54, 0.86, 0.82, 0.91, 0.80), (0.63, 0.38, 0.48, 0.53, 0.50)),
    _bench("expert-3", (0.73, 0.54, 0.94, 0.96, 0.90, 0.89), (0.63, 0.90, 0.86, 0.73, 0.78)),
    _bench("expert-4", (0.60, 0.23, 0.92, 0.75, 0.85, 0.80), (0.26, 0.67, 0.40, 0.48, 0.48)),
    _bench("expert-average", (0.68, 0.43, 0.91, 0.79, 0.89, 0.83), (0.50, 0.70, 0.62, 0.60, 0.61)),
    _bench("3d-unet", (0.71, 0.52, 0.72, 0.41, 0.90, 0.72), (0.58, 0.71, 0.65, 0.65, 0.65)),
    _bench("unetr", (0.56, 0.39, 0.62, 0.27, 0.80, 0.58), (0.50, 0.55, 0.52, 0.52, 0.53)),
    _bench("swin-unetr", (0.69, 0.69, 0.62, 0.40, 0.91, 0.61), (0.74, 0.43, 0.54, 0.64, 0.58)),
    _bench("published-full-model", (0.82, 0.66, 0.90, 0.74, 0.93, 0.85), (0.74, 0.67, 0.67, 0.74, 0.70)),
]

# Published ablation rows, keyed by the same preset names this package
# uses; "+cls"/"+ent"/"+cls+ent" include weak-label pretraining.
BENCHMARK_ABLATION = [
    _bench("published-baseline", (0.76, 0.67, 0.60, 0.48, 0.90, 0.61), (0.73, 0.23, 0.46, 0.50, 0.47)),
    _bench("published-+cls", (0.70, 0.70, 0.78, 0.62, 0.93, 0.77), (0.79, 0.43, 0.56, 0.69, 0.60)),
    _bench("published-+ent", (0.76, 0.62, 0.77, 0.63, 0.89, 0.76), (0.74, 0.57, 0.61, 0.71, 0.65)),
    _bench("published-+cls+ent", (0.82, 0.66, 0.90, 0.74, 0.93, 0.85), (0.74, 0.67, 0.67, 0.74, 0.70)),
]
