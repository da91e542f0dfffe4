"""Whole-volume prediction and lesion-candidate extraction.

A frozen model is slid across the volume (tiled forward passes on the
full-resolution head), tile probabilities are stitched with blended
averaging, and the voxel-wise Shannon entropy of the stitched class
distribution becomes the uncertainty map.  Candidates are connected
components of the thresholded lesion probability inside the prostate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputError
from .evaluation import ConfusionCounts, evaluate_case, metric_panel
from .model import LesionDetectionNet
from .patches import PatchSpec, _pad_to_size, stitch_predictions, tile_volume
from .volumes import BinaryMask, ConnectedComponent, LabelVolume, Volume3D, check_same_grid, connected_components

__all__ = [
    "LesionCandidate",
    "PredictionResult",
    "entropy_from_probs",
    "predict_volume",
    "extract_lesions",
    "patient_score",
    "predict_case",
    "select_decision_threshold",
    "write_candidates_csv",
    "write_montage",
]

DEFAULT_MIN_LESION_VOXELS = 20
DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.96, 0.05), 2))


@dataclass(frozen=True)
class LesionCandidate:
    """Connected blob of supra-threshold probability."""

    component: ConnectedComponent
    score: float
    volume_mm3: float

    @property
    def size(self) -> int:
        return self.component.size

    @property
    def centroid(self) -> tuple[float, float, float]:
        return self.component.centroid


@dataclass
class PredictionResult:
    """Stitched maps plus derived candidates for one case."""

    probability: Volume3D
    entropy: Volume3D
    candidates: list[LesionCandidate]
    patient_score: float


def entropy_from_probs(class_probs: np.ndarray) -> np.ndarray:
    """Voxel-wise Shannon entropy -sum_c p ln p of a (C, ...) grid."""
    p = np.asarray(class_probs, dtype=np.float64)
    return -(p * np.log(np.clip(p, 1e-12, None))).sum(axis=0)


def predict_volume(
    model: LesionDetectionNet,
    vol: Volume3D,
    prostate: BinaryMask,
    spec: PatchSpec | None = None,
    blend: str = "gaussian",
    batch_size: int = 4,
) -> tuple[Volume3D, Volume3D]:
    """Tile, forward, stitch; returns (lesion probability, entropy) volumes.

    Only the full-resolution prediction head contributes.  Both maps are
    zeroed outside the prostate mask.  Volumes smaller than the patch are
    zero-padded for inference and cropped back afterwards.
    """
    check_same_grid(vol, prostate, "volume and prostate mask")
    if prostate.is_empty():
        raise DegenerateInputError("prostate mask is empty")
    spec = spec or PatchSpec(size=model.config.patch_size)
    if tuple(spec.size) != model.config.patch_size:
        raise ValueError(f"patch spec size {spec.size} does not match model patch {model.config.patch_size}")

    padded, pad_before = _pad_to_size(vol.data.astype(np.float32), spec.size)
    origins = tile_volume(padded.shape, spec)

    was_training = model.training
    model.eval()
    tiles = []
    try:
        with torch.no_grad():
            for start in range(0, len(origins), batch_size):
                chunk = origins[start:start + batch_size]
                batch = np.stack(
                    [padded[tuple(slice(o, o + s) for o, s in zip(org, spec.size))] for org in chunk]
                )
                x = torch.from_numpy(batch).unsqueeze(1)
                seg_logits, _ = model(x)
                probs = F.softmax(seg_logits[0], dim=1).numpy().astype(np.float64)
                tiles += list(zip(chunk, probs))
    finally:
        if was_training:
            model.train()

    stitched = stitch_predictions(tiles, padded.shape, blend=blend)
    crop = tuple(slice(b, b + n) for b, n in zip(pad_before, vol.shape))
    stitched = stitched[(slice(None),) + crop]

    entropy = entropy_from_probs(stitched)
    lesion_prob = stitched[1]
    outside = ~prostate.data
    lesion_prob = lesion_prob.copy()
    lesion_prob[outside] = 0.0
    entropy[outside] = 0.0
    return (
        Volume3D(lesion_prob.astype(np.float32), vol.spacing, vol.origin),
        Volume3D(entropy.astype(np.float32), vol.spacing, vol.origin),
    )


def extract_lesions(
    prob: Volume3D,
    prostate: BinaryMask,
    threshold: float,
    min_size_voxels: int = DEFAULT_MIN_LESION_VOXELS,
) -> list[LesionCandidate]:
    """Threshold inside the mask, split into 26-connected components,
    drop small ones; candidate score is the peak probability."""
    check_same_grid(prob, prostate, "probability and prostate mask")
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {threshold}")
    binary = BinaryMask((prob.data > threshold) & prostate.data, prob.spacing, prob.origin)
    voxel_mm3 = prob.voxel_volume_mm3
    candidates = []
    for comp in connected_components(binary, connectivity=26):
        if comp.size < min_size_voxels:
            continue
        score = float(prob.data[comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]].max())
        candidates.append(LesionCandidate(comp, score, comp.size * voxel_mm3))
    candidates.sort(key=lambda c: (-c.score, c.centroid))
    return candidates


def patient_score(candidates: list[LesionCandidate]) -> float:
    """Case-level score: the best candidate score, 0 with no candidates."""
    return max((c.score for c in candidates), default=0.0)


def predict_case(
    model: LesionDetectionNet,
    vol: Volume3D,
    prostate: BinaryMask,
    threshold: float,
    spec: PatchSpec | None = None,
    min_size_voxels: int = DEFAULT_MIN_LESION_VOXELS,
    blend: str = "gaussian",
) -> PredictionResult:
    prob, entropy = predict_volume(model, vol, prostate, spec, blend)
    candidates = extract_lesions(prob, prostate, threshold, min_size_voxels)
    return PredictionResult(prob, entropy, candidates, patient_score(candidates))


def select_decision_threshold(
    cases: list[tuple[str, Volume3D, LabelVolume, BinaryMask]],
    min_size_voxels: int = DEFAULT_MIN_LESION_VOXELS,
    grid=DEFAULT_THRESHOLD_GRID,
) -> tuple[float, float]:
    """Pick the probability cutoff maximizing lesion-level Youden's J.

    ``cases`` are (case_id, probability volume, truth, prostate) tuples,
    typically the validation split.  Returns (threshold, J).  Ties and
    undefined panels resolve toward the smallest threshold.
    """
    best_tau, best_j = float(grid[0]), -np.inf
    for tau in grid:
        evals = []
        for case_id, prob, truth, prostate in cases:
            cands = extract_lesions(prob, prostate, float(tau), min_size_voxels)
            evals.append(
                evaluate_case(case_id, prob.data, truth, prostate, cands, patient_score(cands))
            )
        total = ConfusionCounts()
        for ev in evals:
            total += ConfusionCounts(tp=ev.match.tp, fp=ev.match.fp, tn=ev.match.tn, fn=ev.match.fn)
        panel = metric_panel(total, level="lesion")
        if np.isnan(panel.se) or np.isnan(panel.sp):
            continue
        j = panel.se + panel.sp - 1.0
        if j > best_j + 1e-12:
            best_tau, best_j = float(tau), float(j)
    if not np.isfinite(best_j):
        best_j = 0.0
    return best_tau, best_j


def write_candidates_csv(path, case_id: str, candidates: list[LesionCandidate]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["case_id", "centroid_0", "centroid_1", "centroid_2", "size_voxels", "score"])
        for cand in candidates:
            c = cand.centroid
            writer.writerow([case_id, f"{c[0]:.2f}", f"{c[1]:.2f}", f"{c[2]:.2f}", cand.size, f"{cand.score:.6f}"])


def write_montage(path, vol: Volume3D, prob: Volume3D, entropy: Volume3D, truth: LabelVolume | None = None) -> None:
    """Mid-slice PNG montage (image / probability / entropy) for review."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = vol.shape[0] // 2
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    axes[0].imshow(vol.data[z], cmap="gray")
    axes[0].set_title("image")
    axes[1].imshow(prob.data[z], cmap="magma", vmin=0, vmax=1)
    axes[1].set_title("lesion probability")
    axes[2].imshow(entropy.data[z], cmap="viridis", vmin=0, vmax=float(np.log(2)))
    axes[2].set_title("entropy")
    if truth is not None and truth.data[z].any():
        for ax in axes:
            ax.contour(truth.data[z], levels=[0.5], colors="yellow", linewidths=0.8)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
