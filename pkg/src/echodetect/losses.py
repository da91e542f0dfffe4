"""Training objectives.

Per-scale segmentation loss (Dice + focal), patch classification
cross-entropy, voxel-wise Shannon entropy, and their weighted sum

    total = seg + lambda_cls * cls + lambda_ent * ent

with lambda_cls = 1.0 and lambda_ent = 0.2 by default.  All losses use
the natural logarithm and operate on probability tensors laid out
channel-first ``(C, *rest)``; the trailing dims may fold in a batch.
Voxels flagged invalid (padding) are excluded from every sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DivergenceError

__all__ = [
    "LossWeights",
    "ABLATION_PRESETS",
    "dice_loss",
    "focal_loss",
    "seg_loss",
    "entropy_loss",
    "classification_loss",
    "total_loss",
]

_LOG_CLAMP = 1e-7

# Ablation presets: which false-positive-reduction pieces are active.
# "+cls"/"+ent"/"+cls+ent" include the weak-label pretraining stage;
# "baseline" is the plain deep-supervised backbone trained from scratch.
ABLATION_PRESETS: dict[str, dict[str, bool]] = {
    "baseline": {"use_pretrained": False, "use_cls": False, "use_ent": False},
    "+cls": {"use_pretrained": True, "use_cls": True, "use_ent": False},
    "+ent": {"use_pretrained": True, "use_cls": False, "use_ent": True},
    "+cls+ent": {"use_pretrained": True, "use_cls": True, "use_ent": True},
}


def _halving_weights(n: int) -> tuple[float, ...]:
    raw = [0.5**i for i in range(n)]
    total = sum(raw)
    return tuple(w / total for w in raw)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objective."""

    lambda_cls: float = 1.0
    lambda_ent: float = 0.2
    dice_weight: float = 0.5
    focal_weight: float = 0.5
    focal_gamma: float = 2.0
    deep_supervision_weights: tuple[float, ...] = (1.0, 0.5, 0.25)

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_ent", "dice_weight", "focal_weight", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        ds = tuple(float(w) for w in self.deep_supervision_weights)
        if not ds or any(w < 0 for w in ds) or sum(ds) <= 0:
            raise ValueError(f"invalid deep-supervision weights {ds}")
        total = sum(ds)
        object.__setattr__(self, "deep_supervision_weights", tuple(w / total for w in ds))

    def scale_weights(self, num_scales: int) -> tuple[float, ...]:
        """Normalized per-scale weights; halve per coarser scale when the
        stored tuple does not match ``num_scales``."""
        if len(self.deep_supervision_weights) == num_scales:
            return self.deep_supervision_weights
        return _halving_weights(num_scales)


def _flatten_valid(grid: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if valid is None:
        return grid.reshape(-1)
    return grid.reshape(-1)[valid.reshape(-1)]


def dice_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    valid: torch.Tensor | None = None,
    smooth: float = 1e-5,
) -> torch.Tensor:
    """1 - soft Dice overlap between lesion probabilities and binary truth."""
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(p.shape)} vs truth {tuple(y.shape)}")
    p_flat = _flatten_valid(p, valid)
    y_flat = _flatten_valid(y.to(p.dtype), valid)
    intersection = (p_flat * y_flat).sum()
    denom = p_flat.sum() + y_flat.sum()
    return 1.0 - (2.0 * intersection + smooth) / (denom + smooth)


def focal_loss(
    probs: torch.Tensor,
    y: torch.Tensor,
    gamma: float = 2.0,
    valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t); gamma 0 is plain cross-entropy."""
    if probs.shape[1:] != y.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(probs.shape)} vs truth {tuple(y.shape)}")
    p_t = probs.gather(0, y.long().unsqueeze(0)).squeeze(0)
    p_t = _flatten_valid(p_t, valid)
    losses = -((1.0 - p_t) ** gamma) * torch.log(p_t.clamp_min(_LOG_CLAMP))
    return losses.mean()


def seg_loss(
    rescaled: list[torch.Tensor],
    y: torch.Tensor,
    weights: LossWeights,
    valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deep-supervised segmentation loss over full-resolution predictions.

    ``rescaled[s-1]`` is the scale-s class-probability grid already
    upsampled to full resolution; each contributes a weighted Dice+focal
    term, with scale weights normalized to sum one.
    """
    if not rescaled:
        raise ValueError("empty prediction pyramid")
    scale_w = weights.scale_weights(len(rescaled))
    total = None
    for w, probs in zip(scale_w, rescaled):
        term = weights.dice_weight * dice_loss(probs[1], y, valid) + weights.focal_weight * focal_loss(
            probs, y, weights.focal_gamma, valid
        )
        total = w * term if total is None else total + w * term
    return total


def entropy_loss(probs: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean voxel-wise Shannon entropy -sum_c p_c ln p_c (0 ln 0 = 0)."""
    contrib = -probs * torch.log(probs.clamp_min(1e-12))
    per_voxel = contrib.sum(dim=0)
    return _flatten_valid(per_voxel, valid).mean()


def classification_loss(class_probs: torch.Tensor, target) -> torch.Tensor:
    """Cross-entropy -ln p_true on patch-class probabilities.

    Accepts one distribution ``(C,)`` with an int target, or a batch
    ``(B, C)`` with a length-B target vector (mean over the batch).
    """
    if class_probs.ndim == 1:
        class_probs = class_probs.unsqueeze(0)
        target = torch.as_tensor([target])
    target = torch.as_tensor(target, device=class_probs.device).long()
    p_true = class_probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp_min(_LOG_CLAMP)).mean()


def total_loss(seg, cls, ent, weights: LossWeights = LossWeights()):
    """Weighted sum seg + lambda_cls*cls + lambda_ent*ent.

    Raises :class:`DivergenceError` on non-finite inputs (the training
    divergence signal).  Works on python floats and torch scalars alike.
    """
    parts = []
    for name, value in (("seg", seg), ("cls", cls), ("ent", ent)):
        v = value if isinstance(value, torch.Tensor) else torch.as_tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(v).all():
            raise DivergenceError(f"non-finite {name} loss: {value}")
        parts.append(v)
    result = parts[0] + weights.lambda_cls * parts[1] + weights.lambda_ent * parts[2]
    if not isinstance(seg, torch.Tensor):
        return float(result)
    return result
