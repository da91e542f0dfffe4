"""Training-patch sampling and sliding-window tiling/stitching.

Training draws fixed-size patches centred inside the prostate mask,
optionally biased toward lesion voxels (cancer occupies only a few
percent of prostate voxels, so unbiased sampling rarely sees it at
small scale).  Inference tiles a whole volume with overlapping patches
and stitches per-tile predictions with weight-normalized averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError
from .volumes import BinaryMask, LabelVolume, Volume3D, check_same_grid

__all__ = ["PatchSpec", "Patch", "sample_training_patch", "tile_volume", "stitch_predictions"]


def _as_size(value) -> tuple[int, int, int]:
    arr = np.asarray(value, dtype=int).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise ValueError(f"expected scalar or 3-vector extent, got {value!r}")
    return (int(arr[0]), int(arr[1]), int(arr[2]))


@dataclass(frozen=True)
class PatchSpec:
    """Per-axis patch extent and inference stride (stride defaults to size/2)."""

    size: tuple[int, int, int] = (128, 128, 128)
    stride: tuple[int, int, int] | None = None

    def __post_init__(self):
        size = _as_size(self.size)
        if any(s < 1 for s in size):
            raise ValueError(f"patch size must be positive, got {size}")
        stride = _as_size(self.stride) if self.stride is not None else tuple(max(1, s // 2) for s in size)
        if any(not (1 <= st <= sz) for st, sz in zip(stride, size)):
            raise ValueError(f"stride must lie in [1, size], got {stride} for size {size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "stride", stride)


@dataclass(frozen=True)
class Patch:
    """One training patch.

    ``origin`` is the parent-grid index of the patch voxel (0,0,0); it is
    negative along axes where the parent volume was zero-padded.  ``valid``
    is True on real voxels and False on padding, so padded voxels can be
    excluded from losses.
    """

    image: np.ndarray
    label: np.ndarray
    valid: np.ndarray
    origin: tuple[int, int, int]
    patch_class: str | None = None

    def __post_init__(self):
        if not (self.image.shape == self.label.shape == self.valid.shape):
            raise ValueError("patch image/label/valid shapes must match")
        if self.patch_class not in (None, "cancer", "normal"):
            raise ValueError(f"patch_class must be 'cancer' or 'normal', got {self.patch_class!r}")


def _pad_to_size(arr: np.ndarray, size: tuple[int, int, int], fill=0):
    """Symmetric zero-pad up to ``size``; returns (padded, pad_before)."""
    pad_before = []
    pad_pairs = []
    for n, target in zip(arr.shape, size):
        deficit = max(0, target - n)
        before = deficit // 2
        pad_before.append(before)
        pad_pairs.append((before, deficit - before))
    padded = np.pad(arr, pad_pairs, mode="constant", constant_values=fill)
    return padded, tuple(pad_before)


def sample_training_patch(
    vol: Volume3D,
    prostate: BinaryMask,
    label: LabelVolume,
    spec: PatchSpec,
    rng: np.random.Generator,
    positive_bias: float = 0.5,
) -> Patch:
    """Draw one random patch whose centre lies inside the prostate mask.

    With probability ``positive_bias`` the centre is drawn from lesion
    voxels instead (when any exist).  Volumes smaller than the patch are
    zero-padded symmetrically; the padded shell is marked invalid.
    """
    check_same_grid(vol, prostate, "volume and prostate mask")
    check_same_grid(vol, label, "volume and label")
    if prostate.is_empty():
        raise DegenerateInputError("prostate mask is empty")
    if not 0.0 <= positive_bias <= 1.0:
        raise ValueError(f"positive_bias must be in [0,1], got {positive_bias}")

    lesion_idx = np.argwhere(label.data != 0)
    if lesion_idx.shape[0] > 0 and rng.random() < positive_bias:
        center = lesion_idx[rng.integers(lesion_idx.shape[0])]
    else:
        prostate_idx = np.argwhere(prostate.data)
        center = prostate_idx[rng.integers(prostate_idx.shape[0])]

    image, pad_before = _pad_to_size(vol.data, spec.size)
    label_p, _ = _pad_to_size(label.data, spec.size)
    valid = np.zeros(image.shape, dtype=bool)
    valid[tuple(slice(b, b + n) for b, n in zip(pad_before, vol.shape))] = True

    center_p = np.asarray(center) + np.asarray(pad_before)
    origin_p = np.clip(
        center_p - np.asarray(spec.size) // 2,
        0,
        np.asarray(image.shape) - np.asarray(spec.size),
    )
    sl = tuple(slice(o, o + s) for o, s in zip(origin_p, spec.size))
    origin_parent = tuple(int(o - b) for o, b in zip(origin_p, pad_before))
    return Patch(
        image=np.ascontiguousarray(image[sl]),
        label=np.ascontiguousarray(label_p[sl]),
        valid=np.ascontiguousarray(valid[sl]),
        origin=origin_parent,
    )


def tile_volume(shape, spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Sliding-window tile origins covering ``shape`` completely.

    Per axis the origins step by the stride; the last origin is clamped
    so the final tile ends exactly on the boundary.  ``shape`` must be
    at least the patch size on every axis (pad smaller volumes first).
    """
    shape = _as_size(shape)
    if any(n < s for n, s in zip(shape, spec.size)):
        raise ValueError(f"shape {shape} is smaller than patch size {spec.size}; pad first")
    per_axis = []
    for n, size, stride in zip(shape, spec.size, spec.stride):
        last = n - size
        starts = list(range(0, last + 1, stride))
        if starts[-1] != last:
            starts.append(last)
        per_axis.append(starts)
    origins = [
        (a, b, c)
        for a in per_axis[0]
        for b in per_axis[1]
        for c in per_axis[2]
    ]
    return origins


def _gaussian_weight(size: tuple[int, int, int]) -> np.ndarray:
    # Separable window peaked at the tile centre, sigma = size/8 per axis.
    axes = []
    for n in size:
        x = np.arange(n, dtype=np.float64)
        c = (n - 1) / 2.0
        sigma = max(n / 8.0, 1e-6)
        axes.append(np.exp(-((x - c) ** 2) / (2.0 * sigma**2)))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def stitch_predictions(
    tiles: list[tuple[tuple[int, int, int], np.ndarray]],
    shape,
    blend: str = "gaussian",
) -> np.ndarray:
    """Merge overlapping tile predictions into one volume.

    Every voxel becomes the weight-normalized average of the tiles that
    cover it; accumulation is associative, so tile order does not matter.
    Tile arrays may carry leading channel dimensions ahead of the three
    spatial ones.  Raises if any voxel is left uncovered.
    """
    shape = _as_size(shape)
    if blend not in ("uniform", "gaussian"):
        raise ValueError(f"blend must be 'uniform' or 'gaussian', got {blend!r}")
    if not tiles:
        raise ValueError("no tiles to stitch")

    lead = tuple(tiles[0][1].shape[:-3])
    num = np.zeros(lead + shape, dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    for origin, patch in tiles:
        patch = np.asarray(patch, dtype=np.float64)
        size = patch.shape[-3:]
        if patch.shape[:-3] != lead:
            raise ValueError("all tiles must share leading channel dims")
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        if any(s.start < 0 or s.stop > n for s, n in zip(sl, shape)):
            raise ValueError(f"tile at {origin} with size {size} exceeds shape {shape}")
        w = _gaussian_weight(size) if blend == "gaussian" else np.ones(size)
        num[(...,) + sl] += w * patch
        den[sl] += w
    if not (den > 0).all():
        raise ValueError("tiles do not cover the full volume")
    return num / den
