"""Grid-aligned volumetric data model and shared 3D utilities.

Arrays are indexed ``(axis0, axis1, axis2)`` and carry per-axis voxel
spacing plus a physical origin, both in millimetres.  All operations in
this module are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, GridMismatchError

__all__ = [
    "Volume3D",
    "BinaryMask",
    "LabelVolume",
    "ConnectedComponent",
    "same_grid",
    "check_same_grid",
    "connected_components",
    "normalize_intensity",
    "crop_to_bbox",
    "paste_into",
]


def _as_triple(value) -> tuple[float, float, float]:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise ValueError(f"expected a scalar or 3-vector, got shape {arr.shape}")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity grid with physical spacing and origin (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))


@dataclass(frozen=True)
class BinaryMask:
    """Boolean voxel mask on the same grid as its paired volume."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if data.dtype != bool:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be boolean or {0,1}")
            data = data.astype(bool)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not bool(self.data.any())


@dataclass(frozen=True)
class LabelVolume:
    """Voxel ground truth: 0 = background, 1 = lesion.

    ``provenance`` distinguishes reader-drawn outlines (``"weak"``) from
    pathology-confirmed annotations (``"strong"``).
    """

    data: np.ndarray
    provenance: str = "strong"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label must be 3D, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("label values must be in {0,1}")
        if self.provenance not in ("weak", "strong"):
            raise ValueError(f"provenance must be 'weak' or 'strong', got {self.provenance!r}")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_mask(self) -> BinaryMask:
        return BinaryMask(self.data.astype(bool), self.spacing, self.origin)


@dataclass(frozen=True)
class ConnectedComponent:
    """One connected region of true voxels.

    ``voxels`` is an ``(n, 3)`` integer index array in lexicographic
    order, so equal components compare equal voxel-for-voxel.
    """

    voxels: np.ndarray
    size: int = field(init=False)
    centroid: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        voxels = np.asarray(self.voxels, dtype=np.int64)
        if voxels.ndim != 2 or voxels.shape[1] != 3 or voxels.shape[0] == 0:
            raise ValueError("component voxels must be a non-empty (n, 3) index array")
        order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0]))
        voxels = voxels[order]
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "size", int(voxels.shape[0]))
        object.__setattr__(self, "centroid", tuple(voxels.mean(axis=0).tolist()))

    def to_mask(self, shape: tuple[int, int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]] = True
        return out


def same_grid(a, b, atol: float = 1e-6) -> bool:
    """True when two carriers share shape and spacing (origin excluded)."""
    return a.shape == b.shape and np.allclose(a.spacing, b.spacing, atol=atol)


def check_same_grid(a, b, what: str = "inputs") -> None:
    if not same_grid(a, b):
        raise GridMismatchError(
            f"{what} must share a grid: {a.shape}/{a.spacing} vs {b.shape}/{b.spacing}"
        )


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: BinaryMask, connectivity: int = 26) -> list[ConnectedComponent]:
    """Split true voxels of ``mask`` into connected components.

    Components are ordered by (size descending, centroid lexicographic),
    so the result does not depend on voxel enumeration order.  An empty
    mask yields an empty list.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    labeled, n = ndimage.label(mask.data, structure=_STRUCTURES[connectivity])
    components = []
    for index in range(1, n + 1):
        components.append(ConnectedComponent(np.argwhere(labeled == index)))
    components.sort(key=lambda c: (-c.size, c.centroid))
    return components


def normalize_intensity(vol: Volume3D, roi: BinaryMask) -> Volume3D:
    """Percentile min-max normalization into [0, 1].

    Intensities are clipped to the 1st/99th percentiles computed inside
    ``roi`` and rescaled linearly.  Percentiles use order statistics
    (lower/higher rather than interpolated), which makes re-application
    with the same ROI the identity.  Raises
    :class:`DegenerateInputError` when the ROI intensity range collapses
    (p99 == p1).
    """
    check_same_grid(vol, roi, "volume and ROI")
    if roi.is_empty():
        raise DegenerateInputError("ROI is empty")
    inside = vol.data[roi.data]
    p1 = np.percentile(inside, 1.0, method="lower")
    p99 = np.percentile(inside, 99.0, method="higher")
    if p99 <= p1:
        raise DegenerateInputError(f"degenerate ROI intensities: p1 == p99 == {p1:g}")
    out = (np.clip(vol.data, p1, p99) - p1) / (p99 - p1)
    return replace(vol, data=out.astype(np.float32))


def crop_to_bbox(
    vol: Volume3D, mask: BinaryMask, margin_voxels: int = 0
) -> tuple[Volume3D, tuple[int, int, int]]:
    """Crop ``vol`` to the mask bounding box expanded by a voxel margin.

    The box is clamped to the volume bounds.  Returns the sub-volume and
    the offset of its first voxel in the parent grid; the sub-volume's
    physical origin is shifted accordingly.
    """
    check_same_grid(vol, mask, "volume and mask")
    if mask.is_empty():
        raise DegenerateInputError("cannot crop to an empty mask")
    if margin_voxels < 0:
        raise ValueError("margin_voxels must be >= 0")
    idx = np.argwhere(mask.data)
    lo = np.maximum(idx.min(axis=0) - margin_voxels, 0)
    hi = np.minimum(idx.max(axis=0) + margin_voxels + 1, vol.shape)
    sub = vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    origin = tuple(o + int(l) * s for o, l, s in zip(vol.origin, lo, vol.spacing))
    return Volume3D(sub, vol.spacing, origin), (int(lo[0]), int(lo[1]), int(lo[2]))


def paste_into(parent: np.ndarray, sub: np.ndarray, offset: tuple[int, int, int]) -> np.ndarray:
    """Write ``sub`` back into a copy of ``parent`` at ``offset``."""
    out = parent.copy()
    sl = tuple(slice(o, o + s) for o, s in zip(offset, sub.shape))
    out[sl] = sub
    return out
