"""Synthetic B-mode-like phantom generator.

Each phantom is a speckled tissue volume containing an ellipsoidal
"prostate" with a bright capsule rim, hypoechoic lesions inside the
gland, and hypoechoic confounders that are *not* lesions: shadow
stripes running along the beam axis (crossing the capsule and beyond)
and blobs placed outside the gland.  Lesions and confounders share one
intensity distribution, so nothing separates them except shape and
anatomical context -- exactly the situation that makes false-positive
reduction a meaningful thing to measure.

Generation is pure: the same spec and seed always produce byte-identical
volumes, and per-case seeds are spawned from a master seed so dataset
generation parallelizes cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cases import CaseRecord
from .errors import DegenerateInputError
from .volumes import BinaryMask, LabelVolume, Volume3D, connected_components

__all__ = [
    "PhantomSpec",
    "GeneratedCase",
    "generate_phantom",
    "generate_weak_label",
    "generate_dataset",
]

# Cohort split proportions mirrored by default: train/val/test.
DEFAULT_SPLIT_PROPORTIONS = (0.76, 0.11, 0.13)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, texture and pathology parameters of one phantom family."""

    shape: tuple[int, int, int] = (64, 64, 64)
    prostate_semiaxes: tuple[float, float, float] = (22.0, 18.0, 16.0)
    prostate_jitter: float = 0.1
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (2.5, 8.0)
    target_lesion_fraction: float = 0.04
    stripe_count_range: tuple[int, int] = (1, 3)
    stripe_radius_range: tuple[float, float] = (1.5, 2.5)
    outside_blob_count_range: tuple[int, int] = (1, 3)
    outside_blob_radius_range: tuple[float, float] = (2.0, 4.0)
    speckle_sigma: float = 0.15
    intensity_drop: float = 0.30
    capsule_brightness: float = 1.6
    capsule_thickness: float = 1.5
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in np.ravel(self.shape)))
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ValueError(f"phantom shape must be 3D with dims >= 16, got {self.shape}")
        if not 0.0 < self.target_lesion_fraction < 0.2:
            raise ValueError(f"lesion fraction must lie in (0, 0.2), got {self.target_lesion_fraction}")
        if not 0.0 < self.intensity_drop < 1.0:
            raise ValueError(f"intensity drop must lie in (0,1), got {self.intensity_drop}")
        if self.speckle_sigma <= 0:
            raise ValueError("speckle sigma must be positive")
        for name in ("lesion_count_range", "stripe_count_range", "outside_blob_count_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) pair, got {(lo, hi)}")


@dataclass
class GeneratedCase:
    """One phantom with every derived artifact."""

    record: CaseRecord            # strong-label record
    weak_label: LabelVolume
    confounders: BinaryMask
    lesion_fraction: float
    confounder_count: int


def _coordinate_grids(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _ellipsoid(grids, center, semiaxes) -> np.ndarray:
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semiaxes))
    return q <= 1.0


def _place_lesions(rng, grids, prostate, spec) -> tuple[np.ndarray, int]:
    """Place lesions totalling ~target fraction of the prostate volume."""
    lo, hi = spec.lesion_count_range
    count = int(rng.integers(lo, hi + 1))
    lesions = np.zeros(prostate.shape, dtype=bool)
    if count == 0:
        return lesions, 0
    core = ndimage.binary_erosion(prostate, iterations=2)
    target_total = spec.target_lesion_fraction * float(prostate.sum())
    shares = rng.uniform(0.85, 1.15, size=count)
    shares *= target_total / shares.sum()
    placed = 0
    for share in shares:
        radius = float(np.clip((3.0 * share / (4.0 * np.pi)) ** (1.0 / 3.0), *spec.lesion_radius_range))
        scales = rng.uniform(0.8, 1.25, size=3)
        scales /= np.prod(scales) ** (1.0 / 3.0)  # keep the volume at ~4/3 pi r^3
        semiaxes = radius * scales
        candidates = np.argwhere(core)
        if candidates.shape[0] == 0:
            raise DegenerateInputError("prostate too small for any lesion")
        for _ in range(200):
            center = candidates[rng.integers(candidates.shape[0])]
            blob = _ellipsoid(grids, center, semiaxes)
            if not blob.any():
                continue
            if (blob & ~core).any() or (blob & lesions).any():
                continue
            lesions |= blob
            placed += 1
            break
        else:
            raise DegenerateInputError(
                f"could not place a lesion of radius {radius:.1f}; spec infeasible for this prostate"
            )
    return lesions, placed


def _place_stripes(rng, grids, prostate, lesions, spec) -> np.ndarray:
    """Shadow stripes: full-length cylinders along axis 0 through the gland."""
    lo, hi = spec.stripe_count_range
    count = int(rng.integers(lo, hi + 1))
    stripes = np.zeros(prostate.shape, dtype=bool)
    in_gland = np.argwhere(prostate.any(axis=0))
    for _ in range(count):
        for _ in range(100):
            radius = rng.uniform(*spec.stripe_radius_range)
            cy, cx = in_gland[rng.integers(in_gland.shape[0])]
            cylinder = ((grids[1] - cy) ** 2 + (grids[2] - cx) ** 2) <= radius**2
            if (cylinder & lesions).any():
                continue
            stripes |= cylinder
            break
    return stripes


def _place_outside_blobs(rng, grids, prostate, spec) -> np.ndarray:
    """Hypoechoic blobs in the surrounding tissue, clear of the gland."""
    lo, hi = spec.outside_blob_count_range
    count = int(rng.integers(lo, hi + 1))
    blobs = np.zeros(prostate.shape, dtype=bool)
    margin = int(np.ceil(spec.outside_blob_radius_range[1])) + 1
    keepout = ndimage.binary_dilation(prostate, iterations=2)
    outside = np.zeros(prostate.shape, dtype=bool)
    inner = tuple(slice(margin, n - margin) for n in prostate.shape)
    outside[inner] = ~keepout[inner]
    candidates = np.argwhere(outside)
    for _ in range(count):
        for _ in range(100):
            radius = rng.uniform(*spec.outside_blob_radius_range)
            center = candidates[rng.integers(candidates.shape[0])]
            blob = _ellipsoid(grids, center, (radius, radius, radius))
            if (blob & keepout).any():
                continue
            blobs |= blob
            break
    return blobs


def generate_phantom(
    spec: PhantomSpec,
    seed: int,
    case_id: str | None = None,
    n_lesions: int | None = None,
) -> tuple[CaseRecord, BinaryMask]:
    """Generate one phantom: (strong-label case record, confounder mask).

    ``n_lesions`` overrides the spec's lesion count range (0 builds a
    patient-negative case).  Deterministic per (spec, seed).
    """
    rng = np.random.default_rng(seed)
    shape = spec.shape
    grids = _coordinate_grids(shape)

    center = np.asarray(shape, dtype=float) / 2.0 + rng.uniform(-2.0, 2.0, size=3)
    semiaxes = np.asarray(spec.prostate_semiaxes) * rng.uniform(
        1.0 - spec.prostate_jitter, 1.0 + spec.prostate_jitter, size=3
    )
    semiaxes = np.minimum(semiaxes, np.asarray(shape) / 2.0 - spec.capsule_thickness - 2.0)
    prostate = _ellipsoid(grids, center, semiaxes)
    capsule = _ellipsoid(grids, center, semiaxes + spec.capsule_thickness) & ~prostate

    lesion_spec = spec if n_lesions is None else _with_lesion_count(spec, n_lesions)
    lesions, _ = _place_lesions(rng, grids, prostate, lesion_spec)
    stripes = _place_stripes(rng, grids, prostate, lesions, spec)
    blobs = _place_outside_blobs(rng, grids, prostate, spec)
    confounders = stripes | blobs

    base = np.ones(shape, dtype=np.float64)
    base[capsule] = spec.capsule_brightness
    # Shadow knocks out the capsule echo where it crosses, so lesion and
    # confounder voxels share one intensity distribution exactly.
    dark = lesions | confounders
    base[dark] = 1.0 - spec.intensity_drop

    sigma2 = spec.speckle_sigma**2
    speckle = rng.gamma(shape=1.0 / sigma2, scale=sigma2, size=shape)
    data = (base * speckle).astype(np.float32)

    if case_id is None:
        case_id = f"phantom-{seed:08d}"
    record = CaseRecord(
        case_id=case_id,
        volume=Volume3D(data, spec.spacing),
        prostate=BinaryMask(prostate, spec.spacing),
        label=LabelVolume(lesions.astype(np.uint8), "strong", spec.spacing),
        split="train",
    )
    return record, BinaryMask(confounders, spec.spacing)


def _with_lesion_count(spec: PhantomSpec, n: int) -> PhantomSpec:
    from dataclasses import replace

    return replace(spec, lesion_count_range=(n, n))


_DILATE_STRUCT = ndimage.generate_binary_structure(3, 1)


def generate_weak_label(
    strong: LabelVolume,
    prostate: BinaryMask,
    rng: np.random.Generator,
    dilate_range: tuple[int, int] = (1, 3),
    jitter_max: int = 2,
) -> LabelVolume:
    """Simulate a reader-drawn outline from a confirmed one.

    Each lesion component is shifted by a random offset of at most
    ``jitter_max`` voxels per axis and dilated by a random 1..3 voxel
    amount, then clipped to the prostate.  With zero jitter and zero
    dilation this is the identity.
    """
    out = np.zeros(strong.shape, dtype=bool)
    for comp in connected_components(strong.as_mask(), connectivity=26):
        offset = rng.integers(-jitter_max, jitter_max + 1, size=3) if jitter_max > 0 else np.zeros(3, int)
        moved = comp.voxels + offset
        keep = ((moved >= 0) & (moved < np.asarray(strong.shape))).all(axis=1)
        moved = moved[keep]
        piece = np.zeros(strong.shape, dtype=bool)
        piece[moved[:, 0], moved[:, 1], moved[:, 2]] = True
        k = int(rng.integers(dilate_range[0], dilate_range[1] + 1))
        if k > 0:
            piece = ndimage.binary_dilation(piece, structure=_DILATE_STRUCT, iterations=k)
        out |= piece
    out &= prostate.data
    return LabelVolume(out.astype(np.uint8), "weak", strong.spacing, strong.origin)


def _largest_remainder(total: int, proportions) -> list[int]:
    raw = [total * p for p in proportions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = np.argsort([c - r for c, r in zip(counts, raw)])  # most-short first
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


def generate_dataset(
    n_cases: int,
    positive_fraction: float,
    spec: PhantomSpec,
    master_seed: int,
    split_counts: tuple[int, int, int] | None = None,
) -> list[GeneratedCase]:
    """Generate a stratified phantom cohort with train/val/test splits.

    Split sizes default to the 76/11/13 percent proportions (largest
    remainder rounding); pass explicit ``split_counts`` to override.
    Positivity is stratified across splits.  Deterministic per master
    seed.
    """
    if n_cases < 10:
        raise ValueError(f"need at least 10 cases, got {n_cases}")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0,1]")
    if split_counts is None:
        split_counts = tuple(_largest_remainder(n_cases, DEFAULT_SPLIT_PROPORTIONS))
    if sum(split_counts) != n_cases:
        raise ValueError(f"split counts {split_counts} do not sum to {n_cases}")

    n_pos = int(round(n_cases * positive_fraction))
    pos_per_split = _largest_remainder(n_pos, [c / n_cases for c in split_counts])
    for p, c in zip(pos_per_split, split_counts):
        if p > c:
            raise DegenerateInputError(f"cannot stratify {n_pos} positives into splits {split_counts}")

    seed_seq = np.random.SeedSequence(master_seed)
    case_seeds = seed_seq.generate_state(2 * n_cases, dtype=np.uint32)

    assignments = []  # (split, positive?)
    for split, total, pos in zip(("train", "val", "test"), split_counts, pos_per_split):
        assignments += [(split, True)] * pos + [(split, False)] * (total - pos)

    cases = []
    for i, (split, positive) in enumerate(assignments):
        gen_seed = int(case_seeds[2 * i])
        record, confounders = generate_phantom(
            spec, gen_seed, case_id=f"case_{i:04d}", n_lesions=None if positive else 0
        )
        if positive and not record.label.data.any():
            raise DegenerateInputError(f"case {i}: positive case came out empty")
        record.split = split
        weak_rng = np.random.default_rng(int(case_seeds[2 * i + 1]))
        weak = generate_weak_label(record.label, record.prostate, weak_rng)
        fraction = float(record.label.data.sum()) / float(record.prostate.count())
        n_conf = len(connected_components(confounders, connectivity=26))
        cases.append(
            GeneratedCase(
                record=record,
                weak_label=weak,
                confounders=confounders,
                lesion_fraction=fraction,
                confounder_count=n_conf,
            )
        )
    return cases
