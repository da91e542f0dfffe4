"""Case records and the on-disk manifest format.

A manifest is a CSV with one row per (case, label-provenance) pair:

    case_id,image,prostate_mask,label,provenance,split

Paths are relative to the manifest's directory.  A case that carries
both a weak (reader-drawn) and a strong (pathology-confirmed) label
appears twice, once per provenance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .volio import load_label, load_mask, load_volume
from .volumes import BinaryMask, LabelVolume, Volume3D

__all__ = ["CaseRecord", "ManifestEntry", "load_manifest", "save_manifest", "load_case"]

_SPLITS = ("train", "val", "test")
_FIELDS = ("case_id", "image", "prostate_mask", "label", "provenance", "split")


@dataclass
class CaseRecord:
    """One case held in memory."""

    case_id: str
    volume: Volume3D
    prostate: BinaryMask
    label: LabelVolume
    split: str = "train"

    def __post_init__(self):
        if self.split not in _SPLITS:
            raise ValueError(f"split must be one of {_SPLITS}, got {self.split!r}")

    @property
    def provenance(self) -> str:
        return self.label.provenance

    @property
    def is_positive(self) -> bool:
        return bool(self.label.data.any())


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image: str
    prostate_mask: str
    label: str
    provenance: str
    split: str


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for e in entries:
            writer.writerow([e.case_id, e.image, e.prostate_mask, e.label, e.provenance, e.split])


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != _FIELDS:
            raise ConfigError(
                f"manifest {path} must have columns {','.join(_FIELDS)}, got {reader.fieldnames}"
            )
        entries = []
        for i, row in enumerate(reader, start=2):
            if any(not (row.get(k) or "").strip() for k in _FIELDS):
                raise ConfigError(f"manifest {path} line {i}: empty field")
            if row["provenance"] not in ("weak", "strong"):
                raise ConfigError(f"manifest {path} line {i}: bad provenance {row['provenance']!r}")
            if row["split"] not in _SPLITS:
                raise ConfigError(f"manifest {path} line {i}: bad split {row['split']!r}")
            entries.append(ManifestEntry(**{k: row[k].strip() for k in _FIELDS}))
    return entries


def load_case(entry: ManifestEntry, root) -> CaseRecord:
    """Load the volume/mask/label files behind a manifest entry."""
    root = Path(root)
    return CaseRecord(
        case_id=entry.case_id,
        volume=load_volume(root / entry.image),
        prostate=load_mask(root / entry.prostate_mask),
        label=load_label(root / entry.label, entry.provenance),
        split=entry.split,
    )
