"""Dataset manifests: ingestion, splitting, undersampling and validation.

Manifests are immutable; every operation returns a new one. On disk a
manifest is JSON Lines: an optional header object carrying ``label_space``
and ``provenance``, then one record per line.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import warnings
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDatasetError, ManifestError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
IMAGE_SUFFIXES = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}
HEADER_KEY = "manifest_version"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    generator: str = "none"
    year: int | None = None
    format: str = "PNG"
    split: str = UNASSIGNED

    def __post_init__(self):
        if self.split not in SPLITS + (UNASSIGNED,):
            raise ManifestError(f"unknown split {self.split!r} for {self.path}")
        if self.format not in ("PNG", "JPEG"):
            raise ManifestError(f"unknown format {self.format!r} for {self.path}")
        if self.year is not None and self.year < 2014:
            raise ManifestError(f"year {self.year} before 2014 for {self.path}")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    label_space: tuple[str, ...]
    provenance: str = ""

    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def select(self, split: str | None = None, labels: Iterable[str] | None = None) -> "DatasetManifest":
        keep = set(labels) if labels is not None else None
        recs = tuple(r for r in self.records
                     if (split is None or r.split == split) and (keep is None or r.label in keep))
        return dataclasses.replace(self, records=recs)

    def counts(self) -> dict[str, dict[str, int]]:
        table: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        for r in self.records:
            table[r.label][r.split] += 1
        return {lab: dict(v) for lab, v in table.items()}

    def __len__(self) -> int:
        return len(self.records)


def _label_space_of(records: Sequence[ManifestRecord]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for r in records:
        seen.setdefault(r.label)
    return tuple(seen)


def make_manifest(records: Sequence[ManifestRecord], label_space: Sequence[str] | None = None,
                  provenance: str = "") -> DatasetManifest:
    records = tuple(records)
    return DatasetManifest(records, tuple(label_space or _label_space_of(records)), provenance)


def merge_manifests(manifests: Sequence[DatasetManifest], provenance: str = "") -> DatasetManifest:
    records = tuple(r for m in manifests for r in m.records)
    space: dict[str, None] = {}
    for m in manifests:
        for lab in m.label_space:
            space.setdefault(lab)
    return DatasetManifest(records, tuple(space),
                           provenance or "; ".join(m.provenance for m in manifests if m.provenance))


# --------------------------------------------------------------------------
# serialization

def write_manifest(m: DatasetManifest, path) -> None:
    lines = [json.dumps({HEADER_KEY: MANIFEST_VERSION, "label_space": list(m.label_space),
                         "provenance": m.provenance}, sort_keys=True)]
    lines += [json.dumps(dataclasses.asdict(r), sort_keys=True, ensure_ascii=False)
              for r in m.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    header: dict = {}
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if HEADER_KEY in obj:
            if obj[HEADER_KEY] != MANIFEST_VERSION:
                raise ManifestError(f"{path}: unsupported manifest version {obj[HEADER_KEY]!r}")
            header = obj
            continue
        try:
            records.append(ManifestRecord(**obj))
        except TypeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return make_manifest(records, header.get("label_space"), header.get("provenance", ""))


# --------------------------------------------------------------------------
# operations

def ingest_directory(root, label: str, generator: str = "none", year: int | None = None,
                     provenance: str = "") -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset directory not found: {root}")
    files = sorted((p for p in root.rglob("*")
                    if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                   key=lambda p: p.as_posix())
    if not files:
        raise EmptyDatasetError(f"no PNG or JPEG files under {root}")
    records = [ManifestRecord(p.as_posix(), label, generator, year,
                              IMAGE_SUFFIXES[p.suffix.lower()]) for p in files]
    return DatasetManifest(tuple(records), (label,), provenance or f"ingested from {root}")


def _class_rng(seed: int, label: str, purpose: str) -> np.random.Generator:
    key = [seed & (2**64 - 1), zlib.crc32(label.encode()), zlib.crc32(purpose.encode())]
    return np.random.default_rng(np.random.SeedSequence(key))


def largest_remainder(total: int, weights: Sequence[Fraction | float]) -> list[int]:
    """Integer apportionment of ``total``; remainder ties favour earlier entries."""
    weights = [Fraction(w).limit_denominator(10**9) for w in weights]
    wsum = sum(weights)
    quotas = [total * w / wsum for w in weights]
    counts = [int(q) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split_manifest(m: DatasetManifest, ratios: Sequence[float] = (0.6, 0.2, 0.2),
                   seed: int = 0) -> DatasetManifest:
    """Assign unassigned records to train/val/test per class.

    Records that already carry a split keep it.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    by_label: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(m.records):
        if r.split == UNASSIGNED:
            by_label[r.label].append(i)
    new_split: dict[int, str] = {}
    for label, idx in by_label.items():
        if len(idx) < 3 and all(r > 0 for r in ratios):
            warnings.warn(f"class {label!r} has only {len(idx)} unassigned records; "
                          "filling train, then val, then test", stacklevel=2)
        perm = _class_rng(seed, label, "split").permutation(len(idx))
        counts = largest_remainder(len(idx), ratios)
        bounds = np.cumsum([0] + counts)
        for s, name in enumerate(SPLITS):
            for j in perm[bounds[s]:bounds[s + 1]]:
                new_split[idx[j]] = name
    records = tuple(dataclasses.replace(r, split=new_split[i]) if i in new_split else r
                    for i, r in enumerate(m.records))
    return dataclasses.replace(m, records=records)


def undersample(m: DatasetManifest, label: str, cap: int, seed: int = 0) -> DatasetManifest:
    """Reduce ``label`` to at most ``cap`` records, stratified by split."""
    if cap < 1:
        raise ManifestError(f"cap must be >= 1, got {cap}")
    if label not in m.label_space:
        raise ManifestError(f"unknown class {label!r}")
    idx = [i for i, r in enumerate(m.records) if r.label == label]
    if len(idx) <= cap:
        return m
    groups: dict[str, list[int]] = defaultdict(list)
    for i in idx:
        groups[m.records[i].split].append(i)
    names = [s for s in SPLITS + (UNASSIGNED,) if s in groups]
    quotas = largest_remainder(cap, [len(groups[s]) for s in names])
    keep: set[int] = set()
    for name, quota in zip(names, quotas):
        members = groups[name]
        chosen = _class_rng(seed, label, f"undersample/{name}").choice(len(members), quota,
                                                                      replace=False)
        keep.update(members[j] for j in chosen)
    records = tuple(r for i, r in enumerate(m.records) if r.label != label or i in keep)
    log.info("undersampled %s from %d to %d records", label, len(idx), cap)
    return dataclasses.replace(m, records=records)


@dataclass(frozen=True)
class Violation:
    kind: str
    path: str
    detail: str

    def to_dict(self) -> dict[str, str]:
        return dataclasses.asdict(self)


def validate_manifest(m: DatasetManifest, check_files: bool = True) -> list[Violation]:
    out: list[Violation] = []
    seen = Counter(r.path for r in m.records)
    for path, n in seen.items():
        if n > 1:
            out.append(Violation("duplicate-path", path, f"listed {n} times"))
    labels = set(m.label_space)
    for r in m.records:
        if r.label not in labels:
            out.append(Violation("unknown-label", r.path, f"label {r.label!r} not in label space"))
        if check_files and not Path(r.path).is_file():
            out.append(Violation("missing-file", r.path, "file does not exist"))
    present = {r.label for r in m.records}
    for lab in m.label_space:
        if lab not in present:
            out.append(Violation("empty-label", "", f"no records for class {lab!r}"))
    used = {r.split for r in m.records}
    if used - {UNASSIGNED}:
        for s in SPLITS:
            if s not in used:
                out.append(Violation("empty-split", "", f"split {s!r} has no records"))
    return out
