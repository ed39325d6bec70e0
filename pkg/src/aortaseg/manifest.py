"""Patient-level split manifests with leakage guarantees.

A patient (and every scan augmented from that patient) belongs to exactly
one cohort; augmented scans inherit the cohort of their source patient and
the test cohort never receives augmented scans.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
COHORTS = ("train", "valid", "test")


class LeakageError(ValueError):
    """A manifest change would mix patients across cohorts."""


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    cohort: str
    paths: dict[str, str] = field(default_factory=dict)
    augmented_from: str | None = None


@dataclass(frozen=True)
class SplitManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def __post_init__(self):
        cohort_of: dict[str, str] = {}
        for e in self.entries:
            if e.cohort not in COHORTS:
                raise ValueError(f"unknown cohort {e.cohort!r}")
            source = e.augmented_from or e.patient_id
            prior = cohort_of.get(source)
            if prior is not None and prior != e.cohort:
                raise LeakageError(
                    f"patient {source} appears in both {prior!r} and {e.cohort!r}")
            cohort_of[source] = e.cohort

    def cohort_patients(self, cohort: str) -> list[str]:
        return sorted({e.augmented_from or e.patient_id
                       for e in self.entries if e.cohort == cohort})

    def scans(self, cohort: str, augmented: bool | None = None) -> list[ManifestEntry]:
        out = [e for e in self.entries if e.cohort == cohort]
        if augmented is not None:
            out = [e for e in out if (e.augmented_from is not None) == augmented]
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
        }, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "SplitManifest":
        blob = json.loads(Path(path).read_text())
        if blob.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {blob.get('schema_version')}")
        return cls(tuple(ManifestEntry(**e) for e in blob["entries"]),
                   seed=blob["seed"])


def group_split(patient_ids: list[str], counts: tuple[int, int, int],
                seed: int = 0,
                paths: dict[str, dict[str, str]] | None = None) -> SplitManifest:
    """Random patient-level partition into train/valid/test of exact sizes."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    if sum(counts) != len(ids):
        raise ValueError(f"counts {counts} do not sum to {len(ids)} patients")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    entries = []
    start = 0
    for cohort, n in zip(COHORTS, counts):
        for pid in order[start:start + n]:
            entries.append(ManifestEntry(pid, cohort,
                                         paths=dict((paths or {}).get(pid, {}))))
        start += n
    entries.sort(key=lambda e: e.patient_id)
    return SplitManifest(tuple(entries), seed=seed)


def attach_augmented(manifest: SplitManifest,
                     augmented: list[tuple[str, dict[str, str]]]) -> SplitManifest:
    """Add augmented scans (source_patient_id, paths) to their source cohorts.

    Augmentations of test patients are refused.
    """
    cohort_of = {e.patient_id: e.cohort for e in manifest.entries
                 if e.augmented_from is None}
    counters: dict[str, int] = {}
    new = list(manifest.entries)
    for source, paths in augmented:
        if source not in cohort_of:
            raise ValueError(f"augmented scan names unknown patient {source!r}")
        cohort = cohort_of[source]
        if cohort == "test":
            raise LeakageError(
                f"refusing to attach augmentation of test patient {source!r}")
        counters[source] = counters.get(source, 0) + 1
        new.append(ManifestEntry(f"{source}_aug{counters[source]:02d}", cohort,
                                 paths=dict(paths), augmented_from=source))
    return SplitManifest(tuple(new), seed=manifest.seed)
