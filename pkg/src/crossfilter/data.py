"""Bi-quality datasets and the CSV manifest format.

Manifest columns: ``clip_id,path,labels,subset`` where ``labels`` holds class
names separated by ``;`` and ``subset`` is one of ``curated``, ``noisy`` or
``test``.  Ground-truth tables add ``true_labels`` and ``corrupted`` columns.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestError

SUBSETS = ("curated", "noisy", "test")
MANIFEST_COLUMNS = ["clip_id", "path", "labels", "subset"]
TRUTH_COLUMNS = MANIFEST_COLUMNS + ["true_labels", "corrupted"]


@dataclass(frozen=True)
class Item:
    clip_id: str
    labels: tuple[int, ...]
    path: str = ""
    true_labels: tuple[int, ...] | None = None

    @property
    def label(self) -> int:
        return self.labels[0]

    def is_clean(self) -> bool | None:
        if self.true_labels is None:
            return None
        return set(self.labels) == set(self.true_labels)

    def with_labels(self, labels: Sequence[int]) -> "Item":
        return Item(self.clip_id, tuple(int(v) for v in labels), self.path, self.true_labels)


@dataclass
class BiQualityDataset:
    classes: list[str]
    curated: list[Item] = field(default_factory=list)
    noisy: list[Item] = field(default_factory=list)
    test: list[Item] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def J(self) -> int:
        return len(self.classes)

    @property
    def multilabel(self) -> bool:
        return any(len(it.labels) > 1 for it in self.all_items())

    def all_items(self) -> Iterable[Item]:
        yield from self.curated
        yield from self.noisy
        yield from self.test

    def validate(self) -> None:
        cur = {it.clip_id for it in self.curated}
        noisy = {it.clip_id for it in self.noisy}
        if len(cur) != len(self.curated) or len(noisy) != len(self.noisy):
            raise ManifestError("duplicate clip_id within a subset")
        if cur & noisy:
            raise ManifestError(f"curated and noisy overlap: {sorted(cur & noisy)[:3]}")
        for it in self.all_items():
            if not it.labels or any(not 0 <= v < self.J for v in it.labels):
                raise ManifestError(f"clip {it.clip_id!r} has label outside [0, {self.J})")

    def label_vector(self, item: Item) -> np.ndarray:
        return label_vector(item.labels, self.J)

    def label_matrix(self, items: Sequence[Item]) -> np.ndarray:
        return np.stack([self.label_vector(it) for it in items]) if items else np.zeros((0, self.J))

    def stratified_folds(self, n_folds: int = 5, seed: int = 0) -> list[list[Item]]:
        """Split the curated set into folds; per-class counts differ by at most one."""
        rng = np.random.default_rng(seed)
        folds: list[list[Item]] = [[] for _ in range(n_folds)]
        by_class: dict[int, list[Item]] = {}
        for it in self.curated:
            by_class.setdefault(it.label, []).append(it)
        offset = 0
        for c in sorted(by_class):
            members = by_class[c]
            for i, idx in enumerate(rng.permutation(len(members))):
                folds[(offset + i) % n_folds].append(members[idx])
            # rotate so small classes do not all land in fold 0
            offset += len(members)
        return folds


def label_vector(labels: Sequence[int], J: int) -> np.ndarray:
    y = np.zeros(J)
    y[list(labels)] = 1.0
    return y


def _parse_labels(raw: str, index: dict[str, int] | None, row: int, column: str) -> tuple[int, ...]:
    names = [s.strip() for s in raw.split(";") if s.strip()]
    if not names:
        raise ManifestError(f"empty {column}", row)
    if index is None:
        return tuple(names)  # resolved later
    try:
        return tuple(index[n] for n in names)
    except KeyError as exc:
        raise ManifestError(f"unknown label {exc.args[0]!r}", row) from None


def load_manifest(path: str | Path, classes: Sequence[str] | None = None,
                  check_files: bool = True) -> BiQualityDataset:
    """Parse a manifest (or ground-truth table) into a dataset.

    Without ``classes`` the vocabulary is the sorted set of labels seen.
    Errors name the offending 1-based data row.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        rows = list(reader)

    has_truth = rows and "true_labels" in rows[0]
    if classes is None:
        seen = set()
        for i, r in enumerate(rows, 1):
            for col in ("labels", "true_labels") if has_truth else ("labels",):
                seen.update(_parse_labels(r.get(col) or "", None, i, col))
        classes = sorted(seen)
    index = {c: j for j, c in enumerate(classes)}

    subsets: dict[str, list[Item]] = {s: [] for s in SUBSETS}
    ids: set[str] = set()
    for i, r in enumerate(rows, 1):
        cid = (r.get("clip_id") or "").strip()
        if not cid:
            raise ManifestError("empty clip_id", i)
        if cid in ids:
            raise ManifestError(f"duplicate clip_id {cid!r}", i)
        ids.add(cid)
        subset = (r.get("subset") or "").strip()
        if subset not in subsets:
            raise ManifestError(f"unknown subset {subset!r}", i)
        labels = _parse_labels(r.get("labels") or "", index, i, "labels")
        truth = _parse_labels(r["true_labels"], index, i, "true_labels") if has_truth and r.get("true_labels") else None
        rel = (r.get("path") or "").strip()
        full = str(base / rel) if rel else ""
        if check_files and (not rel or not Path(full).is_file()):
            raise ManifestError(f"missing audio file {rel!r}", i)
        subsets[subset].append(Item(cid, labels, full, truth))
    return BiQualityDataset(list(classes), subsets["curated"], subsets["noisy"], subsets["test"])


def write_manifest(path: str | Path, dataset: BiQualityDataset, truth: bool = False) -> None:
    path = Path(path)
    base = path.parent.resolve()
    cols = TRUTH_COLUMNS if truth else MANIFEST_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for subset in SUBSETS:
            for it in getattr(dataset, subset):
                p = Path(it.path)
                try:
                    rel = p.resolve().relative_to(base).as_posix()
                except ValueError:
                    rel = it.path
                row = [it.clip_id, rel, ";".join(dataset.classes[v] for v in it.labels), subset]
                if truth:
                    true = it.true_labels if it.true_labels is not None else it.labels
                    row += [";".join(dataset.classes[v] for v in true), int(set(true) != set(it.labels))]
                w.writerow(row)
