"""Clip manifests: UTF-8 CSV with a ``path,label,split`` header.

``label`` may be empty (unlabeled clip) and ``split`` is empty, ``train`` or
``test``. Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int | None = None
    split: str | None = None


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.path in seen:
                raise ValueError(f"duplicate manifest path: {row.path}")
            seen.add(row.path)
            if row.split not in (None, *SPLITS):
                raise ValueError(f"{row.path}: split must be one of {SPLITS}, got {row.split!r}")

    def __len__(self):
        return len(self.rows)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def pretrain_rows(self) -> list[ManifestRow]:
        """Training-split rows if the manifest has splits, else every row."""
        train = self.split("train")
        return train if any(r.split for r in self.rows) else list(self.rows)

    def require_labels(self) -> None:
        missing = [r.path for r in self.rows if r.label is None]
        if missing:
            raise ValueError(f"{len(missing)} manifest rows lack labels, e.g. {missing[0]}")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "path" not in reader.fieldnames:
            raise ValueError(f"{path}: manifest needs a header with at least a 'path' column")
        for record in reader:
            label = (record.get("label") or "").strip()
            split = (record.get("split") or "").strip()
            rows.append(ManifestRow(record["path"], int(label) if label else None, split or None))
    return Manifest(rows, path.parent)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for row in manifest.rows:
            writer.writerow([row.path, "" if row.label is None else row.label, row.split or ""])
    tmp.replace(path)
