"""Line-delimited JSON manifests and image storage.

Row schemas (field names are part of the on-disk contract):

* sorting: ``{triplet_id, paths[3], ranks[3]}`` plus optional ``true_counts[3]``
* count:   ``{path, prompt_count, true_count?, kept}``
* density: ``{path, density_label, true_count?}``

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

KINDS = ("sorting", "count", "density", "eval")

_REQUIRED = {
    "sorting": ("triplet_id", "paths", "ranks"),
    "count": ("path", "prompt_count", "kept"),
    "density": ("path", "density_label"),
    "eval": ("path", "true_count"),
}


class ManifestError(ValueError):
    pass


def validate_row(kind: str, row: dict, lineno: int = 0) -> None:
    where = f"line {lineno}: " if lineno else ""
    if kind not in _REQUIRED:
        raise ManifestError(f"unknown manifest kind {kind!r}")
    missing = [k for k in _REQUIRED[kind] if k not in row]
    if missing:
        raise ManifestError(f"{where}{kind} row missing fields {missing}")
    if kind == "sorting":
        if len(row["paths"]) != 3 or sorted(row["ranks"]) != [0, 1, 2]:
            raise ManifestError(f"{where}sorting row needs 3 paths and ranks {{0,1,2}}")
    elif kind == "count":
        if int(row["prompt_count"]) < 0:
            raise ManifestError(f"{where}negative prompt_count")
    elif kind == "density":
        if row["density_label"] not in (0, 1, 2):
            raise ManifestError(f"{where}density_label must be 0, 1 or 2")


class ManifestWriter:
    """Append-only writer; one lock serialises appends from worker threads."""

    def __init__(self, path: str | Path, kind: str):
        self.path = Path(path)
        self.kind = kind
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._lock = threading.Lock()
        self.rows_written = 0

    def append(self, row: dict) -> None:
        validate_row(self.kind, row)
        line = json.dumps(row, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self.rows_written += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_manifest(path: str | Path, kind: str | None = None) -> list[dict]:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e.msg}") from e
            if kind:
                validate_row(kind, row, lineno)
            rows.append(row)
    return rows


def write_manifest(path: str | Path, kind: str, rows: Iterable[dict]) -> Path:
    with ManifestWriter(path, kind) as w:
        for row in rows:
            w.append(row)
    return Path(path)


def resolve(manifest_path: str | Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def save_image(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")
    return path


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def iter_images(manifest_path: str | Path, rels: Iterable[str]) -> Iterator[np.ndarray]:
    for rel in rels:
        yield load_image(resolve(manifest_path, rel))
