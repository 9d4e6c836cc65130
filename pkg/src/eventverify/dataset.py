"""Manifest ingestion and the image primitives shared by both feature paths.

Manifest format: UTF-8 CSV with header ``id,path,event,split`` where split is
``train`` or ``test``; paths are relative to the manifest's directory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

SPLITS = ("train", "test")
MANIFEST_HEADER = ("id", "path", "event", "split")


class ManifestError(ValueError):
    """Raised when a manifest file cannot be turned into a valid DatasetManifest."""


@dataclass(frozen=True, order=True)
class ImageRecord:
    id: str
    path: Path
    event: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    events: tuple[str, ...]
    source: Path | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.records == other.records and self.events == other.events

    def __hash__(self) -> int:
        return hash((self.records, self.events))

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[ImageRecord]:
        return self.split("train")

    @property
    def test(self) -> list[ImageRecord]:
        return self.split("test")

    def event_index(self, event: str) -> int:
        return self.events.index(event)


@dataclass(frozen=True)
class RasterImage:
    """RGB image as a (rows, cols, 3) float32 array with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (rows, cols, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have at least one row and one column")
        if px.dtype != np.float32:
            px = px.astype(np.float32)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def crop(self, row: int, col: int, rows: int, cols: int) -> "RasterImage":
        if row < 0 or col < 0 or row + rows > self.rows or col + cols > self.cols:
            raise ValueError(
                f"crop ({row},{col},{rows},{cols}) outside {self.rows}x{self.cols} image"
            )
        return RasterImage(self.pixels[row : row + rows, col : col + cols])

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        if tuple(header) != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: row 1: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )
        rows = list(enumerate(reader, start=2))
    return _build_manifest(rows, base, path)


def _build_manifest(
    rows: Iterable[tuple[int, list[str]]], base: Path, source: Path | None
) -> DatasetManifest:
    seen: dict[str, int] = {}
    records = []
    for rownum, row in rows:
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise ManifestError(f"row {rownum}: expected 4 fields, got {len(row)}")
        rid, rel, event, split = (cell.strip() for cell in row)
        if not rid:
            raise ManifestError(f"row {rownum}: empty id")
        if not event:
            raise ManifestError(f"row {rownum}: empty event label")
        if split not in SPLITS:
            raise ManifestError(f"row {rownum}: split must be train or test, got {split!r}")
        if not rel:
            raise ManifestError(f"row {rownum}: empty path")
        if rid in seen:
            raise ManifestError(
                f"row {rownum}: duplicate id {rid!r} (first seen on row {seen[rid]})"
            )
        seen[rid] = rownum
        img_path = Path(rel)
        if not img_path.is_absolute():
            img_path = base / img_path
        if not img_path.is_file():
            raise ManifestError(f"row {rownum}: image not found: {img_path}")
        records.append(ImageRecord(rid, img_path, event, split))

    events = tuple(sorted({r.event for r in records}))
    if len(events) < 2:
        raise ManifestError(f"fewer than 2 events (found {len(events)})")
    for event in events:
        for split in SPLITS:
            if not any(r.event == event and r.split == split for r in records):
                rownums = sorted(seen[r.id] for r in records if r.event == event)
                raise ManifestError(
                    f"event {event!r} has no {split} records "
                    f"(event appears on rows {', '.join(map(str, rownums))})"
                )
    records.sort(key=lambda r: r.id)
    return DatasetManifest(tuple(records), events, source)


def write_manifest(path: str | Path, records: Iterable[ImageRecord]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            rel = Path(r.path)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([r.id, rel.as_posix(), r.event, r.split])


def load_image(path: str | Path) -> RasterImage:
    """Decode a PNG/JPEG into [0, 1] RGB. Grayscale is replicated, alpha dropped."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float32)
            arr = arr / (65535.0 if arr.max(initial=0) > 255 else 255.0)
            return RasterImage(np.repeat(arr[:, :, None], 3, axis=2))
        if im.mode != "RGB":
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return RasterImage(arr)


def save_image(img: RasterImage, path: str | Path) -> None:
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _resize(img: RasterImage, rows: int, cols: int) -> RasterImage:
    if (rows, cols) == (img.rows, img.cols):
        return RasterImage(img.pixels.copy())
    channels = []
    for c in range(3):
        plane = Image.fromarray(np.ascontiguousarray(img.pixels[:, :, c]))
        channels.append(np.asarray(plane.resize((cols, rows), Image.BILINEAR), dtype=np.float32))
    out = np.stack(channels, axis=2)
    return RasterImage(np.clip(out, 0.0, 1.0))


def resize_preserve_aspect(img: RasterImage, target_rows: int) -> RasterImage:
    if target_rows < 1:
        raise ValueError("target_rows must be >= 1")
    # round half up in exact integer arithmetic
    cols = max(1, (2 * img.cols * target_rows + img.rows) // (2 * img.rows))
    return _resize(img, target_rows, cols)


def resize_square(img: RasterImage, side: int) -> RasterImage:
    if side < 1:
        raise ValueError("side must be >= 1")
    return _resize(img, side, side)
