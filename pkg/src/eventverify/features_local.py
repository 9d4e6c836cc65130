"""Patch-level features: soft bag-of-words sums and full concatenations.

Each patch is run through the complete classifier, so every patch contributes
an M-way probability vector. Sum features add them up and renormalise;
full features keep them side by side in row-major anchor order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneModel, extract
from .dataset import RasterImage, resize_preserve_aspect, resize_square
from .features_global import (
    DEFAULT_STRIDE,
    PATCH_SIDE,
    RESCALE_ROWS,
    FeatureError,
    FeatureSpec,
    FeatureVector,
)


@dataclass(frozen=True)
class PatchGrid:
    patch_side: int
    stride: int
    row_anchors: tuple[int, ...]
    col_anchors: tuple[int, ...]

    @property
    def positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_anchors for c in self.col_anchors]

    def __len__(self) -> int:
        return len(self.row_anchors) * len(self.col_anchors)


def axis_anchors(length: int, patch_side: int, stride: int) -> tuple[int, ...]:
    """Multiples of stride that fit, plus a final window flush with the far edge."""
    last = length - patch_side
    anchors = list(range(0, last + 1, stride))
    if anchors[-1] != last:
        anchors.append(last)
    return tuple(anchors)


def patch_grid(rows: int, cols: int, patch_side: int = PATCH_SIDE, stride: int = DEFAULT_STRIDE) -> PatchGrid:
    if stride < 1:
        raise FeatureError("stride must be >= 1")
    if patch_side < 1:
        raise FeatureError("patch_side must be >= 1")
    if rows < patch_side or cols < patch_side:
        raise FeatureError(f"image {rows}x{cols} is smaller than the {patch_side}px patch")
    return PatchGrid(
        patch_side, stride, axis_anchors(rows, patch_side, stride), axis_anchors(cols, patch_side, stride)
    )


def patch_outputs(model: BackboneModel, img: RasterImage, grid: PatchGrid) -> np.ndarray:
    """(len(grid), M) class-probability rows, one per anchor in row-major order."""
    side = grid.patch_side
    rows = []
    for r, c in grid.positions:
        patch = img.crop(r, c, side, side)
        if side != model.input_side:
            patch = resize_square(patch, model.input_side)
        rows.append(extract(model, patch)[1])
    return np.stack(rows)


def _local_spec(model: BackboneModel, kind: str, stride: int, patch: int, rows: int) -> FeatureSpec:
    return FeatureSpec(kind, model.name, stride=stride, patch=patch, rescale_rows=rows)


def sum_features(
    model: BackboneModel,
    img: RasterImage,
    stride: int = DEFAULT_STRIDE,
    patch: int = PATCH_SIDE,
    rescale_rows: int = RESCALE_ROWS,
    image_id: str = "",
) -> FeatureVector:
    scaled = resize_preserve_aspect(img, rescale_rows)
    if scaled.cols < patch:
        raise FeatureError(
            f"image rescaled to {scaled.rows}x{scaled.cols} is narrower than the {patch}px patch"
        )
    grid = patch_grid(scaled.rows, scaled.cols, patch, stride)
    # fixed anchor order + float64 accumulation keeps the result order-independent
    total = patch_outputs(model, scaled, grid).sum(axis=0, dtype=np.float64)
    values = total / total.sum()
    return FeatureVector(_local_spec(model, "local_sum", stride, patch, rescale_rows), values, image_id)


def full_features(
    model: BackboneModel,
    img: RasterImage,
    stride: int = DEFAULT_STRIDE,
    patch: int = PATCH_SIDE,
    side: int = RESCALE_ROWS,
    image_id: str = "",
) -> FeatureVector:
    scaled = resize_square(img, side)
    grid = patch_grid(side, side, patch, stride)
    values = patch_outputs(model, scaled, grid).ravel()
    return FeatureVector(_local_spec(model, "local_full", stride, patch, side), values, image_id)
