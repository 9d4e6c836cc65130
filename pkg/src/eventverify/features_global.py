"""Whole-image features: pooled last-conv activations, class probabilities, or both."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .backbone import BackboneModel, extract
from .dataset import RasterImage, resize_square

GLOBAL_KINDS = ("global_intermediate", "global_output", "global_both")
LOCAL_KINDS = ("local_sum", "local_full")
KINDS = GLOBAL_KINDS + LOCAL_KINDS

PATCH_SIDE = 224
RESCALE_ROWS = 1120
# 100 px shared between neighbouring 224 px windows
DEFAULT_STRIDE = PATCH_SIDE - 100


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    kind: str
    backbone_name: str
    stride: int | None = None
    patch: int | None = None
    rescale_rows: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in LOCAL_KINDS:
            for name, default in (
                ("stride", DEFAULT_STRIDE),
                ("patch", PATCH_SIDE),
                ("rescale_rows", RESCALE_ROWS),
            ):
                if getattr(self, name) is None:
                    object.__setattr__(self, name, default)
            if self.stride < 1 or self.patch < 1 or self.rescale_rows < self.patch:
                raise FeatureError(f"invalid local feature parameters in {self}")
        elif any(v is not None for v in (self.stride, self.patch, self.rescale_rows)):
            raise FeatureError(f"{self.kind} takes no patch parameters")

    @property
    def is_local(self) -> bool:
        return self.kind in LOCAL_KINDS

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "backbone": self.backbone_name}
        if self.is_local:
            d.update(stride=self.stride, patch=self.patch, rescale_rows=self.rescale_rows)
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FeatureSpec":
        return cls(d["kind"], d["backbone"], d.get("stride"), d.get("patch"), d.get("rescale_rows"))


@dataclass
class FeatureVector:
    spec: FeatureSpec
    values: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).ravel()

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def expected_dim(model: BackboneModel, spec: FeatureSpec, grid_size: int | None = None) -> int:
    k, m = model.intermediate_dim, model.output_dim
    if spec.kind == "global_intermediate":
        return k
    if spec.kind == "global_output":
        return m
    if spec.kind == "global_both":
        return k + m
    if spec.kind == "local_sum":
        return m
    if grid_size is None:
        raise FeatureError("local_full dimension depends on the patch count")
    return grid_size * m


def global_features(
    model: BackboneModel, img: RasterImage, kind: str, image_id: str = ""
) -> FeatureVector:
    if kind not in GLOBAL_KINDS:
        raise FeatureError(f"invalid global feature kind {kind!r}; expected one of {GLOBAL_KINDS}")
    inter, out = extract(model, resize_square(img, model.input_side))
    if kind == "global_intermediate":
        values = inter
    elif kind == "global_output":
        values = out
    else:
        values = np.concatenate([inter, out])
    return FeatureVector(FeatureSpec(kind, model.name), values, image_id)
