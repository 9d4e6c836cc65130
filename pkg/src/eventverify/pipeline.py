"""Cache-aware feature extraction and the backbone x features x classifier sweep."""
from __future__ import annotations

import csv
import html
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .backbone import BackboneModel
from .cache import FeatureCache, cache_key, file_digest
from .classifiers import ClassifierSpec, fit
from .dataset import DatasetManifest, ImageRecord, RasterImage, load_image
from .evaluation import evaluate, summarize_repeats
from .features_global import FeatureSpec, FeatureVector, global_features
from .features_local import full_features, sum_features

log = logging.getLogger(__name__)

GRID_SCHEMA_VERSION = 1


class MissingFeaturesError(RuntimeError):
    def __init__(self, key: str, record_id: str, spec: FeatureSpec):
        super().__init__(
            f"missing features: no cache entry {key} for image {record_id!r} "
            f"({spec.canonical()}); run extract first"
        )
        self.key = key
        self.record_id = record_id
        self.spec = spec


def feature_spec(kind: str, model: BackboneModel, params: Mapping[str, Any] | None = None) -> FeatureSpec:
    params = dict(params or {})
    if kind.startswith("local"):
        return FeatureSpec(kind, model.name, params.get("stride"), params.get("patch"), params.get("rescale_rows"))
    return FeatureSpec(kind, model.name)


def compute_features(
    model: BackboneModel, img: RasterImage, spec: FeatureSpec, image_id: str = ""
) -> FeatureVector:
    if spec.backbone_name != model.name:
        raise ValueError(f"spec is for backbone {spec.backbone_name!r}, got {model.name!r}")
    if spec.kind == "local_sum":
        return sum_features(model, img, spec.stride, spec.patch, spec.rescale_rows, image_id)
    if spec.kind == "local_full":
        return full_features(model, img, spec.stride, spec.patch, spec.rescale_rows, image_id)
    return global_features(model, img, spec.kind, image_id)


class FeatureStore:
    """Looks features up in the cache, computing and storing them on a miss."""

    def __init__(self, cache: FeatureCache | None = None):
        self.cache = cache
        self._digests: dict[Path, str] = {}
        self.computed = 0

    def image_digest(self, path: Path) -> str:
        path = Path(path)
        if path not in self._digests:
            self._digests[path] = file_digest(path)
        return self._digests[path]

    def key(self, record: ImageRecord, spec: FeatureSpec, model: BackboneModel) -> str:
        return cache_key(self.image_digest(record.path), spec.canonical(), model.digest)

    def get(
        self, model: BackboneModel, record: ImageRecord, spec: FeatureSpec, compute: bool = True
    ) -> FeatureVector:
        key = self.key(record, spec, model) if self.cache is not None else None
        if self.cache is not None:
            entry = self.cache.get(key)
            if entry is not None:
                return FeatureVector(spec, entry.values, record.id)
        if not compute:
            raise MissingFeaturesError(key or "<no cache>", record.id, spec)
        fv = compute_features(model, load_image(record.path), spec, record.id)
        self.computed += 1
        if self.cache is not None:
            self.cache.put(
                key,
                fv.values,
                {
                    "image_id": record.id,
                    "image_digest": self.image_digest(record.path),
                    "feature_spec": spec.to_dict(),
                    "backbone_digest": model.digest,
                },
            )
        return fv

    def matrix(
        self,
        model: BackboneModel,
        records: Sequence[ImageRecord],
        spec: FeatureSpec,
        compute: bool = True,
    ) -> np.ndarray:
        return np.stack([self.get(model, r, spec, compute).values for r in records])


@dataclass
class GridCell:
    dataset: str
    backbone: str
    features: str
    classifier: str
    auc: float | None = None
    spread: dict[str, Any] = field(default_factory=dict)
    per_event_auc: dict[str, float | None] = field(default_factory=dict)
    diagnostic: str | None = None
    classifier_spec: dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.dataset, self.backbone, self.features, self.classifier)

    @property
    def ok(self) -> bool:
        return self.auc is not None and self.diagnostic is None


@dataclass
class GridResult:
    cells: list[GridCell]
    metadata: dict[str, Any] = field(default_factory=dict)

    def cell(self, dataset: str, backbone: str, features: str, classifier: str) -> GridCell:
        for c in self.cells:
            if c.key == (dataset, backbone, features, classifier):
                return c
        raise KeyError((dataset, backbone, features, classifier))

    def _axes(self) -> tuple[list[str], list[str], list[str], list[str]]:
        def ordered(values):
            return list(dict.fromkeys(values))

        return (
            ordered(c.dataset for c in self.cells),
            ordered(c.features for c in self.cells),
            ordered(c.backbone for c in self.cells),
            ordered(c.classifier for c in self.cells),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "backbone", "features", "classifier", "auc", "auc_std", "repeats", "diagnostic"])
        for c in self.cells:
            w.writerow(
                [
                    c.dataset,
                    c.backbone,
                    c.features,
                    c.classifier,
                    "" if c.auc is None else repr(c.auc),
                    "" if c.spread.get("std") is None else repr(c.spread["std"]),
                    c.spread.get("n", 0),
                    c.diagnostic or "",
                ]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "schema_version": GRID_SCHEMA_VERSION,
            "metadata": self.metadata,
            "cells": [
                {
                    "dataset": c.dataset,
                    "backbone": c.backbone,
                    "features": c.features,
                    "classifier": c.classifier,
                    "auc": c.auc,
                    "spread": c.spread,
                    "per_event_auc": c.per_event_auc,
                    "diagnostic": c.diagnostic,
                    "classifier_spec": c.classifier_spec,
                }
                for c in self.cells
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_latex(self) -> str:
        datasets, kinds, backbones, classifiers = self._axes()
        out = []
        for ds in datasets:
            for kind in kinds:
                out.append(f"% {ds}: {kind}")
                out.append("\\begin{tabular}{|c||" + "c|" * len(classifiers) + "}")
                out.append("\\hline")
                out.append(" & " + " & ".join(_tex_escape(c) for c in classifiers) + "\\\\")
                out.append("\\hline\\hline")
                for bb in backbones:
                    cells = [self._find(ds, bb, kind, clf) for clf in classifiers]
                    best = max((c.auc for c in cells if c is not None and c.ok), default=None)
                    row = []
                    for c in cells:
                        if c is None:
                            row.append("")
                        elif not c.ok:
                            row.append("n/a")
                        else:
                            text = f"{c.auc:.3f}"
                            if c.auc == best:
                                text = f"\\textbf{{{text}}}"
                            row.append(f"{text}\\cellcolor{{black!{shade(c.auc):.1f}}}")
                    out.append(_tex_escape(bb) + " & " + " & ".join(row) + " \\\\")
                    out.append("\\hline")
                out.append("\\end{tabular}")
                out.append("")
        return "\n".join(out)

    def to_html(self) -> str:
        datasets, kinds, backbones, classifiers = self._axes()
        parts = [
            "<!DOCTYPE html>",
            "<html><head><meta charset='utf-8'><title>AUC grid</title>",
            "<style>table{border-collapse:collapse;margin:1em 0}"
            "td,th{border:1px solid #444;padding:2px 6px;text-align:center;font:12px monospace}"
            "td.fail{color:#a00}</style></head><body>",
        ]
        for ds in datasets:
            for kind in kinds:
                parts.append(f"<h3>{html.escape(ds)}: {html.escape(kind)}</h3><table>")
                parts.append(
                    "<tr><th></th>" + "".join(f"<th>{html.escape(c)}</th>" for c in classifiers) + "</tr>"
                )
                for bb in backbones:
                    row = [f"<tr><th>{html.escape(bb)}</th>"]
                    for clf in classifiers:
                        c = self._find(ds, bb, kind, clf)
                        if c is None:
                            row.append("<td></td>")
                        elif not c.ok:
                            row.append(f"<td class='fail' title='{html.escape(c.diagnostic or '')}'>n/a</td>")
                        else:
                            level = 255 - int(round(2.55 * shade(c.auc)))
                            row.append(
                                f"<td style='background:rgb({level},{level},{level})'>{c.auc:.3f}</td>"
                            )
                    parts.append("".join(row) + "</tr>")
                parts.append("</table>")
        parts.append("</body></html>")
        return "\n".join(parts) + "\n"

    def _find(self, ds, bb, kind, clf) -> GridCell | None:
        try:
            return self.cell(ds, bb, kind, clf)
        except KeyError:
            return None

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out_dir / "grid.csv",
            "json": out_dir / "grid.json",
            "tex": out_dir / "grid.tex",
            "html": out_dir / "grid.html",
        }
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(self.to_json())
        paths["tex"].write_text(self.to_latex())
        paths["html"].write_text(self.to_html())
        return paths


def shade(auc: float) -> float:
    """Grey percentage for a cell: 0 at chance, darker as AUC rises."""
    return float(np.clip(120.0 * (auc - 0.5), 0.0, 100.0))


def _tex_escape(text: str) -> str:
    for a, b in (("\\", "\\textbackslash{}"), ("&", "\\&"), ("%", "\\%"), ("_", "\\_"), ("#", "\\#")):
        text = text.replace(a, b)
    return text


def _diagnostic(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def fit_and_evaluate(
    clf: ClassifierSpec,
    Xtr: np.ndarray,
    ytr: Sequence[str],
    Xte: np.ndarray,
    yte: Sequence[str],
    seed: int = 0,
    repeats: int = 1,
    average: str = "macro",
    run_metadata: Mapping[str, Any] | None = None,
):
    """Fit and evaluate ``repeats`` times with seeds seed, seed+1, ...

    Returns (fitted models, reports, mean/spread summary of the summary AUC).
    """
    models, reports = [], []
    for r in range(repeats):
        fitted = fit(clf.with_seed(seed + r), Xtr, ytr)
        meta = dict(run_metadata or {})
        meta["seed"] = seed + r
        models.append(fitted)
        reports.append(evaluate(fitted, list(zip(Xte, yte)), average, meta))
    return models, reports, summarize_repeats([rep.summary_auc for rep in reports])


def grid_sweep(
    manifests: Mapping[str, DatasetManifest],
    backbones: Sequence[BackboneModel],
    feature_kinds: Sequence[str],
    classifiers: Sequence[ClassifierSpec],
    cache: FeatureCache | None = None,
    seed: int = 0,
    repeats: int = 1,
    average: str = "macro",
    feature_params: Mapping[str, Any] | None = None,
) -> GridResult:
    """Macro AUC for every (dataset, backbone, feature kind, classifier) cell.

    A failure inside one cell becomes that cell's diagnostic; the sweep goes on.
    Cells are emitted in nested input order, never completion order.
    """
    store = FeatureStore(cache)
    cells = []
    for ds_name, manifest in manifests.items():
        for model in backbones:
            for kind in feature_kinds:
                try:
                    spec = feature_spec(kind, model, feature_params)
                    Xtr = store.matrix(model, manifest.train, spec)
                    Xte = store.matrix(model, manifest.test, spec)
                    feat_error = None
                except Exception as exc:  # per-cell isolation
                    log.warning("features %s/%s/%s failed: %s", ds_name, model.name, kind, exc)
                    feat_error = "feature extraction failed: " + _diagnostic(exc)
                for clf in classifiers:
                    cell = GridCell(ds_name, model.name, kind, clf.label, classifier_spec=clf.to_dict())
                    cells.append(cell)
                    if feat_error:
                        cell.diagnostic = feat_error
                        continue
                    try:
                        _, cell_reports, summary = fit_and_evaluate(
                            clf,
                            Xtr,
                            [t.event for t in manifest.train],
                            Xte,
                            [t.event for t in manifest.test],
                            seed,
                            repeats,
                            average,
                        )
                        cell.spread = summary
                        cell.auc = summary["mean"]
                        cell.per_event_auc = cell_reports[0].per_event_auc
                        if cell.auc is None:
                            cell.diagnostic = "undefined AUC in every repeat"
                    except Exception as exc:
                        log.warning("cell %s failed: %s", cell.key, exc)
                        cell.auc = None
                        cell.diagnostic = _diagnostic(exc)
    meta = {
        "average": average,
        "seed": seed,
        "repeats": repeats,
        "datasets": {
            name: {"events": list(m.events), "n_train": len(m.train), "n_test": len(m.test)}
            for name, m in manifests.items()
        },
        "backbones": [m.describe() for m in backbones],
        "feature_kinds": list(feature_kinds),
        "feature_params": dict(feature_params or {}),
        "classifiers": [c.to_dict() for c in classifiers],
    }
    return GridResult(cells, meta)
