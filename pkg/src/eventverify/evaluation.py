"""ROC curves, rank-based AUC and one-vs-rest per-event evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise EvaluationError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores contain NaN or infinite values")
    if y.dtype != bool and not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be binary (0/1)")
    yb = y.astype(bool)
    n_pos = int(yb.sum())
    if n_pos == 0 or n_pos == yb.size:
        raise EvaluationError("AUC needs at least one positive and one negative label")
    return s, yb


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    # average ranks give tied pairs exactly half credit
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    event: str
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def roc_curve(scores: Sequence[float], labels: Sequence[int], event: str = "") -> RocCurve:
    """One point per distinct score threshold, plus the (0,0) and (1,1) endpoints.

    The first threshold is +inf (nothing predicted positive).
    """
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    n_pos, n_neg = tps[-1], fps[-1]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[distinct]]
    return RocCurve(event, fpr, tpr, thresholds)


@dataclass
class EvaluationReport:
    classes: list[str]
    per_event_auc: dict[str, float | None]
    macro_auc: float | None
    micro_auc: float | None
    curves: list[RocCurve]
    diagnostics: dict[str, str] = field(default_factory=dict)
    average: str = "macro"
    run_metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def summary_auc(self) -> float | None:
        return self.macro_auc if self.average == "macro" else self.micro_auc

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "average": self.average,
            "summary_auc": self.summary_auc,
            "macro_auc": self.macro_auc,
            "micro_auc": self.micro_auc,
            "classes": list(self.classes),
            "per_event_auc": dict(self.per_event_auc),
            "diagnostics": dict(self.diagnostics),
            "run_metadata": self.run_metadata,
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        for curve in self.curves:
            curve.write_csv(out_dir / f"{stem}_roc_{_slug(curve.event)}.csv")
        return path

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for curve in self.curves:
            a = self.per_event_auc.get(curve.event)
            ax.plot(curve.fpr, curve.tpr, label=f"{curve.event} (AUC {a:.3f})")
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name) or "event"


def evaluate_scores(
    score_matrix: np.ndarray,
    labels: Sequence[str],
    classes: Sequence[str],
    average: str = "macro",
    run_metadata: dict[str, Any] | None = None,
) -> EvaluationReport:
    """One-vs-rest ROC/AUC per class column of ``score_matrix``."""
    if average not in ("macro", "micro"):
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    scores = np.asarray(score_matrix, dtype=np.float64)
    classes = list(classes)
    if len(labels) == 0:
        raise EvaluationError("empty test set")
    if scores.shape != (len(labels), len(classes)):
        raise EvaluationError(
            f"score matrix shape {scores.shape} != ({len(labels)}, {len(classes)})"
        )
    unseen = sorted(set(labels) - set(classes))
    if unseen:
        raise EvaluationError(f"test labels not seen at fit time: {', '.join(unseen)}")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("classifier produced non-finite scores")
    truth = np.array([[lab == c for c in classes] for lab in labels], dtype=bool)

    per_event: dict[str, float | None] = {}
    diagnostics: dict[str, str] = {}
    curves = []
    for j, event in enumerate(classes):
        n_pos = int(truth[:, j].sum())
        if n_pos == 0:
            per_event[event] = None
            diagnostics[event] = "undefined: no positive test samples"
            continue
        if n_pos == truth.shape[0]:
            per_event[event] = None
            diagnostics[event] = "undefined: no negative test samples"
            continue
        per_event[event] = auc(scores[:, j], truth[:, j])
        curves.append(roc_curve(scores[:, j], truth[:, j], event=event))

    defined = [v for v in per_event.values() if v is not None]
    macro = float(np.mean(defined)) if defined else None
    try:
        micro = auc(scores.ravel(), truth.ravel())
    except EvaluationError:
        micro = None
    meta = dict(run_metadata or {})
    meta.setdefault("average", average)
    return EvaluationReport(classes, per_event, macro, micro, curves, diagnostics, average, meta)


def evaluate(
    model,
    test: Sequence[tuple[Any, str]],
    average: str = "macro",
    run_metadata: dict[str, Any] | None = None,
) -> EvaluationReport:
    """Score each (feature vector, label) pair with a fitted classifier and evaluate."""
    if not test:
        raise EvaluationError("empty test set")
    unseen = sorted({lab for _, lab in test} - set(model.classes))
    if unseen:
        raise EvaluationError(f"test labels not seen at fit time: {', '.join(unseen)}")
    X = np.stack([np.asarray(getattr(x, "values", x)) for x, _ in test])
    scores = model.score_many(X)
    meta = {"classifier": model.spec.to_dict(), "feature_dim": model.feature_dim}
    meta.update(run_metadata or {})
    return evaluate_scores(scores, [lab for _, lab in test], model.classes, average, meta)


def summarize_repeats(values: Sequence[float | None]) -> dict[str, Any]:
    """Mean and spread over seeded repeats; undefined runs are counted, not imputed."""
    good = [v for v in values if v is not None and math.isfinite(v)]
    if not good:
        return {"mean": None, "std": None, "min": None, "max": None, "n": 0, "failed": len(values)}
    arr = np.asarray(good)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "n": len(good),
        "failed": len(values) - len(good),
    }
