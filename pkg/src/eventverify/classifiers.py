"""Classifier zoo scored on extracted feature vectors.

Every fitted model returns one continuous score per class (higher means more
likely), which is what the per-event ROC analysis sweeps thresholds over.
Multi-class SVM and gradient boosting are one-vs-rest; their per-class scores
are raw decision values / margins, which is enough for rank-based AUC.
"""
from __future__ import annotations

import io
import json
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.spatial.distance import cdist

FAMILIES = (
    "extra_trees",
    "random_forest",
    "knn",
    "svm",
    "pca_svm",
    "grad_boost",
    "dense_head",
)
METRICS = {"L1": "cityblock", "L2": "euclidean", "Chebyshev": "chebyshev"}

# Library "default settings" frozen here so results don't drift with library versions.
DEFAULT_HYPERPARAMS: dict[str, dict[str, Any]] = {
    "extra_trees": {
        "n_estimators": 100,
        "criterion": "gini",
        "max_features": "sqrt",
        "min_samples_split": 2,
        "min_samples_leaf": 1,
        "bootstrap": False,
        "standardize": False,
    },
    "random_forest": {
        "n_estimators": 100,
        "criterion": "gini",
        "max_features": "sqrt",
        "min_samples_split": 2,
        "min_samples_leaf": 1,
        "bootstrap": True,
        "standardize": False,
    },
    "knn": {"k": 1, "metric": "L2", "weighting": "uniform", "standardize": False},
    "svm": {"C": 1.0, "kernel": "rbf", "gamma": "scale", "standardize": True},
    "pca_svm": {
        "components": 128,
        "C": 1.0,
        "kernel": "rbf",
        "gamma": "scale",
        "standardize": True,
    },
    "grad_boost": {
        "max_depth": 2,
        "objective": "binary:logistic",
        "n_estimators": 100,
        "learning_rate": 0.3,
        "standardize": False,
    },
    "dense_head": {"epochs": 100, "learning_rate": 0.01, "batch_size": 32, "standardize": True},
}
_ALLOWED_VALUES = {
    ("knn", "k"): (1, 2, 4),
    ("knn", "metric"): tuple(METRICS),
    ("knn", "weighting"): ("uniform", "distance"),
    ("pca_svm", "components"): (32, 64, 128, 256),
    ("grad_boost", "objective"): ("binary:logistic",),
}

FORMAT_MAGIC = b"EVCLF\x00"
FORMAT_VERSION = 1


class ClassifierError(ValueError):
    """Fit/score failure with a human-readable diagnostic."""


@dataclass(frozen=True)
class ClassifierSpec:
    family: str
    hyperparams: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ClassifierError(f"unknown classifier family {self.family!r}")
        defaults = DEFAULT_HYPERPARAMS[self.family]
        unknown = set(self.hyperparams) - set(defaults)
        if unknown:
            raise ClassifierError(
                f"{self.family}: unknown hyperparameters {', '.join(sorted(unknown))}"
            )
        resolved = {**defaults, **self.hyperparams}
        for (fam, key), allowed in _ALLOWED_VALUES.items():
            if fam == self.family and resolved[key] not in allowed:
                raise ClassifierError(f"{fam}: {key} must be one of {allowed}, got {resolved[key]!r}")
        if self.family == "dense_head" and int(resolved["epochs"]) < 1:
            raise ClassifierError("dense_head: epochs must be >= 1")
        object.__setattr__(self, "hyperparams", resolved)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        hp = self.hyperparams
        if self.family == "knn":
            return f"{hp['k']}NN {hp['metric']}"
        if self.family == "pca_svm":
            return f"{hp['components']}P+SVM"
        short = {
            "extra_trees": "ET",
            "random_forest": "RF",
            "svm": "SVM",
            "grad_boost": "XGB",
            "dense_head": "DNN",
        }
        return short[self.family]

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "hyperparams": dict(self.hyperparams),
            "seed": self.seed,
            "name": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassifierSpec":
        d = dict(d)
        family = d.pop("family")
        seed = int(d.pop("seed", 0))
        name = d.pop("name", None)
        hp = dict(d.pop("hyperparams", {}))
        hp.update(d)
        return cls(family, hp, seed, name)

    def with_seed(self, seed: int) -> "ClassifierSpec":
        return ClassifierSpec(self.family, dict(self.hyperparams), seed, self.name)


def knn_distance(a: Sequence[float], b: Sequence[float], metric: str) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ClassifierError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = np.abs(a - b)
    if metric == "L1":
        return float(d.sum())
    if metric == "L2":
        return float(np.sqrt(np.dot(d, d)))
    if metric == "Chebyshev":
        return float(d.max()) if d.size else 0.0
    raise ClassifierError(f"unknown metric {metric!r}")


@dataclass
class PCAState:
    mean: np.ndarray
    components: np.ndarray  # (n_components, dim), rows orthonormal
    explained_variance: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def pca_fit_transform(X: np.ndarray, components: int) -> tuple[PCAState, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ClassifierError("PCA expects a 2-D feature matrix")
    n, dim = X.shape
    if components < 1 or components > min(n - 1, dim):
        raise ClassifierError(
            f"PCA components={components} must be in [1, min(samples-1, dim)] = [1, {min(n - 1, dim)}]"
        )
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    vt = vt[:components]
    # deterministic sign: largest-magnitude loading of each direction is positive
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(components), pivot])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    state = PCAState(mean, vt, (s[:components] ** 2) / max(n - 1, 1))
    return state, Xc @ vt.T


@dataclass
class _Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "_Scaler":
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(X.mean(axis=0), std)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class TrainedClassifier:
    spec: ClassifierSpec
    classes: list[str]
    feature_dim: int
    state: dict[str, Any]
    feature_spec: dict[str, Any] | None = None

    def score(self, x) -> np.ndarray:
        x = _as_vector(x)
        if x.shape[0] != self.feature_dim:
            raise ClassifierError(
                f"dimension mismatch: model expects {self.feature_dim}, got {x.shape[0]}"
            )
        return self.score_many(x[None, :])[0]

    def score_many(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.feature_dim:
            raise ClassifierError(
                f"dimension mismatch: model expects {self.feature_dim}, got {X.shape[1]}"
            )
        scaler = self.state.get("scaler")
        if scaler is not None:
            X = scaler(X)
        scores = _SCORERS[self.spec.family](self, X)
        if not np.all(np.isfinite(scores)):
            raise ClassifierError(
                f"{self.spec.label}: non-finite scores (degenerate or non-converged model)"
            )
        return scores

    def predict(self, X) -> list[str]:
        return [self.classes[i] for i in np.argmax(self.score_many(X), axis=1)]

    def save(self, path: str | Path) -> None:
        header = {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "classes": self.classes,
            "feature_dim": self.feature_dim,
            "feature_spec": self.feature_spec,
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        pickle.dump(self.state, buf, protocol=4)
        Path(path).write_bytes(
            FORMAT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + buf.getvalue()
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainedClassifier":
        """Load a saved model. The binary state is pickled: only open trusted files."""
        raw = Path(path).read_bytes()
        if not raw.startswith(FORMAT_MAGIC):
            raise ClassifierError(f"{path}: not a classifier container")
        off = len(FORMAT_MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen])
        if header.get("format_version") != FORMAT_VERSION:
            raise ClassifierError(f"{path}: unsupported format version {header.get('format_version')}")
        state = pickle.loads(raw[off + hlen :])
        return cls(
            ClassifierSpec.from_dict(header["spec"]),
            list(header["classes"]),
            int(header["feature_dim"]),
            state,
            header.get("feature_spec"),
        )


def _as_vector(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64).ravel()


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, np.ndarray):
        X = X.astype(np.float64, copy=False)
        return X if X.ndim == 2 else X.reshape(1, -1)
    rows = [_as_vector(x) for x in X]
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise ClassifierError(f"dimension mismatch among inputs: {sorted(dims)}")
    return np.stack(rows)


def fit(spec: ClassifierSpec, X, y: Sequence[str]) -> TrainedClassifier:
    feature_spec = None
    if not isinstance(X, np.ndarray):
        X = list(X)
        specs = {json.dumps(x.spec.to_dict(), sort_keys=True) for x in X if hasattr(x, "spec")}
        if len(specs) > 1:
            raise ClassifierError("inputs were produced by different feature specs")
        if specs:
            feature_spec = json.loads(specs.pop())
    X = _as_matrix(X)
    y = [str(v) for v in y]
    if X.shape[0] != len(y):
        raise ClassifierError(f"{X.shape[0]} feature vectors but {len(y)} labels")
    classes = sorted(set(y))
    if len(classes) < 2:
        raise ClassifierError("training data must contain at least 2 classes")
    yi = np.array([classes.index(v) for v in y])
    hp = spec.hyperparams
    if spec.family == "pca_svm" and hp["components"] >= X.shape[0]:
        raise ClassifierError(
            f"pca_svm: components={hp['components']} must be < training samples ({X.shape[0]})"
        )
    if spec.family == "knn" and hp["k"] > X.shape[0]:
        raise ClassifierError(f"knn: k={hp['k']} exceeds training samples ({X.shape[0]})")
    if not np.all(np.isfinite(X)):
        raise ClassifierError("training features contain NaN or infinite values")

    state: dict[str, Any] = {"scaler": None}
    if hp.get("standardize"):
        state["scaler"] = _Scaler.fit(X)
        X = state["scaler"](X)
    _FITTERS[spec.family](spec, X, yi, len(classes), state)
    return TrainedClassifier(spec, classes, X.shape[1], state, feature_spec)


def dense_head_fit(
    X, y: Sequence[str], epochs: int = 100, lr: float = 0.01, seed: int = 0
) -> TrainedClassifier:
    if epochs < 1:
        raise ClassifierError("dense_head: epochs must be >= 1")
    spec = ClassifierSpec("dense_head", {"epochs": epochs, "learning_rate": lr}, seed)
    return fit(spec, X, y)


# --- family implementations -------------------------------------------------


def _tree_params(hp: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in hp.items() if k != "standardize"}


def _fit_extra_trees(spec, X, y, n_classes, state):
    from sklearn.ensemble import ExtraTreesClassifier

    m = ExtraTreesClassifier(**_tree_params(spec.hyperparams), random_state=spec.seed, n_jobs=1)
    state["model"] = m.fit(X, y)


def _fit_random_forest(spec, X, y, n_classes, state):
    from sklearn.ensemble import RandomForestClassifier

    m = RandomForestClassifier(**_tree_params(spec.hyperparams), random_state=spec.seed, n_jobs=1)
    state["model"] = m.fit(X, y)


def _score_trees(clf, X):
    m = clf.state["model"]
    proba = m.predict_proba(X)
    out = np.zeros((X.shape[0], len(clf.classes)))
    out[:, m.classes_] = proba
    return out


def _fit_knn(spec, X, y, n_classes, state):
    state["X"] = X.copy()
    state["y"] = y.copy()
    state["n_classes"] = n_classes


def _score_knn(clf, X):
    hp = clf.spec.hyperparams
    k = hp["k"]
    train_X, train_y = clf.state["X"], clf.state["y"]
    d = cdist(X, train_X, metric=METRICS[hp["metric"]])
    # stable sort: equidistant neighbours resolve by training-row order
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    out = np.zeros((X.shape[0], clf.state["n_classes"]))
    rows = np.arange(X.shape[0])
    for j in range(k):
        idx = nearest[:, j]
        if hp["weighting"] == "distance":
            w = 1.0 / (d[rows, idx] + 1e-12)
        else:
            w = np.ones(X.shape[0])
        np.add.at(out, (rows, train_y[idx]), w)
    return out / out.sum(axis=1, keepdims=True)


def _svc(hp, seed):
    from sklearn.svm import SVC

    return SVC(C=hp["C"], kernel=hp["kernel"], gamma=hp["gamma"], random_state=seed)


def _fit_svm(spec, X, y, n_classes, state):
    models = []
    for c in range(n_classes):
        target = (y == c).astype(int)
        models.append(_svc(spec.hyperparams, spec.seed).fit(X, target))
    state["models"] = models


def _fit_pca_svm(spec, X, y, n_classes, state):
    pca, Z = pca_fit_transform(X, spec.hyperparams["components"])
    state["pca"] = pca
    _fit_svm(spec, Z, y, n_classes, state)


def _score_svm(clf, X):
    if "pca" in clf.state:
        X = clf.state["pca"].transform(X)
    return np.column_stack([m.decision_function(X) for m in clf.state["models"]])


def _fit_grad_boost(spec, X, y, n_classes, state):
    from xgboost import XGBClassifier

    hp = spec.hyperparams
    models = []
    for c in range(n_classes):
        m = XGBClassifier(
            max_depth=hp["max_depth"],
            objective=hp["objective"],
            n_estimators=hp["n_estimators"],
            learning_rate=hp["learning_rate"],
            random_state=spec.seed,
            n_jobs=1,
            tree_method="exact",
        )
        models.append(m.fit(X, (y == c).astype(int)))
    state["models"] = models


def _score_grad_boost(clf, X):
    return np.column_stack(
        [m.predict(X, output_margin=True) for m in clf.state["models"]]
    ).astype(np.float64)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_dense_head(spec, X, y, n_classes, state):
    hp = spec.hyperparams
    rng = np.random.default_rng(spec.seed)
    n, d = X.shape
    bound = 1.0 / np.sqrt(d)
    W = rng.uniform(-bound, bound, size=(d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    lr, batch = float(hp["learning_rate"]), int(hp["batch_size"])
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    mW, vW = np.zeros_like(W), np.zeros_like(W)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    step = 0
    losses = []
    for _ in range(int(hp["epochs"])):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            p = _softmax(X[idx] @ W + b)
            total += -np.sum(np.log(np.clip(p[np.arange(idx.size), y[idx]], 1e-300, None)))
            g = (p - onehot[idx]) / idx.size
            gW, gb = X[idx].T @ g, g.sum(axis=0)
            step += 1
            mW = beta1 * mW + (1 - beta1) * gW
            vW = beta2 * vW + (1 - beta2) * gW**2
            mb = beta1 * mb + (1 - beta1) * gb
            vb = beta2 * vb + (1 - beta2) * gb**2
            c1, c2 = 1 - beta1**step, 1 - beta2**step
            W -= lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
            b -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        losses.append(total / n)
    state["W"], state["b"], state["loss_trace"] = W, b, losses


def _score_dense_head(clf, X):
    return _softmax(X @ clf.state["W"] + clf.state["b"])


_FITTERS = {
    "extra_trees": _fit_extra_trees,
    "random_forest": _fit_random_forest,
    "knn": _fit_knn,
    "svm": _fit_svm,
    "pca_svm": _fit_pca_svm,
    "grad_boost": _fit_grad_boost,
    "dense_head": _fit_dense_head,
}
_SCORERS = {
    "extra_trees": _score_trees,
    "random_forest": _score_trees,
    "knn": _score_knn,
    "svm": _score_svm,
    "pca_svm": _score_svm,
    "grad_boost": _score_grad_boost,
    "dense_head": _score_dense_head,
}


def grad_boost_max_depth(clf: TrainedClassifier) -> int:
    """Deepest tree across all one-vs-rest boosters (root-only tree has depth 0)."""
    deepest = 0
    for m in clf.state["models"]:
        for tree in m.get_booster().get_dump(dump_format="json"):
            deepest = max(deepest, _json_tree_depth(json.loads(tree)))
    return deepest


def _json_tree_depth(node: dict) -> int:
    children = node.get("children")
    if not children:
        return 0
    return 1 + max(_json_tree_depth(c) for c in children)


# Classifier column presets for the comparison grids.
GLOBAL_GRID_CLASSIFIERS = (
    ClassifierSpec("extra_trees", name="ET"),
    ClassifierSpec("random_forest", name="RF"),
    ClassifierSpec("knn", {"k": 1, "metric": "L1"}, name="L1"),
    ClassifierSpec("knn", {"k": 1, "metric": "L2"}, name="L2"),
    ClassifierSpec("knn", {"k": 2, "metric": "L2"}, name="2NN"),
    ClassifierSpec("knn", {"k": 4, "metric": "L2"}, name="4NN"),
)
LOCAL_GRID_CLASSIFIERS = (
    ClassifierSpec("extra_trees", name="ET"),
    ClassifierSpec("random_forest", name="RF"),
    ClassifierSpec("knn", {"k": 1, "metric": "L2"}, name="1-NN"),
    ClassifierSpec("svm", name="SVM"),
    ClassifierSpec("grad_boost", name="XGB"),
)
EXTENDED_GRID_CLASSIFIERS = (
    ClassifierSpec("extra_trees", name="ET"),
    ClassifierSpec("random_forest", name="RF"),
    ClassifierSpec("knn", {"k": 1, "metric": "L1"}, name="1NN L1"),
    ClassifierSpec("knn", {"k": 1, "metric": "Chebyshev"}, name="1NN Cheb"),
    ClassifierSpec("knn", {"k": 1, "metric": "L2"}, name="1NN L2"),
    ClassifierSpec("knn", {"k": 2, "metric": "L2"}, name="2NN"),
    ClassifierSpec("knn", {"k": 4, "metric": "L2"}, name="4NN"),
    ClassifierSpec("svm", name="SVM"),
    ClassifierSpec("pca_svm", {"components": 32}, name="32P+SVM"),
    ClassifierSpec("pca_svm", {"components": 64}, name="64P+SVM"),
    ClassifierSpec("pca_svm", {"components": 128}, name="128P+SVM"),
    ClassifierSpec("pca_svm", {"components": 256}, name="256P+SVM"),
    ClassifierSpec("dense_head", name="DNN"),
)
