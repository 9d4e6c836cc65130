import json
import math

import numpy as np
import pytest

from eventverify.cache import FeatureCache
from eventverify.classifiers import GLOBAL_GRID_CLASSIFIERS, ClassifierSpec, fit
from eventverify.dataset import load_manifest
from eventverify.evaluation import evaluate
from eventverify.features_global import FeatureSpec
from eventverify.pipeline import FeatureStore, feature_spec, fit_and_evaluate, grid_sweep, shade


@pytest.fixture(scope="module")
def manifest(small_manifest):
    return load_manifest(small_manifest)


def test_shade():
    assert shade(0.5) == 0.0 and shade(0.3) == 0.0
    assert shade(0.75) == pytest.approx(30.0)
    assert shade(1.0) == 60.0


def test_feature_spec_params(tiny_model):
    assert feature_spec("global_output", tiny_model, {"stride": 100}) == FeatureSpec("global_output", "tiny")
    assert feature_spec("local_sum", tiny_model, {"stride": 100}).stride == 100


def test_single_cell_equals_evaluate(manifest, tiny_model):
    clf = ClassifierSpec("knn", {"k": 1, "metric": "L1"})
    grid = grid_sweep({"s": manifest}, [tiny_model], ["global_intermediate"], [clf])
    assert len(grid.cells) == 1
    store = FeatureStore()
    spec = FeatureSpec("global_intermediate", "tiny")
    Xtr = store.matrix(tiny_model, manifest.train, spec)
    Xte = store.matrix(tiny_model, manifest.test, spec)
    model = fit(clf, Xtr, [r.event for r in manifest.train])
    rep = evaluate(model, list(zip(Xte, [r.event for r in manifest.test])))
    assert grid.cells[0].auc == rep.macro_auc
    assert grid.cells[0].per_event_auc == rep.per_event_auc


def test_failing_cell_is_isolated(manifest, tiny_model):
    bad = ClassifierSpec("pca_svm", {"components": 256})
    grid = grid_sweep({"s": manifest}, [tiny_model], ["global_output"], [bad, GLOBAL_GRID_CLASSIFIERS[0]])
    failed, good = grid.cells
    assert failed.auc is None and "components=256" in failed.diagnostic
    assert good.ok and 0.0 <= good.auc <= 1.0
    assert "n/a" in grid.to_latex() and "class='fail'" in grid.to_html()


def test_grid_layout_and_renderers(manifest, tiny_model, small_head_model):
    grid = grid_sweep(
        {"s": manifest}, [tiny_model, small_head_model], ["global_intermediate"], GLOBAL_GRID_CLASSIFIERS[:3]
    )
    assert [c.key for c in grid.cells] == [
        ("s", bb, "global_intermediate", clf.label)
        for bb in ("tiny", "small")
        for clf in GLOBAL_GRID_CLASSIFIERS[:3]
    ]
    csv_lines = grid.to_csv().splitlines()
    assert csv_lines[0].startswith("dataset,backbone,features,classifier,auc")
    assert len(csv_lines) == 7
    doc = json.loads(grid.to_json())
    assert doc["schema_version"] == 1 and doc["metadata"]["average"] == "macro"
    assert len(doc["metadata"]["backbones"]) == 2
    tex = grid.to_latex()
    assert tex.count("\\textbf{") >= 2 and "\\cellcolor{black!" in tex
    assert "<table>" in grid.to_html()


def test_repeats_and_spread(manifest, tiny_model):
    grid = grid_sweep({"s": manifest}, [tiny_model], ["global_output"], [ClassifierSpec("random_forest")], repeats=3)
    c = grid.cells[0]
    assert c.spread["n"] == 3 and c.spread["min"] <= c.auc <= c.spread["max"]


def test_fit_and_evaluate_seeds():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 5))
    y = ["a", "b"] * 20
    models, reports, summary = fit_and_evaluate(ClassifierSpec("extra_trees"), X, y, X, y, seed=7, repeats=2)
    assert [m.spec.seed for m in models] == [7, 8]
    assert [r.run_metadata["seed"] for r in reports] == [7, 8]
    assert summary["n"] == 2 and not math.isnan(summary["mean"])


def test_rerun_identical(tmp_path, manifest, tiny_model):
    args = ({"s": manifest}, [tiny_model], ["global_both"], GLOBAL_GRID_CLASSIFIERS[:2])
    a = grid_sweep(*args, cache=FeatureCache(tmp_path), seed=3)
    b = grid_sweep(*args, cache=FeatureCache(tmp_path), seed=3)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("grid.csv", "grid.json", "grid.tex", "grid.html"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
