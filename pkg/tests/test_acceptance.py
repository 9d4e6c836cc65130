"""Acceptance suite: one test per primary criterion, each at its stated tolerance.

Every criterion prints a single ``PASS``/``FAIL`` line (also repeated in the
pytest terminal summary). Run directly with ``python tests/test_acceptance.py``
or as part of ``pytest``.
"""
import functools
import time

import numpy as np
import pytest

from eventverify.backbone import FineTuneConfig, extract, fine_tune, load_backbone, replace_head
from eventverify.cache import FeatureCache
from eventverify.classifiers import GLOBAL_GRID_CLASSIFIERS, ClassifierSpec, fit
from eventverify.dataset import load_image, load_manifest, resize_preserve_aspect
from eventverify.evaluation import auc, evaluate, roc_curve
from eventverify.features_global import global_features
from eventverify.features_local import full_features, patch_grid, patch_outputs, sum_features
from eventverify.pipeline import FeatureStore, grid_sweep
from eventverify.synthetic import build_demo_backbones, build_tiny_backbone
from conftest import random_image
from oracles import brute_force_auc, brute_force_knn_predict, random_auc_instance, trapezoid_roc_area

RESULTS: list[str] = []


def criterion(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                line = f"FAIL  {name}  ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
                RESULTS.append(line)
                print(line)
                raise
            line = f"PASS  {name}  ({detail}; {time.perf_counter() - t0:.1f}s)"
            RESULTS.append(line)
            print(line)

        return run

    return wrap


@pytest.fixture(scope="module")
def demo_backbones(tmp_path_factory):
    registry = build_demo_backbones(tmp_path_factory.mktemp("bbs"))
    from eventverify.backbone import load_from_registry

    return [load_from_registry(registry, n) for n in ("tiny_a", "tiny_b", "tiny_c")]


@pytest.fixture(scope="module")
def synth(synthetic_manifest):
    return load_manifest(synthetic_manifest)


@criterion("auc-oracle-equivalence")
def test_auc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        s, y = random_auc_instance(rng, max_points=50)
        worst = max(worst, abs(auc(s, y) - brute_force_auc(s, y)))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-12, f"max |auc - brute force| = {worst:g}"
    assert elapsed < 5.0, f"500 instances took {elapsed:.2f}s"
    return f"500 instances, max diff {worst:g}, {elapsed:.2f}s"


@criterion("roc-auc-consistency")
def test_roc_auc_consistency():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        s, y = random_auc_instance(rng, max_points=200 if i % 2 else 50)
        c = roc_curve(s, y)
        worst = max(worst, abs(c.area() - auc(s, y)), abs(trapezoid_roc_area(s, y) - auc(s, y)))
    assert worst <= 1e-12, f"max |area - auc| = {worst:g}"
    return f"100 instances, max diff {worst:g}"


@criterion("sum-feature-invariant")
def test_sum_feature_invariant(tiny_model):
    rng = np.random.default_rng(99)
    worst_norm = worst_raw = 0.0
    for _ in range(20):
        img = random_image(rng, int(rng.integers(224, 900)), int(rng.integers(224, 1400)))
        fv = sum_features(tiny_model, img)
        assert fv.dim == tiny_model.output_dim
        assert np.all(fv.values >= 0)
        worst_norm = max(worst_norm, abs(float(fv.values.astype(np.float64).sum()) - 1.0))
        scaled = resize_preserve_aspect(img, 1120)
        grid = patch_grid(scaled.rows, scaled.cols)
        raw = patch_outputs(tiny_model, scaled, grid).sum(dtype=np.float64)
        rel = abs(raw - len(grid)) / len(grid)
        worst_raw = max(worst_raw, rel)
        assert abs(raw - len(grid)) <= len(grid) * 1e-5, f"raw sum {raw} vs {len(grid)} patches"
    assert worst_norm <= 1e-6, f"|sum - 1| = {worst_norm:g}"
    return f"20 images, max |sum-1| {worst_norm:.1e}, max raw rel err {worst_raw:.1e}"


@criterion("patch-grid-arithmetic")
def test_patch_grid_arithmetic():
    g = patch_grid(1120, 1120, 224, 124)
    assert len(g) == 81 and len(g.row_anchors) == 9 and len(g.col_anchors) == 9
    assert max(g.row_anchors) == max(g.col_anchors) == 896
    assert g.row_anchors == (0, 124, 248, 372, 496, 620, 744, 868, 896)
    for stride in (1, 124, 224, 500):
        assert patch_grid(224, 224, 224, stride).positions == [(0, 0)]
    g = patch_grid(448, 224, 224, 224)
    assert (g.row_anchors, g.col_anchors) == ((0, 224), (0,))
    return "81 anchors, max 896; exact-fit and tiling cases"


@criterion("dimensional-contracts")
def test_dimensional_contracts(resnet18, resnet18_path):
    import onnx

    t0 = time.perf_counter()
    # independent read of the widths from the exported graph's own shape inference
    inferred = onnx.shape_inference.infer_shapes(onnx.load(str(resnet18_path)))
    shapes = {v.name: [d.dim_value for d in v.type.tensor_type.shape.dim] for v in inferred.graph.value_info}
    pool = [n.output[0] for n in inferred.graph.node if n.op_type == "GlobalAveragePool"][-1]
    K = shapes[pool][1]
    M = inferred.graph.output[0].type.tensor_type.shape.dim[1].dim_value
    assert (resnet18.intermediate_dim, resnet18.output_dim) == (K, M)
    img = random_image(np.random.default_rng(3), 480, 640)
    inter = global_features(resnet18, img, "global_intermediate")
    both = global_features(resnet18, img, "global_both")
    assert inter.dim == K and both.dim == K + M
    assert both.values[:K].tobytes() == inter.values.tobytes()
    full = full_features(resnet18, img)
    assert full.dim == 81 * M
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"took {elapsed:.1f}s"
    return f"resnet18 K={K} M={M}, both={both.dim}, full={full.dim}, {elapsed:.1f}s"


@criterion("knn-brute-force-equivalence")
def test_knn_brute_force_equivalence():
    rng = np.random.default_rng(5)
    checked = 0
    for metric in ("L1", "L2", "Chebyshev"):
        for k in (1, 2, 4):
            classes = ["e0", "e1", "e2", "e3"]
            X = rng.normal(size=(200, 6))
            y = [classes[i] for i in rng.integers(0, 4, size=200)]
            Q = np.vstack([rng.normal(size=(40, 6)), X[:10]])
            model = fit(ClassifierSpec("knn", {"k": k, "metric": metric}), X, y)
            got = model.predict(Q)
            want = [brute_force_knn_predict(X, y, q, k, metric, sorted(set(y))) for q in Q]
            assert got == want, f"{metric} k={k}: mismatch"
            checked += len(Q)
    return f"{checked} queries over 3 metrics x k in (1,2,4), 200-point sets"


@criterion("synthetic-end-to-end")
def test_synthetic_end_to_end(synth, demo_backbones):
    t0 = time.perf_counter()
    assert len(synth.events) == 4 and len(synth.train) == 160 and len(synth.test) == 80
    model = demo_backbones[0]
    store = FeatureStore()
    from eventverify.pipeline import feature_spec

    spec = feature_spec("global_intermediate", model)
    Xtr = store.matrix(model, synth.train, spec)
    Xte = store.matrix(model, synth.test, spec)
    ytr = [r.event for r in synth.train]
    yte = [r.event for r in synth.test]
    clf = ClassifierSpec("extra_trees", seed=0)
    real = evaluate(fit(clf, Xtr, ytr), list(zip(Xte, yte))).macro_auc
    # control: event labels permuted across the whole manifest, split sizes kept
    perm = np.random.default_rng(0).permutation(ytr + yte)
    ctr, cte = list(perm[: len(ytr)]), list(perm[len(ytr) :])
    control = evaluate(fit(clf, Xtr, ctr), list(zip(Xte, cte))).macro_auc
    # second null: only training labels permuted. Features cluster perfectly by
    # event, so one run is dominated by four label counts; use 10 seeded repeats
    train_only = [
        evaluate(fit(clf.with_seed(s), Xtr, list(np.random.default_rng(s).permutation(ytr))), list(zip(Xte, yte))).macro_auc
        for s in range(10)
    ]
    elapsed = time.perf_counter() - t0
    assert real >= 0.95, f"macro AUC {real:.4f} < 0.95"
    assert abs(control - 0.5) <= 0.10, f"shuffled control {control:.4f} outside 0.5 +/- 0.10"
    assert abs(np.mean(train_only) - 0.5) <= 0.10, f"train-only shuffle mean {np.mean(train_only):.4f}"
    assert elapsed < 600
    return (
        f"macro AUC {real:.4f}, shuffled control {control:.4f}, "
        f"train-only shuffle mean {np.mean(train_only):.4f} (sd {np.std(train_only):.3f}, n=10), {elapsed:.1f}s"
    )


@criterion("fine-tune-sanity")
def test_fine_tune_sanity(synth, tmp_path):
    base = load_backbone(build_tiny_backbone(tmp_path / "ft.onnx", seed=11), "ft")
    head = replace_head(base, 4, seed=0)
    probe = random_image(np.random.default_rng(1), 224, 224)
    assert extract(head, probe)[0].tobytes() == extract(base, probe)[0].tobytes()
    assert head.output_dim == 4 and head.intermediate_dim == base.intermediate_dim
    train = [(load_image(r.path), synth.event_index(r.event)) for r in synth.train]
    cfg = FineTuneConfig(num_classes=4, learning_rate=1e-4, epochs=10, batch_size=32, seed=0)
    _, trace_a = fine_tune(head, train, cfg)
    _, trace_b = fine_tune(head, train, cfg)
    assert len(trace_a) == 10
    assert trace_a[9] < trace_a[0], f"loss {trace_a[0]:.5f} -> {trace_a[9]:.5f}"
    drift = float(np.max(np.abs(np.subtract(trace_a, trace_b))))
    assert drift <= 1e-6, f"seeded traces differ by {drift:g}"
    monotone = all(b < a for a, b in zip(trace_a, trace_a[1:]))
    return (
        f"loss {trace_a[0]:.4f} -> {trace_a[9]:.4f} (monotone={monotone}), "
        f"seeded drift {drift:g}, intermediate preserved"
    )


@criterion("determinism-caching")
def test_determinism_caching(synth, demo_backbones, tmp_path):
    args = ({"synth": synth}, demo_backbones[:2], ["global_intermediate", "global_both"], GLOBAL_GRID_CLASSIFIERS[:3])
    cold = grid_sweep(*args, cache=FeatureCache(tmp_path / "cache"), seed=1)
    warm_cache = FeatureCache(tmp_path / "cache")
    warm = grid_sweep(*args, cache=warm_cache, seed=1)
    again = grid_sweep(*args, cache=FeatureCache(tmp_path / "cache2"), seed=1)
    assert warm_cache.misses == 0 and warm_cache.hits > 0
    outs = [g.write(tmp_path / name) for g, name in ((cold, "cold"), (warm, "warm"), (again, "again"))]
    for kind in ("csv", "json", "tex", "html"):
        first = outs[0][kind].read_bytes()
        assert all(o[kind].read_bytes() == first for o in outs[1:]), f"grid.{kind} differs"
    return f"{len(cold.cells)} cells; cold/warm/rerun byte-identical, warm hits {warm_cache.hits}"


@criterion("grid-structure")
def test_grid_structure(synth, demo_backbones, tmp_path):
    grid = grid_sweep({"synth": synth}, demo_backbones, ["global_intermediate"], GLOBAL_GRID_CLASSIFIERS)
    assert len(grid.cells) == 18
    assert [(c.backbone, c.classifier) for c in grid.cells] == [
        (b.name, c.label) for b in demo_backbones for c in GLOBAL_GRID_CLASSIFIERS
    ]
    for c in grid.cells:
        if c.auc is None:
            assert c.diagnostic, f"{c.key} has neither AUC nor diagnostic"
        else:
            assert np.isfinite(c.auc) and 0.0 <= c.auc <= 1.0
    paths = grid.write(tmp_path)
    for kind in ("csv", "json", "tex", "html"):
        assert "nan" not in paths[kind].read_text().lower()
    tex = paths["tex"].read_text()
    assert tex.count("\\\\") == 1 + 3 and "\\cellcolor" in tex
    ok = sum(c.ok for c in grid.cells)
    return f"18 cells (3 backbones x 6 classifiers), {ok} valid AUC, {18 - ok} diagnostics"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
