import numpy as np
import onnx
import pytest
from onnx import TensorProto, helper, numpy_helper

from eventverify.backbone import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    BackboneError,
    FineTuneConfig,
    Preprocessing,
    RegistryEntry,
    ShapeMismatchError,
    TapError,
    extract,
    fine_tune,
    head_parameter_names,
    load_backbone,
    load_from_registry,
    load_registry,
    replace_head,
    write_registry,
)
from eventverify.dataset import RasterImage
from eventverify.synthetic import build_tiny_backbone, export_torchvision_backbone
from conftest import random_image


def _zeros(side):
    return RasterImage(np.zeros((side, side, 3), dtype=np.float32))


def _shape_oracle(path):
    """Pooled-tap width read independently from ONNX shape inference."""
    m = onnx.shape_inference.infer_shapes(onnx.load(str(path)))
    shapes = {vi.name: [d.dim_value for d in vi.type.tensor_type.shape.dim] for vi in m.graph.value_info}
    pools = [n.output[0] for n in m.graph.node if n.op_type == "GlobalAveragePool"]
    return shapes[pools[-1]][1]


def test_resnet18_dims(resnet18, resnet18_path):
    assert resnet18.input_side == 224
    assert resnet18.output_dim == 1000
    assert resnet18.intermediate_dim == _shape_oracle(resnet18_path) == 512
    inter, out = extract(resnet18, random_image(np.random.default_rng(0), 224, 224))
    assert inter.shape == (512,) and out.shape == (1000,)
    assert abs(float(out.sum()) - 1.0) < 1e-5


@pytest.mark.slow
def test_resnet50_dims(tmp_path):
    pytest.importorskip("torchvision")
    path = export_torchvision_backbone("resnet50", tmp_path / "r50.onnx")
    model = load_backbone(path)
    assert (model.input_side, model.intermediate_dim, model.output_dim) == (224, _shape_oracle(path), 1000)
    assert model.intermediate_dim == 2048
    inter, out = extract(model, _zeros(224))
    assert inter.shape == (2048,) and out.shape == (1000,)


def test_matches_torch_reference(resnet18_path, resnet18):
    # same weights evaluated by torchvision itself
    import torch
    import torchvision

    torch.manual_seed(0)
    net = torchvision.models.resnet18(weights=None, num_classes=1000).eval()
    img = random_image(np.random.default_rng(5), 224, 224)
    x = torch.from_numpy(resnet18.preprocessing.apply(img.pixels))
    with torch.no_grad():
        feats = torch.nn.Sequential(*list(net.children())[:-1])(x).flatten(1)
        probs = torch.softmax(net(x), dim=1)
    inter, out = extract(resnet18, img)
    np.testing.assert_allclose(inter, feats[0].numpy(), atol=1e-4, rtol=1e-4)
    np.testing.assert_allclose(out, probs[0].numpy(), atol=1e-6)


def test_missing_pool_tap(tmp_path):
    w = numpy_helper.from_array(np.ones((10, 3 * 8 * 8), np.float32), "w")
    graph = helper.make_graph(
        [
            helper.make_node("Flatten", ["image"], ["flat"], axis=1),
            helper.make_node("Gemm", ["flat", "w"], ["logits"], transB=1),
        ],
        "nopool",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, ["N", 3, 8, 8])],
        [helper.make_tensor_value_info("logits", TensorProto.FLOAT, ["N", 10])],
        [w],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    onnx.save(model, str(tmp_path / "nopool.onnx"))
    with pytest.raises(TapError, match="intermediate tap unresolvable"):
        load_backbone(tmp_path / "nopool.onnx")
    # naming the tap explicitly works, with rank-2 taps passed through
    m = load_backbone(tmp_path / "nopool.onnx", intermediate_tap="flat")
    assert (m.intermediate_dim, m.output_dim) == (192, 10)
    with pytest.raises(TapError, match="no tensor named"):
        load_backbone(tmp_path / "nopool.onnx", intermediate_tap="nothing")


def test_shape_mismatch(tiny_model, tmp_path):
    with pytest.raises(ShapeMismatchError, match="shape mismatch"):
        extract(tiny_model, _zeros(299))
    path = build_tiny_backbone(tmp_path / "t.onnx")
    with pytest.raises(ShapeMismatchError, match="input-shape mismatch"):
        load_backbone(path, input_side=299)


def test_extract_deterministic(tiny_model):
    a = extract(tiny_model, _zeros(224))
    b = extract(tiny_model, _zeros(224))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert tiny_model.intermediate_dim == 64 and tiny_model.output_dim == 1000


def test_softmax_graph_not_double_wrapped(tmp_path, tiny_model):
    # a graph that already ends in Softmax keeps that Softmax
    proto = onnx.load(str(build_tiny_backbone(tmp_path / "t.onnx", seed=3)))
    proto.graph.node.append(helper.make_node("Softmax", ["logits"], ["probs"], axis=1))
    proto.graph.output[0].name = "probs"
    onnx.save(proto, str(tmp_path / "s.onnx"))
    m = load_backbone(tmp_path / "s.onnx")
    assert m.metadata["softmax_appended"] is False
    img = random_image(np.random.default_rng(2), 224, 224)
    np.testing.assert_allclose(extract(m, img)[1], extract(tiny_model, img)[1], atol=1e-7)


def test_preprocessing():
    p = Preprocessing(mean=(0.5, 0.5, 0.5), std=(0.5, 0.25, 1.0), scale=1.0, channel_order="bgr")
    px = np.zeros((2, 2, 3), np.float32)
    px[..., 0] = 1.0
    x = p.apply(px)
    assert x.shape == (1, 3, 2, 2)
    np.testing.assert_allclose(x[0, :, 0, 0], [-1.0, -2.0, 0.5])
    with pytest.raises(BackboneError):
        Preprocessing(std=(0, 1, 1))


def test_registry_round_trip(tmp_path, tiny_model):
    path = build_tiny_backbone(tmp_path / "a.onnx", seed=3)
    entry = RegistryEntry("alpha", path, 224, Preprocessing(scale=255.0, channel_order="bgr"), output_tap="logits")
    write_registry(tmp_path / "reg.toml", [entry])
    reg = load_registry(tmp_path / "reg.toml")
    assert reg["alpha"] == entry
    m = load_from_registry(tmp_path / "reg.toml", "alpha")
    assert m.name == "alpha" and m.preprocessing.scale == 255.0
    with pytest.raises(BackboneError, match="not in registry"):
        load_from_registry(reg, "beta")


def test_replace_head(tiny_model):
    h4 = replace_head(tiny_model, 4, seed=1)
    assert (h4.output_dim, h4.intermediate_dim) == (4, tiny_model.intermediate_dim)
    h12 = replace_head(h4, 12, seed=1)
    assert (h12.output_dim, h12.intermediate_dim) == (12, tiny_model.intermediate_dim)
    with pytest.raises(BackboneError):
        replace_head(tiny_model, 1)
    img = random_image(np.random.default_rng(9), 224, 224)
    base = extract(tiny_model, img)[0]
    for m in (h4, h12):
        inter, out = extract(m, img)
        assert inter.tobytes() == base.tobytes()
        assert abs(float(out.sum()) - 1.0) < 1e-6
    names = {t.name for t in h12.proto().graph.initializer}
    assert {HEAD_WEIGHT, HEAD_BIAS} <= names and "fc.weight" not in names
    w = numpy_helper.to_array(next(t for t in h4.proto().graph.initializer if t.name == HEAD_WEIGHT))
    assert np.abs(w).max() <= 1 / np.sqrt(64)


def test_fine_tune_errors(tiny_model):
    h = replace_head(tiny_model, 2)
    data = [(_zeros(224), 0), (_zeros(224), 1)]
    with pytest.raises(BackboneError, match="epochs"):
        fine_tune(h, data, FineTuneConfig(2, epochs=0))
    with pytest.raises(BackboneError, match="allow_slow_lr"):
        fine_tune(h, data, FineTuneConfig(2, learning_rate=1e-5))
    with pytest.raises(BackboneError, match="replace_head"):
        fine_tune(tiny_model, data, FineTuneConfig(2))
    with pytest.raises(BackboneError, match="out of range"):
        fine_tune(h, [(_zeros(224), 3)], FineTuneConfig(2))
    with pytest.raises(BackboneError, match="empty"):
        fine_tune(h, [], FineTuneConfig(2))


def _separable_set(n=16):
    rng = np.random.default_rng(0)
    data = []
    for i in range(n):
        c = i % 2
        px = rng.random((224, 224, 3), dtype=np.float32) * 0.2 + (0.7 if c else 0.1)
        data.append((RasterImage(px), c))
    return data


def test_fine_tune_decreases_loss_and_writes_back(small_head_model):
    h = replace_head(small_head_model, 2, seed=0)
    cfg = FineTuneConfig(2, learning_rate=1e-3, epochs=5, batch_size=8, seed=0)
    tuned, trace = fine_tune(h, _separable_set(), cfg)
    assert len(trace) == 5 and trace[-1] < trace[0]
    assert tuned.metadata["loss_trace"] == trace
    assert tuned.metadata["fine_tune"]["batch_size"] == 8
    assert tuned.digest != h.digest
    inter, out = extract(tuned, _separable_set(1)[0][0])
    assert inter.shape == (small_head_model.intermediate_dim,) and out.shape == (2,)


def test_fine_tune_freeze_body(small_head_model):
    h = replace_head(small_head_model, 2, seed=0)
    cfg = FineTuneConfig(2, learning_rate=1e-3, epochs=2, batch_size=8, freeze_body=True)
    tuned, _ = fine_tune(h, _separable_set(), cfg)
    head = head_parameter_names(h.proto())
    assert head == {HEAD_WEIGHT, HEAD_BIAS}
    before = {t.name: numpy_helper.to_array(t) for t in h.proto().graph.initializer}
    after = {t.name: numpy_helper.to_array(t) for t in tuned.proto().graph.initializer}
    for name, value in before.items():
        if name in head:
            assert not np.array_equal(value, after[name])
        else:
            assert np.array_equal(value, after[name])
    img = _separable_set(1)[0][0]
    assert extract(tuned, img)[0].tobytes() == extract(h, img)[0].tobytes()


def test_fine_tune_seeded_runs_match(small_head_model):
    h = replace_head(small_head_model, 2, seed=0)
    cfg = FineTuneConfig(2, learning_rate=1e-3, epochs=2, batch_size=8, seed=3)
    _, a = fine_tune(h, _separable_set(), cfg)
    _, b = fine_tune(h, _separable_set(), cfg)
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


@pytest.mark.parametrize("arch", ["resnet18", "mobilenet_v2", "squeezenet1_1", "densenet121"])
def test_torch_interpreter_matches_onnxruntime(arch, tmp_path):
    import torch

    from eventverify.backbone import INTERMEDIATE, OUTPUT
    from eventverify.graph_torch import GraphModule

    model = load_backbone(export_torchvision_backbone(arch, tmp_path / f"{arch}.onnx", seed=1))
    img = random_image(np.random.default_rng(0), 224, 224)
    inter, out = extract(model, img)
    net = GraphModule(model.proto(), outputs=[INTERMEDIATE, OUTPUT])
    with torch.no_grad():
        res = net(torch.from_numpy(model.preprocessing.apply(img.pixels)))
    np.testing.assert_allclose(res[INTERMEDIATE][0].numpy(), inter, atol=1e-4, rtol=1e-4)
    np.testing.assert_allclose(res[OUTPUT][0].numpy(), out, atol=1e-6)
