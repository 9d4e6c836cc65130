"""Synthetic stand-ins for the non-public event dataset and stock backbones.

``generate_corpus`` writes procedural-texture "events" plus a manifest;
``build_tiny_backbone`` writes a small randomly initialised ONNX CNN with
the usual conv -> global-pool -> fully-connected layout, and
``export_torchvision_backbone`` exports a stock torchvision architecture
(random weights) for realistic graph shapes.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper

from .backbone import Preprocessing, RegistryEntry, write_registry
from .dataset import ImageRecord, RasterImage, save_image, write_manifest

EVENTS = ("checker_fair", "ring_rally", "stripe_march", "blob_storm")


def _grid(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:rows, 0:cols].astype(np.float64)


def _texture(event: str, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(rows, cols)
    if event == "stripe_march":
        theta = rng.uniform(-0.4, 0.4)
        period = rng.uniform(10, 18)
        v = 0.5 + 0.5 * np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period)
        tint = np.array([0.9, 0.35, 0.3])
    elif event == "checker_fair":
        cell = rng.uniform(14, 26)
        phase = rng.uniform(0, cell, size=2)
        v = (((x + phase[0]) // cell + (y + phase[1]) // cell) % 2).astype(np.float64)
        tint = np.array([0.3, 0.4, 0.9])
    elif event == "ring_rally":
        cy, cx = rng.uniform(0.3, 0.7) * rows, rng.uniform(0.3, 0.7) * cols
        period = rng.uniform(12, 22)
        r = np.hypot(y - cy, x - cx)
        v = 0.5 + 0.5 * np.cos(2 * np.pi * r / period)
        tint = np.array([0.3, 0.85, 0.35])
    elif event == "blob_storm":
        v = np.zeros((rows, cols))
        for _ in range(int(rng.integers(6, 12))):
            cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
            s = rng.uniform(0.06, 0.15) * min(rows, cols)
            v += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        v = v / max(v.max(), 1e-9)
        tint = np.array([0.85, 0.8, 0.3])
    else:
        raise ValueError(f"unknown synthetic event {event!r}")
    tint = np.clip(tint + rng.normal(0, 0.08, size=3), 0, 1)
    base = rng.uniform(0.05, 0.2)
    img = base + (1 - base) * v[:, :, None] * tint[None, None, :]
    img += rng.normal(0, 0.04, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_image(event: str, rng: np.random.Generator, rows: int | None = None, cols: int | None = None) -> RasterImage:
    rows = rows or int(rng.integers(200, 360))
    cols = cols or int(rng.integers(200, 480))
    return RasterImage(_texture(event, rows, cols, rng))


def generate_corpus(
    out_dir: str | Path,
    n_train: int = 40,
    n_test: int = 20,
    seed: int = 0,
    events: Sequence[str] = EVENTS,
) -> Path:
    """Write PNG images and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for event in events:
        (out_dir / "images" / event).mkdir(parents=True, exist_ok=True)
        for split, count in (("train", n_train), ("test", n_test)):
            for i in range(count):
                rid = f"{event}_{split}_{i:03d}"
                path = out_dir / "images" / event / f"{rid}.png"
                save_image(make_image(event, rng), path)
                records.append(ImageRecord(rid, path, event, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


def build_tiny_backbone(
    path: str | Path,
    seed: int = 0,
    widths: Sequence[int] = (16, 32, 64),
    output_dim: int = 1000,
    input_side: int = 224,
) -> Path:
    """Small conv net exported as ONNX, emitting logits (no softmax).

    Layout: [Conv3x3/s2 + Relu] * len(widths) -> GlobalAveragePool ("pool")
    -> Flatten -> Gemm ("logits"). Weights are He-uniform from ``seed``.
    """
    rng = np.random.default_rng(seed)
    nodes, inits = [], []
    prev, cin = "image", 3
    for i, cout in enumerate(widths):
        bound = np.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(np.float32)
        b = rng.uniform(-0.1, 0.1, size=(cout,)).astype(np.float32)
        inits += [numpy_helper.from_array(w, f"conv{i}.weight"), numpy_helper.from_array(b, f"conv{i}.bias")]
        nodes.append(
            helper.make_node(
                "Conv", [prev, f"conv{i}.weight", f"conv{i}.bias"], [f"conv{i}"],
                kernel_shape=[3, 3], strides=[2, 2], pads=[1, 1, 1, 1],
            )
        )
        nodes.append(helper.make_node("Relu", [f"conv{i}"], [f"relu{i}"]))
        prev, cin = f"relu{i}", cout
    nodes.append(helper.make_node("GlobalAveragePool", [prev], ["pool"]))
    nodes.append(helper.make_node("Flatten", ["pool"], ["flat"], axis=1))
    bound = np.sqrt(6.0 / cin)
    fc_w = rng.uniform(-bound, bound, size=(output_dim, cin)).astype(np.float32)
    fc_b = np.zeros(output_dim, dtype=np.float32)
    inits += [numpy_helper.from_array(fc_w, "fc.weight"), numpy_helper.from_array(fc_b, "fc.bias")]
    nodes.append(helper.make_node("Gemm", ["flat", "fc.weight", "fc.bias"], ["logits"], transB=1))
    graph = helper.make_graph(
        nodes,
        "tinynet",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, ["N", 3, input_side, input_side])],
        [helper.make_tensor_value_info("logits", TensorProto.FLOAT, ["N", output_dim])],
        inits,
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    onnx.checker.check_model(model)
    path = Path(path)
    onnx.save(model, str(path))
    return path


def export_torchvision_backbone(
    arch: str, path: str | Path, seed: int = 0, num_classes: int = 1000, input_side: int = 224
) -> Path:
    """Export a randomly initialised torchvision architecture to ONNX."""
    import warnings

    import torch
    import torchvision

    torch.manual_seed(seed)
    net = getattr(torchvision.models, arch)(weights=None, num_classes=num_classes).eval()
    path = Path(path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        torch.onnx.export(
            net,
            torch.zeros(1, 3, input_side, input_side),
            str(path),
            dynamo=False,
            input_names=["image"],
            output_names=["logits"],
            dynamic_axes={"image": {0: "N"}, "logits": {0: "N"}},
            opset_version=13,
        )
    return path


def build_demo_backbones(
    out_dir: str | Path, names: Sequence[str] = ("tiny_a", "tiny_b", "tiny_c"), output_dim: int = 1000
) -> Path:
    """Write several tiny backbones plus a ``backbones.toml`` registry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width_sets = [(16, 32, 64), (8, 16, 48), (12, 24, 32, 96)]
    entries = []
    for i, name in enumerate(names):
        file = build_tiny_backbone(
            out_dir / f"{name}.onnx", seed=100 + i, widths=width_sets[i % len(width_sets)], output_dim=output_dim
        )
        entries.append(RegistryEntry(name, file, 224, Preprocessing()))
    registry = out_dir / "backbones.toml"
    write_registry(registry, entries)
    return registry
