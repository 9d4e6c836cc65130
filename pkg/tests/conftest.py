from pathlib import Path

import numpy as np
import pytest

from eventverify.backbone import load_backbone
from eventverify.dataset import RasterImage
from eventverify.synthetic import build_tiny_backbone, export_torchvision_backbone, generate_corpus


@pytest.fixture(scope="session")
def tiny_model(tmp_path_factory):
    """Three conv layers -> 64-d pooled tap, 1000-way softmax."""
    path = build_tiny_backbone(tmp_path_factory.mktemp("bb") / "tiny.onnx", seed=3)
    return load_backbone(path, "tiny")


@pytest.fixture(scope="session")
def small_head_model(tmp_path_factory):
    path = build_tiny_backbone(
        tmp_path_factory.mktemp("bb") / "small.onnx", seed=5, widths=(8, 16), output_dim=10
    )
    return load_backbone(path, "small")


@pytest.fixture(scope="session")
def resnet18_path(tmp_path_factory) -> Path:
    pytest.importorskip("torchvision")
    return export_torchvision_backbone("resnet18", tmp_path_factory.mktemp("rn") / "resnet18.onnx")


@pytest.fixture(scope="session")
def resnet18(resnet18_path):
    return load_backbone(resnet18_path, "resnet18")


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory) -> Path:
    """4 events x (40 train + 20 test) procedural textures."""
    return generate_corpus(tmp_path_factory.mktemp("synth"), n_train=40, n_test=20, seed=0)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory) -> Path:
    return generate_corpus(tmp_path_factory.mktemp("synth_small"), n_train=6, n_test=3, seed=1)


def random_image(rng: np.random.Generator, rows: int, cols: int) -> RasterImage:
    return RasterImage(rng.random((rows, cols, 3), dtype=np.float32))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
