"""Pretrained backbones loaded from ONNX files, exposed as two taps.

A loaded graph is canonicalised so that it has exactly two outputs:

``intermediate``
    the globally average-pooled last-conv activations, shape (N, K)
``output``
    class probabilities after a softmax, shape (N, M)

Inference runs through onnxruntime. Fine-tuning runs the same graph through
a small torch interpreter (``GraphModule``) whose parameters are the graph's
float initializers, so tuned weights are written straight back into the ONNX
file and ``intermediate``/``output`` keep their meaning.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import onnx
from onnx import helper, numpy_helper, shape_inference

from .dataset import RasterImage, resize_square

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

INTERMEDIATE = "intermediate"
OUTPUT = "output"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"
HEAD_LOGITS = "head.logits"
MIN_LEARNING_RATE = 1e-4

SUPPORTED_OPS = frozenset(
    {
        "Add", "AveragePool", "BatchNormalization", "Clip", "Concat", "Constant",
        "Conv", "Div", "Dropout", "Flatten", "Gemm", "GlobalAveragePool",
        "HardSigmoid", "HardSwish", "Identity", "LeakyRelu", "MatMul", "MaxPool",
        "Mul", "Pad", "ReduceMean", "Relu", "Reshape", "Sigmoid", "Softmax",
        "Squeeze", "Sub", "Tanh", "Transpose", "Unsqueeze",
    }
)


class BackboneError(ValueError):
    """Problem loading or using a backbone graph."""


class TapError(BackboneError):
    pass


class ShapeMismatchError(BackboneError):
    pass


@dataclass(frozen=True)
class Preprocessing:
    """Maps [0, 1] RGB pixels to the range the graph was trained on.

    ``x = (pixels[..., order] * scale - mean) / std`` per channel.
    """

    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    scale: float = 1.0
    channel_order: str = "rgb"

    def __post_init__(self):
        if self.channel_order not in ("rgb", "bgr"):
            raise BackboneError(f"channel_order must be rgb or bgr, got {self.channel_order!r}")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s == 0 for s in self.std):
            raise BackboneError("preprocessing needs 3 means and 3 non-zero stds")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """(H, W, 3) pixels -> (1, 3, H, W) float32 network input."""
        x = pixels[..., ::-1] if self.channel_order == "bgr" else pixels
        x = (x * np.float32(self.scale) - np.asarray(self.mean, np.float32)) / np.asarray(
            self.std, np.float32
        )
        return np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=np.float32)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "scale": self.scale,
            "channel_order": self.channel_order,
        }


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    file: Path
    input_side: int | None = None
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    intermediate_tap: str | None = None
    output_tap: str | None = None


def load_registry(path: str | Path) -> dict[str, RegistryEntry]:
    """Read a TOML registry: one table per backbone name.

    ``file`` is resolved relative to the registry's directory. Other keys:
    ``input_side``, ``mean``, ``std``, ``scale``, ``channel_order``,
    ``intermediate_tap``, ``output_tap``.
    """
    path = Path(path)
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    entries = {}
    for name, table in data.items():
        if not isinstance(table, dict) or "file" not in table:
            raise BackboneError(f"{path}: registry entry {name!r} needs a 'file' key")
        file = Path(table["file"])
        if not file.is_absolute():
            file = path.parent / file
        pre_keys = {k: table[k] for k in ("mean", "std", "scale", "channel_order") if k in table}
        entries[name] = RegistryEntry(
            name=name,
            file=file,
            input_side=table.get("input_side"),
            preprocessing=Preprocessing(**pre_keys),
            intermediate_tap=table.get("intermediate_tap"),
            output_tap=table.get("output_tap"),
        )
    return entries


def write_registry(path: str | Path, entries: Sequence[RegistryEntry]) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        file = Path(e.file)
        try:
            file = file.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"[{json.dumps(e.name)}]")
        lines.append(f"file = {json.dumps(file.as_posix())}")
        if e.input_side is not None:
            lines.append(f"input_side = {int(e.input_side)}")
        for key, value in e.preprocessing.to_dict().items():
            lines.append(f"{key} = {json.dumps(value)}")
        for key in ("intermediate_tap", "output_tap"):
            if getattr(e, key):
                lines.append(f"{key} = {json.dumps(getattr(e, key))}")
        lines.append("")
    path.write_text("\n".join(lines))


@dataclass
class BackboneModel:
    name: str
    input_side: int
    intermediate_dim: int
    output_dim: int
    graph: bytes
    preprocessing: Preprocessing = field(default_factory=Preprocessing)
    metadata: dict[str, Any] = field(default_factory=dict)
    _session: Any = field(default=None, init=False, repr=False, compare=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.graph).hexdigest()

    def proto(self) -> onnx.ModelProto:
        return onnx.load_from_string(self.graph)

    def session(self):
        if self._session is None:
            import onnxruntime as ort

            opts = ort.SessionOptions()
            opts.intra_op_num_threads = 1
            opts.inter_op_num_threads = 1
            opts.execution_mode = ort.ExecutionMode.ORT_SEQUENTIAL
            opts.log_severity_level = 3
            self._session = ort.InferenceSession(
                self.graph, sess_options=opts, providers=["CPUExecutionProvider"]
            )
        return self._session

    def save(self, path: str | Path) -> RegistryEntry:
        path = Path(path)
        path.write_bytes(self.graph)
        return RegistryEntry(self.name, path, self.input_side, self.preprocessing)

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_side": self.input_side,
            "intermediate_dim": self.intermediate_dim,
            "output_dim": self.output_dim,
            "digest": self.digest,
            "preprocessing": self.preprocessing.to_dict(),
            **{k: v for k, v in self.metadata.items() if k != "loss_trace"},
        }


# --- graph surgery ------------------------------------------------------------


def _producers(graph: onnx.GraphProto) -> dict[str, onnx.NodeProto]:
    return {out: node for node in graph.node for out in node.output if out}


def _tensor_names(graph: onnx.GraphProto) -> set[str]:
    names = {i.name for i in graph.input} | {i.name for i in graph.initializer}
    for node in graph.node:
        names.update(node.output)
        names.update(node.input)
    return names


def _rename_tensor(graph: onnx.GraphProto, old: str, new: str) -> None:
    for node in graph.node:
        for i, name in enumerate(node.input):
            if name == old:
                node.input[i] = new
        for i, name in enumerate(node.output):
            if name == old:
                node.output[i] = new
    for vi in list(graph.value_info) + list(graph.output):
        if vi.name == old:
            vi.name = new


def _prune(graph: onnx.GraphProto, keep_outputs: Sequence[str]) -> None:
    """Drop nodes and initializers that do not feed ``keep_outputs``."""
    producer = {out: i for i, node in enumerate(graph.node) for out in node.output if out}
    needed: set[str] = set()
    live: set[int] = set()
    stack = list(keep_outputs)
    while stack:
        name = stack.pop()
        if name in needed:
            continue
        needed.add(name)
        i = producer.get(name)
        if i is not None and i not in live:
            live.add(i)
            stack.extend(x for x in graph.node[i].input if x)
    kept = [copy.deepcopy(n) for i, n in enumerate(graph.node) if i in live]
    del graph.node[:]
    graph.node.extend(kept)
    inits = [copy.deepcopy(t) for t in graph.initializer if t.name in needed]
    del graph.initializer[:]
    graph.initializer.extend(inits)
    vis = [copy.deepcopy(v) for v in graph.value_info if v.name in needed]
    del graph.value_info[:]
    graph.value_info.extend(vis)


def _data_input(graph: onnx.GraphProto) -> onnx.ValueInfoProto:
    init_names = {t.name for t in graph.initializer}
    inputs = [i for i in graph.input if i.name not in init_names]
    if len(inputs) != 1:
        raise BackboneError(f"expected exactly one image input, found {len(inputs)}")
    return inputs[0]


def _dims(vi: onnx.ValueInfoProto) -> list[int | None]:
    shape = vi.type.tensor_type.shape
    return [d.dim_value if d.HasField("dim_value") else None for d in shape.dim]


def _infer(model: onnx.ModelProto) -> dict[str, list[int | None]]:
    inferred = shape_inference.infer_shapes(model)
    shapes = {}
    for vi in list(inferred.graph.value_info) + list(inferred.graph.output) + list(
        inferred.graph.input
    ):
        if vi.type.tensor_type.HasField("shape"):
            shapes[vi.name] = _dims(vi)
    return shapes


def _fix_input_shape(graph: onnx.GraphProto, side: int) -> None:
    """Pin spatial dims of the image input; batch stays symbolic."""
    vi = _data_input(graph)
    dims = vi.type.tensor_type.shape.dim
    if len(dims) != 4:
        raise BackboneError(f"image input must be rank 4 (N,3,H,W), got rank {len(dims)}")
    for d, value in zip(dims[1:], (3, side, side)):
        if not d.HasField("dim_value"):
            d.dim_value = value
    if dims[0].HasField("dim_value") and dims[0].dim_value != 1:
        raise BackboneError("fixed batch sizes other than 1 are not supported")
    dims[0].ClearField("dim_value")
    dims[0].dim_param = "N"


def _find_intermediate(graph: onnx.GraphProto, requested: str | None) -> str:
    names = _tensor_names(graph)
    if requested:
        if requested not in names:
            raise TapError(f"intermediate tap unresolvable: no tensor named {requested!r}")
        return requested
    outputs = [o.name for o in graph.output]
    if INTERMEDIATE in outputs:
        return INTERMEDIATE
    pools = [n for n in graph.node if n.op_type == "GlobalAveragePool"]
    if not pools:
        raise TapError(
            "intermediate tap unresolvable: no pooled-conv tensor; name one with intermediate_tap"
        )
    return pools[-1].output[0]


def _find_output(graph: onnx.GraphProto, requested: str | None, intermediate: str) -> str:
    names = _tensor_names(graph)
    if requested:
        if requested not in names:
            raise TapError(f"output tap unresolvable: no tensor named {requested!r}")
        return requested
    outputs = [o.name for o in graph.output if o.name != intermediate]
    if OUTPUT in outputs:
        return OUTPUT
    if len(outputs) != 1:
        raise TapError(f"output tap ambiguous among graph outputs {outputs}; name it with output_tap")
    return outputs[0]


def canonicalize(
    model: onnx.ModelProto,
    input_side: int | None = None,
    intermediate_tap: str | None = None,
    output_tap: str | None = None,
) -> tuple[onnx.ModelProto, dict[str, Any]]:
    """Rewrite a classification graph to expose exactly the two named taps."""
    model = copy.deepcopy(model)
    graph = model.graph
    unsupported = sorted({n.op_type for n in graph.node} - SUPPORTED_OPS)
    if unsupported:
        raise BackboneError(f"unsupported operator(s): {', '.join(unsupported)}")
    if any(n.domain not in ("", "ai.onnx") for n in graph.node):
        raise BackboneError("unsupported operator domain (only the default ONNX domain)")

    vi = _data_input(graph)
    dims = _dims(vi)
    if len(dims) != 4 or (dims[1] is not None and dims[1] != 3):
        raise ShapeMismatchError(f"input-shape mismatch: expected (N,3,S,S), graph has {dims}")
    h, w = dims[2], dims[3]
    if h is not None and w is not None and h != w:
        raise ShapeMismatchError(f"input-shape mismatch: non-square input {h}x{w}")
    graph_side = h if h is not None else w
    if input_side is not None and graph_side is not None and input_side != graph_side:
        raise ShapeMismatchError(
            f"input-shape mismatch: registry says {input_side}, graph says {graph_side}"
        )
    side = graph_side or input_side
    if side is None:
        raise ShapeMismatchError("input-shape mismatch: graph has dynamic spatial dims; set input_side")
    _fix_input_shape(graph, side)

    inter = _find_intermediate(graph, intermediate_tap)
    out = _find_output(graph, output_tap, inter)
    del graph.output[:]
    del graph.value_info[:]

    # free the canonical names if the source graph already uses them internally
    for reserved in (INTERMEDIATE, OUTPUT):
        if reserved in _tensor_names(graph):
            fresh = reserved + "__src"
            _rename_tensor(graph, reserved, fresh)
            inter = fresh if inter == reserved else inter
            out = fresh if out == reserved else out

    shapes = _infer(model)
    inter_shape = shapes.get(inter)
    new_nodes = []
    if inter_shape is None:
        raise TapError(f"intermediate tap unresolvable: shape of {inter!r} unknown")
    if len(inter_shape) == 4:
        if inter_shape[2:] != [1, 1]:
            new_nodes.append(helper.make_node("GlobalAveragePool", [inter], [inter + "__gap"]))
            inter = inter + "__gap"
        new_nodes.append(helper.make_node("Flatten", [inter], [INTERMEDIATE], axis=1))
    elif len(inter_shape) == 2:
        new_nodes.append(helper.make_node("Identity", [inter], [INTERMEDIATE]))
    else:
        raise TapError(f"intermediate tap unresolvable: {inter!r} has rank {len(inter_shape)}")

    producers = _producers(graph)
    src = producers.get(out)
    if src is not None and src.op_type == "Softmax":
        logits = src.input[0]
        softmax_appended = False
    else:
        logits = out
        softmax_appended = True
    new_nodes.append(helper.make_node("Softmax", [logits], [OUTPUT], axis=-1))
    graph.node.extend(new_nodes)
    graph.output.extend(
        [
            helper.make_tensor_value_info(INTERMEDIATE, onnx.TensorProto.FLOAT, None),
            helper.make_tensor_value_info(OUTPUT, onnx.TensorProto.FLOAT, None),
        ]
    )
    _prune(graph, [INTERMEDIATE, OUTPUT])

    shapes = _infer(model)
    k = shapes.get(INTERMEDIATE, [None, None])[-1]
    m = shapes.get(OUTPUT, [None, None])[-1]
    if k is None or m is None:
        raise TapError(f"could not infer tap widths from graph metadata (K={k}, M={m})")
    del graph.output[:]
    graph.output.extend(
        [
            helper.make_tensor_value_info(INTERMEDIATE, onnx.TensorProto.FLOAT, ["N", k]),
            helper.make_tensor_value_info(OUTPUT, onnx.TensorProto.FLOAT, ["N", m]),
        ]
    )
    onnx.checker.check_model(model)
    info = {
        "input_side": side,
        "intermediate_dim": k,
        "output_dim": m,
        "logits_tensor": logits,
        "softmax_appended": softmax_appended,
    }
    return model, info


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_backbone(
    model_path: str | Path,
    name: str | None = None,
    input_side: int | None = None,
    preprocessing: Preprocessing | None = None,
    intermediate_tap: str | None = None,
    output_tap: str | None = None,
) -> BackboneModel:
    model_path = Path(model_path)
    if not model_path.is_file():
        raise BackboneError(f"backbone file not found: {model_path}")
    try:
        proto = onnx.load(str(model_path))
    except Exception as exc:
        raise BackboneError(f"{model_path}: not a readable ONNX graph ({exc})") from exc
    canon, info = canonicalize(proto, input_side, intermediate_tap, output_tap)
    meta = {
        "source_file": model_path.name,
        "source_digest": _file_digest(model_path),
        "logits_tensor": info["logits_tensor"],
        "softmax_appended": info["softmax_appended"],
    }
    return BackboneModel(
        name=name or model_path.stem,
        input_side=info["input_side"],
        intermediate_dim=info["intermediate_dim"],
        output_dim=info["output_dim"],
        graph=canon.SerializeToString(),
        preprocessing=preprocessing or Preprocessing(),
        metadata=meta,
    )


def load_from_registry(registry: dict[str, RegistryEntry] | str | Path, name: str) -> BackboneModel:
    if not isinstance(registry, dict):
        registry = load_registry(registry)
    if name not in registry:
        raise BackboneError(f"backbone {name!r} not in registry ({', '.join(sorted(registry))})")
    e = registry[name]
    return load_backbone(
        e.file, name, e.input_side, e.preprocessing, e.intermediate_tap, e.output_tap
    )


# --- inference -------------------------------------------------------------------


def extract(model: BackboneModel, img: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate both taps in one forward pass; img must already be input_side square."""
    if (img.rows, img.cols) != (model.input_side, model.input_side):
        raise ShapeMismatchError(
            f"shape mismatch: {model.name} expects {model.input_side}x{model.input_side}, "
            f"got {img.rows}x{img.cols}"
        )
    x = model.preprocessing.apply(img.pixels)
    sess = model.session()
    inter, out = sess.run([INTERMEDIATE, OUTPUT], {sess.get_inputs()[0].name: x})
    return inter[0].astype(np.float32, copy=False), out[0].astype(np.float32, copy=False)


def extract_resized(model: BackboneModel, img: RasterImage) -> tuple[np.ndarray, np.ndarray]:
    return extract(model, resize_square(img, model.input_side))


# --- head replacement -------------------------------------------------------------


def replace_head(model: BackboneModel, num_classes: int, seed: int = 0) -> BackboneModel:
    """Swap the classification layer for a fresh ``num_classes``-way affine + softmax.

    New weights are U(-1/sqrt(K), 1/sqrt(K)) from a seeded generator; every
    tensor upstream of the intermediate tap is copied unchanged.
    """
    if num_classes < 2:
        raise BackboneError(f"num_classes must be >= 2, got {num_classes}")
    proto = model.proto()
    graph = proto.graph
    del graph.output[:]
    graph.output.append(helper.make_tensor_value_info(INTERMEDIATE, onnx.TensorProto.FLOAT, None))
    _prune(graph, [INTERMEDIATE])
    k = model.intermediate_dim
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(k)
    weight = rng.uniform(-bound, bound, size=(num_classes, k)).astype(np.float32)
    bias = rng.uniform(-bound, bound, size=(num_classes,)).astype(np.float32)
    graph.initializer.extend(
        [numpy_helper.from_array(weight, HEAD_WEIGHT), numpy_helper.from_array(bias, HEAD_BIAS)]
    )
    graph.node.extend(
        [
            helper.make_node(
                "Gemm", [INTERMEDIATE, HEAD_WEIGHT, HEAD_BIAS], [HEAD_LOGITS], transB=1
            ),
            helper.make_node("Softmax", [HEAD_LOGITS], [OUTPUT], axis=-1),
        ]
    )
    del graph.output[:]
    graph.output.extend(
        [
            helper.make_tensor_value_info(INTERMEDIATE, onnx.TensorProto.FLOAT, ["N", k]),
            helper.make_tensor_value_info(OUTPUT, onnx.TensorProto.FLOAT, ["N", num_classes]),
        ]
    )
    onnx.checker.check_model(proto)
    meta = dict(model.metadata)
    meta.update(
        logits_tensor=HEAD_LOGITS,
        softmax_appended=False,
        head={"num_classes": num_classes, "init": "uniform_fan_in", "seed": seed},
    )
    return BackboneModel(
        name=model.name,
        input_side=model.input_side,
        intermediate_dim=k,
        output_dim=num_classes,
        graph=proto.SerializeToString(),
        preprocessing=model.preprocessing,
        metadata=meta,
    )


# --- fine-tuning ------------------------------------------------------------------


@dataclass
class FineTuneConfig:
    num_classes: int
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    freeze_body: bool = False
    allow_slow_lr: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise BackboneError("num_classes must be >= 2")
        if self.epochs < 1:
            raise BackboneError("epochs must be >= 1")
        if self.batch_size < 1:
            raise BackboneError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise BackboneError("learning_rate must be > 0")
        if self.learning_rate < MIN_LEARNING_RATE and not self.allow_slow_lr:
            raise BackboneError(
                f"learning_rate {self.learning_rate} is below {MIN_LEARNING_RATE}; "
                "set allow_slow_lr to override"
            )
        if self.optimizer != "adam":
            raise BackboneError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def head_parameter_names(proto: onnx.ModelProto) -> set[str]:
    """Initializers consumed downstream of the intermediate tap."""
    graph = proto.graph
    consumers: dict[str, list[int]] = {}
    for i, node in enumerate(graph.node):
        for name in node.input:
            consumers.setdefault(name, []).append(i)
    init_names = {t.name for t in graph.initializer}
    seen: set[int] = set()
    stack, params = [INTERMEDIATE], set()
    while stack:
        name = stack.pop()
        for i in consumers.get(name, []):
            if i in seen:
                continue
            seen.add(i)
            node = graph.node[i]
            params.update(x for x in node.input if x in init_names)
            stack.extend(node.output)
    return params


def fine_tune(
    model: BackboneModel,
    train: Sequence[tuple[RasterImage, int]],
    cfg: FineTuneConfig,
) -> tuple[BackboneModel, list[float]]:
    """Cross-entropy training of all weights (or the head only with ``freeze_body``).

    Runs single-threaded with deterministic torch kernels; the per-epoch loss
    trace (mean per-sample loss) is returned alongside the tuned model.
    """
    import torch

    from .graph_torch import GraphModule

    cfg.validate()
    if not train:
        raise BackboneError("empty training set")
    if model.output_dim != cfg.num_classes:
        raise BackboneError(
            f"head has {model.output_dim} outputs but num_classes={cfg.num_classes}; "
            "call replace_head first"
        )
    labels = [int(c) for _, c in train]
    bad = [c for c in labels if not 0 <= c < cfg.num_classes]
    if bad:
        raise BackboneError(f"label {bad[0]} out of range for {cfg.num_classes} classes")

    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        torch.manual_seed(cfg.seed)
        proto = model.proto()
        logits_name = model.metadata.get("logits_tensor", HEAD_LOGITS)
        net = GraphModule(proto, outputs=[logits_name])
        trainable = head_parameter_names(proto) if cfg.freeze_body else None
        params = net.set_trainable(trainable)
        if not params:
            raise BackboneError("no trainable parameters found")
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        xs = torch.from_numpy(
            np.concatenate(
                [model.preprocessing.apply(resize_square(img, model.input_side).pixels) for img, _ in train]
            )
        )
        ys = torch.tensor(labels, dtype=torch.long)
        gen = torch.Generator().manual_seed(cfg.seed)
        trace = []
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(train), generator=gen)
            total = 0.0
            for start in range(0, len(train), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                opt.zero_grad()
                logits = net(xs[idx])[logits_name]
                loss = torch.nn.functional.cross_entropy(logits, ys[idx])
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            trace.append(total / len(train))
            log.info("fine-tune epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, trace[-1])
        tuned = net.write_back(proto)
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)

    meta = dict(model.metadata)
    meta.update(fine_tune=cfg.to_dict(), loss_trace=trace)
    return (
        BackboneModel(
            name=model.name,
            input_side=model.input_side,
            intermediate_dim=model.intermediate_dim,
            output_dim=model.output_dim,
            graph=tuned.SerializeToString(),
            preprocessing=model.preprocessing,
            metadata=meta,
        ),
        trace,
    )
