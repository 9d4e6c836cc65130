"""Differentiable torch interpreter for the ONNX operator subset backbones use.

Float initializers become ``nn.Parameter``s keyed by their ONNX names, so a
trained module can be written back into the graph it came from.
"""
from __future__ import annotations

import copy
import math
from typing import Any, Iterable, Sequence

import numpy as np
import onnx
import torch
import torch.nn.functional as F
from onnx import helper, numpy_helper

# BatchNormalization inputs 3 and 4 are running statistics, never trained
_STAT_INPUTS = {"BatchNormalization": (3, 4)}


def _attrs(node: onnx.NodeProto) -> dict[str, Any]:
    out = {}
    for a in node.attribute:
        v = helper.get_attribute_value(a)
        if isinstance(v, bytes):
            v = v.decode()
        out[a.name] = v
    return out


def _opset(proto: onnx.ModelProto) -> int:
    for imp in proto.opset_import:
        if imp.domain in ("", "ai.onnx"):
            return imp.version
    return 13


class GraphModule(torch.nn.Module):
    def __init__(self, proto: onnx.ModelProto, outputs: Sequence[str] | None = None):
        super().__init__()
        graph = proto.graph
        self.opset = _opset(proto)
        init_names = {t.name for t in graph.initializer}
        inputs = [i.name for i in graph.input if i.name not in init_names]
        if len(inputs) != 1:
            raise ValueError(f"expected one data input, got {inputs}")
        self.input_name = inputs[0]
        self.output_names = list(outputs) if outputs else [o.name for o in graph.output]

        stats = set()
        for node in graph.node:
            for idx in _STAT_INPUTS.get(node.op_type, ()):
                if idx < len(node.input):
                    stats.add(node.input[idx])

        self.params = torch.nn.ParameterDict()
        self._param_key: dict[str, str] = {}
        self._consts: dict[str, torch.Tensor] = {}
        for i, t in enumerate(graph.initializer):
            arr = numpy_helper.to_array(t)
            if arr.dtype == np.float32 and t.name not in stats:
                key = f"p{i}"
                self.params[key] = torch.nn.Parameter(torch.from_numpy(arr.copy()))
                self._param_key[t.name] = key
            else:
                self._consts[t.name] = torch.from_numpy(np.array(arr))
        self.nodes = []
        for node in graph.node:
            attrs = _attrs(node)
            if node.op_type == "Constant":
                self._consts[node.output[0]] = _constant_value(attrs)
                continue
            self.nodes.append((node.op_type, list(node.input), list(node.output), attrs))

    def set_trainable(self, names: Iterable[str] | None = None) -> list[torch.nn.Parameter]:
        """Enable gradients for the named initializers (all float ones if None)."""
        wanted = None if names is None else set(names)
        chosen = []
        for name, key in self._param_key.items():
            p = self.params[key]
            on = wanted is None or name in wanted
            p.requires_grad_(on)
            if on:
                chosen.append(p)
        return chosen

    def write_back(self, proto: onnx.ModelProto) -> onnx.ModelProto:
        out = copy.deepcopy(proto)
        for t in out.graph.initializer:
            key = self._param_key.get(t.name)
            if key is None:
                continue
            arr = self.params[key].detach().cpu().numpy().astype(np.float32)
            t.CopyFrom(numpy_helper.from_array(arr, t.name))
        return out

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        env: dict[str, torch.Tensor] = dict(self._consts)
        for name, key in self._param_key.items():
            env[name] = self.params[key]
        env[self.input_name] = x
        for op, ins, outs, attrs in self.nodes:
            args = [env[i] if i else None for i in ins]
            fn = _OPS.get(op)
            if fn is None:
                raise NotImplementedError(f"operator {op} not supported by the interpreter")
            result = fn(self, args, attrs)
            if not isinstance(result, tuple):
                result = (result,)
            for name, value in zip(outs, result):
                if name:
                    env[name] = value
        return {name: env[name] for name in self.output_names}


def _constant_value(attrs: dict[str, Any]) -> torch.Tensor:
    if "value" in attrs:
        return torch.from_numpy(np.array(numpy_helper.to_array(attrs["value"])))
    for key in ("value_float", "value_int"):
        if key in attrs:
            return torch.tensor(attrs[key])
    for key in ("value_floats", "value_ints"):
        if key in attrs:
            return torch.tensor(list(attrs[key]))
    raise ValueError(f"unsupported Constant attributes {sorted(attrs)}")


def _ints(t) -> list[int]:
    return [int(v) for v in t.reshape(-1).tolist()]


def _split_pads(pads: Sequence[int], nd: int) -> tuple[list[int], list[int]]:
    pads = list(pads) if pads else [0] * (2 * nd)
    return pads[:nd], pads[nd:]


def _torch_pad(begin, end) -> list[int]:
    # F.pad wants last-dim-first (left, right, top, bottom, ...)
    out = []
    for b, e in zip(reversed(begin), reversed(end)):
        out += [b, e]
    return out


def _conv(m, a, at):
    x, w = a[0], a[1]
    b = a[2] if len(a) > 2 else None
    nd = w.dim() - 2
    if at.get("auto_pad", "NOTSET") not in ("NOTSET", "VALID"):
        raise NotImplementedError("Conv auto_pad SAME_* is not supported")
    begin, end = _split_pads(at.get("pads"), nd)
    strides = at.get("strides", [1] * nd)
    dil = at.get("dilations", [1] * nd)
    group = at.get("group", 1)
    if begin != end:
        x = F.pad(x, _torch_pad(begin, end))
        begin = [0] * nd
    conv = {1: F.conv1d, 2: F.conv2d, 3: F.conv3d}[nd]
    return conv(x, w, b, stride=strides, padding=begin, dilation=dil, groups=group)


def _maxpool(m, a, at):
    x = a[0]
    k = at["kernel_shape"]
    nd = len(k)
    begin, end = _split_pads(at.get("pads"), nd)
    strides = at.get("strides", [1] * nd)
    if begin != end:
        x = F.pad(x, _torch_pad(begin, end), value=-math.inf)
        begin = [0] * nd
    pool = {1: F.max_pool1d, 2: F.max_pool2d, 3: F.max_pool3d}[nd]
    return pool(
        x, k, strides, begin, dilation=at.get("dilations", [1] * nd),
        ceil_mode=bool(at.get("ceil_mode", 0)),
    )


def _avgpool(m, a, at):
    x = a[0]
    k = at["kernel_shape"]
    nd = len(k)
    begin, end = _split_pads(at.get("pads"), nd)
    if begin != end:
        raise NotImplementedError("AveragePool with asymmetric pads is not supported")
    pool = {1: F.avg_pool1d, 2: F.avg_pool2d, 3: F.avg_pool3d}[nd]
    return pool(
        x, k, at.get("strides", [1] * nd), begin,
        ceil_mode=bool(at.get("ceil_mode", 0)),
        count_include_pad=bool(at.get("count_include_pad", 0)),
    )


def _gemm(m, a, at):
    A, B = a[0], a[1]
    C = a[2] if len(a) > 2 else None
    if at.get("transA", 0):
        A = A.t()
    if at.get("transB", 0):
        B = B.t()
    y = at.get("alpha", 1.0) * (A @ B)
    if C is not None:
        y = y + at.get("beta", 1.0) * C
    return y


def _flatten(m, a, at):
    x = a[0]
    axis = at.get("axis", 1)
    if axis < 0:
        axis += x.dim()
    lead = int(np.prod(x.shape[:axis])) if axis else 1
    return x.reshape(lead, -1)


def _softmax(m, a, at):
    x = a[0]
    if m.opset >= 13:
        return torch.softmax(x, dim=at.get("axis", -1))
    axis = at.get("axis", 1)
    if axis < 0:
        axis += x.dim()
    shape = x.shape
    flat = x.reshape(int(np.prod(shape[:axis])) if axis else 1, -1)
    return torch.softmax(flat, dim=1).reshape(shape)


def _clip(m, a, at):
    lo = a[1] if len(a) > 1 and a[1] is not None else at.get("min")
    hi = a[2] if len(a) > 2 and a[2] is not None else at.get("max")
    lo = float(lo) if lo is not None else None
    hi = float(hi) if hi is not None else None
    return torch.clamp(a[0], lo, hi)


def _bn(m, a, at):
    x, scale, bias, mean, var = a[:5]
    return F.batch_norm(
        x, mean.detach(), var.detach(), scale, bias, training=False, eps=at.get("epsilon", 1e-5)
    )


def _reshape(m, a, at):
    x, shape = a[0], _ints(a[1])
    if not at.get("allowzero", 0):
        shape = [x.shape[i] if s == 0 else s for i, s in enumerate(shape)]
    return x.reshape(shape)


def _axes(a, at):
    if len(a) > 1 and a[1] is not None:
        return _ints(a[1])
    return at.get("axes")


def _reduce_mean(m, a, at):
    axes = _axes(a, at)
    keep = bool(at.get("keepdims", 1))
    if axes is None:
        return a[0].mean() if not keep else a[0].mean(dim=tuple(range(a[0].dim())), keepdim=True)
    return a[0].mean(dim=tuple(axes), keepdim=keep)


def _squeeze(m, a, at):
    axes = _axes(a, at)
    x = a[0]
    if axes is None:
        return x.squeeze()
    for ax in sorted((ax % x.dim() for ax in axes), reverse=True):
        x = x.squeeze(ax)
    return x


def _unsqueeze(m, a, at):
    x = a[0]
    axes = _axes(a, at)
    rank = x.dim() + len(axes)
    for ax in sorted(ax % rank for ax in axes):
        x = x.unsqueeze(ax)
    return x


def _pad(m, a, at):
    if at.get("mode", "constant") != "constant":
        raise NotImplementedError("only constant Pad is supported")
    x = a[0]
    pads = _ints(a[1]) if len(a) > 1 else list(at["pads"])
    value = float(a[2]) if len(a) > 2 and a[2] is not None else float(at.get("value", 0.0))
    nd = x.dim()
    return F.pad(x, _torch_pad(pads[:nd], pads[nd:]), value=value)


_OPS = {
    "Add": lambda m, a, at: a[0] + a[1],
    "Sub": lambda m, a, at: a[0] - a[1],
    "Mul": lambda m, a, at: a[0] * a[1],
    "Div": lambda m, a, at: a[0] / a[1],
    "MatMul": lambda m, a, at: torch.matmul(a[0], a[1]),
    "Relu": lambda m, a, at: torch.relu(a[0]),
    "Sigmoid": lambda m, a, at: torch.sigmoid(a[0]),
    "Tanh": lambda m, a, at: torch.tanh(a[0]),
    "LeakyRelu": lambda m, a, at: F.leaky_relu(a[0], at.get("alpha", 0.01)),
    "HardSigmoid": lambda m, a, at: torch.clamp(
        at.get("alpha", 0.2) * a[0] + at.get("beta", 0.5), 0.0, 1.0
    ),
    "HardSwish": lambda m, a, at: a[0] * torch.clamp(a[0] / 6.0 + 0.5, 0.0, 1.0),
    "Identity": lambda m, a, at: a[0],
    "Dropout": lambda m, a, at: a[0],
    "GlobalAveragePool": lambda m, a, at: a[0].mean(
        dim=tuple(range(2, a[0].dim())), keepdim=True
    ),
    "Concat": lambda m, a, at: torch.cat(a, dim=at["axis"]),
    "Transpose": lambda m, a, at: a[0].permute(
        *(at.get("perm") or list(reversed(range(a[0].dim()))))
    ),
    "Conv": _conv,
    "MaxPool": _maxpool,
    "AveragePool": _avgpool,
    "Gemm": _gemm,
    "Flatten": _flatten,
    "Softmax": _softmax,
    "Clip": _clip,
    "BatchNormalization": _bn,
    "Reshape": _reshape,
    "ReduceMean": _reduce_mean,
    "Squeeze": _squeeze,
    "Unsqueeze": _unsqueeze,
    "Pad": _pad,
}
