"""A small conv/maxpool/fully-connected detector network in numpy.

Feature maps are channel-first (C, H, W). Convolutions are 3x3, stride 1,
zero padding 1. Pooling is 2x2 with stride 2 (floor). The flattened order
fed to the first fully-connected layer is C, H, W.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quant import QuantizedTensor, dequantize_tensor, quantize


class DimensionError(ValueError):
    pass


Weight = Union[np.ndarray, QuantizedTensor]


@dataclass(frozen=True, eq=False)
class Conv:
    out_channels: int
    weight: Weight | None = None  # (out, in, 3, 3)
    bias: Weight | None = None  # (out,)


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True, eq=False)
class FC:
    out_features: int
    weight: Weight | None = None  # (out, in)
    bias: Weight | None = None  # (out,)


Layer = Union[Conv, MaxPool, ReLU, FC]
KERNEL = 3


@dataclass(frozen=True, eq=False)
class RawPrediction:
    """Network head reshaped into box slots.

    ``boxes`` holds (cx, cy, w, h) squashed to [0, 1]; ``head`` is the
    untouched final FC output.
    """

    head: np.ndarray
    boxes: np.ndarray  # (B, 4)
    objectness: np.ndarray  # (B,)
    class_logits: np.ndarray  # (B, C)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class LayerStack:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int] = (64, 64, 3)  # H, W, C
    num_boxes: int = 8
    num_classes: int = 4
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", self._infer_shapes())

    def _infer_shapes(self):
        h, w, c = self.input_shape
        shape: tuple[int, ...] = (c, h, w)
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise DimensionError(f"layer {i}: conv after flatten")
                _check_weight(layer.weight, (layer.out_channels, shape[0], KERNEL, KERNEL), i)
                _check_weight(layer.bias, (layer.out_channels,), i)
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise DimensionError(f"layer {i}: cannot pool {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, FC):
                n_in = int(np.prod(shape))
                _check_weight(layer.weight, (layer.out_features, n_in), i)
                _check_weight(layer.bias, (layer.out_features,), i)
                shape = (layer.out_features,)
            elif not isinstance(layer, ReLU):
                raise TypeError(f"layer {i}: unknown layer {layer!r}")
            shapes.append(shape)
        expected = (self.num_boxes * (5 + self.num_classes),)
        if shape != expected:
            raise DimensionError(f"network output {shape} != {expected}")
        return tuple(shapes)

    @property
    def parametric(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv, FC))]

    def tensor_sizes(self) -> list[list[int]]:
        """Parameter count of (weight, bias) for each parametric layer."""
        out = []
        for i in self.parametric:
            layer = self.layers[i]
            out.append([int(np.prod(_shape_of(layer.weight))), int(np.prod(_shape_of(layer.bias)))])
        return out

    def param_count(self) -> int:
        return sum(sum(s) for s in self.tensor_sizes())

    @property
    def is_quantized(self) -> bool:
        return any(
            isinstance(self.layers[i].weight, QuantizedTensor) for i in self.parametric
        )


def _shape_of(w: Weight | None):
    if w is None:
        raise DimensionError("layer has no weights")
    return w.shape


def _check_weight(w, expected, i):
    if w is None:
        raise DimensionError(f"layer {i}: missing weights")
    if tuple(w.shape) != expected:
        raise DimensionError(f"layer {i}: weight shape {tuple(w.shape)} != {expected}")


def build_stack(
    spec: list,
    input_shape=(64, 64, 3),
    num_boxes: int = 8,
    num_classes: int = 4,
    rng: np.random.Generator | None = None,
    weight_scale: str = "he",
) -> LayerStack:
    """Instantiate an architecture with random fp32 weights.

    ``spec`` items: ``("conv", out)``, ``"pool"``, ``"relu"``, ``("fc", out)``.
    The string ``("fc", "head")`` stands for the B*(5+C) output layer.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w, c = input_shape
    shape: tuple[int, ...] = (c, h, w)
    layers: list[Layer] = []
    for item in spec:
        kind = item if isinstance(item, str) else item[0]
        if kind == "conv":
            out = item[1]
            fan_in = shape[0] * KERNEL * KERNEL
            std = np.sqrt(2.0 / fan_in) if weight_scale == "he" else 1.0
            wt = (rng.standard_normal((out, shape[0], KERNEL, KERNEL)) * std).astype(np.float32)
            b = (rng.standard_normal(out) * 0.1).astype(np.float32)
            layers.append(Conv(out, wt, b))
            shape = (out, shape[1], shape[2])
        elif kind == "pool":
            layers.append(MaxPool())
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "fc":
            out = num_boxes * (5 + num_classes) if item[1] == "head" else item[1]
            fan_in = int(np.prod(shape))
            std = np.sqrt(2.0 / fan_in) if weight_scale == "he" else 1.0
            wt = (rng.standard_normal((out, fan_in)) * std).astype(np.float32)
            b = (rng.standard_normal(out) * 0.1).astype(np.float32)
            layers.append(FC(out, wt, b))
            shape = (out,)
        else:
            raise ValueError(f"unknown layer spec {item!r}")
    return LayerStack(tuple(layers), tuple(input_shape), num_boxes, num_classes)


# Four conv segments (8, 16, 32, 32), each conv-relu-pool, then a 3-layer FC head.
MICRO_ARCHITECTURE = [
    ("conv", 8), "relu", "pool",
    ("conv", 16), "relu", "pool",
    ("conv", 32), "relu", "pool",
    ("conv", 32), "relu", "pool",
    ("fc", 256), "relu",
    ("fc", 128), "relu",
    ("fc", "head"),
]  # fmt: skip


def micro_detector(num_classes: int = 4, num_boxes: int = 8, seed: int = 0) -> LayerStack:
    return build_stack(
        MICRO_ARCHITECTURE, (64, 64, 3), num_boxes, num_classes, np.random.default_rng(seed)
    )


def full_scale_architecture(fc_widths=(1024, 512)) -> list:
    """16 convolutions in six pooled segments followed by three FC layers.

    Widths follow the Darknet doubling pattern with the 1024 stage halved.
    Not a unique reconstruction; provided to show the layer vocabulary scales.
    """
    segments = [[16], [32], [64], [128, 64, 128], [256, 128, 256, 128, 256], [512, 256, 512, 256, 512]]
    spec: list = []
    for seg in segments:
        for width in seg:
            spec += [("conv", width), "relu"]
        spec.append("pool")
    for width in fc_widths:
        spec += [("fc", width), "relu"]
    spec.append(("fc", "head"))
    return spec


# --- forward -------------------------------------------------------------------


def _to_chw(image: np.ndarray, stack: LayerStack) -> np.ndarray:
    image = np.asarray(image)
    if image.shape != tuple(stack.input_shape):
        raise DimensionError(f"image shape {image.shape} != expected {stack.input_shape}")
    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float64)


def _patches(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H, W, C, 3, 3) views over the zero-padded input."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))  # C, H, W, 3, 3
    return win.transpose(1, 2, 0, 3, 4)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c_out = weight.shape[0]
    p = _patches(x)
    h, w = p.shape[:2]
    cols = p.reshape(h * w, -1)
    y = cols @ weight.reshape(c_out, -1).T + bias
    return y.T.reshape(c_out, h, w)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).max(axis=(2, 4))


def _as_float(w: Weight) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        return dequantize_tensor(w)
    return np.asarray(w, dtype=np.float64)


def _split_head(stack: LayerStack, head: np.ndarray) -> RawPrediction:
    slots = head.reshape(stack.num_boxes, 5 + stack.num_classes)
    return RawPrediction(
        head=head,
        boxes=_sigmoid(slots[:, :4]),
        objectness=slots[:, 4].copy(),
        class_logits=slots[:, 5:].copy(),
    )


def forward(stack: LayerStack, image: np.ndarray) -> RawPrediction:
    """Float forward pass. Quantized weights, if present, are dequantized first."""
    x = _to_chw(image, stack)
    for layer in stack.layers:
        if isinstance(layer, Conv):
            x = conv2d(x, _as_float(layer.weight), _as_float(layer.bias))
        elif isinstance(layer, MaxPool):
            x = maxpool2x2(x)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        else:
            x = _as_float(layer.weight) @ x.reshape(-1) + _as_float(layer.bias)
    return _split_head(stack, x)


def _int_weights(q: QuantizedTensor) -> np.ndarray:
    # int8 - int8 leaves int8 range, so the codes are widened before use
    return q.data.astype(np.int32) - np.int32(q.params.zero_point)


def forward_quantized(stack: LayerStack, image: np.ndarray) -> RawPrediction:
    """Forward pass on integer weight codes.

    Each conv/FC accumulates ``(q - zero_point) * x`` and applies the weight
    scale once per output before adding the dequantized bias.
    """
    x = _to_chw(image, stack)
    for i, layer in enumerate(stack.layers):
        if isinstance(layer, (Conv, FC)):
            if not isinstance(layer.weight, QuantizedTensor):
                raise TypeError(f"layer {i} is not quantized")
            w = _int_weights(layer.weight)
            scale = layer.weight.params.scale
            bias = _as_float(layer.bias)
            if isinstance(layer, Conv):
                p = _patches(x)
                h, wd = p.shape[:2]
                acc = p.reshape(h * wd, -1) @ w.reshape(w.shape[0], -1).T
                x = (acc * scale + bias).T.reshape(w.shape[0], h, wd)
            else:
                x = (w @ x.reshape(-1)) * scale + bias
        elif isinstance(layer, MaxPool):
            x = maxpool2x2(x)
        else:
            x = np.maximum(x, 0.0)
    return _split_head(stack, x)


def quantize_stack(stack: LayerStack, mask=None) -> LayerStack:
    """Quantize weights and biases of the masked parametric layers."""
    idx = stack.parametric
    if mask is None:
        mask = [True] * len(idx)
    if len(mask) != len(idx):
        raise ValueError("mask length does not match parametric layer count")
    layers = list(stack.layers)
    for i, m in zip(idx, mask):
        layer = layers[i]
        if m and not isinstance(layer.weight, QuantizedTensor):
            layers[i] = replace(layer, weight=quantize(layer.weight), bias=quantize(layer.bias))
    return replace(stack, layers=tuple(layers))


def dequantize_stack(stack: LayerStack) -> LayerStack:
    layers = list(stack.layers)
    for i in stack.parametric:
        layer = layers[i]
        layers[i] = replace(
            layer,
            weight=_as_float(layer.weight).astype(np.float32),
            bias=_as_float(layer.bias).astype(np.float32),
        )
    return replace(stack, layers=tuple(layers))
