"""Q8M1 model files (little-endian). Layout documented in docs/model-format.md."""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .nn import FC, Conv, LayerStack, MaxPool, ReLU
from .quant import QuantizedTensor, QuantParams

MAGIC = b"Q8M1"
_HEAD = struct.Struct("<4sHHHHHI")
_TAGS = {Conv: 1, MaxPool: 2, FC: 3, ReLU: 4}
_KINDS = {v: k for k, v in _TAGS.items()}


class ModelFormatError(ValueError):
    pass


def _write_tensor(out: io.BufferedIOBase, t) -> None:
    shape = t.shape
    out.write(struct.pack("<B", len(shape)))
    out.write(struct.pack(f"<{len(shape)}I", *shape))
    if isinstance(t, QuantizedTensor):
        out.write(struct.pack("<BfB", 1, t.params.scale, t.params.zero_point & 0xFF))
        out.write(np.ascontiguousarray(t.data, dtype=np.int8).tobytes())
    else:
        out.write(struct.pack("<B", 0))
        out.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ModelFormatError("unexpected end of model file")
    return data


def _read_tensor(buf: io.BytesIO):
    (ndim,) = struct.unpack("<B", _read(buf, 1))
    shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    (flag,) = struct.unpack("<B", _read(buf, 1))
    if flag == 1:
        scale, zp = struct.unpack("<fb", _read(buf, 5))
        data = np.frombuffer(_read(buf, count), dtype=np.int8).reshape(shape)
        try:
            return QuantizedTensor(data.copy(), QuantParams(float(scale), int(zp)))
        except ValueError as e:
            raise ModelFormatError(str(e)) from None
    if flag == 0:
        return np.frombuffer(_read(buf, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    raise ModelFormatError(f"bad quantized flag {flag}")


def dumps(stack: LayerStack) -> bytes:
    out = io.BytesIO()
    h, w, c = stack.input_shape
    out.write(_HEAD.pack(MAGIC, h, w, c, stack.num_boxes, stack.num_classes, len(stack.layers)))
    for layer in stack.layers:
        out.write(struct.pack("<B", _TAGS[type(layer)]))
        if isinstance(layer, (Conv, FC)):
            _write_tensor(out, layer.weight)
            _write_tensor(out, layer.bias)
    return out.getvalue()


def loads(data: bytes) -> LayerStack:
    buf = io.BytesIO(data)
    magic, h, w, c, boxes, classes, n = _HEAD.unpack(_read(buf, _HEAD.size))
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    layers = []
    for _ in range(n):
        (tag,) = struct.unpack("<B", _read(buf, 1))
        kind = _KINDS.get(tag)
        if kind is None:
            raise ModelFormatError(f"unknown layer tag {tag}")
        if kind in (Conv, FC):
            weight = _read_tensor(buf)
            bias = _read_tensor(buf)
            if not weight.shape:
                raise ModelFormatError("scalar weight tensor")
            layers.append(kind(weight.shape[0], weight, bias))
        else:
            layers.append(kind())
    if buf.read(1):
        raise ModelFormatError("trailing bytes after last layer")
    try:
        return LayerStack(tuple(layers), (h, w, c), boxes, classes)
    except (ValueError, TypeError) as e:
        raise ModelFormatError(f"inconsistent layer shapes: {e}") from None


def save(stack: LayerStack, path: str | Path) -> None:
    Path(path).write_bytes(dumps(stack))


def load(path: str | Path) -> LayerStack:
    return loads(Path(path).read_bytes())
