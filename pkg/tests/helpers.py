"""Random micro-model generation shared by the unit and acceptance tests."""

import numpy as np

from infergate.nn import FC, Conv, MaxPool, ReLU, build_stack
from infergate.quant import QuantizedTensor, dequantize_tensor


def random_micro_spec(rng: np.random.Generator):
    """Up to 4 convs of width <= 16 on an input of at most 16x16."""
    h = int(rng.integers(2, 17))
    w = int(rng.integers(2, 17))
    c = int(rng.integers(1, 4))
    spec: list = []
    size = min(h, w)
    for _ in range(int(rng.integers(1, 5))):
        spec.append(("conv", int(rng.integers(1, 17))))
        if rng.random() < 0.7:
            spec.append("relu")
        if size >= 2 and rng.random() < 0.5:
            spec.append("pool")
            size //= 2
    if rng.random() < 0.5:
        spec += [("fc", int(rng.integers(1, 17))), "relu"]
    spec.append(("fc", "head"))
    boxes = int(rng.integers(1, 4))
    classes = int(rng.integers(1, 4))
    return spec, (h, w, c), boxes, classes


def random_micro_model(seed: int):
    rng = np.random.default_rng(seed)
    spec, shape, boxes, classes = random_micro_spec(rng)
    stack = build_stack(spec, shape, boxes, classes, rng)
    image = rng.uniform(0, 255, size=shape)
    return stack, image


def _f(w):
    return dequantize_tensor(w) if isinstance(w, QuantizedTensor) else np.asarray(w, np.float64)


def oracle_layers(float_stack, quant_stack=None):
    """Stack -> tuples understood by tests/oracles.py.

    With ``quant_stack``, parametric tuples also carry the dequantized weight
    at index 3, and the per-layer (weight scale, bias scale) list is returned.
    """
    layers, scales = [], []
    for n, layer in enumerate(float_stack.layers):
        if isinstance(layer, (Conv, FC)):
            kind = "conv" if isinstance(layer, Conv) else "fc"
            t = (kind, _f(layer.weight), _f(layer.bias))
            if quant_stack is not None:
                ql = quant_stack.layers[n]
                t += (_f(ql.weight),)
                scales.append((ql.weight.params.scale, ql.bias.params.scale))
            layers.append(t)
        elif isinstance(layer, MaxPool):
            layers.append(("pool",))
        elif isinstance(layer, ReLU):
            layers.append(("relu",))
    return (layers, scales) if quant_stack is not None else layers


def crowded_fp_fixture(seed: int = 0):
    """Crowded-scene records with 926 oracle detections and 74 injected false
    positives, i.e. 74 of 1000 predictions unmatched."""
    from infergate.detect import OracleDetector
    from infergate.evaluation import EvalRecord, Prediction, Truth
    from infergate.sim import random_scene, render_frame

    rng = np.random.default_rng(seed)
    oracle = OracleDetector(seed=seed)
    crowding = [10] * 86 + [11] * 6  # 860 + 66 = 926 objects
    records = []
    for k, c in enumerate(crowding):
        scene = random_scene(rng, c, 1, width=320, height=240)
        frame, truth = render_frame(scene, 0)
        dets = oracle.detect(frame)
        if k < 74:
            dets.append(oracle.false_positive(frame))
        records.append(
            EvalRecord(
                k,
                [Truth(d.label_id, (d.x0, d.y0, d.x1, d.y1)) for d in truth],
                [Prediction(d.label_id, d.confidence, (d.x0, d.y0, d.x1, d.y1)) for d in dets],
                crowding=c,
            )
        )
    return records
