import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import oracle_layers, random_micro_model
from oracles import forward_ref, nms_fixed_point, quant_error_bound
from infergate import nn
from infergate.detect import (
    MicroCNNDetector,
    MissingSceneError,
    OracleDetector,
    ServiceTimeDetector,
    decode,
    nms,
)
from infergate.evaluation import iou
from infergate.nn import RawPrediction
from infergate.protocol import Box, Detection, FramePayload


def raw(boxes, obj, logits):
    boxes = np.asarray(boxes, float)
    return RawPrediction(np.zeros(1), boxes, np.asarray(obj, float), np.asarray(logits, float))


def test_decode_centre_box():
    out = decode(raw([[0.5, 0.5, 0.5, 0.5]], [50.0], [[10.0, -10.0]]), 0.5, 640, 480)
    assert len(out) == 1
    d = out[0]
    assert (d.x0, d.y0, d.x1, d.y1) == (160, 120, 480, 360)
    assert d.label_id == 0
    assert d.confidence == pytest.approx(1 / (1 + math.exp(-20)), abs=1e-6)


def test_decode_low_objectness_is_empty():
    assert decode(raw([[0.5, 0.5, 0.5, 0.5]] * 3, [-50.0] * 3, [[0.0, 1.0]] * 3), 0.1, 640, 480) == []


def test_decode_clamps_to_frame():
    (d,) = decode(raw([[0.9, 0.1, 0.6, 0.6]], [20.0], [[5.0]]), 0.5, 100, 100)
    assert (d.x0, d.y0, d.x1, d.y1) == (60, 0, 100, 40)


def test_decode_drops_degenerate_boxes():
    assert decode(raw([[0.5, 0.5, 0.0, 0.3]], [20.0], [[5.0]]), 0.5, 100, 100) == []


def test_decode_confidence_is_product():
    logits = [[1.0, 2.0, 0.5]]
    (d,) = decode(raw([[0.5, 0.5, 0.2, 0.2]], [0.3], logits), 0.0, 50, 50)
    p = np.exp(logits[0]) / np.exp(logits[0]).sum()
    assert d.label_id == 1
    assert d.confidence == pytest.approx(p[1] / (1 + math.exp(-0.3)))


def test_decode_rejects_bad_threshold():
    with pytest.raises(ValueError):
        decode(raw([[0.5, 0.5, 0.5, 0.5]], [0.0], [[0.0]]), 1.5, 10, 10)


def det(label, conf, box):
    return Detection(label, conf, *box)


def test_nms_examples():
    a, b = det(0, 0.9, (0, 0, 10, 10)), det(0, 0.8, (0, 0, 10, 10))
    assert nms([b, a]) == [a]
    disjoint = [det(0, 0.9, (0, 0, 5, 5)), det(0, 0.8, (10, 10, 20, 20))]
    assert nms(disjoint) == disjoint
    other_label = det(1, 0.8, (0, 0, 10, 10))
    assert nms([a, other_label]) == [a, other_label]


@st.composite
def det_sets(draw):
    n = draw(st.integers(0, 10))
    confs = draw(st.lists(st.integers(1, 10**6), min_size=n, max_size=n, unique=True))
    out = []
    for c in confs:
        x0 = draw(st.integers(0, 40))
        y0 = draw(st.integers(0, 40))
        out.append(det(draw(st.integers(0, 1)), c / 10**6, (x0, y0, x0 + draw(st.integers(1, 30)), y0 + draw(st.integers(1, 30)))))
    return out


def _iou_det(a, b):
    return iou((a.x0, a.y0, a.x1, a.y1), (b.x0, b.y0, b.x1, b.y1))


@settings(max_examples=60, deadline=None)
@given(det_sets(), st.sampled_from([0.3, 0.45, 0.7]))
def test_nms_matches_exhaustive_reference(dets, thr):
    want = nms_fixed_point(dets, _iou_det, thr)
    assert sorted(nms(dets, thr), key=lambda d: -d.confidence) == sorted(want, key=lambda d: -d.confidence)


@given(det_sets())
def test_nms_output_is_antichain(dets):
    kept = nms(dets)
    for i, a in enumerate(kept):
        for b in kept[i + 1 :]:
            assert a.label_id != b.label_id or _iou_det(a, b) < 0.45


def annotated_frame(boxes, w=64, h=48):
    return FramePayload(w, h, bytes(w * h * 3), annotation=tuple(boxes))


def test_oracle_exact_without_jitter():
    truth = (Box(0, 1, 2, 10, 12), Box(3, 20, 20, 40, 30))
    out = OracleDetector().detect(annotated_frame(truth))
    assert [(d.label_id, d.x0, d.y0, d.x1, d.y1) for d in out] == [(b.label_id, b.x0, b.y0, b.x1, b.y1) for b in truth]
    assert all(d.confidence == 1.0 for d in out)


def test_oracle_needs_annotation():
    with pytest.raises(MissingSceneError):
        OracleDetector().detect(FramePayload(2, 2, bytes(12)))


def test_oracle_jitter_within_three_sigma():
    sigma = 2.0
    truth = Box(0, 100, 100, 200, 180)
    od = OracleDetector(jitter_px=sigma, seed=5)
    frame = annotated_frame([truth], 640, 480)
    for _ in range(300):
        (d,) = od.detect(frame)
        for got, want in zip((d.x0, d.y0, d.x1, d.y1), (100, 100, 200, 180)):
            assert abs(got - want) <= 3 * sigma


def test_oracle_false_positive_rate():
    od = OracleDetector(fp_rate=0.1, seed=11)
    frame = annotated_frame([Box(0, 10, 10, 30, 30)], 320, 240)
    extra = 0
    for _ in range(1000):
        out = od.detect(frame)
        extra += len(out) - 1
        for fp in out[1:]:
            assert fp.label_id != 0 or iou((fp.x0, fp.y0, fp.x1, fp.y1), (10, 10, 30, 30)) < 0.5
    assert extra == od.injected
    assert abs(extra - 100) <= 3 * math.sqrt(100 * 0.9)


def test_micro_cnn_detector_is_deterministic():
    stack = nn.micro_detector()
    d = MicroCNNDetector(stack, conf_threshold=0.0)
    rng = np.random.default_rng(0)
    frame = FramePayload(160, 120, rng.integers(0, 256, 160 * 120 * 3, dtype=np.uint8).tobytes())
    a, b = d.detect(frame), d.detect(frame)
    assert a == b
    for x in a:
        assert 0 <= x.x0 < x.x1 <= 160 and 0 <= x.y0 < x.y1 <= 120


def test_quantized_backend_is_selected():
    q = nn.quantize_stack(nn.micro_detector())
    assert MicroCNNDetector(q)._forward is nn.forward_quantized


def test_zero_image_bias_path_within_bound():
    stack, image = random_micro_model(7)
    image = np.zeros_like(image)
    q = nn.quantize_stack(stack)
    layers, scales = oracle_layers(stack, q)
    bound = quant_error_bound(layers, image, scales)
    head, _ = forward_ref(layers, image)
    assert np.all(np.abs(nn.forward_quantized(q, image).head - head) <= bound + 1e-9)


def test_service_time_wrapper_waits():
    import time

    d = ServiceTimeDetector(OracleDetector(), 0.05)
    t = time.perf_counter()
    d.detect(annotated_frame([]))
    assert time.perf_counter() - t >= 0.05
