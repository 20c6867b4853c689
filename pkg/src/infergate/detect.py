"""Detector backends and box post-processing."""

from __future__ import annotations

import time
from typing import Protocol, Sequence

import numpy as np

from .evaluation import iou
from .nn import LayerStack, RawPrediction, forward, forward_quantized
from .protocol import Detection, FramePayload

DEFAULT_CONF_THRESHOLD = 0.5
DEFAULT_NMS_THRESHOLD = 0.45


class MissingSceneError(ValueError):
    """The oracle backend got a frame without embedded ground truth."""


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode(
    raw: RawPrediction, conf_threshold: float, frame_w: int, frame_h: int
) -> list[Detection]:
    """Turn box slots into pixel-space detections.

    confidence = sigmoid(objectness) * max softmax class probability. Corners
    are rounded, clamped to the frame, and zero-area boxes are dropped.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    obj = 1.0 / (1.0 + np.exp(-np.clip(raw.objectness, -500, 500)))
    probs = _softmax(raw.class_logits) if raw.class_logits.shape[1] else None
    dets = []
    for k in range(len(obj)):
        if probs is None:
            label, p = 0, 1.0
        else:
            label = int(np.argmax(probs[k]))
            p = float(probs[k, label])
        conf = float(obj[k]) * p
        if conf < conf_threshold:
            continue
        cx, cy, w, h = (float(v) for v in raw.boxes[k])
        x0 = min(max(round((cx - w / 2) * frame_w), 0), frame_w)
        x1 = min(max(round((cx + w / 2) * frame_w), 0), frame_w)
        y0 = min(max(round((cy - h / 2) * frame_h), 0), frame_h)
        y1 = min(max(round((cy + h / 2) * frame_h), 0), frame_h)
        if x1 <= x0 or y1 <= y0:
            continue
        dets.append(Detection(label, min(conf, 1.0), x0, y0, x1, y1))
    return dets


def box_of(d) -> tuple[int, int, int, int]:
    return (d.x0, d.y0, d.x1, d.y1)


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_THRESHOLD) -> list[Detection]:
    """Greedy per-label non-maximum suppression, highest confidence first."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.confidence):
        if all(k.label_id != d.label_id or iou(box_of(k), box_of(d)) < iou_threshold for k in kept):
            kept.append(d)
    return kept


class Detector(Protocol):
    def detect(self, frame: FramePayload) -> list[Detection]: ...


def frame_array(frame: FramePayload) -> np.ndarray:
    return np.frombuffer(frame.pixels, dtype=np.uint8).reshape(frame.height, frame.width, 3)


def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) * img.shape[0]) // h
    xs = (np.arange(w) * img.shape[1]) // w
    return img[ys[:, None], xs[None, :]]


class MicroCNNDetector:
    """Runs a LayerStack on a frame downsampled to the stack's input size."""

    def __init__(
        self,
        stack: LayerStack,
        conf_threshold: float = DEFAULT_CONF_THRESHOLD,
        nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    ):
        self.stack = stack
        self.conf_threshold = conf_threshold
        self.nms_threshold = nms_threshold
        self._forward = forward_quantized if stack.is_quantized else forward

    def detect(self, frame: FramePayload) -> list[Detection]:
        h, w, _ = self.stack.input_shape
        img = resize_nearest(frame_array(frame), h, w).astype(np.float64) / 255.0
        raw = self._forward(self.stack, img)
        return nms(decode(raw, self.conf_threshold, frame.width, frame.height), self.nms_threshold)


class OracleDetector:
    """Returns the ground truth embedded in simulator frames.

    ``jitter_px`` adds Gaussian noise, truncated at three standard deviations,
    to every corner; ``fp_rate`` is the
    per-frame probability of appending one false positive.
    """

    def __init__(self, jitter_px: float = 0.0, fp_rate: float = 0.0, seed: int = 0, num_classes: int = 4):
        self.jitter_px = jitter_px
        self.fp_rate = fp_rate
        self.num_classes = num_classes
        self.rng = np.random.default_rng(seed)
        self.injected = 0

    def detect(self, frame: FramePayload) -> list[Detection]:
        if frame.annotation is None:
            raise MissingSceneError("frame carries no scene annotation")
        out = []
        for b in frame.annotation:
            x0, y0, x1, y1 = b.x0, b.y0, b.x1, b.y1
            if self.jitter_px > 0:
                # truncated at 3 sigma so a jittered box stays near its truth
                noise = np.clip(self.rng.normal(0, self.jitter_px, 4), -3 * self.jitter_px, 3 * self.jitter_px)
                dx0, dy0, dx1, dy1 = np.trunc(noise).astype(int)
                x0 = min(max(x0 + dx0, 0), frame.width - 1)
                y0 = min(max(y0 + dy0, 0), frame.height - 1)
                x1 = min(max(x1 + dx1, x0 + 1), frame.width)
                y1 = min(max(y1 + dy1, y0 + 1), frame.height)
            out.append(Detection(b.label_id, 1.0, int(x0), int(y0), int(x1), int(y1)))
        if self.fp_rate > 0 and self.rng.random() < self.fp_rate:
            out.append(self.false_positive(frame))
        return out

    def false_positive(self, frame: FramePayload, attempts: int = 1000) -> Detection:
        """A random box that overlaps no annotated box of its label at IoU >= 0.5."""
        truths = frame.annotation or ()
        for _ in range(attempts):
            label = int(self.rng.integers(self.num_classes))
            w = int(self.rng.integers(4, max(5, frame.width // 4)))
            h = int(self.rng.integers(4, max(5, frame.height // 4)))
            w, h = min(w, frame.width), min(h, frame.height)
            x0 = int(self.rng.integers(0, frame.width - w + 1))
            y0 = int(self.rng.integers(0, frame.height - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(t.label_id != label or iou(box, box_of(t)) < 0.5 for t in truths):
                self.injected += 1
                conf = float(self.rng.uniform(0.3, 1.0))
                return Detection(label, conf, *box)
        raise RuntimeError("could not place a false positive")


class ServiceTimeDetector:
    """Wraps a detector so every call takes at least ``service_s`` seconds."""

    def __init__(self, inner: Detector, service_s: float):
        self.inner = inner
        self.service_s = service_s

    def detect(self, frame: FramePayload) -> list[Detection]:
        deadline = time.perf_counter() + self.service_s
        dets = self.inner.detect(frame)
        remaining = deadline - time.perf_counter()
        if remaining > 0:
            time.sleep(remaining)
        return dets
