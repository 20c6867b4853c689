"""Draw detections over a frame for the monitoring stream."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .protocol import Detection

BORDER = 2
TEXT_COLOR = (255, 255, 255)
PALETTE = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
    ],
    dtype=np.uint8,
)


def class_color(label_id: int) -> tuple[int, int, int]:
    return tuple(int(v) for v in PALETTE[label_id % len(PALETTE)])


@lru_cache(maxsize=1)
def _font():
    return ImageFont.load_default()


@dataclass
class MonitorFrame:
    robot_id: str
    seq: int
    pixels: np.ndarray  # H x W x 3 uint8


def _draw_label(img: np.ndarray, text: str, x: int, y0: int) -> None:
    """Render ``text`` just above row ``y0``, clipped to rows above it."""
    if y0 <= 0 or not text:
        return
    font = _font()
    left, top, right, bottom = font.getbbox(text)
    tw, th = right - left, bottom - top
    h, w = img.shape[:2]
    tx = min(max(x, 0), max(w - tw, 0))
    ty = y0 - th - 1
    band_top = max(ty, 0)
    band = Image.fromarray(img[band_top:y0])
    ImageDraw.Draw(band).text((tx - left, ty - band_top - top), text, fill=TEXT_COLOR, font=font)
    img[band_top:y0] = np.asarray(band)


def overlay(
    pixels: np.ndarray, dets: Sequence[Detection], class_names: Sequence[str] | None = None
) -> np.ndarray:
    """Copy of ``pixels`` with a 2-px border per detection and its label above.

    Borders lie inside the box: columns x0, x0+1, x1-2, x1-1 and the matching
    rows. Text never touches rows at or below the box's top edge.
    """
    out = np.array(pixels, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    boxes = []
    for d in dets:
        x0, y0 = max(d.x0, 0), max(d.y0, 0)
        x1, y1 = min(d.x1, w), min(d.y1, h)
        if x1 <= x0 or y1 <= y0:
            continue
        boxes.append((d, x0, y0, x1, y1))
    for d, x0, y0, x1, y1 in boxes:
        name = class_names[d.label_id] if class_names and d.label_id < len(class_names) else str(d.label_id)
        _draw_label(out, f"{name} {d.confidence:.2f}", x0, y0)
    # borders last so labels of neighbouring boxes never cover them
    for d, x0, y0, x1, y1 in boxes:
        color = PALETTE[d.label_id % len(PALETTE)]
        b = BORDER
        out[y0 : min(y0 + b, y1), x0:x1] = color
        out[max(y1 - b, y0) : y1, x0:x1] = color
        out[y0:y1, x0 : min(x0 + b, x1)] = color
        out[y0:y1, max(x1 - b, x0) : x1] = color
    return out
