import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from infergate.monitor import PALETTE, class_color, overlay
from infergate.protocol import Detection


def blank(h=80, w=100):
    return np.full((h, w, 3), 40, np.uint8)


def test_no_detections_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (30, 40, 3), dtype=np.uint8)
    assert np.array_equal(overlay(img, []), img)


def test_border_rows_and_columns_change_interior_does_not():
    img = blank()
    out = overlay(img, [Detection(0, 0.9, 10, 10, 50, 50)])
    c = class_color(0)
    for row in (10, 11, 48, 49):
        assert np.all(out[row, 10:50] == c)
    for col in (10, 11, 48, 49):
        assert np.all(out[10:50, col] == c)
    assert np.array_equal(out[12:48, 12:48], img[12:48, 12:48])
    # below and right of the box nothing moved
    assert np.array_equal(out[50:], img[50:])
    assert np.array_equal(out[:, 50:][10:], img[:, 50:][10:])


def test_label_is_drawn_above_the_box():
    img = blank()
    out = overlay(img, [Detection(1, 0.5, 20, 30, 60, 70)], ["cup", "ball"])
    changed = np.any(out[:30] != img[:30], axis=2)
    assert changed.any()
    text = out[:30][changed]
    assert np.all(text[:, 0] == text[:, 1]) and np.all(text[:, 1] == text[:, 2])  # grey text pixels


def test_box_flush_with_edges():
    img = blank(20, 30)
    out = overlay(img, [Detection(2, 0.7, 0, 0, 30, 20)])
    c = class_color(2)
    assert np.all(out[0] == c) and np.all(out[-1] == c)
    assert np.all(out[:, 0] == c) and np.all(out[:, -1] == c)
    assert out.shape == img.shape


def _recover(out, color):
    ys, xs = np.nonzero(np.all(out == color, axis=2))
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 80), st.integers(0, 60), st.integers(1, 60), st.integers(1, 40), st.integers(0, 7))
def test_rectangle_recovered_from_pixels(x0, y0, w, h, label):
    img = blank(100, 140)
    d = Detection(label, 0.8, x0, y0, x0 + w, y0 + h)
    out = overlay(img, [d])
    assert _recover(out, PALETTE[label]) == (d.x0, d.y0, d.x1, d.y1)


def test_input_not_modified():
    img = blank()
    before = img.copy()
    overlay(img, [Detection(0, 0.9, 1, 1, 9, 9)])
    assert np.array_equal(img, before)
