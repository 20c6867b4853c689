import math
import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from infergate.pipeline import (
    Decision,
    FramePipeline,
    FrameRateEstimator,
    OrderingError,
    PipelineStats,
    ProcessQueue,
    drop_threshold,
)


def test_rate_from_three_arrivals():
    est = FrameRateEstimator()
    for t in (0.0, 0.1, 0.2):
        est.observe_arrival(t)
    assert est.rate == pytest.approx(10.0)


def test_rate_needs_two_arrivals():
    est = FrameRateEstimator()
    assert est.rate == 0.0
    est.observe_arrival(5.0)
    assert est.rate == 0.0


def test_rate_thirty_fps():
    est = FrameRateEstimator()
    for i in range(30):
        est.observe_arrival(i * 0.03333)
    assert est.rate == pytest.approx(30.0, rel=0.01)


def test_rate_window_forgets_old_arrivals():
    est = FrameRateEstimator(window=30)
    for i in range(100):
        est.observe_arrival(i * 1.0)  # 1 fps for a long time
    for i in range(1, 31):
        est.observe_arrival(99.0 + i * 0.1)  # then 10 fps
    assert est.rate == pytest.approx(10.0)


def test_out_of_order_arrival_rejected():
    est = FrameRateEstimator()
    est.observe_arrival(1.0)
    with pytest.raises(OrderingError):
        est.observe_arrival(0.5)


def test_threshold():
    assert drop_threshold(0) == 5
    assert drop_threshold(3) == 5
    assert drop_threshold(5.01) == 6
    assert drop_threshold(30) == 30
    with pytest.raises(ValueError):
        drop_threshold(math.inf)


def test_idle_engine_infers_now():
    q = ProcessQueue()
    assert q.submit("f1", None, engine_busy=False, r=30) is Decision.INFER_NOW
    assert len(q) == 0


def test_fifth_frame_triggers_drop_at_low_rate():
    q = ProcessQueue()
    for i in range(4):
        assert q.submit(("a", i), None, True, 3) is Decision.ENQUEUED
    assert q.submit(("a", 4), None, True, 3) is Decision.ENQUEUED_AFTER_DROP
    assert q.keys() == [("a", 4)]
    assert q.stats.frames_dropped == 4
    assert q.drop_events[-1].purged == [("a", i) for i in range(4)]


def test_below_threshold_at_high_rate():
    q = ProcessQueue()
    q.submit(1, None, True, 30)
    q.submit(2, None, True, 30)
    assert q.submit(3, None, True, 30) is Decision.ENQUEUED
    assert len(q) == 3


def test_next_frame_fifo_and_after_drop():
    q = ProcessQueue()
    q.submit("f1", None, True, 30)
    q.submit("f2", None, True, 30)
    assert q.next_frame().key == "f1"
    assert q.keys() == ["f2"]
    q.next_frame()
    assert q.next_frame() is None
    for i in range(1, 10):
        q.submit(f"f{i}", None, True, 1)
    assert q.next_frame().key == "f9"


def test_purge_source_counts_as_drops():
    q = ProcessQueue()
    for i in range(3):
        q.submit(("a", i), None, True, 30)
        q.submit(("b", i), None, True, 30)
    assert q.purge_source("a") == [("a", 0), ("a", 1), ("a", 2)]
    assert q.keys() == [("b", 0), ("b", 1), ("b", 2)]
    assert q.stats.dropped_by_source["a"] == 3


def test_latency_stats():
    s = PipelineStats()
    assert s.latency.mean() is None
    for i, ms in enumerate((10, 20, 30)):
        s.record_latency(i, 0, ms * 1000)
    assert s.latency.mean() == 20_000
    with pytest.raises(ValueError):
        s.record_latency(9, 100, 50)


def test_constant_latency_over_long_stream():
    s = PipelineStats()
    for i in range(1200):  # 120 s at 10 fps
        t = i * 100_000
        s.record_latency(i, t, t + 17_000)
    assert len(s.latency) == 1200
    assert s.latency.mean() == 17_000
    assert s.latency.percentile(99) == 17_000


def test_stats_line_format():
    s = PipelineStats(frames_in=3, frames_inferred=2, frames_dropped=1)
    assert s.line() == "3 2 1 - -"
    s.record_latency(0, 0, 1500)
    assert s.line() == "3 2 1 1500 1500"


events = st.lists(
    st.tuples(st.sampled_from(["submit", "next"]), st.booleans(), st.floats(1, 60)),
    max_size=300,
)


@given(events)
def test_queue_bounded_and_conserving(seq):
    q = ProcessQueue()
    last_drop = 0
    for n, (kind, busy, r) in enumerate(seq):
        if kind == "submit":
            d = q.submit(n, None, busy, r)
            assert len(q) <= drop_threshold(r)
            if d is Decision.ENQUEUED_AFTER_DROP:
                assert q.keys() == [n]
                last_drop = n
        else:
            got = q.next_frame()
            if got is not None:
                # freshness: nothing from before the latest drop survives
                assert got.key >= last_drop
        s = q.stats
        assert s.frames_in == s.frames_inferred + s.frames_dropped + len(q)


@given(st.lists(st.integers(0, 2), max_size=200))
def test_fifo_order_between_drops(sources):
    q = ProcessQueue()
    for i, src in enumerate(sources):
        q.submit((src, i), None, True, 1000)
    assert [k[1] for k in q.keys()] == sorted(k[1] for k in q.keys())


def test_pipeline_hands_frames_to_worker():
    p = FramePipeline()
    seen = []
    stop = threading.Event()

    def worker():
        while not stop.is_set():
            e = p.acquire(timeout=0.05)
            if e is None:
                continue
            seen.append(e.key)
            p.release()

    th = threading.Thread(target=worker)
    th.start()
    for i in range(50):
        p.submit(i, None, r=1000)
    for _ in range(200):
        if len(seen) == 50:
            break
        threading.Event().wait(0.01)
    stop.set()
    th.join()
    assert seen == list(range(50))
    s = p.stats
    assert s.frames_in == 50 and s.frames_inferred == 50 and s.frames_dropped == 0
    assert not p.busy


def test_pipeline_drains_after_arrivals_stop():
    rng = random.Random(3)
    p = FramePipeline()
    for i in range(20):
        p.submit(i, None, r=rng.uniform(1, 10))
    # worker not running: first frame handed over, rest queued or dropped
    assert p.queued() >= 1
    while (e := p.acquire(timeout=0)) is not None:
        p.release()
    assert p.queued() == 0 and not p.busy
    s = p.stats
    assert s.frames_in == s.frames_inferred + s.frames_dropped


def test_idle_submit_with_oversized_backlog_purges_it():
    q = ProcessQueue()
    for i in range(20):
        q.submit(i, None, True, 60)
    assert q.submit(99, None, False, 3) is Decision.INFER_NOW
    assert len(q) == 0 and q.drop_events[-1].purged == list(range(20))
    q.submit(100, None, True, 60)
    assert q.submit(101, None, False, 3) is Decision.INFER_NOW
    assert q.keys() == [100]  # below threshold: left alone
